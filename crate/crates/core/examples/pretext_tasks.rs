//! One short training step of each pretext task on a tiny phantom, with
//! the learning-rate search the full pipeline uses.
//!
//! cargo run --release --example pretext_tasks

use curricubench::backbone::{init_backbone, BackboneConfig};
use curricubench::curriculum::{run_step, transfer_for_step, Profile, StepSpec, StepTask};
use curricubench::data::{compute_class_weights, gen_phantom, make_split, PhantomConfig};
use curricubench::curriculum::StepData;
use curricubench::ssl::{PretextConfig, TaskId};
use curricubench::ssl::moco::MocoConfig;

fn main() -> curricubench::Result<()> {
    let (ds, _) = gen_phantom(&PhantomConfig {
        n_samples: 64,
        side: 32,
        ..PhantomConfig::default()
    })?;
    let (train, val) = make_split(&ds, 0.75, 0)?;
    let mode = curricubench::data::ClassMode::TwoClass;
    let data = StepData {
        train: &train,
        val: &val,
        mode,
        weights: compute_class_weights(&train.labels(), mode)?,
    };
    // 48 training images: a shorter queue so MoCo leaves warm-up in the first epoch
    let pretext = PretextConfig {
        moco: MocoConfig {
            queue_size: 32,
            ..MocoConfig::default()
        },
        ..PretextConfig::default()
    };
    let scratch = init_backbone(&BackboneConfig::default(), 0)?;
    for task in [TaskId::Rotation, TaskId::RelLoc, TaskId::Moco, TaskId::Swav] {
        let step = StepSpec {
            lr_candidates: vec![0.05, 0.1],
            search_epochs: 1,
            full_epochs: 2,
            ..StepSpec::for_task(StepTask::Pretext(task), Profile::Desk, 1)
        };
        let init = transfer_for_step(&scratch, &step, &pretext, mode)?;
        let (_, log, _) = run_step(&step, &init, &data, &pretext)?;
        let last = log.epochs.last().expect("at least one epoch");
        let metric = last.metric.map_or("-".into(), |m| format!("{m:.3}"));
        println!(
            "{:<9} batch {:>2}  lr {:<5} scores {:?}  final loss {:.4}  pretext acc {metric}",
            task.as_str(),
            step.batch_size,
            log.search.chosen_lr,
            log.search.scores.iter().map(|s| format!("{s:.3}")).collect::<Vec<_>>(),
            last.loss,
        );
    }
    Ok(())
}
