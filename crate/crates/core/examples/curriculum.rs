//! A two-task curriculum (rotation, then relative location) followed by
//! classification, with checkpoints written per step.
//!
//! cargo run --release --example curriculum

use std::collections::BTreeMap;

use curricubench::backbone::BackboneConfig;
use curricubench::curriculum::{is_curriculum_order, run_curriculum, CurriculumSpec, InitSource, Profile, StepSpec, StepTask};
use curricubench::data::{ClassMode, DataSource, DatasetSpec, PhantomConfig};
use curricubench::experiment::{prepare_data, ImageVariant};
use curricubench::ssl::{PretextConfig, TaskId};

fn quick(task: StepTask, seed: u64) -> StepSpec {
    StepSpec {
        lr_candidates: vec![0.05, 0.1],
        search_epochs: 1,
        full_epochs: 3,
        ..StepSpec::for_task(task, Profile::Desk, seed)
    }
}

fn main() -> curricubench::Result<()> {
    let dataset = DatasetSpec {
        source: DataSource::Phantom(PhantomConfig {
            n_samples: 80,
            side: 32,
            ..PhantomConfig::default()
        }),
        side: 32,
        split_fraction: 0.8,
        seed: 0,
        class_mode: ClassMode::TwoClass,
    };
    let prepared = prepare_data(&dataset, ImageVariant::Raw)?;
    let spec = CurriculumSpec {
        steps: vec![quick(StepTask::Pretext(TaskId::Rotation), 1), quick(StepTask::Pretext(TaskId::RelLoc), 2)],
        downstream: quick(StepTask::Classification, 3),
        init: InitSource::Scratch,
        backbone: BackboneConfig::default(),
        pretext: PretextConfig::default(),
        seed: 0,
    };
    let out = std::env::temp_dir().join("curricubench-curriculum");
    let result = run_curriculum(&spec, &prepared.step_data()?, Some(&out))?;
    for log in &result.logs {
        let last = log.epochs.last().expect("epochs");
        println!("{:<15} lr {:<5} final loss {:.4}", log.task.as_str(), log.search.chosen_lr, last.loss);
    }
    println!("val balanced accuracy {:.3}", result.val_balanced_accuracy());
    println!("checkpoints under {}", out.display());

    // whether a sequence is a curriculum depends only on single-task accuracies
    let single = BTreeMap::from([(TaskId::Rotation, 84.72), (TaskId::RelLoc, 83.62)]);
    println!(
        "rotation then relloc is a curriculum: {}; relloc then rotation: {}",
        is_curriculum_order(&[TaskId::Rotation, TaskId::RelLoc], &single)?,
        is_curriculum_order(&[TaskId::RelLoc, TaskId::Rotation], &single)?
    );
    Ok(())
}
