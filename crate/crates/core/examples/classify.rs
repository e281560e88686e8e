//! Fine-tune a scratch backbone on the two-class phantom and report
//! balanced accuracy with per-class recall.
//!
//! cargo run --release --example classify

use curricubench::backbone::{init_backbone, BackboneConfig};
use curricubench::classify::{evaluate, finetune, Classifier};
use curricubench::curriculum::{Profile, StepSpec, StepTask};
use curricubench::data::{ClassMode, DataSource, DatasetSpec, PhantomConfig};
use curricubench::experiment::{prepare_data, ImageVariant};

fn main() -> curricubench::Result<()> {
    let spec = DatasetSpec {
        source: DataSource::Phantom(PhantomConfig {
            n_samples: 400,
            side: 64,
            ..PhantomConfig::default()
        }),
        side: 64,
        split_fraction: 0.8,
        seed: 0,
        class_mode: ClassMode::TwoClass,
    };
    let prepared = prepare_data(&spec, ImageVariant::Raw)?;
    let data = prepared.step_data()?;
    let step = StepSpec::for_task(StepTask::Classification, Profile::Desk, 7);
    let init = init_backbone(&BackboneConfig::default(), 0)?;
    let outcome = finetune(&init, &data, &step, 0.05, 8)?;
    for r in &outcome.log {
        println!("epoch {:>2}  loss {:.4}", r.epoch, r.loss);
    }
    let model = Classifier::from_checkpoint(outcome.model)?;
    let report = evaluate(&model, data.val, data.mode)?;
    println!("val balanced accuracy {:.3}", report.balanced_accuracy);
    for (class, recall) in &report.per_class_recall {
        println!("  {:<14} recall {recall:.3}  support {}", class.as_str(), report.support[class]);
    }
    Ok(())
}
