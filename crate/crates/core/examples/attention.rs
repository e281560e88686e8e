//! Class activation maps and the attention-inside-lungs score of a
//! briefly trained classifier, on phantoms whose signal sits inside or
//! outside the lungs.
//!
//! cargo run --release --example attention

use curricubench::attention::{ail, compute_cam, mean_ail, postprocess_mask};
use curricubench::backbone::{init_backbone, BackboneConfig};
use curricubench::classify::{finetune, Classifier};
use curricubench::curriculum::{Profile, StepSpec, StepTask};
use curricubench::data::{ClassMode, DataSource, DatasetSpec, PhantomConfig, PhantomMode};
use curricubench::experiment::{prepare_data, ImageVariant};
use curricubench::Grid;

fn main() -> curricubench::Result<()> {
    // the score itself: half of a uniform map lies on the top row
    let uniform = Grid::from_vec(2, 2, vec![1.0f32; 4])?;
    let top = Grid::from_vec(2, 2, vec![true, true, false, false])?;
    println!("uniform 2x2 map, top-row mask: AIL {}", ail(&uniform, &top)?);

    // mask clean-up drops specks and closes pinholes
    let mut raw = Grid::from_vec(16, 16, vec![false; 256])?;
    for r in 3..13 {
        for c in 2..7 {
            raw.data_mut()[r * 16 + c] = (r, c) != (7, 4);
        }
    }
    raw.data_mut()[14 * 16 + 14] = true;
    let clean = postprocess_mask(&raw, 0.01, 1)?;
    let count = |m: &Grid<bool>| m.data().iter().filter(|&&v| v).count();
    println!("mask pixels before {} after {}", count(&raw), count(&clean));

    for mode in [PhantomMode::SignalInLung, PhantomMode::SignalOutLung] {
        let spec = DatasetSpec {
            source: DataSource::Phantom(PhantomConfig {
                n_samples: 120,
                side: 32,
                mode,
                ..PhantomConfig::default()
            }),
            side: 32,
            split_fraction: 0.8,
            seed: 0,
            class_mode: ClassMode::TwoClass,
        };
        let prepared = prepare_data(&spec, ImageVariant::Raw)?;
        let data = prepared.step_data()?;
        let step = StepSpec::for_task(StepTask::Classification, Profile::Desk, 7);
        let init = init_backbone(&BackboneConfig::default(), 0)?;
        let model = Classifier::from_checkpoint(finetune(&init, &data, &step, 0.05, 8)?.model)?;
        let scores = mean_ail(&model, &prepared.val, &prepared.masks, true)?;
        let cam = compute_cam(&model, &prepared.val.samples[0].pixels, true)?;
        println!(
            "{mode:?}: mean AIL {:.3} over {} images; first CAM {:?}, peak {:.3}",
            scores.mean,
            scores.per_image.len(),
            cam.shape(),
            cam.data().iter().copied().fold(0.0f32, f32::max)
        );
    }
    Ok(())
}
