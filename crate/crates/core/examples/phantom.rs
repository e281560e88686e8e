//! Generate a small lung phantom, split it, and write it to disk in the
//! directory layout the CLI and `load_dataset` read back.
//!
//! cargo run --release --example phantom -- /tmp/phantom

use std::path::PathBuf;

use curricubench::data::{compute_class_weights, gen_phantom, load_dataset, make_split, save_dataset, DatasetSpec, PhantomConfig, PhantomMode};

fn main() -> curricubench::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("curricubench-phantom"), PathBuf::from);
    let cfg = PhantomConfig {
        n_samples: 60,
        side: 32,
        mode: PhantomMode::SignalInLung,
        ..PhantomConfig::default()
    };
    let (ds, masks) = gen_phantom(&cfg)?;
    let (train, val) = make_split(&ds, 0.8, cfg.seed)?;
    println!("{} images, {} masks, split {}/{}", ds.len(), masks.len(), train.len(), val.len());
    let weights = compute_class_weights(&train.labels(), cfg.class_mode)?;
    for &c in cfg.class_mode.classes() {
        let n = train.labels().iter().filter(|&&l| l == c).count();
        println!("  {:<14} train {n:>3}  weight {:.3}", c.as_str(), weights.get(c).unwrap_or(0.0));
    }
    let lung = masks.values().next().map_or(0, |m| m.data().iter().filter(|&&v| v).count());
    println!("first mask covers {lung} of {} pixels", cfg.side * cfg.side);

    save_dataset(&out, &ds, Some(&masks))?;
    let back = load_dataset(&DatasetSpec {
        side: cfg.side,
        ..DatasetSpec::directory(&out)
    })?;
    println!("wrote {} and read back {} images", out.display(), back.len());
    Ok(())
}
