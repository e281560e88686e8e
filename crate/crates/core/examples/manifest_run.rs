//! Drive a full run from a TOML manifest: pretrain, fine-tune, score
//! attention, append to results.csv, then render the report. This is what
//! `curricubench run` and `curricubench report` do.
//!
//! cargo run --release --example manifest_run

use std::fs;

use curricubench::experiment::{run_experiment, ExperimentManifest, ManifestOverrides, RESULTS_FILE};
use curricubench::report::emit_report;
use curricubench::Error;

const MANIFEST: &str = r#"
name = "example"
global_seed = 0
profile = "desk"

[dataset]
source = "phantom"
phantom_mode = "in_lung"
n_samples = 80
side = 32

[curriculum]
sequence = ["rotation"]

[task.rotation]
lr_candidates = [0.05, 0.1]
search_epochs = 1
full_epochs = 2

[task.classification]
lr_candidates = [0.05, 0.1]
search_epochs = 1
full_epochs = 4
"#;

fn main() -> curricubench::Result<()> {
    let dir = std::env::temp_dir().join("curricubench-manifest-run");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join("manifest.toml");
    let text = format!("output_dir = {:?}\n{MANIFEST}", dir.join("runs"));
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;

    // CURRICUBENCH_SEED, when set, replaces global_seed
    let manifest = ExperimentManifest::load(&path, &ManifestOverrides::from_env()?)?;
    let row = run_experiment(&manifest)?;
    println!("{}", row.to_csv_line());

    let results = manifest.output_dir.join(RESULTS_FILE);
    let summary = emit_report(&results, None, &dir.join("report"))?;
    for f in &summary.files {
        println!("wrote {}", f.display());
    }
    Ok(())
}
