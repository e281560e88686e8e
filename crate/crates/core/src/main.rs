use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use curricubench::attention::{cam_to_csv, compute_cams, mean_ail, write_f32g};
use curricubench::checkpoint::load_checkpoint;
use curricubench::classify::Classifier;
use curricubench::curriculum::{Profile, StepTask};
use curricubench::data::{gen_phantom, load_dataset, load_masks, save_dataset, ClassMode, DatasetSpec, PhantomConfig, PhantomMode};
use curricubench::experiment::{run_confound, run_experiment, run_lr_search, ExperimentManifest, ManifestOverrides, ResultsRow};
use curricubench::report::{emit_report, parse_single_task_table};
use curricubench::{Error, Result};

// glibc malloc returns the large activation buffers to the kernel on every
// free; the page faults that follow cost about a fifth of a training run
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "curricubench", version, about = "Curricular self-supervised pretraining and lung-attention audits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum CamFormat {
    Csv,
    F32g,
}

#[derive(clap::Args)]
struct ManifestArgs {
    /// Experiment manifest (TOML).
    manifest: PathBuf,
    /// Overrides the manifest profile: `desk` or `paper`.
    #[arg(long)]
    profile: Option<Profile>,
    /// Overrides the manifest seed and `CURRICUBENCH_SEED`.
    #[arg(long)]
    seed: Option<u64>,
}

impl ManifestArgs {
    fn load(&self) -> Result<ExperimentManifest> {
        let mut o = ManifestOverrides::from_env()?;
        o.seed = self.seed.or(o.seed);
        o.profile = self.profile;
        ExperimentManifest::load(&self.manifest, &o)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic lung-phantom dataset with masks.
    GenPhantom {
        #[arg(long, default_value = "in_lung")]
        mode: PhantomMode,
        #[arg(long, default_value_t = 400)]
        n_samples: usize,
        #[arg(long, default_value_t = 64)]
        side: usize,
        #[arg(long, default_value_t = 8.0)]
        noise_sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "two")]
        class_mode: ClassMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain, fine-tune, score, and append a row to results.csv.
    Run(ManifestArgs),
    /// Train on lung-only and on inverse-segmented images.
    Confound(ManifestArgs),
    /// Attention-inside-lungs scores of a classifier checkpoint.
    Ail {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory with `labels.csv` and `masks/`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 64)]
        side: usize,
        /// Zero negative activations before normalizing.
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        cam_clamp: bool,
        /// Also write one attention map per image in this format.
        #[arg(long)]
        format: Option<CamFormat>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Table, scatter.csv and SVG from a results file.
    Report {
        results: PathBuf,
        /// `task,acc` CSV; defaults to the single-task rows of the results.
        #[arg(long)]
        single_task: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score every learning-rate candidate of one step.
    LrSearch {
        #[command(flatten)]
        manifest: ManifestArgs,
        /// Pretext task name or `classification`.
        #[arg(long)]
        task: StepTask,
    },
}

fn print_row(row: &ResultsRow) {
    println!("{}", row.to_csv_line());
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn ail_command(checkpoint: &Path, data: &Path, side: usize, clamp: bool, format: Option<CamFormat>, out: &Path) -> Result<()> {
    let model = Classifier::from_checkpoint(load_checkpoint(checkpoint)?)?;
    let ds = load_dataset(&DatasetSpec {
        side,
        ..DatasetSpec::directory(data)
    })?;
    let masks = load_masks(data, &ds)?;
    if masks.is_empty() {
        return Err(Error::Mask(format!("no masks under {}", data.display())));
    }
    let scores = mean_ail(&model, &ds, &masks, clamp)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write(&out.join("ail.csv"), scores.to_csv())?;
    if let Some(fmt) = format {
        let dir = out.join("cams");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let images: Vec<_> = ds.samples.iter().map(|s| &s.pixels).collect();
        let cams = compute_cams(&model, &images, clamp)?;
        for (s, cam) in ds.samples.iter().zip(&cams) {
            let stem = Path::new(&s.id).file_stem().map_or(s.id.clone(), |x| x.to_string_lossy().into_owned());
            match fmt {
                CamFormat::Csv => write(&dir.join(format!("{stem}.csv")), cam_to_csv(cam))?,
                CamFormat::F32g => write_f32g(&dir.join(format!("{stem}.f32g")), cam)?,
            }
        }
    }
    println!(
        "mean_ail={:.6} scored={} excluded={} skipped={}",
        scores.mean,
        scores.per_image.len() - scores.excluded - scores.skipped,
        scores.excluded,
        scores.skipped
    );
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenPhantom {
            mode,
            n_samples,
            side,
            noise_sigma,
            seed,
            class_mode,
            out,
        } => {
            let (ds, masks) = gen_phantom(&PhantomConfig {
                n_samples,
                side,
                mode,
                noise_sigma,
                seed,
                class_mode,
            })?;
            save_dataset(&out, &ds, Some(&masks))?;
            println!("wrote {} images to {}", ds.len(), out.display());
        }
        Command::Run(args) => print_row(&run_experiment(&args.load()?)?),
        Command::Confound(args) => {
            let (masked, inverse) = run_confound(&args.load()?)?;
            print_row(&masked);
            print_row(&inverse);
        }
        Command::Ail {
            checkpoint,
            data,
            side,
            cam_clamp,
            format,
            out,
        } => ail_command(&checkpoint, &data, side, cam_clamp, format, &out)?,
        Command::Report { results, single_task, out } => {
            let single: Option<BTreeMap<_, _>> = match single_task {
                Some(p) => Some(parse_single_task_table(&fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)?),
                None => None,
            };
            let summary = emit_report(&results, single.as_ref(), &out)?;
            for f in &summary.files {
                println!("wrote {}", f.display());
            }
            if !summary.malformed.is_empty() {
                for (line, why) in &summary.malformed {
                    eprintln!("skipped line {line}: {why}");
                }
                return Ok(ExitCode::from(2));
            }
        }
        Command::LrSearch { manifest, task } => {
            let r = run_lr_search(&manifest.load()?, task)?;
            println!("lr,score");
            for (lr, s) in r.candidates.iter().zip(&r.scores) {
                println!("{lr},{s}");
            }
            println!("chosen_lr={}", r.chosen_lr);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
