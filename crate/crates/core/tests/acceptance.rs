//! Acceptance suite: one PASS/FAIL line per criterion, then a summary.
//! Runs without the libtest harness so the lines always reach stdout.

mod common;

use std::collections::{BTreeMap, VecDeque};
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::Rng as _;

use curricubench::attention::ail;
use curricubench::backbone::{Backbone, BackboneConfig, HeadSpec};
use curricubench::classify::{balanced_accuracy, weighted_ce};
use curricubench::curriculum::{is_curriculum_order, run_curriculum};
use curricubench::experiment::{prepare_data, run_variant, ExperimentManifest, ImageVariant, ManifestOverrides};
use curricubench::optim::{Optimizer, OptimizerConfig};
use curricubench::params::Checkpoint;
use curricubench::ssl::augment::{two_views, AugmentConfig};
use curricubench::ssl::moco::{moco_step, MocoConfig, MocoState};
use curricubench::ssl::swav::sinkhorn;
use curricubench::ssl::TaskId;
use curricubench::{Grid, ParamSet, Tensor};

// the training criteria churn through multi-megabyte buffers; the system
// allocator hands them back to the kernel on every free
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- 1

const TABLE_ROWS: [(&[TaskId], bool); 18] = {
    use TaskId::{Moco as M, RelLoc as RL, Rotation as RP, Swav as S};
    [
        (&[M, RP], true),
        (&[M, RL], false),
        (&[M, S], true),
        (&[RP, M], false),
        (&[RP, RL], false),
        (&[RP, S], false),
        (&[RL, RP], true),
        (&[RL, M], true),
        (&[RL, S], true),
        (&[S, RP], true),
        (&[S, RL], false),
        (&[S, M], false),
        (&[M, RP, RL], false),
        (&[M, RP, S], false),
        (&[M, RL, RP], false),
        (&[M, RL, S], false),
        (&[M, S, RP], true),
        (&[M, S, RL], false),
    ]
};

fn curriculum_order() -> Check {
    let single = BTreeMap::from([
        (TaskId::RelLoc, 83.62),
        (TaskId::Moco, 83.89),
        (TaskId::Swav, 83.97),
        (TaskId::Rotation, 84.72),
    ]);
    let mut mismatches = Vec::new();
    for (seq, marked) in TABLE_ROWS {
        let got = is_curriculum_order(seq, &single).map_err(|e| e.to_string())?;
        if got != marked {
            mismatches.push(format!("{seq:?}"));
        }
    }
    ensure(mismatches.is_empty(), || format!("mismatches: {}", mismatches.join(", ")))?;
    Ok(format!("{} rows, 0 mismatches", TABLE_ROWS.len()))
}

// ---------------------------------------------------------------- 2

fn ail_case() -> impl Strategy<Value = (Grid<f32>, Grid<bool>, Grid<bool>)> {
    (1usize..10, 1usize..10).prop_flat_map(|(r, c)| {
        let n = r * c;
        (
            prop::collection::vec(0.0f32..10.0, n),
            prop::collection::vec(any::<bool>(), n),
            prop::collection::vec(any::<bool>(), n),
            0..n,
        )
            .prop_map(move |(mut a, m1, m2, hot)| {
                // at least one positive entry
                a[hot] += 0.5;
                (
                    Grid::from_vec(r, c, a).unwrap(),
                    Grid::from_vec(r, c, m1).unwrap(),
                    Grid::from_vec(r, c, m2).unwrap(),
                )
            })
    })
}

fn ail_algebra() -> Check {
    let mut runner = TestRunner::new(PropConfig {
        cases: 1000,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let strategy = (ail_case(), -30i32..30, 1e-3f64..1e3);
    runner
        .run(&strategy, |((a, m1, m2), k, alpha)| {
            let base = ail(&a, &m1).unwrap();
            prop_assert!((0.0..=1.0).contains(&base));
            // power-of-two scaling is exact in floating point, so the score is too
            let pow2 = 2f32.powi(k);
            prop_assert_eq!(ail(&a.map(|v| v * pow2), &m1).unwrap(), base);
            // general positive scale, formed in f64
            let a64 = a.map(f64::from);
            prop_assert!((ail(&a64.map(|v| v * alpha), &m1).unwrap() - ail(&a64, &m1).unwrap()).abs() <= 1e-12);
            // containment
            let union = m1.zip_map(&m2, |x, y| x || y).unwrap();
            prop_assert!(base <= ail(&a, &union).unwrap() + 1e-12);
            // disjoint additivity: m1 and m2 \ m1
            let rest = m2.zip_map(&m1, |x, y| x && !y).unwrap();
            let sum = base + ail(&a, &rest).unwrap();
            prop_assert!((ail(&a, &union).unwrap() - sum).abs() <= 1e-12);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    let g = |r, c, v: Vec<f32>| Grid::from_vec(r, c, v).unwrap();
    let m = |r, c, v: Vec<bool>| Grid::from_vec(r, c, v).unwrap();
    let examples = [
        ail(&g(2, 2, vec![1.0; 4]), &m(2, 2, vec![true, false, false, false])).unwrap(),
        ail(&g(2, 2, vec![0.3, 0.0, 2.0, 0.7]), &m(2, 2, vec![true; 4])).unwrap(),
        ail(&g(2, 2, vec![0.5, 0.5, 1.0, 0.0]), &m(2, 2, vec![true, true, false, false])).unwrap(),
    ];
    ensure(examples == [0.25, 1.0, 0.5], || format!("worked examples gave {examples:?}"))?;
    Ok("1000 random (A, M) cases, 3 worked examples".into())
}

// ---------------------------------------------------------------- 3, 4

fn phantom_manifest(mode: &str, global_seed: u64, pinned_seed: Option<u64>, out: &std::path::Path) -> ExperimentManifest {
    let pin = pinned_seed.map_or(String::new(), |s| format!("seed = {s}\n"));
    let text = format!(
        "name = \"{mode}\"\noutput_dir = {out:?}\nglobal_seed = {global_seed}\nprofile = \"desk\"\n\
         [dataset]\nsource = \"phantom\"\nphantom_mode = \"{mode}\"\nn_samples = 400\nside = 64\n{pin}"
    );
    ExperimentManifest::from_toml(&text, &ManifestOverrides::default()).expect("valid manifest")
}

fn confound() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out_lung = run_variant(&phantom_manifest("out_lung", 0, Some(0), dir.path()), ImageVariant::Inverse)
        .map_err(|e| e.to_string())?;
    let in_lung = run_variant(&phantom_manifest("in_lung", 0, Some(0), dir.path()), ImageVariant::Inverse)
        .map_err(|e| e.to_string())?;
    let (o, i) = (out_lung.val_balanced_acc / 100.0, in_lung.val_balanced_acc / 100.0);
    let detail = format!("inverse-segmented val balanced acc: out_lung {o:.3} (>= 0.75), in_lung {i:.3} (<= 0.60)");
    ensure(o >= 0.75 && i <= 0.60, || detail.clone())?;
    Ok(detail)
}

fn ail_separation() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (mut inside, mut outside) = (Vec::new(), Vec::new());
    for seed in 0..3 {
        for (mode, acc) in [("in_lung", &mut inside), ("out_lung", &mut outside)] {
            let row = run_variant(&phantom_manifest(mode, seed, None, dir.path()), ImageVariant::Raw)
                .map_err(|e| e.to_string())?;
            acc.push(row.mean_ail / 100.0);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let gap = mean(&inside) - mean(&outside);
    let detail = format!("mean AIL in_lung {inside:.3?} vs out_lung {outside:.3?}, gap {gap:.3} (>= 0.15)");
    ensure(gap >= 0.15, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 5

fn gradients() -> Check {
    let mut worst = (0.0f64, 0.0f64);
    let mut coords = 0;
    for p in common::all_problems(7) {
        let r = common::check_problem(&p, 1e-5);
        coords += r.coordinates;
        ensure(r.rel_f64 <= 1e-5 && r.rel_f32 <= 1e-3, || {
            format!("{}: f64 {:.2e}, f32 {:.2e} ({})", p.name, r.rel_f64, r.rel_f32, r.worst_tensor)
        })?;
        worst = (worst.0.max(r.rel_f64), worst.1.max(r.rel_f32));
    }
    Ok(format!(
        "5 losses, {coords} coordinates, worst relative error f64 {:.1e} f32 {:.1e}",
        worst.0, worst.1
    ))
}

// ---------------------------------------------------------------- 6

fn sinkhorn_contract() -> Check {
    let (b, k) = (8, 16);
    // the configured SwAV temperature; 50 alternations do not always reach
    // 1e-4 at this sharpness
    let eps = curricubench::ssl::swav::SwavConfig::default().epsilon;
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let mut r = common::rng(seed);
        let scores = Tensor::from_vec(&[b, k], (0..b * k).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let q = sinkhorn(&scores, eps, 50).map_err(|e| e.to_string())?;
        for i in 0..b {
            let s: f64 = q.data()[i * k..(i + 1) * k].iter().sum();
            worst = worst.max((s - 1.0 / b as f64).abs());
        }
        for j in 0..k {
            let s: f64 = (0..b).map(|i| q.data()[i * k + j]).sum();
            worst = worst.max((s - 1.0 / k as f64).abs());
        }
    }
    let q = sinkhorn(&Tensor::full(&[b, k], 0.3), eps, 50).map_err(|e| e.to_string())?;
    let target = 1.0 / (b * k) as f64;
    ensure(q.data().iter().all(|&v| v == target), || "uniform scores did not give the uniform plan".into())?;
    ensure(worst <= 1e-4, || {
        format!("uniform plan exact; worst marginal error {worst:.2e} at epsilon {eps} over 100 random 8x16 plans")
    })?;
    Ok(format!("100 random 8x16 plans, worst marginal error {worst:.1e}; uniform plan exact"))
}

// ---------------------------------------------------------------- 7

fn moco_state_machine() -> Check {
    let cfg = MocoConfig {
        queue_size: 10,
        hidden: 5,
        out: 3,
        ..MocoConfig::default()
    };
    let bcfg = BackboneConfig {
        in_channels: 1,
        stage_widths: vec![4, 8],
        blocks_per_stage: 1,
    };
    let net = Backbone::new(bcfg.clone()).map_err(|e| e.to_string())?;
    let mut params = net.init(3);
    params.extend(HeadSpec::Moco { hidden: 5, out: 3 }.init(bcfg.embedding_dim(), 4));
    let batch = 4;
    let mut state = MocoState::new(cfg, &params, batch).map_err(|e| e.to_string())?;
    let mut opt = Optimizer::new(OptimizerConfig::default());
    let aug = AugmentConfig::default();
    let mut rng = common::rng(5);
    let mut model: VecDeque<Vec<f32>> = VecDeque::new();
    let m = cfg.encoder_momentum as f32;
    let mut trained = 0;
    for step in 0..100 {
        let images = Tensor::from_vec(
            &[batch, 1, 16, 16],
            (0..batch * 256).map(|_| rng.random_range(0.0f32..1.0)).collect(),
        )
        .unwrap();
        let mut shadow = rng.clone();
        let (_, vk) = two_views(&images, &aug, &mut shadow).map_err(|e| e.to_string())?;
        let expected_keys = state.encode_keys(&net, &vk).map_err(|e| e.to_string())?;
        let key_before = state.key_params.clone();
        let loss = moco_step(&mut state, &net, &mut params, &mut opt, 0.05, &images, &aug, &mut rng)
            .map_err(|e| format!("step {step}: {e}"))?;
        for row in expected_keys.data().chunks(cfg.out) {
            let n = row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
            ensure((n - 1.0).abs() <= 1e-5, || format!("step {step}: key norm {n}"))?;
            if model.len() == cfg.queue_size {
                model.pop_front();
            }
            model.push_back(row.to_vec());
        }
        ensure(state.queue.len() <= cfg.queue_size, || format!("step {step}: queue over capacity"))?;
        let actual: Vec<&[f32]> = state.queue.iter().collect();
        let want: Vec<&[f32]> = model.iter().map(Vec::as_slice).collect();
        ensure(actual == want, || format!("step {step}: queue order differs from FIFO model"))?;
        let expected_key_params: ParamSet<f32> = match loss {
            None => key_before,
            Some(_) => {
                trained += 1;
                let mut exp = ParamSet::new();
                for (name, k) in key_before.iter() {
                    let q = params.get(name).map_err(|e| e.to_string())?;
                    let data = k.data().iter().zip(q.data()).map(|(&kv, &qv)| m * kv + (1.0 - m) * qv).collect();
                    exp.insert(name.clone(), Tensor::from_vec(k.shape(), data).unwrap());
                }
                exp
            }
        };
        ensure(state.key_params == expected_key_params, || format!("step {step}: EMA differs from closed form"))?;
    }
    ensure(state.queue.is_full(), || "queue never filled".into())?;
    Ok(format!(
        "100 steps ({} warm-up, {trained} trained): FIFO order, capacity {}, unit keys, exact EMA",
        100 - trained,
        cfg.queue_size
    ))
}

// ---------------------------------------------------------------- 8

fn bits(c: &Checkpoint, prefix: &str) -> Vec<(String, Vec<u32>)> {
    c.tensors
        .iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .map(|(n, t)| (n.clone(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn determinism() -> Check {
    let text = r#"
name = "determinism"
output_dir = "unused"
global_seed = 3
[dataset]
source = "phantom"
n_samples = 80
side = 32
[curriculum]
sequence = ["moco", "swav"]
[task.moco]
batch_size = 16
queue_size = 32
search_epochs = 1
full_epochs = 2
lr_candidates = [0.05, 0.1]
[task.swav]
search_epochs = 1
full_epochs = 2
lr_candidates = [0.05, 0.1]
[task.classification]
search_epochs = 1
full_epochs = 2
lr_candidates = [0.05, 0.1]
"#;
    let manifest = ExperimentManifest::from_toml(text, &ManifestOverrides::default()).map_err(|e| e.to_string())?;
    let run = || -> std::result::Result<_, String> {
        let data = prepare_data(&manifest.dataset, ImageVariant::Raw).map_err(|e| e.to_string())?;
        let step_data = data.step_data().map_err(|e| e.to_string())?;
        run_curriculum(&manifest.curriculum, &step_data, None).map_err(|e| e.to_string())
    };
    let (a, b) = (run()?, run()?);
    ensure(a.checkpoints.len() == 3, || format!("{} checkpoints", a.checkpoints.len()))?;
    for (i, (x, y)) in a.checkpoints.iter().zip(&b.checkpoints).enumerate() {
        ensure(bits(x, "") == bits(y, "") && x.meta == y.meta, || format!("step {i} differs between runs"))?;
    }
    for (i, (done, next)) in a.checkpoints.iter().zip(a.initial.iter().skip(1)).enumerate() {
        let (src, dst) = (bits(done, "backbone."), bits(next, "backbone."));
        ensure(!src.is_empty() && src == dst, || format!("backbone changed at handoff {i} -> {}", i + 1))?;
    }
    Ok("2 pretext steps + classification: identical checkpoints across runs, bit-equal handoffs".into())
}

// ---------------------------------------------------------------- 9

fn brute_force_balanced_accuracy(preds: &[usize], labels: &[usize], classes: usize) -> f64 {
    let mut cm = vec![vec![0usize; classes]; classes];
    for (&p, &y) in preds.iter().zip(labels) {
        cm[y][p] += 1;
    }
    let mut total = 0.0;
    let mut present = 0;
    for (c, row) in cm.iter().enumerate() {
        let support: usize = row.iter().sum();
        if support > 0 {
            total += row[c] as f64 / support as f64;
            present += 1;
        }
    }
    total / present as f64
}

fn plain_ce(logits: &[f64], labels: &[usize], c: usize) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.chunks(c).zip(labels) {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
        total += lse - row[y];
    }
    total / labels.len() as f64
}

fn metric_oracles() -> Check {
    let mut r = common::rng(9);
    for set in 0..1000 {
        let classes = r.random_range(2..6usize);
        let n = r.random_range(1..200usize);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
        let preds: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
        // the library infers the class count from the data
        let seen = preds.iter().chain(&labels).max().unwrap() + 1;
        let got = balanced_accuracy(&preds, &labels).map_err(|e| e.to_string())?;
        let want = brute_force_balanced_accuracy(&preds, &labels, seen);
        ensure(got == want, || format!("set {set}: {got} vs oracle {want}"))?;
    }
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (b, c) = (r.random_range(1..16usize), r.random_range(2..6usize));
        // f64 logits, so the comparison isolates the weighting from f32 rounding
        let logits: Vec<f64> = (0..b * c).map(|_| r.random_range(-20.0..20.0)).collect();
        let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..c)).collect();
        let t = Tensor::from_vec(&[b, c], logits.clone()).unwrap();
        let got = weighted_ce(&t, &labels, &vec![1.0; c]).map_err(|e| e.to_string())?;
        let want = plain_ce(&logits, &labels, c);
        worst = worst.max((got - want).abs());
    }
    ensure(worst <= 1e-6, || format!("unit-weight CE deviates by {worst:.2e}"))?;
    Ok(format!(
        "1000 prediction sets exact; unit-weight CE within {worst:.1e} over 1000 batches"
    ))
}

// ---------------------------------------------------------------- 10

fn mask_goldens() -> Check {
    let cases = common::masks::cases();
    for case in &cases {
        common::masks::check_case(case)?;
    }
    Ok(format!(
        "{} cases: small components, holes, keep-2, border, idempotence",
        cases.len()
    ))
}

// ----------------------------------------------------------------

struct Criterion {
    id: usize,
    title: &'static str,
    budget: Duration,
    check: fn() -> Check,
}

const fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn main() -> ExitCode {
    let criteria = [
        Criterion { id: 1, title: "curriculum-order reproduction", budget: secs(1), check: curriculum_order },
        Criterion { id: 2, title: "AIL algebra", budget: secs(10), check: ail_algebra },
        Criterion { id: 3, title: "confound at desk scale", budget: secs(600), check: confound },
        Criterion { id: 4, title: "AIL separation", budget: secs(1200), check: ail_separation },
        Criterion { id: 5, title: "gradient correctness", budget: secs(120), check: gradients },
        Criterion { id: 6, title: "Sinkhorn contract", budget: secs(1), check: sinkhorn_contract },
        Criterion { id: 7, title: "MoCo state machine", budget: secs(30), check: moco_state_machine },
        Criterion { id: 8, title: "pipeline determinism and transfer", budget: secs(300), check: determinism },
        Criterion { id: 9, title: "metric oracles", budget: secs(10), check: metric_oracles },
        Criterion { id: 10, title: "mask post-processing goldens", budget: secs(5), check: mask_goldens },
    ];
    // `cargo test -- <filter>` narrows the run to criteria whose number matches
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut ran = 0;
    for c in criteria.iter().filter(|c| filter.is_empty() || filter.contains(&c.id)) {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(c.check))
            .unwrap_or_else(|p| Err(format!("panic: {}", p.downcast_ref::<String>().cloned().unwrap_or_default())));
        let elapsed = start.elapsed();
        let (ok, detail) = match outcome {
            Ok(d) if elapsed <= c.budget => (true, d),
            Ok(d) => (false, format!("{d}; over the {:.0?} budget", c.budget)),
            Err(e) => (false, e),
        };
        ran += 1;
        failed += usize::from(!ok);
        println!(
            "criterion {:>2} {:<36} {}  {detail} [{:.1}s]",
            c.id,
            c.title,
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
    }
    println!("acceptance: {}/{ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
