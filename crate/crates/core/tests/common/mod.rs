//! Toy networks and a central-difference gradient checker shared by the
//! integration tests.
#![allow(dead_code)]

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use curricubench::backbone::{Backbone, BackboneConfig, HeadSpec};
use curricubench::classify::classification_loss;
use curricubench::params::is_buffer;
use curricubench::ssl::moco::MocoBatch;
use curricubench::ssl::relloc::RelLocBatch;
use curricubench::ssl::rotation::RotationBatch;
use curricubench::ssl::swav::{assignment_codes, SwavBatch};
use curricubench::ssl::{pretext_loss, PretextBatch, PretextConfig, TaskId};
use curricubench::{ParamSet, Scalar, Tensor};

pub const BATCH: usize = 4;
pub const SIDE: usize = 8;

/// Two input channels, two small stages, 8x8 inputs.
pub fn toy_config() -> BackboneConfig {
    BackboneConfig {
        in_channels: 2,
        stage_widths: vec![3, 4],
        blocks_per_stage: 1,
    }
}

pub fn toy_pretext() -> PretextConfig {
    let mut cfg = PretextConfig::default();
    cfg.moco.hidden = 5;
    cfg.moco.out = 3;
    cfg.swav.hidden = 5;
    cfg.swav.out = 3;
    cfg.swav.prototypes = 4;
    cfg
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.random_range(-1.0f32..1.0)).collect()).unwrap()
}

pub fn unit_rows(rows: usize, cols: usize, seed: u64) -> Tensor<f32> {
    let mut t = random_tensor(&[rows, cols], seed);
    for row in t.data_mut().chunks_mut(cols) {
        let n = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    t
}

/// Backbone plus the head `head`, with every tensor perturbed away from
/// its initial value so batch-norm scales and biases are not trivial.
pub fn toy_params(head: &HeadSpec, seed: u64) -> (Backbone, ParamSet<f32>) {
    let cfg = toy_config();
    let net = Backbone::new(cfg.clone()).unwrap();
    let mut params = net.init(seed);
    params.extend(head.init(cfg.embedding_dim(), seed + 1));
    let mut r = rng(seed + 2);
    for (name, t) in params.iter_mut() {
        if is_buffer(name) {
            continue;
        }
        t.data_mut().iter_mut().for_each(|v| *v += r.random_range(-0.2f32..0.2));
    }
    (net, params)
}

/// One toy problem: a loss with analytic gradients, at f32 or f64.
pub struct Problem {
    pub name: &'static str,
    pub params: ParamSet<f32>,
    eval: Box<dyn Fn(&ParamSet<f64>) -> (f64, ParamSet<f64>)>,
    eval32: Box<dyn Fn(&ParamSet<f32>) -> (f64, ParamSet<f32>)>,
}

impl Problem {
    pub fn loss64(&self, p: &ParamSet<f64>) -> f64 {
        (self.eval)(p).0
    }
}

fn pretext_problem(name: &'static str, task: TaskId, head: HeadSpec, batch: PretextBatch<f32>, seed: u64) -> Problem {
    let (net, params) = toy_params(&head, seed);
    let cfg = toy_pretext();
    let batch64 = cast_batch(&batch);
    let (net2, cfg2) = (net.clone(), cfg.clone());
    Problem {
        name,
        params,
        eval: Box::new(move |p| {
            let out = pretext_loss(task, &net, p, &batch64, &cfg).unwrap();
            (out.loss, out.grads)
        }),
        eval32: Box::new(move |p| {
            let out = pretext_loss(task, &net2, p, &batch, &cfg2).unwrap();
            (out.loss, out.grads)
        }),
    }
}

fn cast_batch(b: &PretextBatch<f32>) -> PretextBatch<f64> {
    match b {
        PretextBatch::Rotation(r) => PretextBatch::Rotation(r.cast()),
        PretextBatch::RelLoc(r) => PretextBatch::RelLoc(r.cast()),
        PretextBatch::Moco(m) => PretextBatch::Moco(MocoBatch {
            queries: m.queries.cast(),
            keys: m.keys.cast(),
            queue: m.queue.cast(),
        }),
        PretextBatch::Swav(s) => PretextBatch::Swav(SwavBatch {
            views: [s.views[0].cast(), s.views[1].cast()],
            codes: s.codes.clone(),
        }),
    }
}

pub fn weighted_ce_problem(seed: u64) -> Problem {
    let head = HeadSpec::Classification { classes: 2 };
    let (net, params) = toy_params(&head, seed);
    let images = random_tensor(&[BATCH, 2, SIDE, SIDE], seed + 10);
    let labels = vec![0usize, 1, 1, 0];
    let weights = vec![0.7, 1.3];
    let images64 = images.cast::<f64>();
    let (net2, labels2, weights2) = (net.clone(), labels.clone(), weights.clone());
    Problem {
        name: "weighted cross-entropy",
        params,
        eval: Box::new(move |p| {
            let (l, g, _) = classification_loss(&net, p, &images64, &labels, &weights).unwrap();
            (l, g)
        }),
        eval32: Box::new(move |p| {
            let (l, g, _) = classification_loss(&net2, p, &images, &labels2, &weights2).unwrap();
            (l, g)
        }),
    }
}

pub fn rotation_problem(seed: u64) -> Problem {
    let batch = RotationBatch {
        images: random_tensor(&[BATCH, 2, SIDE, SIDE], seed + 10),
        targets: vec![0, 1, 2, 3],
    };
    pretext_problem("rotation", TaskId::Rotation, HeadSpec::Rotation, PretextBatch::Rotation(batch), seed)
}

pub fn relloc_problem(seed: u64) -> Problem {
    let batch = RelLocBatch {
        center_patches: random_tensor(&[BATCH, 2, SIDE, SIDE], seed + 10),
        neighbor_patches: random_tensor(&[BATCH, 2, SIDE, SIDE], seed + 11),
        targets: vec![0, 3, 5, 7],
    };
    pretext_problem("relative location", TaskId::RelLoc, HeadSpec::RelLoc, PretextBatch::RelLoc(batch), seed)
}

pub fn moco_problem(seed: u64) -> Problem {
    let cfg = toy_pretext();
    let batch = MocoBatch {
        queries: random_tensor(&[BATCH, 2, SIDE, SIDE], seed + 10),
        keys: unit_rows(BATCH, cfg.moco.out, seed + 11),
        queue: unit_rows(6, cfg.moco.out, seed + 12),
    };
    let head = HeadSpec::Moco {
        hidden: cfg.moco.hidden,
        out: cfg.moco.out,
    };
    pretext_problem("InfoNCE", TaskId::Moco, head, PretextBatch::Moco(batch), seed)
}

pub fn swav_problem(seed: u64) -> Problem {
    let cfg = toy_pretext();
    let k = cfg.swav.prototypes;
    let codes = |s| assignment_codes(&random_tensor(&[BATCH, k], s).cast::<f64>(), 0.5, 3).unwrap();
    let batch = SwavBatch {
        views: [
            random_tensor(&[BATCH, 2, SIDE, SIDE], seed + 10),
            random_tensor(&[BATCH, 2, SIDE, SIDE], seed + 11),
        ],
        codes: Some([codes(seed + 12), codes(seed + 13)]),
    };
    let head = HeadSpec::Swav {
        hidden: cfg.swav.hidden,
        out: cfg.swav.out,
        prototypes: k,
    };
    pretext_problem("swapped prediction", TaskId::Swav, head, PretextBatch::Swav(batch), seed)
}

pub fn all_problems(seed: u64) -> Vec<Problem> {
    vec![
        weighted_ce_problem(seed),
        rotation_problem(seed),
        relloc_problem(seed),
        moco_problem(seed),
        swav_problem(seed),
    ]
}

#[derive(Debug, Clone)]
pub struct GradReport {
    /// Largest per-tensor relative error of the f64 analytic gradient.
    pub rel_f64: f64,
    /// Same for the f32 analytic gradient.
    pub rel_f32: f64,
    pub worst_tensor: String,
    pub coordinates: usize,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `||a - b|| / max(||a||, ||b||)`, 0 when both vanish.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Central differences in f64 on every parameter coordinate, compared
/// tensor by tensor with the analytic gradients of both precisions.
pub fn check_problem(p: &Problem, h: f64) -> GradReport {
    let base = p.params.cast::<f64>();
    let (_, g64) = (p.eval)(&base);
    let (_, g32) = (p.eval32)(&p.params);
    let mut report = GradReport {
        rel_f64: 0.0,
        rel_f32: 0.0,
        worst_tensor: String::new(),
        coordinates: 0,
    };
    for (name, t) in base.iter() {
        if is_buffer(name) {
            continue;
        }
        let mut numeric = Vec::with_capacity(t.len());
        for i in 0..t.len() {
            let mut plus = base.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += h;
            let mut minus = base.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= h;
            numeric.push((p.loss64(&plus) - p.loss64(&minus)) / (2.0 * h));
        }
        report.coordinates += t.len();
        let analytic = |g: &[f64]| g.to_vec();
        let a64 = g64.get(name).map(|g| analytic(g.data())).unwrap_or_else(|_| vec![0.0; t.len()]);
        let a32: Vec<f64> = g32
            .get(name)
            .map(|g| g.data().iter().map(|v| v.f64()).collect())
            .unwrap_or_else(|_| vec![0.0; t.len()]);
        let (e64, e32) = (rel_error(&a64, &numeric), rel_error(&a32, &numeric));
        if e64 > report.rel_f64 {
            report.worst_tensor = name.clone();
        }
        report.rel_f64 = report.rel_f64.max(e64);
        report.rel_f32 = report.rel_f32.max(e32);
    }
    report
}

pub mod masks {
    use std::path::{Path, PathBuf};

    use curricubench::attention::postprocess_mask;
    use curricubench::data::image_io::encode_pgm;
    use curricubench::data::{gen_phantom, PhantomConfig};
    use curricubench::Grid;

    pub const SIDE: usize = 32;
    pub const MIN_AREA_FRACTION: f64 = 0.01;
    pub const RADIUS: usize = 1;

    pub struct MaskCase {
        pub name: &'static str,
        pub input: Grid<bool>,
        /// Expected output drawn by hand; `None` when the golden file is
        /// the only reference (idempotence cases).
        pub expected: Option<Grid<bool>>,
    }

    /// Half-open rectangles `(r0, r1, c0, c1)`.
    pub fn rects(list: &[(usize, usize, usize, usize)]) -> Grid<bool> {
        Grid::from_fn(SIDE, SIDE, |r, c| {
            list.iter().any(|&(r0, r1, c0, c1)| (r0..r1).contains(&r) && (c0..c1).contains(&c))
        })
    }

    fn with(mut g: Grid<bool>, pixels: &[(usize, usize)], value: bool) -> Grid<bool> {
        for &(r, c) in pixels {
            g.set(r, c, value);
        }
        g
    }

    pub fn cases() -> Vec<MaskCase> {
        let body = (4, 20, 4, 16);
        let big = (6, 26, 6, 26);
        let (upper, lower, small) = ((2, 12, 2, 14), (16, 30, 2, 12), (4, 10, 20, 26));
        let cfg = PhantomConfig {
            n_samples: 40,
            side: SIDE,
            seed: 11,
            ..Default::default()
        };
        let (_, phantom_masks) = gen_phantom(&cfg).expect("phantom");
        let lungs = phantom_masks.values().next().expect("a phantom mask").clone();
        // speckle and pinholes over the phantom lungs
        let noisy = Grid::from_fn(SIDE, SIDE, |r, c| {
            let h = (r * 31 + c * 17) % 23;
            if h == 0 {
                !lungs.get(r, c)
            } else {
                lungs.get(r, c)
            }
        });
        vec![
            MaskCase {
                name: "small_component",
                input: rects(&[body, (26, 29, 24, 27)]),
                expected: Some(rects(&[body])),
            },
            MaskCase {
                name: "hole_closing",
                input: with(rects(&[big]), &[(15, 15), (20, 9)], false),
                expected: Some(rects(&[big])),
            },
            MaskCase {
                name: "keep_two_largest",
                input: rects(&[upper, lower, small]),
                expected: Some(rects(&[upper, lower])),
            },
            MaskCase {
                name: "border_band",
                input: rects(&[(0, 10, 0, SIDE)]),
                expected: Some(rects(&[(0, 10, 0, SIDE)])),
            },
            MaskCase {
                name: "noisy_lungs",
                input: noisy,
                expected: None,
            },
        ]
    }

    pub fn process(g: &Grid<bool>) -> Grid<bool> {
        postprocess_mask(g, MIN_AREA_FRACTION, RADIUS).expect("non-empty mask")
    }

    pub fn encode(g: &Grid<bool>) -> Vec<u8> {
        encode_pgm(&g.map(|b| if b { 255 } else { 0 }))
    }

    pub fn golden_dir() -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/masks")
    }

    /// Set `CURRICUBENCH_BLESS=1` to rewrite the stored files from the
    /// hand-drawn expectations (or, without one, from the current output).
    pub fn bless_requested() -> bool {
        std::env::var("CURRICUBENCH_BLESS").is_ok_and(|v| v == "1")
    }

    /// `Err(reason)` on the first mismatch.
    pub fn check_case(case: &MaskCase) -> Result<(), String> {
        let path = golden_dir().join(format!("{}.pgm", case.name));
        let out = process(&case.input);
        if bless_requested() {
            std::fs::create_dir_all(golden_dir()).map_err(|e| e.to_string())?;
            let reference = case.expected.as_ref().unwrap_or(&out);
            std::fs::write(&path, encode(reference)).map_err(|e| e.to_string())?;
            std::fs::write(golden_dir().join(format!("{}_input.pgm", case.name)), encode(&case.input))
                .map_err(|e| e.to_string())?;
        }
        let golden = std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        if let Some(exp) = &case.expected {
            if encode(exp) != golden {
                return Err(format!("{}: stored golden differs from the hand-drawn mask", case.name));
            }
        }
        if encode(&out) != golden {
            return Err(format!("{}: output differs from golden", case.name));
        }
        if process(&out) != out {
            return Err(format!("{}: post-processing is not idempotent", case.name));
        }
        Ok(())
    }
}
