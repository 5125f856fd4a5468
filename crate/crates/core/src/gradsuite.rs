//! Finite-difference check of every differentiable piece at micro shapes.
//!
//! Kernel ops run on random shapes up to 8×8 over many seeded trials; the
//! composite modules (query tables, fusion, decoder layer, encoder, set
//! loss, end-to-end detector) run once per mode at fixed micro shapes.
//! Each check probes the scalar `Σ out ⊙ R` for a random `R`, with every
//! input held as a parameter so input gradients are covered too.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::decoder::{build_instance_mask, AttentionMask, DecoderLayer, FusionMode, MaskMode, Placement, QueryFusion};
use crate::detector::{
    match_instances, scene_loss, set_loss, targets_for, BevEncoder, Detector, DetectorConfig, PreparedScene,
};
use crate::error::Result;
use crate::geometry::{ElementClass, Instance, Point};
use crate::numcore::{
    affine, affine_backward, attention, attention_backward, gelu, gelu_backward, grad_check, layer_norm,
    layer_norm_backward, sigmoid, sigmoid_backward, softmax_rows, softmax_rows_backward, AttentionBlock,
    FeedForward, GradCheckReport, ParamStore, Tensor2,
};
use crate::queries::{QueryConfig, QueryGenerator, QueryScheme};
use crate::synthgen::BevRaster;

pub const DEFAULT_REL_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    /// Random-shape trials per kernel op.
    pub trials: usize,
    pub seed: u64,
    pub rel_tol: f64,
    /// Negative control: perturbs the analytic gradient of the named op.
    pub inject_fault: Option<String>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            trials: 100,
            seed: 0,
            rel_tol: DEFAULT_REL_TOL,
            inject_fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpResult {
    pub op: String,
    pub trials: usize,
    pub max_rel_err: f64,
    /// Parameter holding the worst coordinate.
    pub worst: String,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub rel_tol: f64,
    pub ops: Vec<OpResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(|o| o.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &OpResult> {
        self.ops.iter().filter(|o| !o.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.ops.iter().map(|o| o.max_rel_err).fold(0.0, f64::max)
    }
}

/// Names of every op the suite covers, in report order.
pub fn op_names() -> Vec<String> {
    let mut v: Vec<String> = ["affine", "softmax_rows", "layer_norm", "gelu", "sigmoid", "attention"]
        .map(String::from)
        .into();
    v.extend(["attention_block", "feed_forward"].map(String::from));
    v.extend(QueryScheme::ALL.iter().map(|s| format!("queries.{s}")));
    v.extend(FusionMode::ALL.iter().map(|m| format!("fusion.{m}")));
    for m in MaskMode::ALL {
        for p in Placement::ALL {
            if m != MaskMode::Off || p == Placement::AfterCross {
                v.push(format!("decoder_layer.{m}.{p}"));
            }
        }
    }
    v.extend(["encoder", "set_loss", "detector"].map(String::from));
    v
}

fn rand_t(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor2 {
    Tensor2::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

fn dot(a: &Tensor2, b: &Tensor2) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

struct Runner<'a> {
    opts: &'a SuiteOptions,
    results: Vec<OpResult>,
}

impl Runner<'_> {
    /// Runs one check of `op`, merging it into that op's running result.
    fn check<F>(&mut self, op: &str, store: &mut ParamStore, mut f: F) -> Result<()>
    where
        F: FnMut(&mut ParamStore, bool) -> Result<f64>,
    {
        let faulty = self.opts.inject_fault.as_deref() == Some(op);
        let report: GradCheckReport = grad_check(
            store,
            |s, want| {
                let l = f(s, want)?;
                if want && faulty {
                    s.scale_grads(1.01);
                }
                Ok(l)
            },
            self.opts.rel_tol,
        )?;
        let worst = report.worst().map(|w| w.name.clone()).unwrap_or_default();
        match self.results.iter_mut().find(|r| r.op == op) {
            Some(r) => {
                r.trials += 1;
                if report.max_rel_err > r.max_rel_err {
                    r.max_rel_err = report.max_rel_err;
                    r.worst = worst;
                }
                r.passed &= report.passed();
            }
            None => self.results.push(OpResult {
                op: op.to_string(),
                trials: 1,
                max_rel_err: report.max_rel_err,
                worst,
                passed: report.passed(),
            }),
        }
        Ok(())
    }
}

/// Kernel ops only, on `trials` random shapes drawn from `seed`.
pub fn run_kernel_trials(seed: u64, trials: usize, rel_tol: f64) -> Result<SuiteReport> {
    let opts = SuiteOptions {
        trials,
        seed,
        rel_tol,
        inject_fault: None,
    };
    let mut r = Runner {
        opts: &opts,
        results: Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..trials {
        kernel_trial(&mut r, &mut rng)?;
    }
    Ok(SuiteReport {
        rel_tol,
        ops: r.results,
    })
}

/// Runs the whole suite. Architecture choices and loss weights for the
/// end-to-end check come from `cfg`; its shapes are replaced by the micro
/// ones.
pub fn run_suite(cfg: &DetectorConfig, opts: &SuiteOptions) -> Result<SuiteReport> {
    let mut r = Runner {
        opts,
        results: Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 0..opts.trials {
        kernel_trial(&mut r, &mut rng)?;
    }
    modules(&mut r, &mut rng)?;
    end_to_end(&mut r, cfg, &mut rng)?;
    Ok(SuiteReport {
        rel_tol: opts.rel_tol,
        ops: r.results,
    })
}

fn kernel_trial(r: &mut Runner, rng: &mut ChaCha8Rng) -> Result<()> {
    let n = rng.gen_range(1..=8);
    let m = rng.gen_range(2..=8);
    let k = rng.gen_range(1..=8);

    let mut s = ParamStore::new();
    s.insert("x", rand_t(n, k, rng));
    s.insert("w", rand_t(k, m, rng));
    s.insert("b", rand_t(1, m, rng));
    let probe = rand_t(n, m, rng);
    r.check("affine", &mut s, |s, want| {
        let y = affine(s.value("x"), s.value("w"), s.value("b"))?;
        if want {
            let g = affine_backward(s.value("x"), s.value("w"), &probe)?;
            s.accumulate("x", &g.dx)?;
            s.accumulate("w", &g.dw)?;
            s.accumulate("b", &g.db)?;
        }
        Ok(dot(&y, &probe))
    })?;

    let mut s = ParamStore::new();
    s.insert("x", rand_t(n, m, rng).scale(3.0));
    let probe = rand_t(n, m, rng);
    r.check("softmax_rows", &mut s, |s, want| {
        let y = softmax_rows(s.value("x"));
        if want {
            let dx = softmax_rows_backward(&y, &probe)?;
            s.accumulate("x", &dx)?;
        }
        Ok(dot(&y, &probe))
    })?;

    let mut s = ParamStore::new();
    s.insert("x", rand_t(n, m, rng).scale(2.0));
    s.insert("gain", rand_t(1, m, rng));
    s.insert("bias", rand_t(1, m, rng));
    let probe = rand_t(n, m, rng);
    r.check("layer_norm", &mut s, |s, want| {
        let (y, cache) = layer_norm(s.value("x"), s.value("gain"), s.value("bias"))?;
        if want {
            let g = layer_norm_backward(&cache, s.value("gain"), &probe)?;
            s.accumulate("x", &g.dx)?;
            s.accumulate("gain", &g.dgain)?;
            s.accumulate("bias", &g.dbias)?;
        }
        Ok(dot(&y, &probe))
    })?;

    let mut s = ParamStore::new();
    s.insert("x", rand_t(n, m, rng).scale(3.0));
    let probe = rand_t(n, m, rng);
    r.check("gelu", &mut s, |s, want| {
        let y = gelu(s.value("x"));
        if want {
            let dx = gelu_backward(s.value("x"), &probe)?;
            s.accumulate("x", &dx)?;
        }
        Ok(dot(&y, &probe))
    })?;

    let mut s = ParamStore::new();
    s.insert("x", rand_t(n, m, rng).scale(4.0));
    let probe = rand_t(n, m, rng);
    r.check("sigmoid", &mut s, |s, want| {
        let y = sigmoid(s.value("x"));
        if want {
            let dx = sigmoid_backward(&y, &probe)?;
            s.accumulate("x", &dx)?;
        }
        Ok(dot(&y, &probe))
    })?;

    let keys = rng.gen_range(1..=8);
    let dv = rng.gen_range(1..=8);
    let mut s = ParamStore::new();
    s.insert("q", rand_t(n, m, rng));
    s.insert("k", rand_t(keys, m, rng));
    s.insert("v", rand_t(keys, dv, rng));
    // random mask with one guaranteed open entry per row
    let open: Vec<usize> = (0..n).map(|_| rng.gen_range(0..keys)).collect();
    let mask: Vec<bool> = (0..n * keys)
        .map(|i| i % keys != open[i / keys] && rng.gen_bool(0.3))
        .collect();
    let probe = rand_t(n, dv, rng);
    r.check("attention", &mut s, |s, want| {
        let (y, cache) = attention(s.value("q"), s.value("k"), s.value("v"), Some(&mask))?;
        if want {
            let g = attention_backward(&cache, &probe)?;
            s.accumulate("q", &g.dq)?;
            s.accumulate("k", &g.dk)?;
            s.accumulate("v", &g.dv)?;
        }
        Ok(dot(&y, &probe))
    })
}

const N_I: usize = 2;
const N_P: usize = 3;
const D: usize = 8;
const TOKENS: usize = 5;

fn layout() -> Vec<usize> {
    (0..N_I * N_P).map(|j| j / N_P).collect()
}

fn modules(r: &mut Runner, rng: &mut ChaCha8Rng) -> Result<()> {
    let n = N_I * N_P;

    let mut s = ParamStore::new();
    let block = AttentionBlock::init("blk", D, &mut s, rng);
    s.insert("x", rand_t(n, D, rng));
    s.insert("key_src", rand_t(TOKENS, D, rng));
    s.insert("value_src", rand_t(TOKENS, D, rng));
    let probe = rand_t(n, D, rng);
    r.check("attention_block", &mut s, |s, want| {
        let (x, ks, vs) = (s.value("x").clone(), s.value("key_src").clone(), s.value("value_src").clone());
        let (y, cache) = block.forward(s, &x, &ks, &vs, None)?;
        if want {
            let (dx, dk, dv) = block.backward(s, &cache, &probe)?;
            s.accumulate("x", &dx)?;
            s.accumulate("key_src", &dk)?;
            s.accumulate("value_src", &dv)?;
        }
        Ok(dot(&y, &probe))
    })?;

    let mut s = ParamStore::new();
    let ffn = FeedForward::init("ffn", D, 2 * D, &mut s, rng);
    s.insert("x", rand_t(n, D, rng));
    let probe = rand_t(n, D, rng);
    r.check("feed_forward", &mut s, |s, want| {
        let x = s.value("x").clone();
        let (y, cache) = ffn.forward(s, &x)?;
        if want {
            let dx = ffn.backward(s, &cache, &probe)?;
            s.accumulate("x", &dx)?;
        }
        Ok(dot(&y, &probe))
    })?;

    for scheme in QueryScheme::ALL {
        let mut s = ParamStore::new();
        let gen = QueryGenerator::init(QueryConfig::new(N_I, N_P, D)?, scheme, &mut s, rng);
        let probe = rand_t(n, D, rng);
        r.check(&format!("queries.{scheme}"), &mut s, |s, want| {
            let q = gen.forward(s)?;
            if want {
                gen.backward(s, &probe)?;
            }
            Ok(dot(&q.queries, &probe))
        })?;
    }

    for mode in FusionMode::ALL {
        let mut s = ParamStore::new();
        let f = QueryFusion::init(mode, N_P, D, &mut s, rng);
        s.insert("q", rand_t(n, D, rng));
        let probe = rand_t(n, D, rng);
        r.check(&format!("fusion.{mode}"), &mut s, |s, want| {
            let q = s.value("q").clone();
            let (y, cache) = f.forward(s, &q)?;
            if want {
                let dq = f.backward(s, &cache, &probe)?;
                s.accumulate("q", &dq)?;
            }
            Ok(dot(&y, &probe))
        })?;
    }

    for mask_mode in MaskMode::ALL {
        for placement in Placement::ALL {
            if mask_mode == MaskMode::Off && placement == Placement::BeforeCross {
                continue;
            }
            let mut s = ParamStore::new();
            let layer = DecoderLayer::init("dec", D, mask_mode, placement, &mut s, rng);
            let mask = match mask_mode {
                MaskMode::Masked => build_instance_mask(&layout(), 0.3, rng, true),
                _ => AttentionMask::open(n),
            };
            s.insert("x", rand_t(n, D, rng));
            s.insert("keys", rand_t(TOKENS, D, rng));
            s.insert("values", rand_t(TOKENS, D, rng));
            let probe = rand_t(n, D, rng);
            r.check(&format!("decoder_layer.{mask_mode}.{placement}"), &mut s, |s, want| {
                let (x, k, v) = (s.value("x").clone(), s.value("keys").clone(), s.value("values").clone());
                let (y, cache) = layer.forward(s, &x, &k, &v, &mask)?;
                if want {
                    let (dx, dk, dv) = layer.backward(s, &cache, &probe)?;
                    s.accumulate("x", &dx)?;
                    s.accumulate("keys", &dk)?;
                    s.accumulate("values", &dv)?;
                }
                Ok(dot(&y, &probe))
            })?;
        }
    }

    let mut s = ParamStore::new();
    let enc = BevEncoder::init(20, 20, 4, 10, D, &mut s, rng);
    let raster = random_raster(20, 20, rng);
    let (pk, pv) = (rand_t(4, D, rng), rand_t(4, D, rng));
    r.check("encoder", &mut s, |s, want| {
        let e = enc.forward(s, &raster)?;
        if want {
            enc.backward(s, &e, &pk, &pv)?;
        }
        Ok(dot(&e.keys, &pk) + dot(&e.values, &pv))
    })?;

    let targets = micro_targets()?;
    let mut s = ParamStore::new();
    s.insert("logits", rand_t(N_I, 5, rng));
    s.insert("points", Tensor2::from_fn(n, 2, |_, _| rng.gen_range(0.05..0.95)));
    let probs = softmax_rows(s.value("logits"));
    let frozen = match_instances(&probs, s.value("points"), &targets, 2.0, 5.0)?;
    r.check("set_loss", &mut s, |s, want| {
        let (parts, dl, dp) = set_loss(s.value("logits"), s.value("points"), &targets, &frozen, 2.0, 5.0)?;
        if want {
            s.accumulate("logits", &dl)?;
            s.accumulate("points", &dp)?;
        }
        Ok(parts.total())
    })
}

fn random_raster(h: usize, w: usize, rng: &mut impl Rng) -> BevRaster {
    let mut r = BevRaster::zeros(h, w, 4, 1.0);
    r.data.iter_mut().for_each(|v| *v = rng.gen_range(0.0..1.0));
    r
}

fn micro_instances() -> Vec<Instance> {
    vec![
        Instance::polyline(
            ElementClass::Divider,
            vec![Point::new(-8.0, -20.0), Point::new(-6.0, 0.0), Point::new(-7.0, 18.0)],
        ),
        Instance::polygon_from_ring(
            ElementClass::PedestrianCrossing,
            vec![
                Point::new(2.0, 5.0),
                Point::new(9.0, 5.0),
                Point::new(9.0, 9.0),
                Point::new(2.0, 9.0),
            ],
        ),
    ]
}

fn micro_targets() -> Result<Vec<crate::detector::GtTarget>> {
    targets_for(&micro_instances(), N_P, (-15.0, 15.0), (-30.0, 30.0))
}

fn end_to_end(r: &mut Runner, base: &DetectorConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    let micro = DetectorConfig::micro();
    let cfg = DetectorConfig {
        num_instances: micro.num_instances,
        points_per_instance: micro.points_per_instance,
        dim: micro.dim,
        layers: micro.layers,
        patch: micro.patch,
        raster_height: micro.raster_height,
        raster_width: micro.raster_width,
        resume: None,
        ..base.clone()
    };
    cfg.validate()?;
    let mut s = ParamStore::new();
    let det = Detector::init(&cfg, &mut s)?;
    let gts = micro_instances();
    let scene = PreparedScene {
        scene_id: 0,
        raster: random_raster(cfg.raster_height, cfg.raster_width, rng),
        targets: targets_for(&gts, cfg.points_per_instance, cfg.x_range, cfg.y_range)?,
        gts,
    };
    // ε-mask and assignment are frozen so the loss is a smooth function of the parameters
    let masks = det.draw_masks(rng, true);
    let (_, frozen) = scene_loss(&det, &mut s.clone(), &scene, &masks, None, false)?;
    r.check("detector", &mut s, |s, want| {
        Ok(scene_loss(&det, s, &scene, &masks, Some(&frozen), want)?.0.total())
    })
}
