//! Finite-difference checks of every primitive and every composite loss,
//! in 64-bit precision.

use dcml_tensor::check::{check_primitive, STEP};
use dcml_tensor::{Axis, Primitive, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::{build_logits, info_nce, DcmlNet, MemoryBank};
use crate::deaging::DeagingModel;
use crate::error::Result;
use crate::fusion::{FusionBlock, GateActivation};
use crate::nn::{BackboneConfig, ParamStore, PatchGeometry, Session};
use crate::race::{race_loss, RaceEncoder};

/// Pass threshold on the max relative error of every entry.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub evaluations: usize,
    /// Non-smooth elements left out (model-level entries only).
    pub skipped: usize,
    pub passed: bool,
    /// Set when the check itself could not run.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub tolerance: f64,
    pub entries: Vec<CheckEntry>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &CheckEntry> {
        self.entries.iter().filter(|e| !e.passed)
    }

    pub fn to_table(&self) -> String {
        let width = self.entries.iter().map(|e| e.name.len()).max().unwrap_or(4);
        let mut out = String::new();
        for e in &self.entries {
            let status = if e.passed { "ok" } else { "FAIL" };
            out.push_str(&format!("{:<width$}  {:>10.3e}  {status}\n", e.name, e.max_rel_err));
        }
        out
    }
}

fn entry(name: &str, result: Result<ModelCheck>) -> CheckEntry {
    match result {
        Ok(c) => CheckEntry {
            name: name.to_string(),
            max_rel_err: c.max_rel_err,
            max_abs_err: c.max_abs_err,
            evaluations: c.evaluations,
            skipped: c.skipped,
            passed: c.max_rel_err < TOLERANCE
                && (c.skipped as f64) <= MAX_SKIPPED_FRACTION * (c.checked + c.skipped) as f64,
            error: None,
        },
        Err(e) => CheckEntry {
            name: name.to_string(),
            max_rel_err: f64::INFINITY,
            max_abs_err: f64::INFINITY,
            evaluations: 0,
            skipped: 0,
            passed: false,
            error: Some(e.to_string()),
        },
    }
}

/// Result of a model-level check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub evaluations: usize,
    pub checked: usize,
    /// Elements whose step-`h` and step-`h/2` central differences disagree:
    /// a ReLU or max-pool kink lies inside the step, so neither estimate is
    /// a derivative. They are left out of the comparison.
    pub skipped: usize,
}

/// Agreement required between the two step sizes, relative to the
/// largest gradient magnitude of the tensor.
pub const SMOOTHNESS_TOL: f64 = 1e-5;

/// Entries fail when more than this fraction of elements is skipped.
pub const MAX_SKIPPED_FRACTION: f64 = 0.25;

/// Central differences of a scalar built from model parameters and extra
/// inputs. Every bound trainable parameter and every input is checked.
/// `fault` corrupts that primitive's backward rule in the analytic pass.
pub fn check_model<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], fault: Option<Primitive>, f: F) -> Result<ModelCheck>
where
    F: Fn(&mut Session<f64>, &[Var]) -> Result<Var>,
{
    let (grads, input_grads) = {
        let mut s = Session::train(store);
        s.graph.corrupt_backward(fault);
        let vars = inputs.iter().map(|t| s.graph.param(t.clone())).collect::<std::result::Result<Vec<_>, _>>()?;
        let root = f(&mut s, &vars)?;
        let grads = s.backward(root)?;
        let ig: Vec<Tensor<f64>> = vars.iter().map(|&v| s.graph.grad(v).expect("input grad")).collect();
        (grads, ig)
    };
    let eval = |store: &ParamStore<f64>, xs: &[Tensor<f64>]| -> Result<f64> {
        let mut s = Session::frozen(store);
        let vars = xs.iter().map(|t| s.input(t.clone())).collect::<Result<Vec<_>>>()?;
        let root = f(&mut s, &vars)?;
        Ok(s.value(root).item())
    };
    let mut report = ModelCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        evaluations: 0,
        checked: 0,
        skipped: 0,
    };
    // `probe(x)` evaluates the root with the element set to `x`; returns
    // the central differences at steps `h` and `h/2`.
    let differences = |orig: f64, probe: &mut dyn FnMut(f64) -> Result<f64>| -> Result<(f64, f64)> {
        let wide = (probe(orig + STEP)? - probe(orig - STEP)?) / (2.0 * STEP);
        let narrow = (probe(orig + STEP / 2.0)? - probe(orig - STEP / 2.0)?) / STEP;
        probe(orig)?;
        Ok((wide, narrow))
    };
    let compare = |analytic: &Tensor<f64>, numeric: &[(f64, f64)], report: &mut ModelCheck| {
        let scale = analytic
            .data()
            .iter()
            .copied()
            .chain(numeric.iter().map(|n| n.0))
            .fold(1e-6_f64, |m, v| m.max(v.abs()));
        for (&a, &(wide, narrow)) in analytic.data().iter().zip(numeric) {
            if (wide - narrow).abs() > SMOOTHNESS_TOL * scale {
                report.skipped += 1;
                continue;
            }
            report.checked += 1;
            let abs = (a - wide).abs();
            report.max_abs_err = report.max_abs_err.max(abs);
            report.max_rel_err = report.max_rel_err.max(abs / scale);
        }
    };

    let mut work = store.clone();
    for (id, analytic) in grads.iter() {
        let mut numeric = Vec::with_capacity(analytic.numel());
        for i in 0..analytic.numel() {
            let orig = work.get(id).data()[i];
            numeric.push(differences(orig, &mut |x| {
                work.get_mut(id).data_mut()[i] = x;
                eval(&work, inputs)
            })?);
        }
        compare(analytic, &numeric, &mut report);
    }
    let mut xs = inputs.to_vec();
    for (k, analytic) in input_grads.iter().enumerate() {
        let mut numeric = Vec::with_capacity(analytic.numel());
        for i in 0..analytic.numel() {
            let orig = xs[k].data()[i];
            numeric.push(differences(orig, &mut |x| {
                xs[k].data_mut()[i] = x;
                eval(store, &xs)
            })?);
        }
        compare(analytic, &numeric, &mut report);
    }
    report.evaluations = 5 * (report.checked + report.skipped);
    Ok(report)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// `sum(y * w)` for a fixed random `w`, so every output element matters.
fn project(s: &mut Session<f64>, y: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let w = uniform(rng, s.graph.shape(y), -1.0, 1.0);
    let w = s.input(w)?;
    let yw = s.graph.mul(y, w)?;
    Ok(s.graph.sum(yw, Axis::All)?)
}

/// Zero-initialized biases put ReLU inputs exactly on the kink when a
/// layer's input is all zero; fixtures draw them at random instead.
fn randomize_biases(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let t = store.get_mut(id);
        if t.data().iter().all(|&v| v == 0.0) {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
    }
}

fn tiny_backbone(input_size: usize, feature_dim: usize) -> BackboneConfig {
    BackboneConfig {
        in_channels: 3,
        input_size,
        stem_channels: 2,
        stage_blocks: [1, 1, 1],
        stage_mid: [2, 2, 2],
        stage_out: [3, 3, 3],
        feature_dim,
    }
}

fn fusion_case(seed: u64, spatial: bool, fault: Option<Primitive>) -> Result<ModelCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let block = FusionBlock::new(&mut store, "gate", 6, 2, GateActivation::Relu, Some(4), &mut rng)?;
    randomize_biases(&mut store, &mut rng);
    let shape: &[usize] = if spatial { &[2, 3, 3, 6] } else { &[3, 6] };
    let x = uniform(&mut rng, shape, -1.0, 1.0);
    check_model(&store, &[x], fault, |s, v| {
        let y = if spatial { block.gate(s, v[0])?.out } else { block.forward(s, v[0])? };
        project(s, y, &mut ChaCha8Rng::seed_from_u64(seed ^ 1))
    })
}

/// InfoNCE over normalized queries and positives against a filled bank.
fn info_nce_case(seed: u64, fault: Option<Primitive>) -> Result<ModelCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, d, k) = (3, 5, 7);
    let mut bank = MemoryBank::new(d, k)?;
    let raw = uniform(&mut rng, &[k, d], -1.0, 1.0).cast::<f32>();
    let keys = Tensor::from_fn(&[k, d], |i| {
        let row = raw.row(i / d);
        let n = row.iter().map(|x| x * x).sum::<f32>().sqrt();
        raw.data()[i] / n
    });
    bank.enqueue(&keys, None)?;
    let q = uniform(&mut rng, &[b, d], -1.0, 1.0);
    let kp = uniform(&mut rng, &[b, d], -1.0, 1.0);
    check_model(&ParamStore::new(), &[q, kp], fault, |s, v| {
        let q = s.graph.l2_normalize(v[0])?;
        let kp = s.graph.l2_normalize(v[1])?;
        let logits = build_logits(&mut s.graph, q, kp, &bank, 0.07, None)?;
        info_nce(&mut s.graph, logits)
    })
}

/// Full embedding pathway (patch backbone, both gates, projection) under
/// InfoNCE.
fn embedding_case(seed: u64, fault: Option<Primitive>) -> Result<ModelCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = crate::config::RunConfig::micro().dcml;
    cfg.backbone = tiny_backbone(6, 3);
    cfg.patches = PatchGeometry {
        image_size: [8, 8],
        patch_size: [6, 6],
        offsets: [[0, 0], [0, 2], [2, 0], [2, 2]],
    };
    cfg.embed_dim = Some(4);
    let mut store = ParamStore::new();
    let net = DcmlNet::new(&mut store, &cfg, 2, &mut rng)?;
    randomize_biases(&mut store, &mut rng);
    let mut bank = MemoryBank::new(4, 3)?;
    let keys = Tensor::from_fn(&[3, 4], |i| if i % 4 == i / 4 { 1.0f32 } else { 0.0 });
    bank.enqueue(&keys, None)?;
    let patches = uniform(&mut rng, &[8, 6, 6, 3], -1.0, 1.0);
    let extras = uniform(&mut rng, &[2, 2], -1.0, 1.0);
    let kp = uniform(&mut rng, &[2, 4], -1.0, 1.0);
    check_model(&store, &[patches, extras, kp], fault, |s, v| {
        let q = net.embed(s, v[0], Some(v[1]))?;
        let kp = s.graph.l2_normalize(v[2])?;
        let logits = build_logits(&mut s.graph, q, kp, &bank, 0.5, None)?;
        info_nce(&mut s.graph, logits)
    })
}

#[derive(Clone, Copy)]
enum DeagingTerm {
    AbsRho,
    Identity,
    Total,
}

fn deaging_case(seed: u64, term: DeagingTerm, fault: Option<Primitive>) -> Result<ModelCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let model = DeagingModel::new(&mut store, &tiny_backbone(8, 5), 4, 3, &mut rng)?;
    randomize_biases(&mut store, &mut rng);
    let f = uniform(&mut rng, &[6, 5], -1.0, 1.0);
    let labels = [0, 1, 2, 0, 1, 2];
    check_model(&store, &[f], fault, |s, v| {
        let l = model.losses(s, v[0], &labels)?;
        Ok(match term {
            DeagingTerm::AbsRho => l.abs_rho,
            DeagingTerm::Identity => l.id_loss,
            DeagingTerm::Total => l.total,
        })
    })
}

fn race_case(seed: u64, fault: Option<Primitive>) -> Result<ModelCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let enc = RaceEncoder::new(&mut store, &tiny_backbone(8, 4), &mut rng)?;
    randomize_biases(&mut store, &mut rng);
    let images = uniform(&mut rng, &[2, 8, 8, 3], -1.0, 1.0);
    check_model(&store, &[images], fault, |s, v| {
        let logits = enc.logits(s, v[0])?;
        race_loss(&mut s.graph, logits, &[2, 0])
    })
}

/// Every primitive, both fusion-gate forms and every loss. With `fault`
/// set, that primitive's own entry runs with a corrupted backward rule;
/// the composite entries always run clean.
pub fn gradcheck_suite(seed: u64, fault: Option<Primitive>) -> GradcheckReport {
    let mut entries = Vec::new();
    for kind in Primitive::ALL {
        let r = check_primitive(kind, seed, fault == Some(kind))
            .map(|c| ModelCheck {
                max_rel_err: c.max_rel_err,
                max_abs_err: c.max_abs_err,
                evaluations: c.evaluations,
                checked: c.evaluations / 2,
                skipped: 0,
            })
            .map_err(Into::into);
        entries.push(entry(&format!("primitive/{}", kind.name()), r));
    }
    let s = seed.wrapping_mul(31);
    entries.push(entry("fusion/gate_vector", fusion_case(s + 1, false, None)));
    entries.push(entry("fusion/gate_map", fusion_case(s + 2, true, None)));
    entries.push(entry("loss/info_nce", info_nce_case(s + 3, None)));
    entries.push(entry("loss/embedding_info_nce", embedding_case(s + 4, None)));
    entries.push(entry("loss/abs_correlation", deaging_case(s + 5, DeagingTerm::AbsRho, None)));
    entries.push(entry("loss/identity_ce", deaging_case(s + 5, DeagingTerm::Identity, None)));
    entries.push(entry("loss/deaging_total", deaging_case(s + 5, DeagingTerm::Total, None)));
    entries.push(entry("loss/race_ce", race_case(s + 6, None)));
    let passed = entries.iter().all(|e| e.passed);
    GradcheckReport {
        seed,
        tolerance: TOLERANCE,
        entries,
        passed,
    }
}
