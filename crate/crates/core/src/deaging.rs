//! Age-invariant identity features.
//!
//! A backbone `K` maps a face to `f`; a residual module `R` splits it into
//! an age part `f_age = R(f)` and an identity part `f_id = f - R(f)`. A
//! canonical mapping `C` projects both to scalars whose batch correlation
//! `rho` the adversarial schedule alternately maximizes (updating `C`) and
//! minimizes together with an identity loss (updating `K`, `R` and the
//! identity head).

use dcml_tensor::{Axis, Element, Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::batch::{chunks, gather_rows, stack_images};
use crate::data::FaceSample;
use crate::error::{Error, Result};
use crate::io::JsonLog;
use crate::nn::{Backbone, BackboneConfig, FcStack, Linear, LrSchedule, Optimizer, OptimizerKind, ParamGroup, ParamStore, Session};

/// Variance floor of the correlation denominator.
pub const EPSILON: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeagingConfig {
    pub backbone: BackboneConfig,
    pub canonical_hidden: usize,
    pub batch_size: usize,
    /// Steps of `C` alone before the first measurement of `|rho|`.
    pub warmup_steps: usize,
    pub max_steps: usize,
    pub min_steps: usize,
    pub cycles: usize,
    pub optimizer: OptimizerKind,
    /// Rate for `K`, `R` and the identity head; epochs count images seen.
    pub schedule: LrSchedule,
    pub canonical_schedule: LrSchedule,
}

impl DeagingConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.schedule.validate()?;
        self.canonical_schedule.validate()?;
        if self.batch_size < 2 || self.canonical_hidden == 0 {
            return Err(Error::Config("de-aging needs batch_size >= 2 and a positive canonical width".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DeagingModel {
    pub backbone: Backbone,
    pub residual: FcStack,
    pub canonical: FcStack,
    pub id_head: Linear,
    pub backbone_params: ParamGroup,
    pub residual_params: ParamGroup,
    pub canonical_params: ParamGroup,
    pub head_params: ParamGroup,
}

/// Pearson correlation node plus whether the variance floor kicked in.
#[derive(Clone, Copy, Debug)]
pub struct Correlation {
    pub rho: Var,
    pub stabilized: bool,
}

/// `rho = Cov(a, b) / sqrt(Var(a) Var(b))` over `[N]` vectors, population
/// statistics. When either variance is at most `EPSILON` the denominator
/// becomes `sqrt((Var(a) + eps)(Var(b) + eps))` and a warning is raised.
pub fn canonical_correlation<T: Element>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Correlation> {
    let (sa, sb) = (g.shape(a).to_vec(), g.shape(b).to_vec());
    if sa.len() != 1 || sa != sb || sa[0] < 2 {
        return Err(Error::Config(format!("correlation needs two [N >= 2] vectors, got {sa:?} and {sb:?}")));
    }
    let ma = g.mean(a, Axis::All)?;
    let mb = g.mean(b, Axis::All)?;
    let ca = g.sub(a, ma)?;
    let cb = g.sub(b, mb)?;
    let prod = g.mul(ca, cb)?;
    let cov = g.mean(prod, Axis::All)?;
    let va = g.variance(a)?;
    let vb = g.variance(b)?;
    let stabilized = g.value(va).item().as_f64() <= EPSILON || g.value(vb).item().as_f64() <= EPSILON;
    let (va, vb) = if stabilized {
        g.warn(format!(
            "near-zero variance in correlation ({:.3e}, {:.3e}); denominator stabilized",
            g.value(va).item().as_f64(),
            g.value(vb).item().as_f64()
        ));
        let eps = g.constant(Tensor::scalar(T::of(EPSILON)))?;
        (g.add(va, eps)?, g.add(vb, eps)?)
    } else {
        (va, vb)
    };
    let vv = g.mul(va, vb)?;
    let den = g.sqrt(vv)?;
    Ok(Correlation {
        rho: g.div(cov, den)?,
        stabilized,
    })
}

/// Plain-number correlation with the same stabilization, for logging.
pub fn correlation_value(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
    let va = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n;
    let vb = b.iter().map(|y| (y - mb).powi(2)).sum::<f64>() / n;
    if va <= EPSILON || vb <= EPSILON {
        cov / ((va + EPSILON) * (vb + EPSILON)).sqrt()
    } else {
        cov / (va * vb).sqrt()
    }
}

/// Loss terms of one batch.
#[derive(Clone, Copy, Debug)]
pub struct DeagingLosses {
    pub rho: Var,
    pub abs_rho: Var,
    pub id_loss: Var,
    pub total: Var,
    pub stabilized: bool,
}

impl DeagingModel {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        backbone: &BackboneConfig,
        canonical_hidden: usize,
        num_identities: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let d = backbone.feature_dim;
        let (backbone, backbone_params) = store.group(|s| Backbone::new(s, "deaging.backbone", backbone, rng));
        let backbone = backbone?;
        let (residual, residual_params) = store.group(|s| FcStack::new(s, "deaging.residual", &[d, d, d], true, rng));
        let (canonical, canonical_params) = store.group(|s| {
            FcStack::new(
                s,
                "deaging.canonical",
                &[d, canonical_hidden, canonical_hidden, 1],
                false,
                rng,
            )
        });
        let (id_head, head_params) = store.group(|s| Linear::new(s, "deaging.id_head", d, num_identities, rng));
        Ok(DeagingModel {
            backbone,
            residual,
            canonical,
            id_head,
            backbone_params,
            residual_params,
            canonical_params,
            head_params,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.config.feature_dim
    }

    /// `(f_age, f_id)` with `f_age = R(f)` and `f_id = f - R(f)`.
    pub fn factorize<T: Element>(&self, s: &mut Session<T>, f: Var) -> Result<(Var, Var)> {
        let age = self.residual.forward(s, f)?;
        let id = s.graph.sub(f, age)?;
        Ok((age, id))
    }

    /// `C` applied row-wise, flattened to `[N]`.
    pub fn canonical<T: Element>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let n = s.graph.shape(x)[0];
        let y = self.canonical.forward(s, x)?;
        Ok(s.graph.reshape(y, &[n])?)
    }

    /// Age-invariant identity features of `[N, H, W, C]` images.
    pub fn identity_features<T: Element>(&self, s: &mut Session<T>, images: Var) -> Result<Var> {
        let f = self.backbone.forward(s, images)?;
        Ok(self.factorize(s, f)?.1)
    }

    /// `|rho(C(f_id), C(f_age))|`, identity cross-entropy on `f_id`, and
    /// their sum, from backbone features `f`.
    pub fn losses<T: Element>(&self, s: &mut Session<T>, f: Var, labels: &[usize]) -> Result<DeagingLosses> {
        let (age, id) = self.factorize(s, f)?;
        let corr = self.correlation(s, id, age)?;
        let abs_rho = s.graph.abs(corr.rho)?;
        let logits = self.id_head.forward(s, id)?;
        let id_loss = classification_loss(&mut s.graph, logits, labels, self.id_head.out_dim)?;
        let total = s.graph.add(abs_rho, id_loss)?;
        Ok(DeagingLosses {
            rho: corr.rho,
            abs_rho,
            id_loss,
            total,
            stabilized: corr.stabilized,
        })
    }

    pub fn correlation<T: Element>(&self, s: &mut Session<T>, id: Var, age: Var) -> Result<Correlation> {
        let ci = self.canonical(s, id)?;
        let ca = self.canonical(s, age)?;
        canonical_correlation(&mut s.graph, ci, ca)
    }
}

/// Mean softmax cross-entropy of `[N, classes]` logits against labels.
pub fn classification_loss<T: Element>(g: &mut Graph<T>, logits: Var, labels: &[usize], classes: usize) -> Result<Var> {
    let shape = g.shape(logits);
    if shape.len() != 2 || shape[1] != classes || shape[0] != labels.len() || labels.is_empty() {
        return Err(Error::Config(format!(
            "{} labels for logits of shape {shape:?} over {classes} classes",
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Label { label, classes });
    }
    Ok(g.cross_entropy(logits, labels)?)
}

#[derive(Clone, Debug, Serialize)]
struct LogRecord<'a> {
    phase: &'a str,
    step: usize,
    rho: f64,
    #[serde(rename = "L_id")]
    l_id: Option<f64>,
}

/// Summary of an adversarial run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeagingReport {
    /// `|rho|` over the training images after the warm-up of `C`.
    pub initial_abs_rho: f64,
    /// `|rho|` over the training images after the last minimization phase.
    pub final_abs_rho: f64,
    /// Identity top-1 accuracy (%) on held-out ages.
    pub identity_accuracy: f64,
    pub chance_accuracy: f64,
    pub min_steps: usize,
    pub max_steps: usize,
    pub stabilized_steps: usize,
}

/// Identity labels of an aging corpus plus the held-out split: identity
/// `i` holds out its `(i mod ages)`-th image.
pub fn aging_split(corpus: &[FaceSample]) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let labels: Vec<usize> = corpus.iter().map(|s| s.info.person_id as usize).collect();
    let mut seen = std::collections::HashMap::new();
    let (mut train, mut held) = (Vec::new(), Vec::new());
    let max_id = labels.iter().copied().max().unwrap_or(0) + 1;
    let per_id = corpus.len() / max_id.max(1);
    for (i, &id) in labels.iter().enumerate() {
        let j = seen.entry(id).or_insert(0usize);
        if per_id > 1 && *j == id % per_id {
            held.push(i);
        } else {
            train.push(i);
        }
        *j += 1;
    }
    (labels, train, held)
}

fn backbone_features(model: &DeagingModel, store: &ParamStore<f32>, corpus: &[FaceSample], idx: &[usize]) -> Result<Tensor<f32>> {
    let mut rows = Vec::new();
    for chunk in chunks(idx, 64) {
        let mut s = Session::frozen(store);
        let x = s.input(stack_images(corpus, chunk)?)?;
        let f = model.backbone.forward(&mut s, x)?;
        rows.push(s.value(f).clone());
    }
    let refs: Vec<_> = rows.iter().collect();
    Ok(concat_rows(&refs))
}

fn concat_rows(parts: &[&Tensor<f32>]) -> Tensor<f32> {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Tensor::new(&shape, data).expect("row concat")
}

/// `|rho|` over all of `features` with the current `C`.
fn measure_abs_rho(model: &DeagingModel, store: &ParamStore<f32>, features: &Tensor<f32>) -> Result<f64> {
    let mut s = Session::frozen(store);
    let f = s.input(features.clone())?;
    let (age, id) = model.factorize(&mut s, f)?;
    let ci = model.canonical(&mut s, id)?;
    let ca = model.canonical(&mut s, age)?;
    let a: Vec<f64> = s.value(ci).data().iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = s.value(ca).data().iter().map(|&v| v as f64).collect();
    Ok(correlation_value(&a, &b).abs())
}

fn check_finite(v: f64, phase: &str, step: usize, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            stage: format!("de-aging {phase}"),
            step,
            what: what.into(),
        })
    }
}

/// Runs `steps` ascent steps of `|rho|` on `C` over fixed features.
#[allow(clippy::too_many_arguments)]
fn maximize(
    model: &DeagingModel,
    store: &mut ParamStore<f32>,
    opt: &mut Optimizer<f32>,
    features: &Tensor<f32>,
    steps: usize,
    batch: usize,
    rng: &mut impl Rng,
    phase: &str,
    log: &mut JsonLog,
    report: &mut DeagingReport,
) -> Result<()> {
    let n = features.shape()[0];
    let mut order: Vec<usize> = (0..n).collect();
    for step in 0..steps {
        order.shuffle(rng);
        let idx = &order[..batch.min(n)];
        let grads = {
            let mut s = Session::new(store, |id| model.canonical_params.contains(id));
            let f = s.input(gather_rows(features, idx))?;
            let (age, id) = model.factorize(&mut s, f)?;
            let corr = model.correlation(&mut s, id, age)?;
            report.stabilized_steps += corr.stabilized as usize;
            let rho = s.value(corr.rho).item() as f64;
            check_finite(rho, phase, step, "rho")?;
            log.record(&LogRecord {
                phase,
                step: report.max_steps,
                rho,
                l_id: None,
            })?;
            let abs = s.graph.abs(corr.rho)?;
            let loss = s.graph.scale(abs, -1.0)?;
            s.backward(loss)?
        };
        opt.step(store, &grads, 0)?;
        report.max_steps += 1;
    }
    Ok(())
}

/// Alternating schedule: warm up `C`, then `cycles` x (max-phase on `C`,
/// min-phase on `K`, `R` and the identity head). Only the held-out age of
/// each identity is kept out of training; it measures identity accuracy.
pub fn adversarial_train(
    model: &DeagingModel,
    store: &mut ParamStore<f32>,
    corpus: &[FaceSample],
    cfg: &DeagingConfig,
    rng: &mut impl Rng,
    log: &mut JsonLog,
) -> Result<DeagingReport> {
    cfg.validate()?;
    let (labels, train, held) = aging_split(corpus);
    let classes = model.id_head.out_dim;
    let mut report = DeagingReport {
        initial_abs_rho: 0.0,
        final_abs_rho: 0.0,
        identity_accuracy: 0.0,
        chance_accuracy: 100.0 / classes as f64,
        min_steps: 0,
        max_steps: 0,
        stabilized_steps: 0,
    };
    let mut c_opt = Optimizer::new(cfg.optimizer, cfg.canonical_schedule.clone());
    let mut k_opt = Optimizer::new(cfg.optimizer, cfg.schedule.clone());
    let bs = cfg.batch_size;

    let features = backbone_features(model, store, corpus, &train)?;
    maximize(model, store, &mut c_opt, &features, cfg.warmup_steps, bs, rng, "warmup", log, &mut report)?;
    report.initial_abs_rho = measure_abs_rho(model, store, &features)?;

    let mut order = train.clone();
    let mut cursor = order.len();
    for _ in 0..cfg.cycles {
        let features = backbone_features(model, store, corpus, &train)?;
        maximize(model, store, &mut c_opt, &features, cfg.max_steps, bs, rng, "max", log, &mut report)?;
        for _ in 0..cfg.min_steps {
            if cursor + bs > order.len() {
                order.shuffle(rng);
                cursor = 0;
            }
            let idx = &order[cursor..cursor + bs.min(order.len())];
            cursor += bs;
            let epoch = report.min_steps * bs / train.len();
            let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let grads = {
                let mut s = Session::new(store, |id| !model.canonical_params.contains(id));
                let x = s.input(stack_images(corpus, idx)?)?;
                let f = model.backbone.forward(&mut s, x)?;
                let l = model.losses(&mut s, f, &batch_labels)?;
                report.stabilized_steps += l.stabilized as usize;
                let rho = s.value(l.rho).item() as f64;
                let l_id = s.value(l.id_loss).item() as f64;
                check_finite(rho + l_id, "min", report.min_steps, "loss")?;
                log.record(&LogRecord {
                    phase: "min",
                    step: report.min_steps,
                    rho,
                    l_id: Some(l_id),
                })?;
                s.backward(l.total)?
            };
            k_opt.step(store, &grads, epoch)?;
            report.min_steps += 1;
        }
    }
    let features = backbone_features(model, store, corpus, &train)?;
    report.final_abs_rho = measure_abs_rho(model, store, &features)?;
    report.identity_accuracy = identity_accuracy(model, store, corpus, &held, &labels)?;
    Ok(report)
}

/// Top-1 accuracy (%) of the identity head on `f_id` of `idx`.
pub fn identity_accuracy(
    model: &DeagingModel,
    store: &ParamStore<f32>,
    corpus: &[FaceSample],
    idx: &[usize],
    labels: &[usize],
) -> Result<f64> {
    if idx.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for chunk in chunks(idx, 64) {
        let mut s = Session::frozen(store);
        let x = s.input(stack_images(corpus, chunk)?)?;
        let id = model.identity_features(&mut s, x)?;
        let logits = model.id_head.forward(&mut s, id)?;
        let t = s.value(logits);
        for (r, &i) in chunk.iter().enumerate() {
            let row = t.row(r);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            hits += (best == labels[i]) as usize;
        }
    }
    Ok(100.0 * hits as f64 / idx.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rho_of(a: &[f64], b: &[f64]) -> (f64, bool) {
        let mut g = Graph::<f64>::new();
        let va = g.constant(Tensor::from_f64(&[a.len()], a).unwrap()).unwrap();
        let vb = g.constant(Tensor::from_f64(&[b.len()], b).unwrap()).unwrap();
        let c = canonical_correlation(&mut g, va, vb).unwrap();
        (g.value(c.rho).item(), c.stabilized)
    }

    #[test]
    fn self_and_anti_correlation() {
        let a = [0.3, -1.0, 2.0, 0.7];
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((rho_of(&a, &a).0 - 1.0).abs() < 1e-12);
        assert!((rho_of(&a, &neg).0 + 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_input_is_flagged() {
        let (rho, flagged) = rho_of(&[1.0; 4], &[1.0, 2.0, 3.0, 4.0]);
        assert!(flagged);
        assert_eq!(rho, 0.0);
    }

    #[test]
    fn rejects_single_sample() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_f64(&[1], &[1.0]).unwrap()).unwrap();
        assert!(canonical_correlation(&mut g, a, a).is_err());
    }

    #[test]
    fn zero_residual_keeps_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let mut cfg = BackboneConfig::desk();
        cfg.feature_dim = 6;
        let m = DeagingModel::new(&mut store, &cfg, 4, 3, &mut rng).unwrap();
        for id in m.residual_params.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let mut s = Session::frozen(&store);
        let f = Tensor::from_fn(&[2, 6], |i| i as f64 * 0.1 - 0.3);
        let fv = s.input(f.clone()).unwrap();
        let (age, id) = m.factorize(&mut s, fv).unwrap();
        assert!(s.value(age).data().iter().all(|&v| v == 0.0));
        assert_eq!(s.value(id), &f);
    }

    #[test]
    fn label_out_of_range() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(classification_loss(&mut g, l, &[0, 3], 3), Err(Error::Label { label: 3, .. })));
    }
}
