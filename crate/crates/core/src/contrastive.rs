//! Momentum-contrast training of the fused patch encoder.
//!
//! The query encoder embeds a parent; the key encoder, an exponential
//! moving average of the query encoder, embeds the matching child. Logits
//! are the cosine of the query with its key followed by its cosines with
//! every key in a FIFO memory bank, divided by the temperature; the target
//! is always column 0.

use std::collections::VecDeque;
use std::str::FromStr;

use dcml_tensor::{Axis, Element, Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::batch::{chunks, gather_rows, normalize_pixel};
use crate::data::{FaceSample, KinPair};
use crate::error::{Error, Result};
use crate::fusion::{fuse_modalities, FusionBlock, GateActivation};
use crate::io::JsonLog;
use crate::nn::{patch_batch, Backbone, BackboneConfig, LrSchedule, Optimizer, OptimizerKind, ParamStore, PatchGeometry, Session};

/// Tolerance on the norm of embeddings entering the bank.
pub const UNIT_TOL: f64 = 1e-5;

/// `u.v / (|u| |v|)`. A zero vector is stabilized with `1e-12` in the
/// denominator; the flag reports it.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<(f64, bool)> {
    if u.len() != v.len() || u.is_empty() {
        return Err(Error::Embedding(format!("cosine of lengths {} and {}", u.len(), v.len())));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let den = nu * nv;
    if den == 0.0 {
        log::warn!("cosine similarity of a zero vector");
        return Ok((dot / 1e-12, true));
    }
    Ok((dot / den, false))
}

/// `target <- m target + (1 - m) query`, elementwise.
pub fn momentum_update<T: Element>(target: &mut ParamStore<T>, query: &ParamStore<T>, m: f64) -> Result<()> {
    target.ensure_same_layout(query)?;
    let (m, rest) = (T::of(m), T::of(1.0 - m));
    for id in query.ids() {
        let q = query.get(id).data();
        for (t, &q) in target.get_mut(id).data_mut().iter_mut().zip(q) {
            *t = m * *t + rest * q;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BankEntry {
    /// Enqueue order, strictly increasing.
    pub stamp: u64,
    /// Group of the sample the key was computed from (its family during
    /// training), if known.
    pub group: Option<usize>,
    pub key: Vec<f32>,
}

/// Fixed-capacity FIFO of detached unit-norm keys.
#[derive(Clone, Debug)]
pub struct MemoryBank {
    dim: usize,
    capacity: usize,
    entries: VecDeque<BankEntry>,
    next_stamp: u64,
}

impl MemoryBank {
    pub fn new(dim: usize, capacity: usize) -> Result<Self> {
        if dim == 0 || capacity == 0 {
            return Err(Error::Config(format!("bank needs positive dim and capacity, got {dim} and {capacity}")));
        }
        Ok(MemoryBank {
            dim,
            capacity,
            entries: VecDeque::with_capacity(capacity),
            next_stamp: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of keys ever enqueued.
    pub fn fill_count(&self) -> u64 {
        self.next_stamp
    }

    /// Newest first.
    pub fn entries(&self) -> impl Iterator<Item = &BankEntry> {
        self.entries.iter().rev()
    }

    /// Appends the rows of `[B, dim]` keys, evicting the oldest entries
    /// beyond capacity. `groups`, when given, has one entry per row.
    pub fn enqueue(&mut self, keys: &Tensor<f32>, groups: Option<&[usize]>) -> Result<()> {
        let shape = keys.shape();
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::Embedding(format!("bank of dim {} got keys {shape:?}", self.dim)));
        }
        if groups.is_some_and(|s| s.len() != shape[0]) {
            return Err(Error::Embedding("one group per key required".into()));
        }
        for r in 0..shape[0] {
            let n = keys.row(r).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if (n - 1.0).abs() > UNIT_TOL {
                return Err(Error::Embedding(format!("key {r} has norm {n}, expected 1")));
            }
        }
        for r in 0..shape[0] {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(BankEntry {
                stamp: self.next_stamp,
                group: groups.map(|s| s[r]),
                key: keys.row(r).to_vec(),
            });
            self.next_stamp += 1;
        }
        Ok(())
    }

    /// `[dim, len]` matrix of the keys, newest first.
    pub fn keys_transposed<T: Element>(&self) -> Tensor<T> {
        let k = self.len();
        let mut data = vec![T::zero(); self.dim * k];
        for (j, e) in self.entries().enumerate() {
            for (i, &v) in e.key.iter().enumerate() {
                data[i * k + j] = T::of(v as f64);
            }
        }
        Tensor::new(&[self.dim, k], data).expect("bank shape")
    }
}

/// Logit offset that removes a bank column from the softmax.
const MASKED: f64 = -1e4;

/// `[N, 1 + len(bank)]` logits: `[q.k+, q.n_1, ..., q.n_K] / tau` for
/// unit-norm `q` and `k+`. When `exclude[i]` is given, bank keys tagged
/// with that group are masked out of row `i`. Training tags keys with
/// their family, so neither a stale copy of the positive nor any other
/// relative acts as a negative.
pub fn build_logits<T: Element>(
    g: &mut Graph<T>,
    q: Var,
    k_pos: Var,
    bank: &MemoryBank,
    tau: f64,
    exclude: Option<&[usize]>,
) -> Result<Var> {
    if bank.is_empty() {
        return Err(Error::BankWarmUp);
    }
    let (sq, sk) = (g.shape(q).to_vec(), g.shape(k_pos).to_vec());
    if sq.len() != 2 || sq != sk || sq[1] != bank.dim() {
        return Err(Error::Embedding(format!(
            "query {sq:?} and key {sk:?} must both be [N, {}]",
            bank.dim()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let n = sq[0];
    let qk = g.mul(q, k_pos)?;
    let pos = g.sum(qk, Axis::Last)?;
    let pos = g.reshape(pos, &[n, 1])?;
    let bank_t = g.constant(bank.keys_transposed())?;
    let neg = g.matmul(q, bank_t)?;
    let row = g.concat(&[pos, neg])?;
    let mut logits = g.scale(row, 1.0 / tau)?;
    if let Some(exclude) = exclude {
        let k = bank.len();
        let mut mask = vec![T::zero(); n * (1 + k)];
        let mut any = false;
        for (i, &group) in exclude.iter().enumerate().take(n) {
            for (j, e) in bank.entries().enumerate() {
                if e.group == Some(group) {
                    mask[i * (1 + k) + 1 + j] = T::of(MASKED);
                    any = true;
                }
            }
        }
        if any {
            let mask = g.constant(Tensor::new(&[n, 1 + k], mask)?)?;
            logits = g.add(logits, mask)?;
        }
    }
    Ok(logits)
}

/// Mean over rows of `-log softmax(row)[0]`, max-subtracted.
pub fn info_nce<T: Element>(g: &mut Graph<T>, logits: Var) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[1] < 2 {
        return Err(Error::Embedding(format!("logit rows need a positive and a negative, got {shape:?}")));
    }
    if !g.value(logits).is_finite() {
        return Err(Error::NonFinite {
            stage: "info_nce".into(),
            step: 0,
            what: "logits".into(),
        });
    }
    Ok(g.cross_entropy(logits, &vec![0; shape[0]])?)
}

/// Which frozen modalities join the face features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModalitySet {
    pub race: bool,
    pub deaging: bool,
}

impl ModalitySet {
    pub const FACE: ModalitySet = ModalitySet {
        race: false,
        deaging: false,
    };
    pub const ALL: ModalitySet = ModalitySet {
        race: true,
        deaging: true,
    };

    pub fn name(self) -> &'static str {
        match (self.race, self.deaging) {
            (false, false) => "face",
            (true, false) => "face+race",
            (false, true) => "face+deaging",
            (true, true) => "face+race+deaging",
        }
    }
}

impl FromStr for ModalitySet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut set = ModalitySet::FACE;
        let mut face = false;
        for part in s.split('+').map(str::trim) {
            match part {
                "face" => face = true,
                "race" => set.race = true,
                "deaging" => set.deaging = true,
                other => return Err(Error::Config(format!("unknown modality {other:?}"))),
            }
        }
        if !face {
            return Err(Error::Config(format!("modality set {s:?} must include face")));
        }
        Ok(set)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    /// Patch backbone; `4 * feature_dim` is the face feature width.
    pub backbone: BackboneConfig,
    pub patches: PatchGeometry,
    pub r1: usize,
    pub r2: usize,
    pub gate_activation: GateActivation,
    /// Projection width after modality fusion; `None` keeps the fused width.
    pub embed_dim: Option<usize>,
    pub momentum: f64,
    pub temperature: f64,
    pub bank_size: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub schedule: LrSchedule,
    pub modalities: ModalitySet,
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.patches.validate()?;
        self.schedule.validate()?;
        if self.backbone.input_size != self.patches.patch_size[0] || self.patches.patch_size[0] != self.patches.patch_size[1] {
            return Err(Error::Config(format!(
                "patch size {:?} must be square and match backbone input {}",
                self.patches.patch_size, self.backbone.input_size
            )));
        }
        if !(0.0..=1.0).contains(&self.momentum) || !(self.temperature > 0.0) {
            return Err(Error::Config("momentum must lie in [0, 1] and temperature be positive".into()));
        }
        if self.bank_size == 0 || self.batch_size == 0 || self.r1 == 0 || self.r2 == 0 {
            return Err(Error::Config("bank, batch and reduction ratios must be positive".into()));
        }
        Ok(())
    }
}

/// Patch backbone, patch-level gate and modality-level gate with projection.
#[derive(Clone, Debug)]
pub struct DcmlNet {
    pub backbone: Backbone,
    pub patch_fusion: FusionBlock,
    pub modal_fusion: FusionBlock,
    pub patches: PatchGeometry,
    pub extra_dim: usize,
}

impl DcmlNet {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        cfg: &ContrastiveConfig,
        extra_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let backbone = Backbone::new(store, "dcml.backbone", &cfg.backbone, rng)?;
        let face = 4 * cfg.backbone.feature_dim;
        let patch_fusion = FusionBlock::new(store, "dcml.patch_fusion", face, cfg.r1, cfg.gate_activation, None, rng)?;
        let modal_fusion = FusionBlock::new(
            store,
            "dcml.modal_fusion",
            face + extra_dim,
            cfg.r2,
            cfg.gate_activation,
            cfg.embed_dim,
            rng,
        )?;
        Ok(DcmlNet {
            backbone,
            patch_fusion,
            modal_fusion,
            patches: cfg.patches.clone(),
            extra_dim,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.modal_fusion.out_dim()
    }

    /// `[4N, h, w, C]` sample-major patches plus optional `[N, extra]`
    /// modality features to `[N, d]` unit-norm embeddings.
    pub fn embed<T: Element>(&self, s: &mut Session<T>, patches: Var, extras: Option<Var>) -> Result<Var> {
        let u = self.backbone.forward(s, patches)?;
        let [rows, c] = [s.graph.shape(u)[0], s.graph.shape(u)[1]];
        if rows % 4 != 0 {
            return Err(Error::Geometry(format!("{rows} patch rows is not a multiple of 4")));
        }
        let face = s.graph.reshape(u, &[rows / 4, 4 * c])?;
        let face = self.patch_fusion.gate(s, face)?.out;
        let mut parts = vec![face];
        match (extras, self.extra_dim) {
            (Some(e), d) if d > 0 => parts.push(e),
            (None, 0) => {}
            (e, d) => {
                return Err(Error::Config(format!(
                    "network expects {d} modality channels, got {:?}",
                    e.map(|e| s.graph.shape(e).to_vec())
                )))
            }
        }
        fuse_modalities(&self.modal_fusion, s, &parts)
    }

    /// Embeddings of `idx` with the parameters in `store`, no gradients.
    pub fn embed_samples(
        &self,
        store: &ParamStore<f32>,
        samples: &[FaceSample],
        idx: &[usize],
        extras: Option<&Tensor<f32>>,
    ) -> Result<Tensor<f32>> {
        let mut data = Vec::with_capacity(idx.len() * self.embed_dim());
        for chunk in chunks(idx, 32) {
            let mut s = Session::frozen(store);
            let e = self.inputs(&mut s, samples, chunk, extras)?;
            let y = self.embed(&mut s, e.0, e.1)?;
            data.extend_from_slice(s.value(y).data());
        }
        Ok(Tensor::new(&[idx.len(), self.embed_dim()], data)?)
    }

    fn inputs<T: Element>(
        &self,
        s: &mut Session<T>,
        samples: &[FaceSample],
        idx: &[usize],
        extras: Option<&Tensor<f32>>,
    ) -> Result<(Var, Option<Var>)> {
        let images: Vec<_> = idx.iter().map(|&i| &samples[i].image).collect();
        let patches = patch_batch(&images, &self.patches)?.map(|v| normalize_pixel(v as f64) as f32).cast();
        let p = s.input(patches)?;
        let e = match extras {
            Some(t) => Some(s.input(gather_rows(t, idx).cast())?),
            None => None,
        };
        Ok((p, e))
    }
}

/// Query and key parameter sets, the bank and the two coefficients.
#[derive(Clone, Debug)]
pub struct ContrastiveState {
    pub query: ParamStore<f32>,
    pub key: ParamStore<f32>,
    pub bank: MemoryBank,
    pub momentum: f64,
    pub temperature: f64,
}

impl ContrastiveState {
    /// Key encoder starts as an exact copy of the query encoder.
    pub fn new(query: ParamStore<f32>, dim: usize, cfg: &ContrastiveConfig) -> Result<Self> {
        Ok(ContrastiveState {
            key: query.clone(),
            query,
            bank: MemoryBank::new(dim, cfg.bank_size)?,
            momentum: cfg.momentum,
            temperature: cfg.temperature,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveReport {
    pub steps: usize,
    /// Mean loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

#[derive(Serialize)]
struct LogRecord {
    epoch: usize,
    step: usize,
    loss: f64,
    bank: usize,
}

/// Fills the bank with key embeddings of `images` (up to capacity),
/// tagged with their families.
pub fn prefill_bank(
    net: &DcmlNet,
    state: &mut ContrastiveState,
    samples: &[FaceSample],
    images: &[usize],
    extras: Option<&Tensor<f32>>,
) -> Result<()> {
    let keys = net.embed_samples(&state.key, samples, images, extras)?;
    state.bank.enqueue(&keys, Some(&families(samples, images)))
}

fn families(samples: &[FaceSample], idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|&i| samples[i].info.family_id as usize).collect()
}

/// Minimizes InfoNCE over (parent query, child key) pairs. Bank entries
/// from the query's own family are masked.
#[allow(clippy::too_many_arguments)]
pub fn train_contrastive(
    net: &DcmlNet,
    state: &mut ContrastiveState,
    samples: &[FaceSample],
    pairs: &[KinPair],
    extras: Option<&Tensor<f32>>,
    cfg: &ContrastiveConfig,
    rng: &mut impl Rng,
    log: &mut JsonLog,
) -> Result<ContrastiveReport> {
    if pairs.is_empty() {
        return Err(Error::Data("no training pairs".into()));
    }
    let mut opt = Optimizer::new(cfg.optimizer, cfg.schedule.clone());
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut report = ContrastiveReport {
        steps: 0,
        epoch_losses: Vec::with_capacity(cfg.epochs),
    };
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for batch in chunks(&order, cfg.batch_size) {
            let parents: Vec<usize> = batch.iter().map(|&i| pairs[i].parent).collect();
            let children: Vec<usize> = batch.iter().map(|&i| pairs[i].child).collect();
            let groups = families(samples, &children);
            let keys = net.embed_samples(&state.key, samples, &children, extras)?;
            let (loss, grads) = {
                let mut s = Session::train(&state.query);
                let (p, e) = net.inputs(&mut s, samples, &parents, extras)?;
                let q = net.embed(&mut s, p, e)?;
                let k = s.input(keys.clone())?;
                let logits = build_logits(&mut s.graph, q, k, &state.bank, state.temperature, Some(&groups))?;
                let loss = info_nce(&mut s.graph, logits)?;
                let v = s.value(loss).item() as f64;
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        stage: "contrastive".into(),
                        step: report.steps,
                        what: "loss".into(),
                    });
                }
                (v, s.backward(loss)?)
            };
            opt.step(&mut state.query, &grads, epoch)?;
            momentum_update(&mut state.key, &state.query, state.momentum)?;
            state.bank.enqueue(&keys, Some(&groups))?;
            log.record(&LogRecord {
                epoch,
                step: report.steps,
                loss,
                bank: state.bank.len(),
            })?;
            sum += loss;
            count += 1;
            report.steps += 1;
        }
        report.epoch_losses.push(sum / count as f64);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_rows(rows: &[&[f32]]) -> Tensor<f32> {
        let d = rows[0].len();
        Tensor::new(&[rows.len(), d], rows.concat()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let (c, _) = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - 0.5f64.sqrt()).abs() < 1e-15);
        let (c, flagged) = cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!(flagged && c == 0.0);
    }

    #[test]
    fn momentum_extremes() {
        let mut q = ParamStore::<f64>::new();
        let w = q.add("w", Tensor::zeros(&[2]));
        let mut t = q.clone();
        t.get_mut(w).data_mut().fill(1.0);
        let orig = t.clone();
        momentum_update(&mut t, &q, 1.0).unwrap();
        assert_eq!(t, orig);
        let mut t2 = orig.clone();
        momentum_update(&mut t2, &q, 0.999).unwrap();
        assert!(t2.get(w).data().iter().all(|&v| (v - 0.999).abs() < 1e-15));
        momentum_update(&mut t2, &q, 0.0).unwrap();
        assert_eq!(t2, q);
    }

    #[test]
    fn bank_fifo_eviction() {
        let mut bank = MemoryBank::new(1, 4).unwrap();
        for b in 0..3 {
            let keys = unit_rows(&[&[1.0], &[-1.0]]);
            bank.enqueue(&keys, Some(&[2 * b, 2 * b + 1])).unwrap();
        }
        let groups: Vec<_> = bank.entries().map(|e| e.group.unwrap()).collect();
        assert_eq!(groups, vec![5, 4, 3, 2]);
        assert_eq!(bank.fill_count(), 6);
    }

    #[test]
    fn bank_rejects_bad_keys() {
        let mut bank = MemoryBank::new(2, 4).unwrap();
        assert!(bank.enqueue(&unit_rows(&[&[1.0]]), None).is_err());
        assert!(bank.enqueue(&unit_rows(&[&[1.0, 1.0]]), None).is_err());
    }

    #[test]
    fn empty_bank_is_warm_up_error() {
        let bank = MemoryBank::new(2, 4).unwrap();
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap()).unwrap();
        assert!(matches!(build_logits(&mut g, q, q, &bank, 0.07, None), Err(Error::BankWarmUp)));
    }

    #[test]
    fn aligned_key_orthogonal_bank() {
        let mut bank = MemoryBank::new(2, 8).unwrap();
        bank.enqueue(&unit_rows(&[&[0.0, 1.0], &[0.0, -1.0]]), None).unwrap();
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap()).unwrap();
        let l = build_logits(&mut g, q, q, &bank, 0.5, None).unwrap();
        assert_eq!(g.value(l).data(), &[2.0, 0.0, 0.0]);
    }

    #[test]
    fn exclusion_masks_own_group() {
        let mut bank = MemoryBank::new(2, 8).unwrap();
        bank.enqueue(&unit_rows(&[&[1.0, 0.0], &[0.0, 1.0]]), Some(&[7, 8])).unwrap();
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap()).unwrap();
        let l = build_logits(&mut g, q, q, &bank, 1.0, Some(&[7])).unwrap();
        // newest first: group 8, then group 7 (masked)
        assert_eq!(g.value(l).data(), &[1.0, 0.0, 1.0 + MASKED]);
    }

    #[test]
    fn modality_names_roundtrip() {
        for set in [
            ModalitySet::FACE,
            ModalitySet::ALL,
            ModalitySet { race: true, deaging: false },
            ModalitySet { race: false, deaging: true },
        ] {
            assert_eq!(set.name().parse::<ModalitySet>().unwrap(), set);
        }
        assert!("race".parse::<ModalitySet>().is_err());
        assert!("face+age".parse::<ModalitySet>().is_err());
    }
}
