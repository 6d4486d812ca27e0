//! Race features from a small supervised backbone, frozen after training.

use dcml_tensor::{Element, Graph, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::batch::{chunks, stack_images};
use crate::data::FaceSample;
use crate::deaging::classification_loss;
use crate::error::{Error, Result};
use crate::io::JsonLog;
use crate::nn::{Backbone, BackboneConfig, Linear, LrSchedule, Optimizer, OptimizerKind, ParamStore, Session};

pub const NUM_RACES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RaceConfig {
    /// `feature_dim` of this backbone is the race feature width.
    pub backbone: BackboneConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub schedule: LrSchedule,
}

impl RaceConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("race batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct RaceEncoder {
    pub backbone: Backbone,
    pub head: Linear,
}

impl RaceEncoder {
    pub fn new<T: Element>(store: &mut ParamStore<T>, backbone: &BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        let net = Backbone::new(store, "race.backbone", backbone, rng)?;
        let head = Linear::new(store, "race.head", backbone.feature_dim, NUM_RACES, rng);
        Ok(RaceEncoder { backbone: net, head })
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.config.feature_dim
    }

    /// `[N, H, W, C]` images to `[N, d3]` race features.
    pub fn encode<T: Element>(&self, s: &mut Session<T>, images: Var) -> Result<Var> {
        self.backbone.forward(s, images)
    }

    pub fn logits<T: Element>(&self, s: &mut Session<T>, images: Var) -> Result<Var> {
        let f = self.encode(s, images)?;
        self.head.forward(s, f)
    }
}

/// Mean softmax cross-entropy over the three race classes.
pub fn race_loss<T: Element>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    classification_loss(g, logits, labels, NUM_RACES)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RaceReport {
    pub steps: usize,
    pub first_loss: f64,
    pub last_epoch_loss: f64,
    /// Training-set accuracy (%) after the last epoch.
    pub accuracy: f64,
}

#[derive(Serialize)]
struct LogRecord {
    epoch: usize,
    step: usize,
    loss: f64,
}

pub fn train_race(
    enc: &RaceEncoder,
    store: &mut ParamStore<f32>,
    corpus: &[FaceSample],
    cfg: &RaceConfig,
    rng: &mut impl Rng,
    log: &mut JsonLog,
) -> Result<RaceReport> {
    cfg.validate()?;
    let labels: Vec<usize> = corpus.iter().map(|s| s.info.race as usize).collect();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.schedule.clone());
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut report = RaceReport {
        steps: 0,
        first_loss: f64::NAN,
        last_epoch_loss: f64::NAN,
        accuracy: 0.0,
    };
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let (mut sum, mut count) = (0.0, 0);
        for idx in chunks(&order, cfg.batch_size) {
            let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let grads = {
                let mut s = Session::train(store);
                let x = s.input(stack_images(corpus, idx)?)?;
                let logits = enc.logits(&mut s, x)?;
                let loss = race_loss(&mut s.graph, logits, &batch_labels)?;
                let v = s.value(loss).item() as f64;
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        stage: "race".into(),
                        step: report.steps,
                        what: "loss".into(),
                    });
                }
                if report.steps == 0 {
                    report.first_loss = v;
                }
                sum += v;
                count += 1;
                log.record(&LogRecord {
                    epoch,
                    step: report.steps,
                    loss: v,
                })?;
                s.backward(loss)?
            };
            opt.step(store, &grads, epoch)?;
            report.steps += 1;
        }
        report.last_epoch_loss = sum / count.max(1) as f64;
    }
    report.accuracy = race_accuracy(enc, store, corpus, &(0..corpus.len()).collect::<Vec<_>>())?;
    Ok(report)
}

pub fn race_accuracy(enc: &RaceEncoder, store: &ParamStore<f32>, corpus: &[FaceSample], idx: &[usize]) -> Result<f64> {
    let mut hits = 0;
    for chunk in chunks(idx, 64) {
        let mut s = Session::frozen(store);
        let x = s.input(stack_images(corpus, chunk)?)?;
        let logits = enc.logits(&mut s, x)?;
        let t = s.value(logits);
        for (r, &i) in chunk.iter().enumerate() {
            let row = t.row(r);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            hits += (best == corpus[i].info.race as usize) as usize;
        }
    }
    Ok(100.0 * hits as f64 / idx.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use dcml_tensor::Tensor;

    fn loss_of(logits: &[f64], labels: &[usize]) -> f64 {
        let mut g = Graph::<f64>::new();
        let n = labels.len();
        let l = g.constant(Tensor::from_f64(&[n, 3], logits).unwrap()).unwrap();
        let loss = race_loss(&mut g, l, labels).unwrap();
        g.value(loss).item()
    }

    #[test]
    fn uniform_logits_give_ln3() {
        assert!((loss_of(&[0.3; 6], &[0, 2]) - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_logit() {
        assert!(loss_of(&[20.0, 0.0, 0.0], &[0]) < 1e-8);
        assert!(loss_of(&[0.0, 0.0, 20.0], &[0]) > 19.0);
    }

    #[test]
    fn label_checked() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::zeros(&[1, 3])).unwrap();
        assert!(race_loss(&mut g, l, &[3]).is_err());
    }
}
