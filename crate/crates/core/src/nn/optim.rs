use dcml_tensor::Element;
use serde::{Deserialize, Serialize};

use super::{Grads, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    /// `v <- mu v + g; p <- p - lr v`.
    Sgd { momentum: f64 },
    /// Bias-corrected first and second moments.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Piecewise-constant learning rate: entry `(e, r)` applies from epoch `e`
/// until the next entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule(pub Vec<(usize, f64)>);

impl LrSchedule {
    pub fn constant(rate: f64) -> Self {
        LrSchedule(vec![(0, rate)])
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.0.first().is_some_and(|&(e, _)| e == 0)
            && self.0.windows(2).all(|w| w[0].0 < w[1].0)
            && self.0.iter().all(|&(_, r)| r.is_finite() && r >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "learning-rate schedule {:?} must start at epoch 0 with increasing boundaries",
                self.0
            )))
        }
    }

    pub fn rate(&self, epoch: usize) -> f64 {
        self.0
            .iter()
            .take_while(|&&(e, _)| e <= epoch)
            .last()
            .map_or(0.0, |&(_, r)| r)
    }
}

#[derive(Clone, Debug)]
enum Slot<T> {
    Velocity(Vec<T>),
    Moments { m: Vec<T>, v: Vec<T>, t: i32 },
}

/// Optimizer state, one slot per parameter of the store it was built for.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub schedule: LrSchedule,
    slots: Vec<Option<Slot<T>>>,
    steps: usize,
}

impl<T: Element> Optimizer<T> {
    pub fn new(kind: OptimizerKind, schedule: LrSchedule) -> Self {
        Optimizer {
            kind,
            schedule,
            slots: Vec::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Updates every parameter that has a gradient, once. A non-finite
    /// gradient aborts the step before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>, epoch: usize) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Config(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for (id, g) in grads.iter() {
            if g.shape() != store.get(id).shape() {
                return Err(Error::Config(format!(
                    "gradient of {} has shape {:?}, parameter {:?}",
                    store.name(id),
                    g.shape(),
                    store.get(id).shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    stage: "optimizer".into(),
                    step: self.steps,
                    what: format!("gradient of {}", store.name(id)),
                });
            }
        }
        self.slots.resize_with(store.len(), || None);
        let lr = T::of(self.schedule.rate(epoch));
        for (id, g) in grads.iter() {
            let p = store.get_mut(id).data_mut();
            let slot = self.slots[id.index()].get_or_insert_with(|| match self.kind {
                OptimizerKind::Sgd { .. } => Slot::Velocity(vec![T::zero(); p.len()]),
                OptimizerKind::Adam { .. } => Slot::Moments {
                    m: vec![T::zero(); p.len()],
                    v: vec![T::zero(); p.len()],
                    t: 0,
                },
            });
            match (self.kind, slot) {
                (OptimizerKind::Sgd { momentum }, Slot::Velocity(vel)) => {
                    let mu = T::of(momentum);
                    for ((p, v), &g) in p.iter_mut().zip(vel.iter_mut()).zip(g.data()) {
                        *v = mu * *v + g;
                        *p -= lr * *v;
                    }
                }
                (OptimizerKind::Adam { beta1, beta2, eps }, Slot::Moments { m, v, t }) => {
                    *t += 1;
                    let (b1, b2, eps) = (T::of(beta1), T::of(beta2), T::of(eps));
                    let c1 = T::one() - T::of(beta1.powi(*t));
                    let c2 = T::one() - T::of(beta2.powi(*t));
                    for i in 0..p.len() {
                        let g = g.data()[i];
                        m[i] = b1 * m[i] + (T::one() - b1) * g;
                        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                        let mhat = m[i] / c1;
                        let vhat = v[i] / c2;
                        p[i] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
                _ => unreachable!("slot kind follows optimizer kind"),
            }
        }
        self.steps += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dcml_tensor::Tensor;

    fn scalar_store(p: f64) -> (ParamStore<f64>, super::super::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::from_f64(&[1], &[p]).unwrap());
        (s, id)
    }

    fn step(opt: &mut Optimizer<f64>, store: &mut ParamStore<f64>, id: super::super::ParamId, g: f64) {
        let grads = Grads::from_items(store.len(), vec![(id, Tensor::from_f64(&[1], &[g]).unwrap())]);
        opt.step(store, &grads, 0).unwrap();
    }

    #[test]
    fn plain_sgd_step() {
        let (mut store, id) = scalar_store(0.0);
        let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.0 }, LrSchedule::constant(1.0));
        step(&mut opt, &mut store, id, 2.0);
        assert_eq!(store.get(id).data(), &[-2.0]);
    }

    #[test]
    fn momentum_recurrence() {
        let (mut store, id) = scalar_store(0.0);
        let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.9 }, LrSchedule::constant(1.0));
        step(&mut opt, &mut store, id, 1.0);
        step(&mut opt, &mut store, id, 1.0);
        assert!((store.get(id).data()[0] + 2.9).abs() < 1e-12);
    }

    #[test]
    fn adam_bias_corrected_steps() {
        // hand-computed with beta (0.9, 0.999), eps 1e-8, lr 0.1
        let (mut store, id) = scalar_store(1.0);
        let mut opt = Optimizer::new(OptimizerKind::adam(), LrSchedule::constant(0.1));
        let expected = [0.900000002, 0.8654394181165108, 0.8109953836811554];
        for (g, want) in [0.5, -0.2, 0.3].into_iter().zip(expected) {
            step(&mut opt, &mut store, id, g);
            assert!((store.get(id).data()[0] - want).abs() < 1e-12);
        }
        assert_eq!(opt.steps(), 3);
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let (mut store, id) = scalar_store(1.0);
        let mut opt = Optimizer::new(OptimizerKind::adam(), LrSchedule::constant(0.1));
        let mut g = Tensor::zeros(&[1]);
        g.data_mut()[0] = f64::NAN;
        let grads = Grads::from_items(store.len(), vec![(id, g)]);
        let err = opt.step(&mut store, &grads, 0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "{err}");
        assert_eq!(store.get(id).data(), &[1.0]);
    }

    #[test]
    fn schedule_lookup() {
        let s = LrSchedule(vec![(0, 0.5), (2, 0.1)]);
        s.validate().unwrap();
        assert_eq!(s.rate(0), 0.5);
        assert_eq!(s.rate(1), 0.5);
        assert_eq!(s.rate(2), 0.1);
        assert_eq!(s.rate(9), 0.1);
        assert!(LrSchedule(vec![(1, 0.5)]).validate().is_err());
    }
}
