//! Channel-gated feature fusion.
//!
//! Given features `F` with `D` channels: `z = Phi(F)` (global average pool
//! for spatial maps, identity for vectors), `s = sigmoid(W2 act(W1 z + b1) +
//! b2)` with a bottleneck of width `ceil(D / r)`, and the output is `s * F`
//! channel-wise.

use dcml_tensor::{Element, Graph, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Linear, ParamStore, Session};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateActivation {
    Identity,
    Relu,
}

pub fn hidden_width(dim: usize, ratio: usize) -> usize {
    dim.div_ceil(ratio)
}

#[derive(Clone, Debug)]
pub struct FusionBlock {
    pub dim: usize,
    pub ratio: usize,
    pub activation: GateActivation,
    pub squeeze: Linear,
    pub excite: Linear,
    pub projection: Option<Linear>,
}

/// Intermediates of one gate evaluation.
#[derive(Clone, Copy, Debug)]
pub struct FusionTrace {
    pub z: Var,
    pub s: Var,
    pub out: Var,
}

impl FusionBlock {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        ratio: usize,
        activation: GateActivation,
        project_to: Option<usize>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if dim == 0 || ratio == 0 || project_to == Some(0) {
            return Err(Error::Config(format!(
                "fusion block needs positive sizes (dim {dim}, ratio {ratio}, projection {project_to:?})"
            )));
        }
        let hidden = hidden_width(dim, ratio);
        let squeeze = Linear::new(store, &format!("{name}.squeeze"), dim, hidden, rng);
        let excite = Linear::new(store, &format!("{name}.excite"), hidden, dim, rng);
        let projection = project_to.map(|d| Linear::new(store, &format!("{name}.project"), dim, d, rng));
        Ok(FusionBlock {
            dim,
            ratio,
            activation,
            squeeze,
            excite,
            projection,
        })
    }

    pub fn hidden(&self) -> usize {
        self.squeeze.out_dim
    }

    pub fn out_dim(&self) -> usize {
        self.projection.as_ref().map_or(self.dim, |p| p.out_dim)
    }

    /// Gates `[N, D]` vectors or `[N, H, W, D]` maps.
    pub fn gate<T: Element>(&self, s: &mut Session<T>, f: Var) -> Result<FusionTrace> {
        let shape = s.graph.shape(f).to_vec();
        if !(shape.len() == 2 || shape.len() == 4) || shape[shape.len() - 1] != self.dim {
            return Err(Error::Config(format!(
                "fusion block of width {} got input {shape:?}",
                self.dim
            )));
        }
        let spatial = shape.len() == 4;
        let z = if spatial { s.graph.global_avg_pool(f)? } else { f };
        let h = self.squeeze.forward(s, z)?;
        let h = match self.activation {
            GateActivation::Relu => s.graph.relu(h)?,
            GateActivation::Identity => h,
        };
        let h = self.excite.forward(s, h)?;
        let gate = s.graph.sigmoid(h)?;
        let out = if spatial {
            s.graph.channel_scale(f, gate)?
        } else {
            s.graph.mul(f, gate)?
        };
        Ok(FusionTrace { z, s: gate, out })
    }

    /// Gate followed by the optional projection.
    pub fn forward<T: Element>(&self, s: &mut Session<T>, f: Var) -> Result<Var> {
        let out = self.gate(s, f)?.out;
        match &self.projection {
            Some(p) => p.forward(s, out),
            None => Ok(out),
        }
    }
}

/// Concatenates `[N, d_i]` parts along the feature axis, in order.
pub fn concat_features<T: Element>(g: &mut Graph<T>, parts: &[Var]) -> Result<Var> {
    if parts.is_empty() {
        return Err(Error::Config("nothing to concatenate".into()));
    }
    if let Some(p) = parts.iter().find(|&&p| g.shape(p).len() != 2) {
        return Err(Error::Config(format!(
            "concatenated parts must be [N, d] vectors, got {:?}",
            g.shape(*p)
        )));
    }
    Ok(g.concat(parts)?)
}

/// Concatenates the modality features, gates them, projects, and
/// L2-normalizes the result into the contrastive embedding.
pub fn fuse_modalities<T: Element>(block: &FusionBlock, s: &mut Session<T>, parts: &[Var]) -> Result<Var> {
    let cat = concat_features(&mut s.graph, parts)?;
    let out = block.forward(s, cat)?;
    Ok(s.graph.l2_normalize(out)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use dcml_tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zeroed(dim: usize, ratio: usize) -> (ParamStore<f64>, FusionBlock) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let block = FusionBlock::new(&mut store, "f", dim, ratio, GateActivation::Relu, None, &mut rng).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        (store, block)
    }

    #[test]
    fn zero_gate_halves_input() {
        let (store, block) = zeroed(5, 2);
        let mut s = Session::frozen(&store);
        let f = Tensor::from_fn(&[2, 5], |i| i as f64 - 3.0);
        let x = s.input(f.clone()).unwrap();
        let t = block.gate(&mut s, x).unwrap();
        assert!(s.value(t.s).data().iter().all(|&v| v == 0.5));
        assert_eq!(s.value(t.out), &f.map(|v| 0.5 * v));
    }

    #[test]
    fn spatial_squeeze_averages_channels() {
        let (store, block) = zeroed(3, 1);
        let mut s = Session::frozen(&store);
        let x = s.input(Tensor::from_fn(&[1, 4, 4, 3], |i| (i % 3) as f64 + 1.0)).unwrap();
        let t = block.gate(&mut s, x).unwrap();
        assert_eq!(s.value(t.z).data(), &[1.0, 2.0, 3.0]);
        assert_eq!(s.graph.shape(t.out), &[1, 4, 4, 3]);
    }

    #[test]
    fn hidden_width_rounds_up() {
        assert_eq!(hidden_width(1664, 2), 832);
        assert_eq!(hidden_width(10, 4), 3);
        let (_, block) = zeroed(10, 4);
        assert_eq!(block.hidden(), 3);
    }

    #[test]
    fn width_mismatch_and_empty_concat() {
        let (store, block) = zeroed(4, 2);
        let mut s = Session::frozen(&store);
        let x = s.input(Tensor::zeros(&[2, 3])).unwrap();
        assert!(block.gate(&mut s, x).is_err());
        assert!(concat_features(&mut s.graph, &[]).is_err());
    }

    #[test]
    fn concat_preserves_order() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap()).unwrap();
        let b = g.constant(Tensor::from_f64(&[1, 1], &[3.0]).unwrap()).unwrap();
        let c = concat_features(&mut g, &[a, b]).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0]);
    }
}
