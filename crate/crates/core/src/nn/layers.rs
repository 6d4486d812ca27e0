use dcml_tensor::{Element, Tensor, Var};
use rand::Rng;

use super::{ParamId, ParamStore, Session};
use crate::error::Result;

/// Uniform `U(-b, b)` with `b = sqrt(3 / fan_in)`, i.e. unit-variance
/// pre-activations for unit-variance inputs.
pub fn fan_in_uniform<T: Element>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (3.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)))
}

/// Fully connected layer `x W + b`, `W` stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), fan_in_uniform(rng, &[in_dim, out_dim], in_dim));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn param_count(in_dim: usize, out_dim: usize) -> usize {
        in_dim * out_dim + out_dim
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight)?;
        let b = s.param(self.bias)?;
        Ok(s.graph.linear(x, w, b)?)
    }
}

/// Square-kernel convolution with bias over NHWC maps.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = kernel * kernel * in_channels;
        let weight = store.add(
            format!("{name}.weight"),
            fan_in_uniform(rng, &[kernel, kernel, in_channels, out_channels], fan_in),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Conv {
            weight,
            bias,
            kernel,
            stride,
            padding,
            in_channels,
            out_channels,
        }
    }

    pub fn param_count(in_channels: usize, out_channels: usize, kernel: usize) -> usize {
        kernel * kernel * in_channels * out_channels + out_channels
    }

    pub fn out_size(&self, size: usize) -> usize {
        (size + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight)?;
        let b = s.param(self.bias)?;
        let y = s.graph.conv2d(x, w, self.stride, self.padding)?;
        Ok(s.graph.add(y, b)?)
    }
}

/// Stack of fully connected layers with ReLU after each layer except,
/// optionally, the last.
#[derive(Clone, Debug)]
pub struct FcStack {
    pub layers: Vec<Linear>,
    pub relu_last: bool,
}

impl FcStack {
    /// `dims` lists the widths, input first: `[d, h, 1]` is two layers.
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: &[usize],
        relu_last: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        FcStack { layers, relu_last }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, mut x: Var) -> Result<Var> {
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(s, x)?;
            if i + 1 < n || self.relu_last {
                x = s.graph.relu(x)?;
            }
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t: Tensor<f64> = fan_in_uniform(&mut rng, &[50, 40], 12);
        let b = 0.5;
        assert!(t.data().iter().all(|v| v.abs() < b));
        let var = t.data().iter().map(|v| v * v).sum::<f64>() / t.numel() as f64;
        assert!((var - 1.0 / 12.0).abs() < 0.01, "{var}");
    }

    #[test]
    fn fc_stack_relu_placement() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let fc = FcStack::new(&mut store, "c", &[3, 4, 1], false, &mut rng);
        // a bias of -10 on the last layer survives because no relu follows it
        store.get_mut(fc.layers[1].bias).data_mut()[0] = -10.0;
        let mut s = Session::frozen(&store);
        let x = s.input(Tensor::zeros(&[2, 3])).unwrap();
        let y = fc.forward(&mut s, x).unwrap();
        assert_eq!(s.value(y).data(), &[-10.0, -10.0]);
        assert_eq!(fc.out_dim(), 1);
    }
}
