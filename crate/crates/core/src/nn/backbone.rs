use dcml_tensor::{Element, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Conv, Linear, ParamStore, Session};
use crate::error::{Error, Result};

/// Residual network of the bottleneck family: a 7x7 stride-1 stem with a
/// 3x3 stride-2 max-pool, three stages of bottleneck blocks, global average
/// pooling and a linear head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub input_size: usize,
    pub stem_channels: usize,
    pub stage_blocks: [usize; 3],
    /// Bottleneck width of each stage.
    pub stage_mid: [usize; 3],
    /// Output width of each stage.
    pub stage_out: [usize; 3],
    pub feature_dim: usize,
}

impl BackboneConfig {
    /// Full-size network on 48x48 patches: stem 24x24, stages 24, 12, 6.
    pub fn full() -> Self {
        BackboneConfig {
            in_channels: 3,
            input_size: 48,
            stem_channels: 64,
            stage_blocks: [10, 10, 10],
            stage_mid: [16, 32, 64],
            stage_out: [64, 128, 256],
            feature_dim: 256,
        }
    }

    /// Same schedule at a width and depth a laptop trains in minutes.
    pub fn desk() -> Self {
        BackboneConfig {
            in_channels: 3,
            input_size: 48,
            stem_channels: 8,
            stage_blocks: [2, 2, 2],
            stage_mid: [4, 8, 16],
            stage_out: [16, 32, 64],
            feature_dim: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.in_channels, self.input_size, self.stem_channels, self.feature_dim];
        if dims.contains(&0)
            || self.stage_blocks.contains(&0)
            || self.stage_mid.contains(&0)
            || self.stage_out.contains(&0)
        {
            return Err(Error::Config(format!("backbone sizes must be positive: {self:?}")));
        }
        if self.input_size < 2 {
            return Err(Error::Config(format!(
                "input size {} cannot pass the stride-2 stem",
                self.input_size
            )));
        }
        Ok(())
    }

    /// Spatial side after the stem and after each stage.
    pub fn spatial_schedule(&self) -> [usize; 4] {
        let pool = |s: usize| (s + 2 - 3) / 2 + 1;
        let stem = pool(self.input_size);
        let s2 = pool(stem);
        let s3 = pool(s2);
        [stem, stem, s2, s3]
    }

    /// Closed-form parameter count of the layers this config declares.
    pub fn param_count(&self) -> usize {
        let mut n = Conv::param_count(self.in_channels, self.stem_channels, 7);
        let mut cin = self.stem_channels;
        for stage in 0..3 {
            let (mid, out) = (self.stage_mid[stage], self.stage_out[stage]);
            for block in 0..self.stage_blocks[stage] {
                let stride = if stage > 0 && block == 0 { 2 } else { 1 };
                n += Conv::param_count(cin, mid, 1) + Conv::param_count(mid, mid, 3) + Conv::param_count(mid, out, 1);
                if cin != out || stride != 1 {
                    n += Conv::param_count(cin, out, 1);
                }
                cin = out;
            }
        }
        n + Linear::param_count(cin, self.feature_dim)
    }
}

/// 1x1 reduce, 3x3 (carrying the stride), 1x1 expand, plus a shortcut that
/// is the identity unless channels or resolution change.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub reduce: Conv,
    pub spatial: Conv,
    pub expand: Conv,
    pub projection: Option<Conv>,
}

impl Bottleneck {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        mid: usize,
        out: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let reduce = Conv::new(store, &format!("{name}.reduce"), cin, mid, 1, 1, 0, rng);
        let spatial = Conv::new(store, &format!("{name}.spatial"), mid, mid, 3, stride, 1, rng);
        let expand = Conv::new(store, &format!("{name}.expand"), mid, out, 1, 1, 0, rng);
        let projection =
            (cin != out || stride != 1).then(|| Conv::new(store, &format!("{name}.project"), cin, out, 1, stride, 0, rng));
        Bottleneck {
            reduce,
            spatial,
            expand,
            projection,
        }
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let h = self.reduce.forward(s, x)?;
        let h = s.graph.relu(h)?;
        let h = self.spatial.forward(s, h)?;
        let h = s.graph.relu(h)?;
        let h = self.expand.forward(s, h)?;
        let shortcut = match &self.projection {
            Some(p) => p.forward(s, x)?,
            None => x,
        };
        let y = s.graph.add(h, shortcut)?;
        Ok(s.graph.relu(y)?)
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub stem: Conv,
    pub stages: [Vec<Bottleneck>; 3],
    pub head: Linear,
}

impl Backbone {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        config: &BackboneConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let stem = Conv::new(store, &format!("{name}.stem"), config.in_channels, config.stem_channels, 7, 1, 3, rng);
        let mut cin = config.stem_channels;
        let stages = std::array::from_fn(|stage| {
            (0..config.stage_blocks[stage])
                .map(|block| {
                    let stride = if stage > 0 && block == 0 { 2 } else { 1 };
                    let out = config.stage_out[stage];
                    let b = Bottleneck::new(
                        store,
                        &format!("{name}.stage{stage}.block{block}"),
                        cin,
                        config.stage_mid[stage],
                        out,
                        stride,
                        rng,
                    );
                    cin = out;
                    b
                })
                .collect()
        });
        let head = Linear::new(store, &format!("{name}.head"), cin, config.feature_dim, rng);
        Ok(Backbone {
            config: config.clone(),
            stem,
            stages,
            head,
        })
    }

    /// `[N, H, W, C]` images to `[N, feature_dim]` features.
    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        Ok(self.forward_traced(s, x)?.0)
    }

    /// Like [`Backbone::forward`], also returning the output shape of the
    /// stem and of each stage.
    pub fn forward_traced<T: Element>(&self, s: &mut Session<T>, x: Var) -> Result<(Var, Vec<Vec<usize>>)> {
        let shape = s.graph.shape(x).to_vec();
        let c = &self.config;
        if shape.len() != 4 || shape[1] != c.input_size || shape[2] != c.input_size || shape[3] != c.in_channels {
            return Err(Error::Config(format!(
                "backbone expects [N, {0}, {0}, {1}] input, got {shape:?}",
                c.input_size, c.in_channels
            )));
        }
        let mut trace = Vec::with_capacity(4);
        let h = self.stem.forward(s, x)?;
        let h = s.graph.relu(h)?;
        let mut h = s.graph.max_pool(h, 3, 2, 1)?;
        trace.push(s.graph.shape(h).to_vec());
        for stage in &self.stages {
            for block in stage {
                h = block.forward(s, h)?;
            }
            trace.push(s.graph.shape(h).to_vec());
        }
        let pooled = s.graph.global_avg_pool(h)?;
        Ok((self.head.forward(s, pooled)?, trace))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dcml_tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn desk_output_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let cfg = BackboneConfig::desk();
        let net = Backbone::new(&mut store, "b", &cfg, &mut rng).unwrap();
        let mut s = Session::frozen(&store);
        let x = s.input(Tensor::full(&[2, 48, 48, 3], 0.5)).unwrap();
        let y = net.forward(&mut s, x).unwrap();
        assert_eq!(s.graph.shape(y), &[2, 64]);
        assert_eq!(store.numel(), cfg.param_count());
    }

    #[test]
    fn rejects_wrong_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let net = Backbone::new(&mut store, "b", &BackboneConfig::desk(), &mut rng).unwrap();
        let mut s = Session::frozen(&store);
        let x = s.input(Tensor::zeros(&[1, 40, 40, 3])).unwrap();
        assert!(matches!(net.forward(&mut s, x), Err(Error::Config(_))));
    }

    #[test]
    fn zero_blocks_rejected() {
        let mut cfg = BackboneConfig::desk();
        cfg.stage_blocks[1] = 0;
        assert!(cfg.validate().is_err());
    }
}
