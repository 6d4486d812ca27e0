use std::f64::consts::TAU;

use dcml_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Generator settings for the family dataset and the aging corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_families: usize,
    pub members_per_family: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Dimension of the identity latent shared (up to noise) within a family.
    pub latent_dim: usize,
    pub age_dim: usize,
    pub race_dim: usize,
    /// Std of a member's deviation from the family latent.
    pub noise_level: f64,
    pub pixel_noise: f64,
    /// Pixel std contributed by a unit-variance identity latent.
    pub contrast: f64,
    pub age_scale: f64,
    pub race_scale: f64,
    /// Highest spatial frequency of the render basis, in cycles per image.
    pub max_frequency: f64,
    pub waves_per_basis: usize,
    pub parent_age: [f64; 2],
    pub child_age: [f64; 2],
    /// Independent identities of the aging corpus used to train the race
    /// and de-aging stages.
    pub aging_identities: usize,
    pub ages_per_identity: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_families: 32,
            members_per_family: 4,
            image_size: 64,
            channels: 3,
            latent_dim: 16,
            age_dim: 8,
            race_dim: 8,
            noise_level: 0.3,
            pixel_noise: 0.02,
            contrast: 0.12,
            age_scale: 4.0,
            race_scale: 3.0,
            max_frequency: 1.5,
            waves_per_basis: 3,
            parent_age: [0.55, 0.95],
            child_age: [0.05, 0.45],
            aging_identities: 48,
            ages_per_identity: 5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_families < 2 || self.members_per_family < 2 {
            return bad(format!(
                "need at least 2 families of 2 members, got {} x {}",
                self.num_families, self.members_per_family
            ));
        }
        if self.image_size == 0 || self.channels == 0 || self.latent_dim == 0 || self.age_dim == 0 {
            return bad("image, channel, latent and age sizes must be positive".into());
        }
        if self.race_dim < 3 {
            return bad(format!("race_dim {} cannot hold 3 orthogonal race vectors", self.race_dim));
        }
        let in_unit = |r: [f64; 2]| 0.0 <= r[0] && r[0] <= r[1] && r[1] <= 1.0;
        if !in_unit(self.parent_age) || !in_unit(self.child_age) {
            return bad("age ranges must be ordered sub-intervals of [0, 1]".into());
        }
        if [self.noise_level, self.pixel_noise, self.contrast, self.age_scale, self.race_scale, self.max_frequency]
            .iter()
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return bad("noise, contrast and scale settings must be finite and non-negative".into());
        }
        if self.aging_identities < 2 || self.ages_per_identity < 2 {
            return bad("aging corpus needs at least 2 identities with 2 ages each".into());
        }
        Ok(())
    }

    pub fn code_dim(&self) -> usize {
        self.latent_dim + self.age_dim + self.race_dim
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_size, self.image_size, self.channels]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generation {
    Parent,
    Child,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gender {
    Male,
    Female,
}

/// Annotations of one generated face.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleInfo {
    pub person_id: u32,
    pub family_id: u32,
    pub generation: Generation,
    pub gender: Gender,
    pub age: f32,
    pub race: u8,
    /// Ground-truth identity latent the image was rendered from.
    pub latent: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FaceSample {
    pub info: SampleInfo,
    /// `[H, W, C]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
}

/// Fixed render basis, age direction and race vectors, drawn from the
/// dataset seed.
pub struct World {
    config: SynthConfig,
    /// One unit-RMS `[H, W, C]` map per code entry.
    basis: Vec<Vec<f64>>,
    age_direction: Vec<f64>,
    race_vectors: [Vec<f64>; 3],
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

impl World {
    pub fn new(config: &SynthConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [h, w, c] = config.image_shape();
        let basis = (0..config.code_dim())
            .map(|_| {
                let waves: Vec<_> = (0..config.waves_per_basis)
                    .map(|_| {
                        let fy = rng.random_range(-config.max_frequency..=config.max_frequency);
                        let fx = rng.random_range(-config.max_frequency..=config.max_frequency);
                        let phase = rng.random_range(0.0..TAU);
                        let colors: Vec<f64> = (0..c).map(|_| normal(&mut rng)).collect();
                        (fy, fx, phase, colors)
                    })
                    .collect();
                let mut map = vec![0.0; h * w * c];
                for y in 0..h {
                    for x in 0..w {
                        for (fy, fx, phase, colors) in &waves {
                            let v = (TAU * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64) + phase).cos();
                            for ch in 0..c {
                                map[(y * w + x) * c + ch] += colors[ch] * v;
                            }
                        }
                    }
                }
                let rms = (map.iter().map(|v| v * v).sum::<f64>() / map.len() as f64).sqrt();
                map.iter_mut().for_each(|v| *v /= rms.max(1e-12));
                map
            })
            .collect();
        let mut age_direction: Vec<f64> = (0..config.age_dim).map(|_| normal(&mut rng)).collect();
        normalize(&mut age_direction);
        // Gram-Schmidt on random draws gives three orthonormal race vectors.
        let mut race_vectors: [Vec<f64>; 3] = Default::default();
        for r in 0..3 {
            let mut v: Vec<f64> = (0..config.race_dim).map(|_| normal(&mut rng)).collect();
            for prev in &race_vectors[..r] {
                let d: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(prev).for_each(|(a, b)| *a -= d * b);
            }
            normalize(&mut v);
            race_vectors[r] = v;
        }
        Ok(World {
            config: config.clone(),
            basis,
            age_direction,
            race_vectors,
        })
    }

    pub fn race_vector(&self, race: u8) -> &[f64] {
        &self.race_vectors[race as usize]
    }

    /// `[latent || age_scale * age * a || race_scale * e_race]`.
    pub fn code(&self, latent: &[f64], age: f64, race: u8) -> Vec<f64> {
        let cfg = &self.config;
        let mut code = Vec::with_capacity(cfg.code_dim());
        code.extend_from_slice(latent);
        code.extend(self.age_direction.iter().map(|a| cfg.age_scale * age * a));
        code.extend(self.race_vector(race).iter().map(|e| cfg.race_scale * e));
        code
    }

    /// `0.5 + contrast / sqrt(latent_dim) * sum_k code_k B_k` plus pixel
    /// noise, clipped to `[0, 1]`.
    pub fn render(&self, code: &[f64], rng: &mut impl Rng) -> Tensor<f32> {
        let cfg = &self.config;
        let gain = cfg.contrast / (cfg.latent_dim as f64).sqrt();
        let mut px = vec![0.0f64; self.basis[0].len()];
        for (k, &v) in code.iter().enumerate() {
            for (p, b) in px.iter_mut().zip(&self.basis[k]) {
                *p += v * b;
            }
        }
        let data = px
            .iter()
            .map(|&v| (0.5 + gain * v + cfg.pixel_noise * normal(rng)).clamp(0.0, 1.0) as f32)
            .collect();
        Tensor::new(&cfg.image_shape(), data).expect("image shape")
    }

    fn sample(&self, rng: &mut ChaCha8Rng, latent: Vec<f64>, age: f64, race: u8, info: SampleInfo) -> FaceSample {
        let image = self.render(&self.code(&latent, age, race), rng);
        FaceSample {
            info: SampleInfo {
                age: age as f32,
                race,
                latent: latent.iter().map(|&v| v as f32).collect(),
                ..info
            },
            image,
        }
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Families of two parents (one when `members_per_family == 2`) and
/// children. Each family draws a latent `g ~ N(0, I)` and a race; member
/// latents are `g + noise_level * N(0, I)`. Every family has its own random
/// stream, so the output is a pure function of `seed` and `config`.
pub fn generate_family_dataset(seed: u64, config: &SynthConfig) -> Result<Vec<FaceSample>> {
    let world = World::new(config, seed)?;
    let m = config.members_per_family;
    let parents = if m == 2 { 1 } else { 2 };
    let mut out = Vec::with_capacity(config.num_families * m);
    for fam in 0..config.num_families {
        let mut rng = stream_rng(seed, 1 + fam as u64);
        let g: Vec<f64> = (0..config.latent_dim).map(|_| normal(&mut rng)).collect();
        let race = rng.random_range(0..3u8);
        for member in 0..m {
            let latent = g.iter().map(|&v| v + config.noise_level * normal(&mut rng)).collect();
            let (generation, gender, range) = if member < parents {
                let gender = if member == 0 { Gender::Male } else { Gender::Female };
                (Generation::Parent, gender, config.parent_age)
            } else {
                let gender = if rng.random_bool(0.5) { Gender::Male } else { Gender::Female };
                (Generation::Child, gender, config.child_age)
            };
            let age = rng.random_range(range[0]..=range[1]);
            let info = SampleInfo {
                person_id: (fam * m + member) as u32,
                family_id: fam as u32,
                generation,
                gender,
                age: 0.0,
                race: 0,
                latent: Vec::new(),
            };
            out.push(world.sample(&mut rng, latent, age, race, info));
        }
    }
    Ok(out)
}

/// Independent identities, each rendered at `ages_per_identity` ages spread
/// over `[0.05, 0.95]`. Stands in for a cross-age face corpus: identity and
/// race labels are available, kinship is not. `family_id` equals
/// `person_id`.
pub fn generate_aging_corpus(seed: u64, config: &SynthConfig) -> Result<Vec<FaceSample>> {
    let world = World::new(config, seed)?;
    let n_ages = config.ages_per_identity;
    let mut out = Vec::with_capacity(config.aging_identities * n_ages);
    for id in 0..config.aging_identities {
        let mut rng = stream_rng(seed, (1 << 32) + id as u64);
        let latent: Vec<f64> = (0..config.latent_dim).map(|_| normal(&mut rng)).collect();
        let race = rng.random_range(0..3u8);
        let gender = if rng.random_bool(0.5) { Gender::Male } else { Gender::Female };
        for j in 0..n_ages {
            let age = 0.05 + 0.9 * (j as f64 + rng.random_range(0.0..1.0)) / n_ages as f64;
            let info = SampleInfo {
                person_id: id as u32,
                family_id: id as u32,
                generation: if age >= 0.5 { Generation::Parent } else { Generation::Child },
                gender,
                age: 0.0,
                race: 0,
                latent: Vec::new(),
            };
            out.push(world.sample(&mut rng, latent.clone(), age, race, info));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            num_families: 2,
            members_per_family: 2,
            image_size: 8,
            aging_identities: 3,
            ages_per_identity: 2,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = generate_family_dataset(5, &small()).unwrap();
        let b = generate_family_dataset(5, &small()).unwrap();
        assert_eq!(a, b);
        let c = generate_family_dataset(6, &small()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn counts_and_families() {
        let d = generate_family_dataset(1, &small()).unwrap();
        assert_eq!(d.len(), 4);
        let mut fams: Vec<_> = d.iter().map(|s| s.info.family_id).collect();
        fams.dedup();
        assert_eq!(fams, vec![0, 1]);
        assert_eq!(d[0].info.generation, Generation::Parent);
        assert_eq!(d[1].info.generation, Generation::Child);
    }

    #[test]
    fn pixels_clipped_and_ages_in_range() {
        let cfg = SynthConfig {
            contrast: 2.0,
            ..small()
        };
        for s in generate_family_dataset(2, &cfg).unwrap() {
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let r = match s.info.generation {
                Generation::Parent => cfg.parent_age,
                Generation::Child => cfg.child_age,
            };
            assert!((r[0] as f32..=r[1] as f32).contains(&s.info.age));
        }
    }

    #[test]
    fn race_vectors_orthonormal() {
        let w = World::new(&SynthConfig::default(), 3).unwrap();
        for a in 0..3u8 {
            for b in 0..3u8 {
                let d: f64 = w.race_vector(a).iter().zip(w.race_vector(b)).map(|(x, y)| x * y).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aging_corpus_layout() {
        let d = generate_aging_corpus(4, &small()).unwrap();
        assert_eq!(d.len(), 6);
        assert_eq!(d[0].info.latent, d[1].info.latent);
        assert!(d[0].info.age < d[1].info.age);
        assert_eq!(d[2].info.person_id, 1);
    }

    #[test]
    fn invalid_sizes_rejected() {
        let cfg = SynthConfig {
            num_families: 1,
            ..small()
        };
        assert!(matches!(generate_family_dataset(0, &cfg), Err(Error::Config(_))));
    }
}
