use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{FaceSample, Gender, Generation};
use crate::error::{Error, Result};

pub const NUM_FOLDS: usize = 5;

/// Parent-child relation, labelled as in kinship benchmarks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = "F-S")]
    FatherSon,
    #[serde(rename = "F-D")]
    FatherDaughter,
    #[serde(rename = "M-S")]
    MotherSon,
    #[serde(rename = "M-D")]
    MotherDaughter,
}

impl Relation {
    pub const ALL: [Relation; 4] = [
        Relation::FatherSon,
        Relation::FatherDaughter,
        Relation::MotherSon,
        Relation::MotherDaughter,
    ];

    pub fn of(parent: Gender, child: Gender) -> Self {
        match (parent, child) {
            (Gender::Male, Gender::Male) => Relation::FatherSon,
            (Gender::Male, Gender::Female) => Relation::FatherDaughter,
            (Gender::Female, Gender::Male) => Relation::MotherSon,
            (Gender::Female, Gender::Female) => Relation::MotherDaughter,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Relation::FatherSon => "F-S",
            Relation::FatherDaughter => "F-D",
            Relation::MotherSon => "M-S",
            Relation::MotherDaughter => "M-D",
        }
    }
}

/// Indices into the sample list of a parent and one of their children.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KinPair {
    pub parent: usize,
    pub child: usize,
    pub relation: Relation,
}

/// Family-disjoint five-fold partition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Protocol {
    pub seed: u64,
    /// Family ids of each fold.
    pub folds: Vec<Vec<u32>>,
}

/// Test fold `fold`, training on the other four (an 80/20 split).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub fold: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles the family ids with `seed` and deals them round-robin into
/// five folds.
pub fn make_protocol(samples: &[FaceSample], seed: u64) -> Result<Protocol> {
    let families: BTreeSet<u32> = samples.iter().map(|s| s.info.family_id).collect();
    if families.len() < NUM_FOLDS {
        return Err(Error::Data(format!(
            "{} families cannot fill {NUM_FOLDS} folds",
            families.len()
        )));
    }
    let mut families: Vec<u32> = families.into_iter().collect();
    families.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); NUM_FOLDS];
    for (i, f) in families.into_iter().enumerate() {
        folds[i % NUM_FOLDS].push(f);
    }
    for fold in &mut folds {
        fold.sort_unstable();
    }
    Ok(Protocol { seed, folds })
}

impl Protocol {
    pub fn fold_of(&self, family: u32) -> Option<usize> {
        self.folds.iter().position(|f| f.binary_search(&family).is_ok())
    }

    pub fn split(&self, samples: &[FaceSample], fold: usize) -> Result<Split> {
        if fold >= self.folds.len() {
            return Err(Error::Config(format!("fold {fold} out of range 0..{}", self.folds.len())));
        }
        let mut split = Split {
            fold,
            train: Vec::new(),
            test: Vec::new(),
        };
        for (i, s) in samples.iter().enumerate() {
            match self.fold_of(s.info.family_id) {
                Some(f) if f == fold => split.test.push(i),
                Some(_) => split.train.push(i),
                None => {
                    return Err(Error::Data(format!(
                        "family {} is not assigned to any fold",
                        s.info.family_id
                    )))
                }
            }
        }
        Ok(split)
    }
}

/// Every (parent, child) pair of the same family among `indices`.
pub fn positive_pairs(samples: &[FaceSample], indices: &[usize]) -> Vec<KinPair> {
    let mut pairs = Vec::new();
    for &p in indices {
        let pi = &samples[p].info;
        if pi.generation != Generation::Parent {
            continue;
        }
        for &c in indices {
            let ci = &samples[c].info;
            if ci.generation == Generation::Child && ci.family_id == pi.family_id {
                pairs.push(KinPair {
                    parent: p,
                    child: c,
                    relation: Relation::of(pi.gender, ci.gender),
                });
            }
        }
    }
    pairs
}

/// Each parent among `indices` is matched once with a child drawn uniformly
/// from the other families.
pub fn negative_pairs(samples: &[FaceSample], indices: &[usize], seed: u64) -> Result<Vec<(usize, usize)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let children: Vec<usize> = indices
        .iter()
        .copied()
        .filter(|&i| samples[i].info.generation == Generation::Child)
        .collect();
    let mut out = Vec::new();
    for &p in indices {
        let fam = samples[p].info.family_id;
        if samples[p].info.generation != Generation::Parent {
            continue;
        }
        let others: Vec<usize> = children
            .iter()
            .copied()
            .filter(|&c| samples[c].info.family_id != fam)
            .collect();
        let &c = others
            .choose(&mut rng)
            .ok_or_else(|| Error::Data(format!("no non-kin child for parent {p}")))?;
        out.push((p, c));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_family_dataset, SynthConfig};

    fn dataset(families: usize) -> Vec<FaceSample> {
        let cfg = SynthConfig {
            num_families: families,
            image_size: 4,
            ..SynthConfig::default()
        };
        generate_family_dataset(3, &cfg).unwrap()
    }

    #[test]
    fn ten_families_two_per_fold() {
        let p = make_protocol(&dataset(10), 1).unwrap();
        assert!(p.folds.iter().all(|f| f.len() == 2));
    }

    #[test]
    fn too_few_families() {
        assert!(matches!(make_protocol(&dataset(4), 1), Err(Error::Data(_))));
    }

    #[test]
    fn split_sizes_are_eighty_twenty() {
        let d = dataset(10);
        let p = make_protocol(&d, 9).unwrap();
        for k in 0..NUM_FOLDS {
            let s = p.split(&d, k).unwrap();
            assert_eq!(s.test.len(), 8);
            assert_eq!(s.train.len(), 32);
        }
    }

    #[test]
    fn positive_pairs_have_relations() {
        let d = dataset(5);
        let all: Vec<usize> = (0..d.len()).collect();
        let pos = positive_pairs(&d, &all);
        assert_eq!(pos.len(), 5 * 4);
        for p in pos {
            assert_eq!(d[p.parent].info.family_id, d[p.child].info.family_id);
            let want = Relation::of(d[p.parent].info.gender, d[p.child].info.gender);
            assert_eq!(p.relation, want);
        }
        assert_eq!(Relation::MotherDaughter.label(), "M-D");
    }
}
