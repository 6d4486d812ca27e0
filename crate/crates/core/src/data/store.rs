use std::fs;
use std::path::Path;

use dcml_tensor::tns;
use serde::{Deserialize, Serialize};

use super::{generate_aging_corpus, generate_family_dataset, make_protocol, FaceSample, Protocol, SampleInfo, SynthConfig};
use crate::error::{Error, Result};
use crate::io::{read_json, write_json};

/// Family images, the aging corpus and the fold protocol of one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub config: SynthConfig,
    pub family: Vec<FaceSample>,
    pub aging: Vec<FaceSample>,
    pub protocol: Protocol,
}

impl Dataset {
    pub fn generate(seed: u64, config: &SynthConfig) -> Result<Self> {
        let family = generate_family_dataset(seed, config)?;
        let aging = generate_aging_corpus(seed, config)?;
        let protocol = make_protocol(&family, seed)?;
        Ok(Dataset {
            seed,
            config: config.clone(),
            family,
            aging,
            protocol,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Entry {
    file: String,
    #[serde(flatten)]
    info: SampleInfo,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    seed: u64,
    config: SynthConfig,
    protocol: Protocol,
    family: Vec<Entry>,
    aging: Vec<Entry>,
}

fn save_images(dir: &Path, sub: &str, samples: &[FaceSample]) -> Result<Vec<Entry>> {
    let folder = dir.join(sub);
    fs::create_dir_all(&folder).map_err(|e| Error::io(&folder, e))?;
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let file = format!("{sub}/{i:05}.tns");
            let path = dir.join(&file);
            tns::save(&path, &s.image).map_err(|source| Error::Tns { path, source })?;
            Ok(Entry {
                file,
                info: s.info.clone(),
            })
        })
        .collect()
}

fn load_images(dir: &Path, entries: Vec<Entry>, shape: [usize; 3]) -> Result<Vec<FaceSample>> {
    entries
        .into_iter()
        .map(|e| {
            let path = dir.join(&e.file);
            let image = tns::load(&path).map_err(|source| Error::Tns { path: path.clone(), source })?;
            if image.shape() != shape {
                return Err(Error::Data(format!(
                    "{}: shape {:?}, expected {shape:?}",
                    path.display(),
                    image.shape()
                )));
            }
            Ok(FaceSample { info: e.info, image })
        })
        .collect()
}

/// Writes `meta.json`, `family/NNNNN.tns` and `aging/NNNNN.tns` under `dir`.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    let meta = Meta {
        seed: data.seed,
        config: data.config.clone(),
        protocol: data.protocol.clone(),
        family: save_images(dir, "family", &data.family)?,
        aging: save_images(dir, "aging", &data.aging)?,
    };
    write_json(&dir.join("meta.json"), &meta)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("meta.json");
    if !meta_path.exists() {
        return Err(Error::Dependency(format!(
            "no dataset at {} (run `dcml synth` first)",
            dir.display()
        )));
    }
    let meta: Meta = read_json(&meta_path)?;
    let shape = meta.config.image_shape();
    Ok(Dataset {
        seed: meta.seed,
        family: load_images(dir, meta.family, shape)?,
        aging: load_images(dir, meta.aging, shape)?,
        config: meta.config,
        protocol: meta.protocol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_through_disk() {
        let cfg = SynthConfig {
            num_families: 5,
            image_size: 6,
            aging_identities: 2,
            ages_per_identity: 2,
            ..SynthConfig::default()
        };
        let data = Dataset::generate(11, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &data).unwrap();
        assert!(dir.path().join("family/00019.tns").exists());
        assert_eq!(read_dataset(dir.path()).unwrap(), data);
    }

    #[test]
    fn missing_dataset_is_a_dependency_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Dependency(_))));
    }
}
