//! Modality-set and reduction-ratio sweeps over the contrastive stage.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::contrastive::ModalitySet;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::io::JsonLog;
use crate::pipeline::{modality_features, train_and_evaluate, Modalities};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub modalities: String,
    pub r1: usize,
    pub r2: usize,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub fold: usize,
    pub entries: Vec<AblationEntry>,
}

/// Parses `face,face+race,...`.
pub fn parse_modality_list(list: &str) -> Result<Vec<ModalitySet>> {
    let sets = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect::<Result<Vec<ModalitySet>>>()?;
    if sets.is_empty() {
        return Err(Error::Config("empty modality list".into()));
    }
    Ok(sets)
}

/// Every `(r1, r2)` pair drawn from `values` on both axes.
pub fn reduction_grid(values: &[usize]) -> Vec<(usize, usize)> {
    values.iter().flat_map(|&r1| values.iter().map(move |&r2| (r1, r2))).collect()
}

/// One contrastive run with the given modality set and ratios; the frozen
/// encoders in `mods` must cover the set.
pub fn ablation_run(
    cfg: &RunConfig,
    data: &Dataset,
    mods: &Modalities,
    set: ModalitySet,
    ratios: (usize, usize),
    fold: usize,
) -> Result<AblationEntry> {
    let mut cfg = cfg.clone();
    cfg.dcml.modalities = set;
    (cfg.dcml.r1, cfg.dcml.r2) = ratios;
    cfg.validate()?;
    let extras = modality_features(mods, &data.family, set)?;
    let run = train_and_evaluate(&cfg, data, fold, extras.as_ref(), &mut JsonLog::discard())?;
    log::info!(
        "{} r1={} r2={}: top-1 {:.2}",
        set.name(),
        ratios.0,
        ratios.1,
        run.eval.overall.first().copied().unwrap_or(0.0)
    );
    Ok(AblationEntry {
        modalities: set.name().to_string(),
        r1: ratios.0,
        r2: ratios.1,
        report: run.eval,
    })
}

/// Every modality set crossed with every ratio pair. An empty `grid`
/// keeps the configured ratios.
pub fn run_ablation(
    cfg: &RunConfig,
    data: &Dataset,
    mods: &Modalities,
    sets: &[ModalitySet],
    grid: &[(usize, usize)],
    fold: usize,
) -> Result<AblationReport> {
    let default = [(cfg.dcml.r1, cfg.dcml.r2)];
    let grid = if grid.is_empty() { &default[..] } else { grid };
    let mut entries = Vec::with_capacity(sets.len() * grid.len());
    for &set in sets {
        for &ratios in grid {
            entries.push(ablation_run(cfg, data, mods, set, ratios, fold)?);
        }
    }
    Ok(AblationReport {
        seed: cfg.seed,
        fold,
        entries,
    })
}

impl AblationReport {
    /// One row per run with the pooled top-k accuracies.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let topk = self.entries.first().map(|e| e.report.topk.clone()).unwrap_or_default();
        let _ = write!(out, "{:<20}{:>4}{:>4}", "modalities", "r1", "r2");
        for k in &topk {
            let _ = write!(out, "{:>9}", format!("top-{k}"));
        }
        out.push('\n');
        for e in &self.entries {
            let _ = write!(out, "{:<20}{:>4}{:>4}", e.modalities, e.r1, e.r2);
            for a in &e.report.overall {
                let _ = write!(out, "{a:>9.2}");
            }
            out.push('\n');
        }
        out
    }
}
