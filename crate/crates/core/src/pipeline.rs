//! Three-stage orchestration: race encoder, de-aging encoder, then the
//! contrastive network on top of their frozen features.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use dcml_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::contrastive::{prefill_bank, train_contrastive, ContrastiveReport, ContrastiveState, DcmlNet, ModalitySet};
use crate::data::{positive_pairs, read_dataset, Dataset, FaceSample};
use crate::deaging::{adversarial_train, DeagingModel, DeagingReport};
use crate::error::{Error, Result};
use crate::eval::{evaluate_topk, EvalReport};
use crate::io::{read_json, write_json, JsonLog};
use crate::nn::{checkpoint, ParamStore, Session};
use crate::race::{train_race, RaceEncoder, RaceReport};
use crate::batch::{chunks, stack_images};

const RACE_STREAM: u64 = 1;
const DEAGING_STREAM: u64 = 2;
const DCML_STREAM: u64 = 16;

/// Independent generator for one stage of a run.
pub fn stage_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Race,
    Deaging,
    Dcml,
    All,
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "race" => Ok(Stage::Race),
            "deaging" => Ok(Stage::Deaging),
            "dcml" => Ok(Stage::Dcml),
            "all" => Ok(Stage::All),
            other => Err(Error::Config(format!("unknown stage {other:?}"))),
        }
    }
}

pub struct RaceStage {
    pub encoder: RaceEncoder,
    pub store: ParamStore<f32>,
}

pub struct DeagingStage {
    pub model: DeagingModel,
    pub store: ParamStore<f32>,
}

/// Frozen modality encoders. Either may be absent when its modality is
/// not used.
#[derive(Default)]
pub struct Modalities {
    pub race: Option<RaceStage>,
    pub deaging: Option<DeagingStage>,
}

pub fn build_race(cfg: &RunConfig) -> Result<RaceStage> {
    let mut store = ParamStore::new();
    let encoder = RaceEncoder::new(&mut store, &cfg.race.backbone, &mut stage_rng(cfg.seed, RACE_STREAM))?;
    Ok(RaceStage { encoder, store })
}

pub fn build_deaging(cfg: &RunConfig) -> Result<DeagingStage> {
    let mut store = ParamStore::new();
    let model = DeagingModel::new(
        &mut store,
        &cfg.deaging.backbone,
        cfg.deaging.canonical_hidden,
        cfg.data.aging_identities,
        &mut stage_rng(cfg.seed, DEAGING_STREAM),
    )?;
    Ok(DeagingStage { model, store })
}

/// Race encoder trained on the aging corpus.
pub fn run_race(cfg: &RunConfig, data: &Dataset, log: &mut JsonLog) -> Result<(RaceStage, RaceReport)> {
    let mut stage = build_race(cfg)?;
    let mut rng = stage_rng(cfg.seed, RACE_STREAM + 100);
    let report = train_race(&stage.encoder, &mut stage.store, &data.aging, &cfg.race, &mut rng, log)?;
    Ok((stage, report))
}

pub fn run_deaging(cfg: &RunConfig, data: &Dataset, log: &mut JsonLog) -> Result<(DeagingStage, DeagingReport)> {
    let mut stage = build_deaging(cfg)?;
    let mut rng = stage_rng(cfg.seed, DEAGING_STREAM + 100);
    let report = adversarial_train(&stage.model, &mut stage.store, &data.aging, &cfg.deaging, &mut rng, log)?;
    Ok((stage, report))
}

fn l2_rows(t: &Tensor<f32>) -> Vec<f32> {
    let mut out = Vec::with_capacity(t.numel());
    for r in 0..t.shape()[0] {
        let row = t.row(r);
        let norm = row.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-12);
        out.extend(row.iter().map(|x| x / norm));
    }
    out
}

fn encode_all(
    samples: &[FaceSample],
    dim: usize,
    mut f: impl FnMut(&mut Session<f32>, &[usize]) -> Result<Tensor<f32>>,
    store: &ParamStore<f32>,
) -> Result<Tensor<f32>> {
    let idx: Vec<usize> = (0..samples.len()).collect();
    let mut data = Vec::with_capacity(samples.len() * dim);
    for chunk in chunks(&idx, 64) {
        let mut s = Session::frozen(store);
        data.extend_from_slice(f(&mut s, chunk)?.data());
    }
    Ok(Tensor::new(&[samples.len(), dim], data)?)
}

/// Frozen features for every family sample, one row per sample: the
/// selected modalities, each scaled to unit norm so no modality dominates
/// the fused width by its raw magnitude.
pub fn modality_features(mods: &Modalities, samples: &[FaceSample], set: ModalitySet) -> Result<Option<Tensor<f32>>> {
    let mut parts: Vec<Tensor<f32>> = Vec::new();
    if set.race {
        let r = mods
            .race
            .as_ref()
            .ok_or_else(|| Error::Dependency("race encoder required by the modality set".into()))?;
        let dim = r.encoder.feature_dim();
        let t = encode_all(
            samples,
            dim,
            |s, idx| {
                let x = s.input(stack_images(samples, idx)?)?;
                let y = r.encoder.encode(s, x)?;
                Ok(s.value(y).clone())
            },
            &r.store,
        )?;
        parts.push(t);
    }
    if set.deaging {
        let d = mods
            .deaging
            .as_ref()
            .ok_or_else(|| Error::Dependency("de-aging encoder required by the modality set".into()))?;
        let dim = d.model.feature_dim();
        let t = encode_all(
            samples,
            dim,
            |s, idx| {
                let x = s.input(stack_images(samples, idx)?)?;
                let y = d.model.identity_features(s, x)?;
                Ok(s.value(y).clone())
            },
            &d.store,
        )?;
        parts.push(t);
    }
    if parts.is_empty() {
        return Ok(None);
    }
    let n = samples.len();
    let width: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let scaled: Vec<Vec<f32>> = parts.iter().map(l2_rows).collect();
    let mut data = Vec::with_capacity(n * width);
    for r in 0..n {
        for (p, s) in parts.iter().zip(&scaled) {
            let d = p.shape()[1];
            data.extend_from_slice(&s[r * d..(r + 1) * d]);
        }
    }
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            stage: "modality features".into(),
            step: 0,
            what: "feature".into(),
        });
    }
    Ok(Some(Tensor::new(&[n, width], data)?))
}

/// Contrastive network and state for one fold, initialised from the run
/// seed. The layout depends on the modality set through the extra width.
pub fn build_dcml(cfg: &RunConfig, extra_dim: usize, fold: usize) -> Result<(DcmlNet, ContrastiveState)> {
    let mut store = ParamStore::new();
    let mut rng = stage_rng(cfg.seed, DCML_STREAM + 2 * fold as u64);
    let net = DcmlNet::new(&mut store, &cfg.dcml, extra_dim, &mut rng)?;
    let state = ContrastiveState::new(store, net.embed_dim(), &cfg.dcml)?;
    Ok((net, state))
}

pub struct FoldRun {
    pub net: DcmlNet,
    pub state: ContrastiveState,
    pub training: ContrastiveReport,
    pub eval: EvalReport,
}

/// Trains the contrastive stage on the training folds and evaluates
/// parent-to-child retrieval on `fold`.
pub fn train_and_evaluate(
    cfg: &RunConfig,
    data: &Dataset,
    fold: usize,
    extras: Option<&Tensor<f32>>,
    log: &mut JsonLog,
) -> Result<FoldRun> {
    let extra_dim = extras.map_or(0, |t| t.shape()[1]);
    let (net, mut state) = build_dcml(cfg, extra_dim, fold)?;
    let split = data.protocol.split(&data.family, fold)?;
    let pairs = positive_pairs(&data.family, &split.train);
    prefill_bank(&net, &mut state, &data.family, &split.train, extras)?;
    let mut rng = stage_rng(cfg.seed, DCML_STREAM + 2 * fold as u64 + 1);
    let training = train_contrastive(&net, &mut state, &data.family, &pairs, extras, &cfg.dcml, &mut rng, log)?;
    let mut eval = evaluate_fold(&net, &state, data, fold, extras, &cfg.eval.topk)?;
    eval.label = cfg.dcml.modalities.name().to_string();
    Ok(FoldRun {
        net,
        state,
        training,
        eval,
    })
}

/// The trained query encoder embeds both the test parents and the
/// gallery; the key encoder only supplies training targets.
pub fn evaluate_fold(
    net: &DcmlNet,
    state: &ContrastiveState,
    data: &Dataset,
    fold: usize,
    extras: Option<&Tensor<f32>>,
    topk: &[usize],
) -> Result<EvalReport> {
    let split = data.protocol.split(&data.family, fold)?;
    let embeddings = net.embed_samples(&state.query, &data.family, &split.test, extras)?;
    let mut report = evaluate_topk(&data.family, &split.test, &embeddings, &embeddings, topk)?;
    report.fold = Some(fold);
    Ok(report)
}

/// Everything a full in-memory run produces.
pub struct PipelineRun {
    pub race: Option<RaceReport>,
    pub deaging: Option<DeagingReport>,
    pub fold: FoldRun,
}

/// Stages 1 to 3 in memory with the modality set from `cfg`.
pub fn run_in_memory(cfg: &RunConfig, data: &Dataset, fold: usize) -> Result<PipelineRun> {
    cfg.validate()?;
    let set = cfg.dcml.modalities;
    let mut mods = Modalities::default();
    let (mut race, mut deaging) = (None, None);
    if set.race {
        let (stage, report) = run_race(cfg, data, &mut JsonLog::discard())?;
        mods.race = Some(stage);
        race = Some(report);
    }
    if set.deaging {
        let (stage, report) = run_deaging(cfg, data, &mut JsonLog::discard())?;
        mods.deaging = Some(stage);
        deaging = Some(report);
    }
    let extras = modality_features(&mods, &data.family, set)?;
    let fold = train_and_evaluate(cfg, data, fold, extras.as_ref(), &mut JsonLog::discard())?;
    Ok(PipelineRun { race, deaging, fold })
}

/// Files written under the output directory.
pub struct Layout {
    pub dir: PathBuf,
}

impl Layout {
    pub fn new(dir: &Path) -> Self {
        Layout { dir: dir.to_path_buf() }
    }

    pub fn config(&self) -> PathBuf {
        self.dir.join("config.json")
    }

    pub fn race(&self) -> PathBuf {
        self.dir.join("race.dck")
    }

    pub fn deaging(&self) -> PathBuf {
        self.dir.join("deaging.dck")
    }

    pub fn dcml(&self, fold: usize) -> PathBuf {
        self.dir.join(format!("dcml_fold{fold}.dck"))
    }

    pub fn dcml_key(&self, fold: usize) -> PathBuf {
        self.dir.join(format!("dcml_fold{fold}_key.dck"))
    }

    pub fn log(&self, stage: &str) -> PathBuf {
        self.dir.join(format!("{stage}.jsonl"))
    }

    pub fn report(&self, stage: &str) -> PathBuf {
        self.dir.join(format!("{stage}_report.json"))
    }
}

/// Sidecar next to every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: String,
    pub seed: u64,
    pub fold: Option<usize>,
    pub modalities: Option<String>,
    pub checksum: String,
    pub params: usize,
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn save_checkpoint(path: &Path, store: &ParamStore<f32>, meta: &CheckpointMeta) -> Result<()> {
    checkpoint::save(path, store)?;
    write_json(&sidecar(path), meta)
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Dependency(format!("{what} checkpoint {} not found", path.display())))
    }
}

fn load_into(path: &Path, store: &mut ParamStore<f32>) -> Result<()> {
    let loaded = checkpoint::load::<f32>(path)?;
    store.ensure_same_layout(&loaded)?;
    store.load_from(&loaded)
}

/// Frozen encoders from the output directory, as needed by `set`.
pub fn load_modalities(cfg: &RunConfig, layout: &Layout, set: ModalitySet) -> Result<Modalities> {
    let mut mods = Modalities::default();
    if set.race {
        require(&layout.race(), "race")?;
        let mut stage = build_race(cfg)?;
        load_into(&layout.race(), &mut stage.store)?;
        mods.race = Some(stage);
    }
    if set.deaging {
        require(&layout.deaging(), "de-aging")?;
        let mut stage = build_deaging(cfg)?;
        load_into(&layout.deaging(), &mut stage.store)?;
        mods.deaging = Some(stage);
    }
    Ok(mods)
}

/// Summary of a file-level training run.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainSummary {
    pub race: Option<RaceReport>,
    pub deaging: Option<DeagingReport>,
    pub dcml: Option<ContrastiveReport>,
    pub eval: Option<EvalReport>,
    pub written: Vec<PathBuf>,
}

/// Checksums of the frozen encoders before and after stage 3.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct FrozenAudit {
    race: Option<(String, String)>,
    deaging: Option<(String, String)>,
}

/// Runs `stage` (or all enabled stages) against the dataset in
/// `cfg.paths.data_dir`, writing checkpoints, logs and reports to
/// `cfg.paths.out_dir`.
pub fn train_pipeline(cfg: &RunConfig, stage: Stage) -> Result<TrainSummary> {
    cfg.validate()?;
    if !cfg.paths.data_dir.join("meta.json").exists() {
        return Err(Error::Dependency(format!(
            "no dataset in {}; run synth first",
            cfg.paths.data_dir.display()
        )));
    }
    let data = read_dataset(&cfg.paths.data_dir)?;
    if data.config != cfg.data {
        return Err(Error::Config(format!(
            "dataset in {} was generated with a different data config",
            cfg.paths.data_dir.display()
        )));
    }
    let layout = Layout::new(&cfg.paths.out_dir);
    write_json(&layout.config(), cfg)?;
    let mut summary = TrainSummary::default();
    let want = |s: Stage, enabled: bool| stage == s || (stage == Stage::All && enabled);

    if want(Stage::Race, cfg.stages.race) {
        let (st, report) = run_race(cfg, &data, &mut JsonLog::create(&layout.log("race"))?)?;
        let meta = CheckpointMeta {
            stage: "race".into(),
            seed: cfg.seed,
            fold: None,
            modalities: None,
            checksum: st.store.checksum(),
            params: st.store.numel(),
        };
        save_checkpoint(&layout.race(), &st.store, &meta)?;
        write_json(&layout.report("race"), &report)?;
        summary.written.push(layout.race());
        summary.race = Some(report);
    }
    if want(Stage::Deaging, cfg.stages.deaging) {
        let (st, report) = run_deaging(cfg, &data, &mut JsonLog::create(&layout.log("deaging"))?)?;
        let meta = CheckpointMeta {
            stage: "deaging".into(),
            seed: cfg.seed,
            fold: None,
            modalities: None,
            checksum: st.store.checksum(),
            params: st.store.numel(),
        };
        save_checkpoint(&layout.deaging(), &st.store, &meta)?;
        write_json(&layout.report("deaging"), &report)?;
        summary.written.push(layout.deaging());
        summary.deaging = Some(report);
    }
    if want(Stage::Dcml, cfg.stages.dcml) {
        let set = cfg.dcml.modalities;
        let mods = load_modalities(cfg, &layout, set)?;
        let before = (
            mods.race.as_ref().map(|r| r.store.checksum()),
            mods.deaging.as_ref().map(|d| d.store.checksum()),
        );
        let extras = modality_features(&mods, &data.family, set)?;
        let fold = cfg.eval.fold;
        let run = train_and_evaluate(cfg, &data, fold, extras.as_ref(), &mut JsonLog::create(&layout.log("dcml"))?)?;
        let after = (
            mods.race.as_ref().map(|r| r.store.checksum()),
            mods.deaging.as_ref().map(|d| d.store.checksum()),
        );
        if before != after {
            return Err(Error::Checkpoint("frozen encoder parameters changed during stage 3".into()));
        }
        let audit = FrozenAudit {
            race: before.0.zip(after.0),
            deaging: before.1.zip(after.1),
        };
        write_json(&layout.dir.join("frozen_audit.json"), &audit)?;
        for (path, store, stage) in [
            (layout.dcml(fold), &run.state.query, "dcml"),
            (layout.dcml_key(fold), &run.state.key, "dcml_key"),
        ] {
            let meta = CheckpointMeta {
                stage: stage.into(),
                seed: cfg.seed,
                fold: Some(fold),
                modalities: Some(set.name().into()),
                checksum: store.checksum(),
                params: store.numel(),
            };
            save_checkpoint(&path, store, &meta)?;
            summary.written.push(path);
        }
        write_json(&layout.report("dcml"), &run.training)?;
        write_json(&layout.report(&format!("eval_fold{fold}")), &run.eval)?;
        summary.dcml = Some(run.training);
        summary.eval = Some(run.eval);
    }
    Ok(summary)
}

/// Evaluates a saved contrastive checkpoint. The run config and the
/// frozen encoders are read from the checkpoint's directory; the key
/// encoder comes from the `_key` checkpoint next to it.
pub fn evaluate_checkpoint(ckpt: &Path, fold: usize, topk: &[usize]) -> Result<EvalReport> {
    require(ckpt, "contrastive")?;
    let dir = ckpt.parent().unwrap_or(Path::new("."));
    let layout = Layout::new(dir);
    require(&layout.config(), "run config")?;
    let cfg: RunConfig = read_json(&layout.config())?;
    cfg.validate()?;
    let meta: CheckpointMeta = read_json(&sidecar(ckpt))?;
    let set: ModalitySet = match &meta.modalities {
        Some(name) => name.parse()?,
        None => cfg.dcml.modalities,
    };
    if let Some(f) = meta.fold {
        if f != fold {
            log::warn!("checkpoint was trained with fold {f} held out, evaluating fold {fold}");
        }
    }
    let data = read_dataset(&cfg.paths.data_dir)?;
    let mods = load_modalities(&cfg, &layout, set)?;
    let extras = modality_features(&mods, &data.family, set)?;
    let mut run_cfg = cfg.clone();
    run_cfg.dcml.modalities = set;
    let (net, mut state) = build_dcml(&run_cfg, extras.as_ref().map_or(0, |t| t.shape()[1]), meta.fold.unwrap_or(fold))?;
    load_into(ckpt, &mut state.query)?;
    let mut report = evaluate_fold(&net, &state, &data, fold, extras.as_ref(), topk)?;
    report.label = set.name().to_string();
    Ok(report)
}
