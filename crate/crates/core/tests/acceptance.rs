//! Acceptance checks, one line per criterion. Runs without the libtest
//! harness so every line prints; exits nonzero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use dcml_core::config::RunConfig;
use dcml_core::contrastive::{build_logits, info_nce, momentum_update, MemoryBank, ModalitySet};
use dcml_core::data::Dataset;
use dcml_core::deaging::{canonical_correlation, DeagingModel, DeagingReport};
use dcml_core::eval::{evaluate_topk, mean_verification_accuracy, EvalReport};
use dcml_core::gradcheck::gradcheck_suite;
use dcml_core::io::JsonLog;
use dcml_core::nn::{Backbone, BackboneConfig, ParamStore, Session};
use dcml_core::pipeline::{modality_features, run_deaging, run_race, train_and_evaluate, Modalities};
use dcml_tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = (bool, String);

fn c1_gradcheck() -> Outcome {
    let t = Instant::now();
    let report = gradcheck_suite(0, None);
    let elapsed = t.elapsed();
    let worst = report.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max);
    let failed: Vec<&str> = report.failures().map(|e| e.name.as_str()).collect();
    let ok = report.passed && elapsed < Duration::from_secs(120);
    (
        ok,
        format!(
            "{} entries, worst rel err {worst:.2e} (< 1e-4), failed {failed:?}, {:.1}s (< 120s)",
            report.entries.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn unit_rows(rows: &[Vec<f64>]) -> Tensor<f64> {
    let d = rows[0].len();
    Tensor::new(&[rows.len(), d], rows.concat()).unwrap()
}

/// Loss of one query against its positive and `kb` copies of `negative`.
fn loss_with(q: &[f64], pos: &[f64], negative: &[f32], kb: usize, tau: f64) -> f64 {
    let d = q.len();
    let mut bank = MemoryBank::new(d, kb).unwrap();
    let keys = Tensor::new(&[kb, d], negative.repeat(kb)).unwrap();
    bank.enqueue(&keys, None).unwrap();
    let mut g = Graph::<f64>::new();
    let qv = g.constant(unit_rows(&[q.to_vec()])).unwrap();
    let kv = g.constant(unit_rows(&[pos.to_vec()])).unwrap();
    let logits = build_logits(&mut g, qv, kv, &bank, tau, None).unwrap();
    let loss = info_nce(&mut g, logits).unwrap();
    g.value(loss).item()
}

fn c2_info_nce() -> Outcome {
    let mut worst_uniform: f64 = 0.0;
    let mut worst_saturated: f64 = 0.0;
    for kb in [1usize, 7, 511] {
        // q orthogonal to the positive and every negative: all logits zero.
        let uniform = loss_with(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0], kb, 0.07);
        worst_uniform = worst_uniform.max((uniform - ((kb + 1) as f64).ln()).abs());
        let saturated = loss_with(&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0], &[-1.0, 0.0, 0.0], kb, 0.07);
        worst_saturated = worst_saturated.max(saturated);
    }
    (
        worst_uniform <= 1e-9 && worst_saturated < 1e-9,
        format!("uniform |L - ln(Kb+1)| {worst_uniform:.2e} (<= 1e-9), saturated L {worst_saturated:.2e} (< 1e-9)"),
    )
}

/// Array-backed ring buffer, independent of the bank's own storage.
struct Ring {
    slots: Vec<Option<(usize, Vec<f32>)>>,
    head: usize,
    len: usize,
}

impl Ring {
    fn push(&mut self, tag: usize, key: Vec<f32>) {
        let cap = self.slots.len();
        self.slots[(self.head + self.len) % cap] = Some((tag, key));
        if self.len == cap {
            self.head = (self.head + 1) % cap;
        } else {
            self.len += 1;
        }
    }

    fn newest_first(&self) -> Vec<(usize, Vec<f32>)> {
        let cap = self.slots.len();
        (0..self.len)
            .rev()
            .map(|i| self.slots[(self.head + i) % cap].clone().unwrap())
            .collect()
    }
}

fn c3_momentum_and_bank() -> Outcome {
    let m = 0.999;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut query = ParamStore::<f64>::new();
    let mut target = ParamStore::<f64>::new();
    for (i, shape) in [[4usize, 3], [7, 1], [2, 5]].iter().enumerate() {
        let n = shape[0] * shape[1];
        let q: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let t: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        query.add(format!("p{i}"), Tensor::new(shape, q).unwrap());
        target.add(format!("p{i}"), Tensor::new(shape, t).unwrap());
    }
    let distance = |a: &ParamStore<f64>, b: &ParamStore<f64>| {
        a.ids()
            .flat_map(|id| a.get(id).data().iter().zip(b.get(id).data()).map(|(x, y)| (x - y).powi(2)).collect::<Vec<_>>())
            .sum::<f64>()
            .sqrt()
    };
    let initial = distance(&target, &query);
    let mut contraction_err: f64 = 0.0;
    for n in 1..=2000 {
        momentum_update(&mut target, &query, m).unwrap();
        let expected = m.powi(n) * initial;
        contraction_err = contraction_err.max((distance(&target, &query) - expected).abs());
    }

    let dim = 4;
    let mut mismatches = 0;
    let mut enqueued = 0usize;
    let mut tag = 0usize;
    let mut trial = 0;
    while enqueued < 10_000 {
        let capacity = rng.random_range(1..=64);
        let mut bank = MemoryBank::new(dim, capacity).unwrap();
        let mut ring = Ring {
            slots: vec![None; capacity],
            head: 0,
            len: 0,
        };
        for _ in 0..rng.random_range(1..=40) {
            let b = rng.random_range(1..=2 * capacity);
            let mut rows = Vec::with_capacity(b * dim);
            let mut tags = Vec::with_capacity(b);
            for _ in 0..b {
                let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                let key: Vec<f32> = v.iter().map(|x| (x / n) as f32).collect();
                ring.push(tag, key.clone());
                rows.extend(key);
                tags.push(tag);
                tag += 1;
            }
            bank.enqueue(&Tensor::new(&[b, dim], rows).unwrap(), Some(&tags)).unwrap();
            enqueued += b;
            let got: Vec<(usize, Vec<f32>)> = bank.entries().map(|e| (e.group.unwrap(), e.key.clone())).collect();
            mismatches += (got != ring.newest_first()) as usize;
        }
        trial += 1;
    }
    (
        contraction_err <= 1e-6 && mismatches == 0,
        format!(
            "contraction err {contraction_err:.2e} over 2000 updates (<= 1e-6), \
             {mismatches} bank mismatches over {enqueued} enqueues in {trial} banks"
        ),
    )
}

fn c4_factorization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let backbone = BackboneConfig {
        in_channels: 3,
        input_size: 8,
        stem_channels: 2,
        stage_blocks: [1, 1, 1],
        stage_mid: [2, 2, 2],
        stage_out: [2, 2, 2],
        feature_dim: 16,
    };
    let mut store = ParamStore::<f64>::new();
    let model = DeagingModel::new(&mut store, &backbone, 8, 5, &mut rng).unwrap();
    let d = model.feature_dim();
    let (batch, batches) = (100, 100);
    let mut worst: f64 = 0.0;
    for _ in 0..batches {
        let f: Vec<f64> = (0..batch * d).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let mut s = Session::frozen(&store);
        let fv = s.input(Tensor::new(&[batch, d], f.clone()).unwrap()).unwrap();
        let (age, id) = model.factorize(&mut s, fv).unwrap();
        let (age, id) = (s.value(age).data().to_vec(), s.value(id).data().to_vec());
        for i in 0..f.len() {
            worst = worst.max((id[i] + age[i] - f[i]).abs());
        }
    }
    (
        worst <= 1e-6,
        format!("max |f_id + f_age - f| {worst:.2e} over {} inputs (<= 1e-6)", batch * batches),
    )
}

fn graph_rho(a: &[f64], b: &[f64]) -> f64 {
    let mut g = Graph::<f64>::new();
    let va = g.constant(Tensor::new(&[a.len()], a.to_vec()).unwrap()).unwrap();
    let vb = g.constant(Tensor::new(&[b.len()], b.to_vec()).unwrap()).unwrap();
    let c = canonical_correlation(&mut g, va, vb).unwrap();
    g.value(c.rho).item()
}

/// Mean product of z-scores.
fn oracle_rho(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let z = |x: &[f64]| {
        let mean = x.iter().sum::<f64>() / n;
        let sd = (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        x.iter().map(|v| (v - mean) / sd).collect::<Vec<_>>()
    };
    z(a).iter().zip(z(b)).map(|(x, y)| x * y).sum::<f64>() / n
}

fn c5_pearson() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut oracle_err, mut affine_err): (f64, f64) = (0.0, 0.0);
    for _ in 0..1000 {
        let n = rng.random_range(2..=64);
        let mix: f64 = rng.random_range(-1.0..1.0);
        let a: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let b: Vec<f64> = a
            .iter()
            .map(|x| mix * x + (1.0 - mix.abs()) * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let rho = graph_rho(&a, &b);
        oracle_err = oracle_err.max((rho - oracle_rho(&a, &b)).abs());
        let alpha = rng.random_range(0.1..10.0) * if rng.random_bool(0.5) { -1.0 } else { 1.0 };
        let beta = rng.random_range(-5.0..5.0);
        let moved: Vec<f64> = a.iter().map(|x| alpha * x + beta).collect();
        affine_err = affine_err.max((graph_rho(&moved, &b).abs() - rho.abs()).abs());
    }
    (
        oracle_err <= 1e-10 && affine_err <= 1e-10,
        format!("oracle err {oracle_err:.2e}, affine err {affine_err:.2e} over 1000 batches (<= 1e-10)"),
    )
}

fn c6_decorrelation(report: &DeagingReport, elapsed: Duration) -> Outcome {
    let ok = report.initial_abs_rho > 0.5
        && report.final_abs_rho < 0.2
        && report.identity_accuracy > 3.0 * report.chance_accuracy
        && elapsed < Duration::from_secs(600);
    (
        ok,
        format!(
            "|rho| {:.3} -> {:.3} (> 0.5 -> < 0.2), identity acc {:.1}% vs chance {:.1}% (> 3x), {:.0}s (< 600s)",
            report.initial_abs_rho,
            report.final_abs_rho,
            report.identity_accuracy,
            report.chance_accuracy,
            elapsed.as_secs_f64()
        ),
    )
}

/// One seed of the desk runs: frozen encoders, then the contrastive stage
/// with all modalities and with the face only.
struct SeedRun {
    seed: u64,
    deaging: DeagingReport,
    deaging_time: Duration,
    all: EvalReport,
    face: EvalReport,
    all_time: Duration,
}

fn desk_run(seed: u64, fold: usize) -> SeedRun {
    let mut cfg = RunConfig::desk();
    cfg.seed = seed;
    cfg.eval.fold = fold;
    let data = Dataset::generate(seed, &cfg.data).unwrap();
    let t = Instant::now();
    let (race, _) = run_race(&cfg, &data, &mut JsonLog::discard()).unwrap();
    let race_time = t.elapsed();
    let t = Instant::now();
    let (deaging_stage, deaging) = run_deaging(&cfg, &data, &mut JsonLog::discard()).unwrap();
    let deaging_time = t.elapsed();
    let mods = Modalities {
        race: Some(race),
        deaging: Some(deaging_stage),
    };
    let t = Instant::now();
    let extras = modality_features(&mods, &data.family, ModalitySet::ALL).unwrap();
    cfg.dcml.modalities = ModalitySet::ALL;
    let all = train_and_evaluate(&cfg, &data, fold, extras.as_ref(), &mut JsonLog::discard()).unwrap();
    let all_time = race_time + deaging_time + t.elapsed();
    cfg.dcml.modalities = ModalitySet::FACE;
    let face = train_and_evaluate(&cfg, &data, fold, None, &mut JsonLog::discard()).unwrap();
    let losses = &all.training.epoch_losses;
    eprintln!(
        "  seed {seed} fold {fold}: all top-1 {:.2} top-5 {:.2}, face top-1 {:.2} top-5 {:.2}, chance {:.2}, \
         stage-3 loss {:.3} -> {:.3}",
        all.eval.overall[0],
        all.eval.overall[1],
        face.eval.overall[0],
        face.eval.overall[1],
        all.eval.chance_top1,
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN),
    );
    SeedRun {
        seed,
        deaging,
        deaging_time,
        all: all.eval,
        face: face.eval,
        all_time,
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn c7_retrieval(runs: &[SeedRun]) -> Outcome {
    let top1 = mean(runs.iter().map(|r| r.all.overall[0]));
    let chance = mean(runs.iter().map(|r| r.all.chance_top1));
    let slowest = runs.iter().map(|r| r.all_time).max().unwrap();
    let ok = top1 >= 10.0 * chance && slowest < Duration::from_secs(900);
    (
        ok,
        format!(
            "mean top-1 {top1:.2}% vs chance {chance:.2}% (>= 10x = {:.2}%), slowest seed {:.0}s (< 900s)",
            10.0 * chance,
            slowest.as_secs_f64()
        ),
    )
}

fn c8_ablation(runs: &[SeedRun]) -> Outcome {
    let all = mean(runs.iter().map(|r| r.all.overall[1]));
    let face = mean(runs.iter().map(|r| r.face.overall[1]));
    (
        all >= face,
        format!("mean top-5 face+race+deaging {all:.2}% vs face {face:.2}%"),
    )
}

fn c9_schedule() -> Outcome {
    let cfg = BackboneConfig::full();
    let mut store = ParamStore::<f32>::new();
    let backbone = Backbone::new(&mut store, "backbone", &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let mut s = Session::frozen(&store);
    let x = s.input(Tensor::new(&[1, 48, 48, 3], vec![0.5; 48 * 48 * 3]).unwrap()).unwrap();
    let (out, trace) = backbone.forward_traced(&mut s, x).unwrap();
    let spatial: Vec<[usize; 2]> = trace.iter().map(|t| [t[1], t[2]]).collect();
    let feature = s.value(out).shape().to_vec();
    let ok = spatial == [[24, 24], [24, 24], [12, 12], [6, 6]] && feature == [1, 256];
    (ok, format!("stage outputs {spatial:?}, feature {feature:?}"))
}

fn c10_metric() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut formula_err: f64 = 0.0;
    for _ in 0..1000 {
        let p = rng.random_range(1..500);
        let tp = rng.random_range(0..=p);
        let acc = mean_verification_accuracy(tp, 0, p, 0);
        formula_err = formula_err.max((acc - tp as f64 / p as f64 * 100.0).abs());
    }
    let cfg = RunConfig::micro();
    let mut reports = 0;
    let mut violations = 0;
    for seed in 0..4u64 {
        let data = Dataset::generate(seed, &cfg.data).unwrap();
        for fold in 0..5 {
            let split = data.protocol.split(&data.family, fold).unwrap();
            let n = split.test.len();
            let d = rng.random_range(2..8);
            let mut draw = || {
                let v: Vec<f32> = (0..n * d).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
                Tensor::new(&[n, d], v).unwrap()
            };
            let (query, gallery) = (draw(), draw());
            let r = evaluate_topk(&data.family, &split.test, &query, &gallery, &[1, 5]).unwrap();
            reports += 1;
            let cells_ok = r.cells.iter().all(|c| c.accuracy[1] >= c.accuracy[0]);
            let ok = cells_ok && r.overall[1] >= r.overall[0] && r.average[1] >= r.average[0];
            violations += (!ok) as usize;
        }
    }
    (
        formula_err < 1e-12 && violations == 0,
        format!("TP/P formula err {formula_err:.1e}, top-5 < top-1 in {violations} of {reports} reports"),
    )
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        }
    }
}

fn main() -> ExitCode {
    // `cargo test -- --list` and similar harness probes.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut results: Vec<Outcome> = vec![
        guarded(c1_gradcheck),
        guarded(c2_info_nce),
        guarded(c3_momentum_and_bank),
        guarded(c4_factorization),
        guarded(c5_pearson),
    ];
    for (i, r) in results.iter().enumerate() {
        println!("criterion {} {}: {}", i + 1, if r.0 { "PASS" } else { "FAIL" }, r.1);
    }

    let runs = catch_unwind(|| [(7, 0), (8, 1), (9, 2)].map(|(seed, fold)| desk_run(seed, fold)));
    let staged: [Outcome; 3] = match &runs {
        Ok(runs) => {
            let seven = runs.iter().find(|r| r.seed == 7).unwrap();
            [
                c6_decorrelation(&seven.deaging, seven.deaging_time),
                c7_retrieval(runs),
                c8_ablation(runs),
            ]
        }
        Err(_) => std::array::from_fn(|_| (false, "desk run panicked".to_string())),
    };
    results.extend(staged);
    results.push(guarded(c9_schedule));
    results.push(guarded(c10_metric));
    for (i, r) in results.iter().enumerate().skip(5) {
        println!("criterion {} {}: {}", i + 1, if r.0 { "PASS" } else { "FAIL" }, r.1);
    }

    let failed = results.iter().filter(|r| !r.0).count();
    println!("acceptance: {} of {} criteria pass", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
