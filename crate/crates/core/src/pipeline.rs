//! Command orchestration: each `cmd_*` function runs one experiment over
//! the corpus in the output directory and writes plot-ready CSV tables plus
//! a JSON manifest.
//!
//! Reproducibility contract: every CSV byte is a pure function of the
//! config and corpus. Worker counts only change wall-clock time; trials are
//! dispatched in a fixed order and collected positionally, and all floating
//! point aggregation happens after collection, sequentially.

use crate::calibration::{
    default_grid, measure_eps, sweep_until_deterministic, transfer_check, CalibrationReport,
    SweepResult,
};
use crate::config::RunConfig;
use crate::corpus::{generate_prompts, read_corpus, write_corpus, CorpusSpec};
use crate::diagnostics::{
    align_kv_deviation, divergence_report, flip_rate, layer_profile, logit_geometry,
    margin_recall, TracePair, CLUSTER_DELTAS, IDENTITY_KS,
};
use crate::engines::{decode_batched, decode_reference, BatchLayout, DecodeConfig, DecodeTrace};
use crate::error::{Error, Result};
use crate::manifest::Manifest;
use crate::model::{build_model, Weights};
use crate::policy::{run_margingate, run_oracle_repair, CommitKind, CommitRecord, GateMode};
use rayon::prelude::*;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Margin thresholds reported in the recall table, in addition to the
/// configured gate threshold.
pub const RECALL_TAUS: [f32; 7] = [0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0];

pub fn corpus_path(out_dir: &Path) -> PathBuf {
    out_dir.join("corpus.txt")
}

/// Generates the seeded corpus and writes `corpus.txt`.
pub fn cmd_gen_corpus(cfg: &RunConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let prompts = generate_prompts(&cfg.corpus, cfg.model.vocab)?;
    write_corpus(&corpus_path(out_dir), &prompts)?;
    let mut m = Manifest::new("gen-corpus", cfg);
    m.insert("prompts", prompts.len() as u64);
    m.insert(
        "tokens",
        prompts.iter().map(|p| p.len() as u64).sum::<u64>(),
    );
    if prompts.is_empty() {
        m.insert("warning", "corpus is empty");
    }
    m.record_output(out_dir, "corpus.txt")?;
    m.write(out_dir)?;
    Ok(m)
}

/// Loads `corpus.txt`, checking it against the model limits.
fn load_corpus(cfg: &RunConfig, out_dir: &Path) -> Result<Vec<Vec<usize>>> {
    let path = corpus_path(out_dir);
    if !path.exists() {
        return Err(Error::Capacity(format!(
            "no corpus at {}; run gen-corpus first",
            path.display()
        )));
    }
    let prompts = read_corpus(&path)?;
    if prompts.is_empty() {
        return Err(Error::Capacity(format!(
            "corpus at {} is empty",
            path.display()
        )));
    }
    for (i, prompt) in prompts.iter().enumerate() {
        if prompt.is_empty() {
            return Err(Error::Capacity(format!("corpus prompt {i} is empty")));
        }
        if let Some(&t) = prompt.iter().find(|&&t| t >= cfg.model.vocab) {
            return Err(Error::Capacity(format!(
                "corpus prompt {i} has token {t} outside vocab {}",
                cfg.model.vocab
            )));
        }
        if prompt.len() + cfg.corpus.decode_cap > cfg.model.max_positions {
            return Err(Error::Capacity(format!(
                "corpus prompt {i} (len {}) plus decode cap {} exceeds max positions {}",
                prompt.len(),
                cfg.corpus.decode_cap,
                cfg.model.max_positions
            )));
        }
    }
    Ok(prompts)
}

fn decode_config(cfg: &RunConfig) -> DecodeConfig {
    let mut dc = DecodeConfig::new(cfg.corpus.decode_cap);
    dc.snapshot_kv = cfg.snapshot_kv;
    dc
}

/// Runs `f` on a dedicated thread pool of `workers` threads (0 = one per
/// core). Output order never depends on the pool size.
fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Internal(format!("thread pool: {e}")))?;
    pool.install(f)
}

struct Csv {
    buf: String,
}

impl Csv {
    fn new(header: &str) -> Csv {
        Csv {
            buf: format!("{header}\n"),
        }
    }

    fn row(&mut self, fields: &[String]) {
        let _ = writeln!(self.buf, "{}", fields.join(","));
    }

    fn write(self, out_dir: &Path, name: &str, m: &mut Manifest) -> Result<()> {
        let path = out_dir.join(name);
        std::fs::write(&path, self.buf.as_bytes()).map_err(|e| Error::io(&path, e))?;
        m.record_output(out_dir, name)
    }
}

fn s<T: ToString>(v: T) -> String {
    v.to_string()
}

fn opt_s<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Summary value helper: finite numbers stay numbers, non-finite become
/// strings so the manifest never drops them.
fn num(v: f64) -> serde_json::Value {
    if v.is_finite() {
        serde_json::json!(v)
    } else {
        serde_json::json!(v.to_string())
    }
}

/// One protected-row observation: a batched trace plus the index of its
/// reference.
struct Trial {
    batch_size: usize,
    ref_idx: usize,
    batched: DecodeTrace,
}

/// Unit of parallel work for the diagnose run.
enum Unit {
    /// One prompt replicated to the full batch; the protected row is the
    /// observation.
    Replicate { batch_size: usize, prompt: usize },
    /// `batch_size` consecutive distinct prompts in one batch; every row is
    /// an observation.
    Chunk { batch_size: usize, start: usize },
}

/// Diagnose trials: homogeneous corpora replicate each prompt per batch
/// size; mixed-length corpora batch consecutive distinct prompts so rows
/// carry different prompt lengths (the padding path).
fn diagnose_units(prompts: &[Vec<usize>], batch_sizes: &[usize]) -> Vec<Unit> {
    let mixed = prompts.windows(2).any(|w| w[0].len() != w[1].len());
    let mut units = Vec::new();
    for &bs in batch_sizes {
        if mixed && bs > 1 {
            for c in 0..prompts.len() / bs {
                units.push(Unit::Chunk {
                    batch_size: bs,
                    start: c * bs,
                });
            }
        } else {
            for p in 0..prompts.len() {
                units.push(Unit::Replicate {
                    batch_size: bs,
                    prompt: p,
                });
            }
        }
    }
    units
}

fn run_unit(
    unit: &Unit,
    weights: &Weights,
    prompts: &[Vec<usize>],
    dc: &DecodeConfig,
    cfg: &RunConfig,
) -> Result<Vec<Trial>> {
    match *unit {
        Unit::Replicate { batch_size, prompt } => {
            let layout = BatchLayout::replicate(&prompts[prompt], batch_size)?;
            let mut traces = decode_batched(weights, &layout, dc, &cfg.numerics)?;
            Ok(vec![Trial {
                batch_size,
                ref_idx: prompt,
                batched: traces.swap_remove(0),
            }])
        }
        Unit::Chunk { batch_size, start } => {
            let rows = prompts[start..start + batch_size].to_vec();
            let layout = BatchLayout::new(rows, 0)?;
            let traces = decode_batched(weights, &layout, dc, &cfg.numerics)?;
            Ok(traces
                .into_iter()
                .enumerate()
                .map(|(r, batched)| Trial {
                    batch_size,
                    ref_idx: start + r,
                    batched,
                })
                .collect())
        }
    }
}

/// Full diagnostic run: flip rates, divergence-aligned cache deviation,
/// logit geometry, margin recall, and the per-layer deviation profile.
pub fn cmd_diagnose(cfg: &RunConfig, out_dir: &Path, workers: usize) -> Result<Manifest> {
    cfg.validate()?;
    let prompts = load_corpus(cfg, out_dir)?;
    let weights = build_model(&cfg.model)?;
    let dc = decode_config(cfg);
    let units = diagnose_units(&prompts, &cfg.batch_sizes);

    let (refs, trials) = with_pool(workers, || {
        let refs: Vec<DecodeTrace> = prompts
            .par_iter()
            .map(|p| decode_reference(&weights, p, &dc))
            .collect::<Result<_>>()?;
        let trials: Vec<Vec<Trial>> = units
            .par_iter()
            .map(|u| run_unit(u, &weights, &prompts, &dc, cfg))
            .collect::<Result<_>>()?;
        Ok((refs, trials))
    })?;
    let trials: Vec<Trial> = trials.into_iter().flatten().collect();
    if trials.is_empty() {
        return Err(Error::Capacity(
            "no trials: corpus smaller than every batch size".into(),
        ));
    }

    let pairs: Vec<TracePair> = trials
        .iter()
        .map(|t| TracePair {
            batched: &t.batched,
            reference: &refs[t.ref_idx],
        })
        .collect();
    let mut m = Manifest::new("diagnose", cfg);

    // Table of flip rates, per batch size and pooled.
    let mut csv = Csv::new("batch_size,trials,diverging,sync_steps,events,flip_rate");
    let reports: Vec<_> = pairs.iter().map(divergence_report).collect();
    for &bs in &cfg.batch_sizes {
        let rows: Vec<_> = trials
            .iter()
            .zip(&reports)
            .filter(|(t, _)| t.batch_size == bs)
            .map(|(_, r)| r.clone())
            .collect();
        if rows.is_empty() {
            continue;
        }
        csv.row(&[
            s(bs),
            s(rows.len()),
            s(rows.iter().filter(|r| r.p_div.is_some()).count()),
            s(rows.iter().map(|r| r.sync_samples).sum::<usize>()),
            s(rows.iter().map(|r| r.events).sum::<usize>()),
            s(flip_rate(&rows)?),
        ]);
    }
    let diverging = reports.iter().filter(|r| r.p_div.is_some()).count();
    let overall = flip_rate(&reports)?;
    csv.row(&[
        "all".into(),
        s(reports.len()),
        s(diverging),
        s(reports.iter().map(|r| r.sync_samples).sum::<usize>()),
        s(reports.iter().map(|r| r.events).sum::<usize>()),
        s(overall),
    ]);
    csv.write(out_dir, "flip_rate.csv", &mut m)?;
    m.insert("trials", reports.len() as u64);
    m.insert("diverging_trials", diverging as u64);
    m.insert("flip_rate", num(overall));

    // Divergence-aligned cache deviation, when snapshots were captured and
    // at least one trial diverged.
    if cfg.snapshot_kv && diverging > 0 {
        let profile = align_kv_deviation(&pairs)?;
        let mut aligned = Csv::new("layer,delta,mean_err_k,mean_err_v,trials");
        for (layer, series) in profile.series.iter().enumerate() {
            for p in series {
                aligned.row(&[s(layer), s(p.delta), s(p.mean_err_k), s(p.mean_err_v), s(p.trials)]);
            }
        }
        aligned.write(out_dir, "kv_aligned.csv", &mut m)?;

        let mut summary = Csv::new(
            "layer,pre_median_k,pre_median_v,spike_ratio_k,spike_ratio_v,slope_k,slope_v",
        );
        for layer in 0..profile.series.len() {
            summary.row(&[
                s(layer),
                s(profile.pre_median_k[layer]),
                s(profile.pre_median_v[layer]),
                opt_s(profile.spike_ratio_k[layer]),
                opt_s(profile.spike_ratio_v[layer]),
                opt_s(profile.slope_k[layer]),
                opt_s(profile.slope_v[layer]),
            ]);
        }
        summary.write(out_dir, "kv_summary.csv", &mut m)?;
        if let Some(last) = profile.series.len().checked_sub(1) {
            if let Some(r) = profile.spike_ratio_k[last] {
                m.insert("spike_ratio_last_k", num(r));
            }
            if let Some(r) = profile.spike_ratio_v[last] {
                m.insert("spike_ratio_last_v", num(r));
            }
            if let Some(sl) = profile.slope_k[last] {
                m.insert("slope_k_last", num(sl));
            }
        }

        let layers = layer_profile(&pairs)?;
        let mut per_layer = Csv::new("layer,mean_max_k,mean_max_v");
        for layer in 0..layers.mean_max_k.len() {
            per_layer.row(&[s(layer), s(layers.mean_max_k[layer]), s(layers.mean_max_v[layer])]);
        }
        per_layer.write(out_dir, "layer_profile.csv", &mut m)?;
    }

    // Logit geometry around flips.
    let geom = logit_geometry(&pairs)?;
    let mut cluster = Csv::new("delta,mean_n_stable,mean_n_divergent,ratio");
    for (i, &delta) in CLUSTER_DELTAS.iter().enumerate() {
        cluster.row(&[
            s(delta),
            opt_s(geom.mean_n_stable[i]),
            opt_s(geom.mean_n_divergent[i]),
            opt_s(geom.ratio(i)),
        ]);
    }
    cluster.write(out_dir, "logit_cluster.csv", &mut m)?;
    let mut topk = Csv::new("k,events,hits,fraction");
    for (i, &k) in IDENTITY_KS.iter().enumerate() {
        topk.row(&[
            s(k),
            s(geom.events),
            s(geom.topk_hits[i]),
            opt_s(geom.topk_fraction(i)),
        ]);
    }
    topk.write(out_dir, "logit_topk.csv", &mut m)?;

    // Margin recall at a fixed threshold ladder plus the configured τ.
    let mut taus: Vec<f32> = RECALL_TAUS.to_vec();
    if cfg.gate.tau.is_finite() && !taus.contains(&cfg.gate.tau) {
        taus.push(cfg.gate.tau);
    }
    taus.sort_by(|a, b| a.partial_cmp(b).expect("finite taus"));
    let mut recall = Csv::new("tau,recall");
    for &tau in &taus {
        let r = match margin_recall(&pairs, tau) {
            Ok(r) => Some(r),
            Err(Error::Undefined(_)) => None,
            Err(e) => return Err(e),
        };
        recall.row(&[s(tau), opt_s(r)]);
    }
    recall.write(out_dir, "recall.csv", &mut m)?;
    if let Ok(r) = margin_recall(&pairs, cfg.gate.tau) {
        m.insert("recall_at_gate_tau", num(r));
    }

    m.write(out_dir)?;
    Ok(m)
}

/// Oracle repair over the corpus: repairs per sequence and the determinism
/// column, per batch size.
pub fn cmd_oracle(cfg: &RunConfig, out_dir: &Path, workers: usize) -> Result<Manifest> {
    cfg.validate()?;
    let prompts = load_corpus(cfg, out_dir)?;
    let weights = build_model(&cfg.model)?;
    let dc = decode_config(cfg);

    let mut jobs = Vec::new();
    for &bs in &cfg.batch_sizes {
        for p in 0..prompts.len() {
            jobs.push((bs, p));
        }
    }
    let results: Vec<(usize, bool)> = with_pool(workers, || {
        jobs.par_iter()
            .map(|&(bs, p)| {
                let layout = BatchLayout::replicate(&prompts[p], bs)?;
                let (_, repairs, deterministic) =
                    run_oracle_repair(&weights, &layout, &dc, &cfg.numerics)?;
                Ok((repairs, deterministic))
            })
            .collect::<Result<_>>()
    })?;

    let mut m = Manifest::new("oracle", cfg);
    let mut csv = Csv::new(
        "batch_size,trials,diverging,repairs_total,repairs_per_seq,repairs_per_diverging_seq,determinism_pct",
    );
    let mut total_repairs = 0usize;
    let mut total_det = 0usize;
    let mut total_div = 0usize;
    for &bs in &cfg.batch_sizes {
        let rows: Vec<_> = jobs
            .iter()
            .zip(&results)
            .filter(|((b, _), _)| *b == bs)
            .map(|(_, r)| *r)
            .collect();
        let repairs: usize = rows.iter().map(|(r, _)| r).sum();
        let div = rows.iter().filter(|(r, _)| *r > 0).count();
        let det = rows.iter().filter(|(_, d)| *d).count();
        total_repairs += repairs;
        total_det += det;
        total_div += div;
        csv.row(&[
            s(bs),
            s(rows.len()),
            s(div),
            s(repairs),
            s(repairs as f64 / rows.len() as f64),
            opt_s((div > 0).then(|| repairs as f64 / div as f64)),
            s(100.0 * det as f64 / rows.len() as f64),
        ]);
    }
    csv.row(&[
        "all".into(),
        s(results.len()),
        s(total_div),
        s(total_repairs),
        s(total_repairs as f64 / results.len() as f64),
        opt_s((total_div > 0).then(|| total_repairs as f64 / total_div as f64)),
        s(100.0 * total_det as f64 / results.len() as f64),
    ]);
    csv.write(out_dir, "oracle.csv", &mut m)?;
    m.insert("trials", results.len() as u64);
    m.insert("diverging_trials", total_div as u64);
    m.insert("repairs_per_seq", num(total_repairs as f64 / results.len() as f64));
    m.insert(
        "determinism_pct",
        num(100.0 * total_det as f64 / results.len() as f64),
    );
    m.write(out_dir)?;
    Ok(m)
}

fn kind_str(kind: CommitKind) -> &'static str {
    match kind {
        CommitKind::Fast => "fast",
        CommitKind::Verified => "verified",
        CommitKind::Repair => "repair",
    }
}

/// Margin-gated run at the configured threshold: aggregate rates plus the
/// full per-step commit log.
pub fn cmd_gate(cfg: &RunConfig, out_dir: &Path, workers: usize) -> Result<Manifest> {
    cfg.validate()?;
    if cfg.gate.mode == GateMode::Oracle {
        return Err(Error::Config(
            "gate.mode = oracle belongs to the oracle command".into(),
        ));
    }
    let prompts = load_corpus(cfg, out_dir)?;
    let weights = build_model(&cfg.model)?;
    let dc = decode_config(cfg);

    let mut jobs = Vec::new();
    for &bs in &cfg.batch_sizes {
        for p in 0..prompts.len() {
            jobs.push((bs, p));
        }
    }
    let results: Vec<(Vec<CommitRecord>, crate::policy::GateStats)> = with_pool(workers, || {
        jobs.par_iter()
            .map(|&(bs, p)| {
                let layout = BatchLayout::replicate(&prompts[p], bs)?;
                let (_, commits, stats) =
                    run_margingate(&weights, &layout, &dc, &cfg.gate, &cfg.numerics)?;
                Ok((commits, stats))
            })
            .collect::<Result<_>>()
    })?;

    let mut m = Manifest::new("gate", cfg);
    let mut csv = Csv::new(
        "batch_size,trials,steps,triggered,repairs,r_verify,r_repair,deterministic_trials,determinism_pct,verifier_prefix_tokens",
    );
    let mut commits = Csv::new("batch_size,prompt,step,kind,margin,tentative,final");
    let mut tot = (0u64, 0u64, 0u64, 0usize, 0u64);
    for &bs in &cfg.batch_sizes {
        let rows: Vec<_> = jobs
            .iter()
            .zip(&results)
            .filter(|((b, _), _)| *b == bs)
            .collect();
        let steps: u64 = rows.iter().map(|(_, (_, st))| st.steps as u64).sum();
        let trig: u64 = rows.iter().map(|(_, (_, st))| st.triggered as u64).sum();
        let reps: u64 = rows.iter().map(|(_, (_, st))| st.repairs as u64).sum();
        let det = rows
            .iter()
            .filter(|(_, (_, st))| st.sequence_deterministic)
            .count();
        let prefix: u64 = rows.iter().map(|(_, (_, st))| st.verifier_prefix_tokens).sum();
        tot = (
            tot.0 + steps,
            tot.1 + trig,
            tot.2 + reps,
            tot.3 + det,
            tot.4 + prefix,
        );
        csv.row(&[
            s(bs),
            s(rows.len()),
            s(steps),
            s(trig),
            s(reps),
            s(trig as f64 / steps as f64),
            s(reps as f64 / steps as f64),
            s(det),
            s(100.0 * det as f64 / rows.len() as f64),
            s(prefix),
        ]);
        for ((_, p), (cs, _)) in &rows {
            for c in cs {
                commits.row(&[
                    s(bs),
                    s(*p),
                    s(c.step),
                    kind_str(c.kind).into(),
                    s(c.margin),
                    s(c.tentative),
                    s(c.final_token),
                ]);
            }
        }
    }
    csv.row(&[
        "all".into(),
        s(results.len()),
        s(tot.0),
        s(tot.1),
        s(tot.2),
        s(tot.1 as f64 / tot.0 as f64),
        s(tot.2 as f64 / tot.0 as f64),
        s(tot.3),
        s(100.0 * tot.3 as f64 / results.len() as f64),
        s(tot.4),
    ]);
    csv.write(out_dir, "gate.csv", &mut m)?;
    commits.write(out_dir, "commits.csv", &mut m)?;
    m.insert("tau", num(cfg.gate.tau as f64));
    m.insert("trials", results.len() as u64);
    m.insert("r_verify", num(tot.1 as f64 / tot.0 as f64));
    m.insert("r_repair", num(tot.2 as f64 / tot.0 as f64));
    m.insert(
        "determinism_pct",
        num(100.0 * tot.3 as f64 / results.len() as f64),
    );
    m.write(out_dir)?;
    Ok(m)
}

fn calibrate_inner(
    cfg: &RunConfig,
    weights: &Weights,
    prompts: &[Vec<usize>],
) -> Result<CalibrationReport> {
    let dc = decode_config(cfg);
    measure_eps(
        weights,
        prompts,
        &cfg.batch_sizes,
        &cfg.numerics,
        &dc,
        cfg.topk_source,
    )
}

fn write_calibration_csv(
    report: &CalibrationReport,
    out_dir: &Path,
    m: &mut Manifest,
) -> Result<()> {
    let mut csv = Csv::new("batch_size,sync_steps,median_eps,max_eps,pert_tau");
    for row in &report.rows {
        csv.row(&[
            row.batch_size.map(|b| b.to_string()).unwrap_or_else(|| "all".into()),
            s(row.sync_steps),
            s(row.median_eps),
            s(row.max_eps),
            s(row.pert_tau),
        ]);
    }
    csv.write(out_dir, "calibration.csv", m)
}

/// Perturbation calibration: per-batch-size ε statistics and the doubled
/// threshold.
pub fn cmd_calibrate(cfg: &RunConfig, out_dir: &Path, _workers: usize) -> Result<Manifest> {
    cfg.validate()?;
    let prompts = load_corpus(cfg, out_dir)?;
    let weights = build_model(&cfg.model)?;
    let report = calibrate_inner(cfg, &weights, &prompts)?;
    let mut m = Manifest::new("calibrate", cfg);
    write_calibration_csv(&report, out_dir, &mut m)?;
    let overall = report.overall();
    m.insert("median_eps", num(overall.median_eps));
    m.insert("max_eps", num(overall.max_eps));
    m.insert("pert_tau", num(overall.pert_tau));
    m.write(out_dir)?;
    Ok(m)
}

fn sweep_inner(
    cfg: &RunConfig,
    weights: &Weights,
    prompts: &[Vec<usize>],
) -> Result<(SweepResult, Vec<f32>, Option<f64>)> {
    let dc = decode_config(cfg);
    let (grid, pert_tau) = match &cfg.grid {
        Some(g) => (g.iter().map(|&t| t as f32).collect::<Vec<f32>>(), None),
        None => {
            let report = calibrate_inner(cfg, weights, prompts)?;
            let pert_tau = report.overall().pert_tau;
            (default_grid(pert_tau), Some(pert_tau))
        }
    };
    let result = sweep_until_deterministic(
        weights,
        prompts,
        &cfg.batch_sizes,
        &grid,
        &cfg.numerics,
        &dc,
    )?;
    Ok((result, grid, pert_tau))
}

fn write_sweep_csv(result: &SweepResult, out_dir: &Path, m: &mut Manifest) -> Result<()> {
    let mut csv = Csv::new(
        "tau,trials,steps,triggered,repairs,trigger_rate,repair_rate,deterministic_trials,determinism_rate,verifier_prefix_tokens,is_tau_100",
    );
    for row in &result.rows {
        csv.row(&[
            s(row.tau),
            s(row.trials),
            s(row.steps),
            s(row.triggered),
            s(row.repairs),
            s(row.trigger_rate()),
            s(row.repair_rate()),
            s(row.deterministic_trials),
            s(row.determinism_rate()),
            s(row.verifier_prefix_tokens),
            s(result.tau_100 == Some(row.tau)),
        ]);
    }
    csv.write(out_dir, "pareto.csv", m)
}

/// Threshold sweep over the grid (configured or derived from calibration),
/// extended until a fully deterministic τ appears.
pub fn cmd_sweep(cfg: &RunConfig, out_dir: &Path, _workers: usize) -> Result<Manifest> {
    cfg.validate()?;
    let prompts = load_corpus(cfg, out_dir)?;
    let weights = build_model(&cfg.model)?;
    let (result, grid, pert_tau) = sweep_inner(cfg, &weights, &prompts)?;
    let mut m = Manifest::new("sweep", cfg);
    write_sweep_csv(&result, out_dir, &mut m)?;
    if let Some(p) = pert_tau {
        m.insert("pert_tau", num(p));
    }
    m.insert(
        "grid",
        serde_json::Value::Array(grid.iter().map(|&t| num(t as f64)).collect()),
    );
    match result.tau_100 {
        Some(t) => m.insert("tau_100", num(t as f64)),
        None => m.insert("tau_100", serde_json::Value::Null),
    }
    m.write(out_dir)?;
    Ok(m)
}

/// Held-out corpora for the transfer check, derived from the shipped
/// corpus seed: same shape, half-length, and mixed lengths.
fn transfer_corpora(cfg: &RunConfig) -> Result<Vec<(String, Vec<Vec<usize>>)>> {
    let base = &cfg.corpus;
    let half = (base.prompt_len / 2).max(1);
    let specs = [
        ("held-same-shape", base.prompt_len, base.prompt_len, base.seed + 1),
        ("held-short", half, half, base.seed + 2),
        ("held-mixed", base.prompt_len, half.min(base.prompt_len), base.seed + 3),
    ];
    let mut corpora = Vec::new();
    for (name, len, len_min, seed) in specs {
        let spec = CorpusSpec {
            prompt_count: base.prompt_count,
            prompt_len: len,
            prompt_len_min: len_min,
            decode_cap: base.decode_cap,
            seed,
        };
        corpora.push((name.to_string(), generate_prompts(&spec, cfg.model.vocab)?));
    }
    Ok(corpora)
}

fn transfer_inner(
    cfg: &RunConfig,
    weights: &Weights,
    tau: f32,
    out_dir: &Path,
    m: &mut Manifest,
) -> Result<()> {
    let dc = decode_config(cfg);
    let corpora = transfer_corpora(cfg)?;
    let rows = transfer_check(weights, tau, &corpora, &cfg.batch_sizes, &cfg.numerics, &dc)?;
    let mut csv = Csv::new(
        "corpus,trials,trigger_rate,repair_rate,determinism_rate,verifier_prefix_tokens",
    );
    for row in &rows {
        csv.row(&[
            row.name.clone(),
            s(row.trials),
            s(row.trigger_rate),
            s(row.repair_rate),
            s(row.determinism_rate),
            s(row.verifier_prefix_tokens),
        ]);
        m.insert(&format!("determinism_rate.{}", row.name), num(row.determinism_rate));
    }
    csv.write(out_dir, "transfer.csv", m)?;
    m.insert("tau", num(tau as f64));
    Ok(())
}

/// Fixed-τ transfer: selects τ₁₀₀ on the shipped corpus, then re-measures
/// the gate on held-out corpora without re-selection.
pub fn cmd_transfer(cfg: &RunConfig, out_dir: &Path, _workers: usize) -> Result<Manifest> {
    cfg.validate()?;
    let prompts = load_corpus(cfg, out_dir)?;
    let weights = build_model(&cfg.model)?;
    let (result, _, _) = sweep_inner(cfg, &weights, &prompts)?;
    let tau = result.tau_100.ok_or_else(|| {
        Error::Internal("sweep extension ended without a deterministic threshold".into())
    })?;
    let mut m = Manifest::new("transfer", cfg);
    transfer_inner(cfg, &weights, tau, out_dir, &mut m)?;
    m.write(out_dir)?;
    Ok(m)
}

/// The whole reproduction surface in one run: diagnose, oracle, gate,
/// calibrate, sweep, and transfer, sharing the sweep between the last two,
/// plus a plain-text digest of the headline numbers.
pub fn cmd_report(cfg: &RunConfig, out_dir: &Path, workers: usize) -> Result<Manifest> {
    cfg.validate()?;
    let diagnose = cmd_diagnose(cfg, out_dir, workers)?;
    let oracle = cmd_oracle(cfg, out_dir, workers)?;
    let gate = cmd_gate(cfg, out_dir, workers)?;

    let prompts = load_corpus(cfg, out_dir)?;
    let weights = build_model(&cfg.model)?;
    let calib = calibrate_inner(cfg, &weights, &prompts)?;
    let mut m = Manifest::new("report", cfg);
    write_calibration_csv(&calib, out_dir, &mut m)?;
    let (result, grid, pert_tau) = match &cfg.grid {
        Some(g) => {
            let grid: Vec<f32> = g.iter().map(|&t| t as f32).collect();
            let dc = decode_config(cfg);
            let r = sweep_until_deterministic(
                &weights,
                &prompts,
                &cfg.batch_sizes,
                &grid,
                &cfg.numerics,
                &dc,
            )?;
            (r, grid, None)
        }
        None => {
            let pert_tau = calib.overall().pert_tau;
            let grid = default_grid(pert_tau);
            let dc = decode_config(cfg);
            let r = sweep_until_deterministic(
                &weights,
                &prompts,
                &cfg.batch_sizes,
                &grid,
                &cfg.numerics,
                &dc,
            )?;
            (r, grid, Some(pert_tau))
        }
    };
    write_sweep_csv(&result, out_dir, &mut m)?;
    let tau = result.tau_100.ok_or_else(|| {
        Error::Internal("sweep extension ended without a deterministic threshold".into())
    })?;
    transfer_inner(cfg, &weights, tau, out_dir, &mut m)?;

    // Merge the sub-command summaries under prefixed keys.
    for (prefix, sub) in [
        ("diagnose", &diagnose),
        ("oracle", &oracle),
        ("gate", &gate),
    ] {
        for (k, v) in &sub.summary {
            m.summary.insert(format!("{prefix}.{k}"), v.clone());
        }
    }
    if let Some(p) = pert_tau {
        m.insert("pert_tau", num(p));
    }
    m.insert(
        "grid",
        serde_json::Value::Array(grid.iter().map(|&t| num(t as f64)).collect()),
    );
    m.insert("tau_100", num(tau as f64));

    let mut digest = String::new();
    let _ = writeln!(digest, "config {}", cfg.hash());
    for key in [
        "diagnose.flip_rate",
        "diagnose.diverging_trials",
        "diagnose.trials",
        "diagnose.spike_ratio_last_k",
        "diagnose.spike_ratio_last_v",
        "oracle.determinism_pct",
        "oracle.repairs_per_seq",
        "gate.r_verify",
        "gate.determinism_pct",
        "pert_tau",
        "tau_100",
    ] {
        if let Some(v) = m.summary.get(key) {
            let _ = writeln!(digest, "{key} {v}");
        }
    }
    let path = out_dir.join("report.txt");
    std::fs::write(&path, digest.as_bytes()).map_err(|e| Error::io(&path, e))?;
    m.record_output(out_dir, "report.txt")?;
    m.write(out_dir)?;
    Ok(m)
}
