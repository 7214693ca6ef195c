//! Perturbation calibration and the threshold sweep: measures how far the
//! batched logits stray from the reference (ε_pert), derives a sweep range
//! from it, runs the gate across a τ grid, and picks the smallest fully
//! deterministic threshold (τ₁₀₀). A fixed-τ transfer check re-runs the
//! gate on held-out corpora without re-selecting.

use crate::diagnostics::{find_first_divergence, median};
use crate::engines::{decode_batched, decode_reference, BatchLayout, DecodeConfig};
use crate::error::{Error, Result};
use crate::model::Weights;
use crate::numerics::NumericsProfile;
use crate::policy::{run_margingate, GateConfig};
use serde::{Deserialize, Serialize};

/// Which run's per-step top-50 indices anchor the ε measurement. The
/// reference run is the stable choice (its index set cannot shift when the
/// batched run misbehaves); batched is kept as an option.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TopkSource {
    #[default]
    Reference,
    Batched,
}

/// How many top logit indices the ε measurement inspects per step.
pub const EPS_TOP_K: usize = 50;

/// ε statistics for one slice of the corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationRow {
    /// `None` pools every batch size.
    pub batch_size: Option<usize>,
    /// Synchronous steps measured.
    pub sync_steps: usize,
    pub median_eps: f64,
    pub max_eps: f64,
    /// Always exactly `2 × max_eps`.
    pub pert_tau: f64,
}

impl CalibrationRow {
    fn from_samples(batch_size: Option<usize>, eps: &mut Vec<f64>) -> CalibrationRow {
        eps.sort_by(f64::total_cmp);
        let max_eps = eps.last().copied().unwrap_or(0.0);
        CalibrationRow {
            batch_size,
            sync_steps: eps.len(),
            median_eps: if eps.is_empty() { 0.0 } else { median(eps) },
            max_eps,
            pert_tau: 2.0 * max_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    /// One row per batch size, then the pooled row last.
    pub rows: Vec<CalibrationRow>,
}

impl CalibrationReport {
    /// The pooled-over-everything row.
    pub fn overall(&self) -> &CalibrationRow {
        self.rows.last().expect("report always has the pooled row")
    }
}

/// Measures ε_pert = max |ℓ_batched − ℓ_reference| over the top-50 logit
/// indices, at every synchronous step of every (prompt × batch size)
/// trial. Steps where either run lacks logits (a length-mismatch event)
/// are skipped.
pub fn measure_eps(
    weights: &Weights,
    prompts: &[Vec<usize>],
    batch_sizes: &[usize],
    profile: &NumericsProfile,
    cfg: &DecodeConfig,
    source: TopkSource,
) -> Result<CalibrationReport> {
    if prompts.is_empty() {
        return Err(Error::InvalidArgument(
            "eps measurement needs a non-empty corpus".into(),
        ));
    }
    if batch_sizes.is_empty() {
        return Err(Error::InvalidArgument(
            "eps measurement needs at least one batch size".into(),
        ));
    }
    let mut cfg = cfg.clone();
    cfg.keep_logits = true;
    cfg.snapshot_kv = false;

    let mut per_bs: Vec<(usize, Vec<f64>)> =
        batch_sizes.iter().map(|&bs| (bs, Vec::new())).collect();
    for prompt in prompts {
        let reference = decode_reference(weights, prompt, &cfg)?;
        for (bs, samples) in per_bs.iter_mut() {
            let layout = BatchLayout::replicate(prompt, *bs)?;
            let batched = decode_batched(weights, &layout, &cfg, profile)?;
            let batched = &batched[layout.protected_row];
            let p_div = find_first_divergence(batched, &reference);
            let sync_end = match p_div {
                Some(p) => p + 1,
                None => reference.steps.len(),
            };
            for i in 0..sync_end {
                let (Some(r), Some(b)) = (reference.steps.get(i), batched.steps.get(i)) else {
                    continue;
                };
                let (Some(rl), Some(bl)) = (r.logits.as_ref(), b.logits.as_ref()) else {
                    return Err(Error::InvalidArgument(
                        "eps measurement needs full logits".into(),
                    ));
                };
                let window = match source {
                    TopkSource::Reference => &r.top_k,
                    TopkSource::Batched => &b.top_k,
                };
                let eps = window
                    .iter()
                    .take(EPS_TOP_K)
                    .map(|&(id, _)| (rl[id] as f64 - bl[id] as f64).abs())
                    .fold(0.0f64, f64::max);
                samples.push(eps);
            }
        }
    }

    let mut pooled: Vec<f64> = per_bs.iter().flat_map(|(_, s)| s.iter().copied()).collect();
    let mut rows: Vec<CalibrationRow> = per_bs
        .iter_mut()
        .map(|(bs, samples)| CalibrationRow::from_samples(Some(*bs), samples))
        .collect();
    rows.push(CalibrationRow::from_samples(None, &mut pooled));
    Ok(CalibrationReport { rows })
}

/// One τ grid point of the sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub tau: f32,
    pub trials: usize,
    pub steps: u64,
    pub triggered: u64,
    pub repairs: u64,
    pub deterministic_trials: usize,
    pub verifier_prefix_tokens: u64,
}

impl SweepRow {
    pub fn trigger_rate(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.triggered as f64 / self.steps as f64
        }
    }

    pub fn repair_rate(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.repairs as f64 / self.steps as f64
        }
    }

    pub fn determinism_rate(&self) -> f64 {
        if self.trials == 0 {
            0.0
        } else {
            self.deterministic_trials as f64 / self.trials as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    /// Ascending in τ.
    pub rows: Vec<SweepRow>,
    /// Smallest grid τ whose determinism rate is 100%.
    pub tau_100: Option<f32>,
}

/// Smallest τ with every trial deterministic, over rows ascending in τ.
pub fn select_tau_100(rows: &[SweepRow]) -> Option<f32> {
    rows.iter()
        .find(|r| r.trials > 0 && r.deterministic_trials == r.trials)
        .map(|r| r.tau)
}

/// Doubling grid anchored at the measured perturbation threshold: seven
/// points covering pert_τ/16 up to 4·pert_τ. Falls back to an anchor of
/// 1.0 when the measured perturbation is zero.
pub fn default_grid(pert_tau: f64) -> Vec<f32> {
    let anchor = if pert_tau > 0.0 { pert_tau } else { 1.0 };
    (-4i32..=2)
        .map(|e| (anchor * 2f64.powi(e)) as f32)
        .collect()
}

fn gate_row(
    weights: &Weights,
    prompts: &[Vec<usize>],
    batch_sizes: &[usize],
    tau: f32,
    profile: &NumericsProfile,
    cfg: &DecodeConfig,
) -> Result<SweepRow> {
    let gate = GateConfig::margin_gate(tau);
    let mut row = SweepRow {
        tau,
        trials: 0,
        steps: 0,
        triggered: 0,
        repairs: 0,
        deterministic_trials: 0,
        verifier_prefix_tokens: 0,
    };
    for prompt in prompts {
        for &bs in batch_sizes {
            let layout = BatchLayout::replicate(prompt, bs)?;
            let (_, _, stats) = run_margingate(weights, &layout, cfg, &gate, profile)?;
            row.trials += 1;
            row.steps += stats.steps as u64;
            row.triggered += stats.triggered as u64;
            row.repairs += stats.repairs as u64;
            row.deterministic_trials += stats.sequence_deterministic as usize;
            row.verifier_prefix_tokens += stats.verifier_prefix_tokens;
        }
    }
    Ok(row)
}

/// Runs the gate across the τ grid, fresh trials per grid point.
pub fn sweep_tau(
    weights: &Weights,
    prompts: &[Vec<usize>],
    batch_sizes: &[usize],
    grid: &[f32],
    profile: &NumericsProfile,
    cfg: &DecodeConfig,
) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty tau grid".into()));
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidArgument(
            "tau grid must be strictly ascending".into(),
        ));
    }
    if grid[0] < 0.0 || grid.iter().any(|t| t.is_nan()) {
        return Err(Error::InvalidArgument(
            "tau grid entries must be >= 0".into(),
        ));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &tau in grid {
        rows.push(gate_row(weights, prompts, batch_sizes, tau, profile, cfg)?);
    }
    let tau_100 = select_tau_100(&rows);
    Ok(SweepResult { rows, tau_100 })
}

/// Hard stop for grid extension, as a multiple of the starting anchor.
pub const EXTENSION_CAP: f64 = 1e6;

/// Sweeps the given grid and keeps doubling past its end until a fully
/// deterministic τ appears or the extension cap is hit. Absence of a
/// deterministic point within the cap is reported, not an error.
pub fn sweep_until_deterministic(
    weights: &Weights,
    prompts: &[Vec<usize>],
    batch_sizes: &[usize],
    grid: &[f32],
    profile: &NumericsProfile,
    cfg: &DecodeConfig,
) -> Result<SweepResult> {
    let mut result = sweep_tau(weights, prompts, batch_sizes, grid, profile, cfg)?;
    let anchor = grid[0] as f64;
    let mut tau = grid[grid.len() - 1] as f64;
    while result.tau_100.is_none() && tau <= anchor * EXTENSION_CAP {
        tau *= 2.0;
        let row = gate_row(weights, prompts, batch_sizes, tau as f32, profile, cfg)?;
        result.rows.push(row);
        result.tau_100 = select_tau_100(&result.rows);
    }
    Ok(result)
}

/// Fixed-τ rates on one held-out corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferRow {
    pub name: String,
    pub trials: usize,
    pub trigger_rate: f64,
    pub repair_rate: f64,
    pub determinism_rate: f64,
    pub verifier_prefix_tokens: u64,
}

/// Re-runs the gate at a τ chosen elsewhere on each named corpus; no
/// re-selection happens here.
pub fn transfer_check(
    weights: &Weights,
    tau: f32,
    corpora: &[(String, Vec<Vec<usize>>)],
    batch_sizes: &[usize],
    profile: &NumericsProfile,
    cfg: &DecodeConfig,
) -> Result<Vec<TransferRow>> {
    let mut rows = Vec::with_capacity(corpora.len());
    for (name, prompts) in corpora {
        let row = gate_row(weights, prompts, batch_sizes, tau, profile, cfg)?;
        rows.push(TransferRow {
            name: name.clone(),
            trials: row.trials,
            trigger_rate: row.trigger_rate(),
            repair_rate: row.repair_rate(),
            determinism_rate: row.determinism_rate(),
            verifier_prefix_tokens: row.verifier_prefix_tokens,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelSpec};
    use crate::rng::SplitMix64;

    fn small_weights(seed: u64) -> Weights {
        build_model(&ModelSpec {
            layers: 2,
            heads: 2,
            d_model: 16,
            vocab: 64,
            max_positions: 96,
            mlp_mult: 2,
            seed,
            twin_scale: 2.0f32.powi(-5),
        })
        .unwrap()
    }

    fn prompts(seed: u64, count: usize, len: usize) -> Vec<Vec<usize>> {
        let mut rng = SplitMix64::new(seed);
        (0..count)
            .map(|_| (0..len).map(|_| rng.next_below(64) as usize).collect())
            .collect()
    }

    #[test]
    fn doubling_the_max_is_exact_for_the_reported_decimals() {
        let mut eps = vec![1.0, 4.21];
        let row = CalibrationRow::from_samples(None, &mut eps);
        assert_eq!(row.max_eps, 4.21);
        assert_eq!(row.pert_tau, 8.42);
        let mut eps = vec![0.5, 1.13];
        let row = CalibrationRow::from_samples(None, &mut eps);
        assert_eq!(row.pert_tau, 2.26);
    }

    #[test]
    fn reference_profile_measures_exactly_zero() {
        let w = small_weights(1);
        let corpus = prompts(2, 3, 6);
        let report = measure_eps(
            &w,
            &corpus,
            &[2, 4],
            &NumericsProfile::reference(),
            &DecodeConfig::new(6),
            TopkSource::Reference,
        )
        .unwrap();
        for row in &report.rows {
            assert_eq!(row.median_eps, 0.0);
            assert_eq!(row.max_eps, 0.0);
            assert_eq!(row.pert_tau, 0.0);
            assert!(row.sync_steps > 0);
        }
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let w = small_weights(1);
        let err = measure_eps(
            &w,
            &[],
            &[2],
            &NumericsProfile::reference(),
            &DecodeConfig::new(4),
            TopkSource::Reference,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn reduction_order_eps_is_positive_on_the_flip_fixture() {
        // The geometry known to flip must show a nonzero perturbation well
        // before any token flips.
        let mut spec = ModelSpec::default_with_seed(7);
        spec.layers = 8;
        spec.twin_scale = 2.0f32.powi(-6);
        let w = build_model(&spec).unwrap();
        let mut rng = SplitMix64::new(24);
        let prompt: Vec<usize> = (0..32).map(|_| rng.next_below(512) as usize).collect();
        let report = measure_eps(
            &w,
            &[prompt],
            &[8],
            &NumericsProfile::reduction_order(),
            &DecodeConfig::new(8),
            TopkSource::Reference,
        )
        .unwrap();
        assert!(report.overall().max_eps > 0.0);
        assert_eq!(
            report.overall().pert_tau,
            2.0 * report.overall().max_eps
        );
    }

    fn synthetic_row(tau: f32, trials: usize, deterministic: usize) -> SweepRow {
        SweepRow {
            tau,
            trials,
            steps: (trials * 10) as u64,
            triggered: 0,
            repairs: 0,
            deterministic_trials: deterministic,
            verifier_prefix_tokens: 0,
        }
    }

    #[test]
    fn tau_100_is_the_first_fully_deterministic_row() {
        // Determinism 97.5%, 98.3%, 98.3%, 100% over a doubling grid picks
        // the 4.0 endpoint.
        let rows = vec![
            synthetic_row(0.5, 1000, 975),
            synthetic_row(1.0, 1000, 983),
            synthetic_row(2.0, 1000, 983),
            synthetic_row(4.0, 1000, 1000),
        ];
        assert_eq!(select_tau_100(&rows), Some(4.0));
    }

    #[test]
    fn tau_100_prefers_the_smallest_when_all_pass_and_is_absent_when_none_do() {
        let all = vec![synthetic_row(0.5, 10, 10), synthetic_row(1.0, 10, 10)];
        assert_eq!(select_tau_100(&all), Some(0.5));
        let none = vec![synthetic_row(0.5, 10, 9), synthetic_row(1.0, 10, 9)];
        assert_eq!(select_tau_100(&none), None);
    }

    #[test]
    fn default_grid_is_a_doubling_ladder_around_the_anchor() {
        let grid = default_grid(8.0);
        assert_eq!(grid, vec![0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0]);
        let fallback = default_grid(0.0);
        assert_eq!(fallback.len(), 7);
        assert!((fallback[4] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn grid_must_be_ascending_and_nonnegative() {
        let w = small_weights(1);
        let corpus = prompts(2, 1, 4);
        let cfg = DecodeConfig::new(4);
        let profile = NumericsProfile::reference();
        for bad in [vec![], vec![1.0f32, 0.5], vec![-1.0, 2.0], vec![1.0, 1.0]] {
            assert!(sweep_tau(&w, &corpus, &[2], &bad, &profile, &cfg).is_err());
        }
    }

    #[test]
    fn reference_profile_sweep_is_deterministic_at_every_tau() {
        // The verifier always agrees with the batched engine under the
        // reference profile, so triggers may fire but repairs never do and
        // tau_100 is the smallest grid point.
        let w = small_weights(5);
        let corpus = prompts(6, 4, 5);
        let result = sweep_tau(
            &w,
            &corpus,
            &[2, 4],
            &[0.01, 0.1, 1.0],
            &NumericsProfile::reference(),
            &DecodeConfig::new(6),
        )
        .unwrap();
        assert_eq!(result.tau_100, Some(0.01));
        for row in &result.rows {
            assert_eq!(row.repairs, 0);
            assert_eq!(row.deterministic_trials, row.trials);
        }
        // Trigger rate is monotone in tau on this frozen corpus.
        for w in result.rows.windows(2) {
            assert!(w[0].trigger_rate() <= w[1].trigger_rate());
        }
    }

    #[test]
    fn extension_keeps_doubling_until_determinism() {
        // Start the grid far below every margin; the extension must walk
        // upward until the gate verifies everything.
        let w = small_weights(5);
        let corpus = prompts(7, 2, 5);
        let result = sweep_until_deterministic(
            &w,
            &corpus,
            &[2],
            &[1e-8, 2e-8],
            &NumericsProfile::reference(),
            &DecodeConfig::new(5),
        )
        .unwrap();
        assert!(result.tau_100.is_some());
        assert!(result.rows.len() >= 2);
    }

    #[test]
    fn transfer_reuses_the_fixed_tau_without_reselecting() {
        let w = small_weights(5);
        let calibration = prompts(8, 3, 5);
        let corpora = vec![
            ("calibration".to_string(), calibration.clone()),
            ("held-out".to_string(), prompts(9, 3, 5)),
        ];
        let rows = transfer_check(
            &w,
            0.05,
            &corpora,
            &[2],
            &NumericsProfile::reference(),
            &DecodeConfig::new(5),
        )
        .unwrap();
        assert_eq!(rows.len(), 2);
        // Same corpus, same tau: identical rates as a direct gate run.
        let direct = gate_row(
            &w,
            &calibration,
            &[2],
            0.05,
            &NumericsProfile::reference(),
            &DecodeConfig::new(5),
        )
        .unwrap();
        assert_eq!(rows[0].trigger_rate, direct.trigger_rate());
        assert_eq!(rows[0].determinism_rate, 1.0);
    }
}
