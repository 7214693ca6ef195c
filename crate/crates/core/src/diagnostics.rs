//! Measurement machinery over decode traces: flip-rate accounting,
//! divergence-aligned K/V deviation statistics, logit geometry around the
//! argmax, margin recall, and the per-layer deviation profile.
//!
//! Everything here is pure aggregation over immutable traces. Each
//! statistic has an independently written brute-force twin in the tests;
//! the implementations must match those exactly.

use crate::engines::DecodeTrace;
use crate::error::{Error, Result};
use crate::kvcache::column_deviation;

/// Neighborhood widths for the logit-cluster statistic N(Δ).
pub const CLUSTER_DELTAS: [f32; 4] = [0.25, 0.5, 1.0, 2.0];

/// Cutoffs for the cumulative "reference token inside batched top-K" rate.
pub const IDENTITY_KS: [usize; 4] = [2, 3, 8, 50];

/// How far before the divergence the per-trial slope window reaches.
pub const SLOPE_WINDOW: i64 = 64;

/// A batched trace and the reference trace for the same prompt.
#[derive(Debug, Clone, Copy)]
pub struct TracePair<'a> {
    pub batched: &'a DecodeTrace,
    pub reference: &'a DecodeTrace,
}

/// First position where the two runs stop agreeing.
///
/// Compared over the overlap; if one trace is a strict prefix of the other
/// the divergence sits at the first missing position, so sequence-level
/// determinism fails on length differences too. Identical token sequences
/// of equal length decoded under one config always share a stop reason, so
/// tokens are the whole comparison.
pub fn find_first_divergence(batched: &DecodeTrace, reference: &DecodeTrace) -> Option<usize> {
    let b = batched.tokens();
    let r = reference.tokens();
    let n = b.len().min(r.len());
    if let Some(i) = (0..n).find(|&i| b[i] != r[i]) {
        return Some(i);
    }
    if b.len() != r.len() {
        return Some(n);
    }
    None
}

/// Per-trial divergence accounting.
///
/// Synchronous samples are the positions with no earlier divergence: when
/// a trial diverges at `p_div` that is positions `0..=p_div` (the event
/// position itself still had a clean prefix), otherwise the whole trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DivergenceReport {
    pub p_div: Option<usize>,
    pub sync_samples: usize,
    pub events: usize,
}

pub fn divergence_report(pair: &TracePair) -> DivergenceReport {
    match find_first_divergence(pair.batched, pair.reference) {
        Some(p) => DivergenceReport {
            p_div: Some(p),
            sync_samples: p + 1,
            events: 1,
        },
        None => DivergenceReport {
            p_div: None,
            sync_samples: pair.reference.steps.len(),
            events: 0,
        },
    }
}

/// Corpus-level flip rate: Σ events / Σ synchronous samples.
pub fn flip_rate(reports: &[DivergenceReport]) -> Result<f64> {
    if reports.is_empty() {
        return Err(Error::EmptyInput("flip_rate over no trials".into()));
    }
    let events: usize = reports.iter().map(|r| r.events).sum();
    let sync: usize = reports.iter().map(|r| r.sync_samples).sum();
    if sync == 0 {
        return Err(Error::Undefined(
            "flip rate has no synchronous samples".into(),
        ));
    }
    Ok(events as f64 / sync as f64)
}

/// One aggregated point of the divergence-aligned deviation series.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationPoint {
    /// Token offset from the divergence position (Δ = 0 is the flipped
    /// token's own column).
    pub delta: i64,
    pub mean_err_k: f64,
    pub mean_err_v: f64,
    /// Trials contributing at this offset.
    pub trials: usize,
}

/// Divergence-aligned K/V deviation statistics, per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct KvDeviationProfile {
    /// Per layer, sorted by Δ.
    pub series: Vec<Vec<DeviationPoint>>,
    pub pre_median_k: Vec<f64>,
    pub pre_median_v: Vec<f64>,
    /// Δ=0 deviation divided by the pre-divergence median; absent when the
    /// pre median is zero.
    pub spike_ratio_k: Vec<Option<f64>>,
    pub spike_ratio_v: Vec<Option<f64>>,
    /// Median across trials of the per-trial least-squares slope over the
    /// pre-divergence window; absent when no trial has two such points.
    pub slope_k: Vec<Option<f64>>,
    pub slope_v: Vec<Option<f64>>,
}

pub(crate) fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Ordinary least squares slope through (x, y) points; `None` below two
/// points or when x has no spread.
fn ols_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some(sxy / sxx)
}

/// Aligns every diverging trial's K/V snapshots to its own divergence
/// position and aggregates deviations per (layer, Δ).
///
/// Snapshot entry `i` holds the column of token position `i - 1` (entry 0
/// is the prompt edge), so Δ = i - 1 - p_div. Trials without a divergence
/// are skipped; having none at all is an error.
pub fn align_kv_deviation(pairs: &[TracePair]) -> Result<KvDeviationProfile> {
    let mut per_trial: Vec<(usize, Vec<Vec<(i64, f64, f64)>>)> = Vec::new();
    let mut layers = 0;
    for pair in pairs {
        let Some(p_div) = find_first_divergence(pair.batched, pair.reference) else {
            continue;
        };
        if pair.batched.snapshots.is_empty() || pair.reference.snapshots.is_empty() {
            return Err(Error::InvalidArgument(
                "divergence-aligned deviation needs K/V snapshots".into(),
            ));
        }
        let n = pair.batched.snapshots.len().min(pair.reference.snapshots.len());
        layers = pair.batched.snapshots[0].layers();
        let mut trial: Vec<Vec<(i64, f64, f64)>> = vec![Vec::new(); layers];
        for i in 0..n {
            let delta = i as i64 - 1 - p_div as i64;
            let devs = column_deviation(&pair.batched.snapshots[i], &pair.reference.snapshots[i])?;
            for (layer, (dk, dv)) in devs.into_iter().enumerate() {
                trial[layer].push((delta, dk as f64, dv as f64));
            }
        }
        per_trial.push((p_div, trial));
    }
    if per_trial.is_empty() {
        return Err(Error::EmptyInput(
            "no diverging trials to align".into(),
        ));
    }

    let mut series = Vec::with_capacity(layers);
    let mut pre_median_k = Vec::with_capacity(layers);
    let mut pre_median_v = Vec::with_capacity(layers);
    let mut spike_ratio_k = Vec::with_capacity(layers);
    let mut spike_ratio_v = Vec::with_capacity(layers);
    let mut slope_k = Vec::with_capacity(layers);
    let mut slope_v = Vec::with_capacity(layers);
    for layer in 0..layers {
        let mut by_delta: std::collections::BTreeMap<i64, (f64, f64, usize)> =
            std::collections::BTreeMap::new();
        for (_, trial) in &per_trial {
            for &(delta, dk, dv) in &trial[layer] {
                let e = by_delta.entry(delta).or_insert((0.0, 0.0, 0));
                e.0 += dk;
                e.1 += dv;
                e.2 += 1;
            }
        }
        let layer_series: Vec<DeviationPoint> = by_delta
            .into_iter()
            .map(|(delta, (sk, sv, n))| DeviationPoint {
                delta,
                mean_err_k: sk / n as f64,
                mean_err_v: sv / n as f64,
                trials: n,
            })
            .collect();

        let mut pre_k: Vec<f64> = layer_series
            .iter()
            .filter(|p| p.delta < 0)
            .map(|p| p.mean_err_k)
            .collect();
        let mut pre_v: Vec<f64> = layer_series
            .iter()
            .filter(|p| p.delta < 0)
            .map(|p| p.mean_err_v)
            .collect();
        pre_k.sort_by(f64::total_cmp);
        pre_v.sort_by(f64::total_cmp);
        let pm_k = if pre_k.is_empty() { 0.0 } else { median(&pre_k) };
        let pm_v = if pre_v.is_empty() { 0.0 } else { median(&pre_v) };
        let at_zero = layer_series.iter().find(|p| p.delta == 0);
        spike_ratio_k.push(match (at_zero, pm_k > 0.0) {
            (Some(p), true) => Some(p.mean_err_k / pm_k),
            _ => None,
        });
        spike_ratio_v.push(match (at_zero, pm_v > 0.0) {
            (Some(p), true) => Some(p.mean_err_v / pm_v),
            _ => None,
        });
        pre_median_k.push(pm_k);
        pre_median_v.push(pm_v);

        let mut trial_slopes_k = Vec::new();
        let mut trial_slopes_v = Vec::new();
        for (_, trial) in &per_trial {
            let window: Vec<&(i64, f64, f64)> = trial[layer]
                .iter()
                .filter(|(d, _, _)| *d < 0 && *d >= -SLOPE_WINDOW)
                .collect();
            let pk: Vec<(f64, f64)> = window.iter().map(|p| (p.0 as f64, p.1)).collect();
            let pv: Vec<(f64, f64)> = window.iter().map(|p| (p.0 as f64, p.2)).collect();
            if let Some(s) = ols_slope(&pk) {
                trial_slopes_k.push(s);
            }
            if let Some(s) = ols_slope(&pv) {
                trial_slopes_v.push(s);
            }
        }
        trial_slopes_k.sort_by(f64::total_cmp);
        trial_slopes_v.sort_by(f64::total_cmp);
        slope_k.push((!trial_slopes_k.is_empty()).then(|| median(&trial_slopes_k)));
        slope_v.push((!trial_slopes_v.is_empty()).then(|| median(&trial_slopes_v)));
        series.push(layer_series);
    }
    Ok(KvDeviationProfile {
        series,
        pre_median_k,
        pre_median_v,
        spike_ratio_k,
        spike_ratio_v,
        slope_k,
        slope_v,
    })
}

/// Count of window logits within `delta` of the top entry, and whether the
/// window was exhausted (every entry inside, so the count is only a floor).
pub fn n_delta(top_k: &[(usize, f32)], delta: f32) -> (usize, bool) {
    let top = top_k[0].1;
    let n = top_k.iter().take_while(|(_, v)| *v >= top - delta).count();
    (n, n == top_k.len())
}

/// Logit geometry around the argmax: cluster sizes N(Δ) at token-stable vs
/// divergent synchronous steps, and where the reference token ranks in the
/// batched logits at divergence events.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitGeometry {
    pub stable_steps: usize,
    pub divergent_steps: usize,
    /// Mean N(Δ) per entry of [`CLUSTER_DELTAS`]; absent when the step set
    /// is empty.
    pub mean_n_stable: [Option<f64>; 4],
    pub mean_n_divergent: [Option<f64>; 4],
    /// (step, Δ) evaluations where the top-k window was exhausted and the
    /// count is a floor.
    pub exhausted: usize,
    /// Divergence events with batched logits available at the event step.
    pub events: usize,
    /// Events where the reference token sat within the batched top-K, per
    /// entry of [`IDENTITY_KS`]; cumulative in K by construction.
    pub topk_hits: [usize; 4],
}

impl LogitGeometry {
    pub fn topk_fraction(&self, i: usize) -> Option<f64> {
        (self.events > 0).then(|| self.topk_hits[i] as f64 / self.events as f64)
    }

    /// Divergent-to-stable mean cluster size ratio at Δ index `i`.
    pub fn ratio(&self, i: usize) -> Option<f64> {
        match (self.mean_n_divergent[i], self.mean_n_stable[i]) {
            (Some(d), Some(s)) if s > 0.0 => Some(d / s),
            _ => None,
        }
    }
}

/// Computes [`LogitGeometry`] over trace pairs.
///
/// Synchronous steps of a trial are `0..=p_div` when it diverges, else the
/// whole trace; the divergence event itself is the one divergent step and
/// everything earlier (plus every step of clean trials) is stable. An
/// event at a length mismatch has no batched step record, so it cannot
/// contribute logit statistics and is excluded from `events`.
pub fn logit_geometry(pairs: &[TracePair]) -> Result<LogitGeometry> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("logit geometry over no trials".into()));
    }
    let mut sum_stable = [0.0f64; 4];
    let mut sum_div = [0.0f64; 4];
    let mut stable_steps = 0usize;
    let mut divergent_steps = 0usize;
    let mut exhausted = 0usize;
    let mut events = 0usize;
    let mut topk_hits = [0usize; 4];
    for pair in pairs {
        let p_div = find_first_divergence(pair.batched, pair.reference);
        let stable_end = p_div.unwrap_or(pair.batched.steps.len());
        for step in &pair.batched.steps[..stable_end.min(pair.batched.steps.len())] {
            if step.top_k.is_empty() {
                return Err(Error::InvalidArgument(
                    "logit geometry needs top-k windows".into(),
                ));
            }
            for (i, &delta) in CLUSTER_DELTAS.iter().enumerate() {
                let (n, ex) = n_delta(&step.top_k, delta);
                sum_stable[i] += n as f64;
                exhausted += ex as usize;
            }
            stable_steps += 1;
        }
        let Some(p) = p_div else { continue };
        let Some(step) = pair.batched.steps.get(p) else {
            continue;
        };
        if step.top_k.is_empty() {
            return Err(Error::InvalidArgument(
                "logit geometry needs top-k windows".into(),
            ));
        }
        for (i, &delta) in CLUSTER_DELTAS.iter().enumerate() {
            let (n, ex) = n_delta(&step.top_k, delta);
            sum_div[i] += n as f64;
            exhausted += ex as usize;
        }
        divergent_steps += 1;
        events += 1;
        let reference_token = pair.reference.steps[p].token;
        if let Some(rank0) = step.top_k.iter().position(|(id, _)| *id == reference_token) {
            let rank = rank0 + 1;
            for (i, &k) in IDENTITY_KS.iter().enumerate() {
                if rank <= k {
                    topk_hits[i] += 1;
                }
            }
        }
    }
    let mean = |sum: [f64; 4], n: usize| -> [Option<f64>; 4] {
        std::array::from_fn(|i| (n > 0).then(|| sum[i] / n as f64))
    };
    Ok(LogitGeometry {
        stable_steps,
        divergent_steps,
        mean_n_stable: mean(sum_stable, stable_steps),
        mean_n_divergent: mean(sum_div, divergent_steps),
        exhausted,
        events,
        topk_hits,
    })
}

/// Fraction of divergence events whose batched margin falls strictly under
/// `tau`. Events without a batched step record (length mismatch) carry no
/// margin and are excluded from both sides of the fraction.
pub fn margin_recall(pairs: &[TracePair], tau: f32) -> Result<f64> {
    let mut events = 0usize;
    let mut recalled = 0usize;
    for pair in pairs {
        let Some(p) = find_first_divergence(pair.batched, pair.reference) else {
            continue;
        };
        let Some(step) = pair.batched.steps.get(p) else {
            continue;
        };
        events += 1;
        if step.margin < tau {
            recalled += 1;
        }
    }
    if events == 0 {
        return Err(Error::Undefined(
            "margin recall has no divergence events".into(),
        ));
    }
    Ok(recalled as f64 / events as f64)
}

/// Per-layer maxima of the K/V deviation over a trace, averaged across
/// trials, with the first/mid/last summary indices.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerProfile {
    pub mean_max_k: Vec<f64>,
    pub mean_max_v: Vec<f64>,
    pub first: usize,
    pub mid: usize,
    pub last: usize,
}

pub fn layer_profile(pairs: &[TracePair]) -> Result<LayerProfile> {
    let mut sums_k: Vec<f64> = Vec::new();
    let mut sums_v: Vec<f64> = Vec::new();
    let mut trials = 0usize;
    for pair in pairs {
        if pair.batched.snapshots.is_empty() || pair.reference.snapshots.is_empty() {
            return Err(Error::InvalidArgument(
                "layer profile needs K/V snapshots".into(),
            ));
        }
        let n = pair.batched.snapshots.len().min(pair.reference.snapshots.len());
        let layers = pair.batched.snapshots[0].layers();
        if sums_k.is_empty() {
            sums_k = vec![0.0; layers];
            sums_v = vec![0.0; layers];
        }
        let mut max_k = vec![0.0f64; layers];
        let mut max_v = vec![0.0f64; layers];
        for i in 0..n {
            let devs = column_deviation(&pair.batched.snapshots[i], &pair.reference.snapshots[i])?;
            for (layer, (dk, dv)) in devs.into_iter().enumerate() {
                max_k[layer] = max_k[layer].max(dk as f64);
                max_v[layer] = max_v[layer].max(dv as f64);
            }
        }
        for layer in 0..layers {
            sums_k[layer] += max_k[layer];
            sums_v[layer] += max_v[layer];
        }
        trials += 1;
    }
    if trials == 0 {
        return Ok(LayerProfile {
            mean_max_k: Vec::new(),
            mean_max_v: Vec::new(),
            first: 0,
            mid: 0,
            last: 0,
        });
    }
    for s in sums_k.iter_mut().chain(sums_v.iter_mut()) {
        *s /= trials as f64;
    }
    let layers = sums_k.len();
    Ok(LayerProfile {
        first: 0,
        mid: layers / 2,
        last: layers - 1,
        mean_max_k: sums_k,
        mean_max_v: sums_v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engines::{StepRecord, StopReason};
    use crate::kvcache::ColumnSet;
    use crate::numerics::Bf16;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    fn step(token: usize) -> StepRecord {
        StepRecord {
            token,
            top_k: vec![(token, 1.0), (token + 1, 0.0)],
            margin: 1.0,
            tie: false,
            logits: None,
        }
    }

    fn trace(tokens: &[usize]) -> DecodeTrace {
        DecodeTrace {
            prompt_len: 4,
            steps: tokens.iter().map(|&t| step(t)).collect(),
            snapshots: Vec::new(),
            stop: StopReason::Cap,
        }
    }

    #[test]
    fn divergence_is_the_first_disagreement() {
        let r = trace(&[10, 11, 12, 13]);
        let b = trace(&[10, 20, 12, 13]);
        assert_eq!(find_first_divergence(&b, &r), Some(1));
        assert_eq!(find_first_divergence(&r, &r.clone()), None);
    }

    #[test]
    fn a_missing_tail_diverges_at_the_first_missing_position() {
        let r = trace(&[10, 11]);
        let b = trace(&[10, 11, 12]);
        assert_eq!(find_first_divergence(&b, &r), Some(2));
        assert_eq!(find_first_divergence(&r, &b), Some(2));
    }

    #[test]
    fn flip_rate_matches_the_hand_computed_example() {
        // One clean trial of length 4, one diverging at index 1: the second
        // trial has two synchronous samples, so the rate is 1/6.
        let clean = TracePair {
            batched: &trace(&[1, 2, 3, 4]),
            reference: &trace(&[1, 2, 3, 4]),
        };
        let r2 = trace(&[1, 2, 3, 4]);
        let b2 = trace(&[1, 9, 3, 4]);
        let div = TracePair {
            batched: &b2,
            reference: &r2,
        };
        let reports = vec![divergence_report(&clean), divergence_report(&div)];
        assert_eq!(reports[1].sync_samples, 2);
        assert_eq!(flip_rate(&reports).unwrap(), 1.0 / 6.0);
    }

    #[test]
    fn all_clean_trials_rate_zero_and_empty_is_an_error() {
        let t = trace(&[5, 6]);
        let pair = TracePair {
            batched: &t,
            reference: &t,
        };
        let reports = vec![divergence_report(&pair); 3];
        assert_eq!(flip_rate(&reports).unwrap(), 0.0);
        assert!(flip_rate(&[]).is_err());
    }

    #[test]
    fn zero_length_traces_make_the_rate_undefined() {
        let t = trace(&[]);
        let pair = TracePair {
            batched: &t,
            reference: &t,
        };
        let err = flip_rate(&[divergence_report(&pair)]).unwrap_err();
        assert!(matches!(err, Error::Undefined(_)));
    }

    /// One-layer, one-wide column with chosen K and V deviation norms
    /// against an all-zero reference.
    fn column(dev_k: f32, dev_v: f32) -> ColumnSet {
        ColumnSet {
            k: vec![vec![Bf16::from_f32(dev_k)]],
            v: vec![vec![Bf16::from_f32(dev_v)]],
        }
    }

    fn zero_column() -> ColumnSet {
        column(0.0, 0.0)
    }

    /// Builds a pair whose batched snapshots deviate from the all-zero
    /// reference by the given K norms (V mirrors K), with tokens diverging
    /// at `p_div`.
    fn kv_pair(devs: &[f32], p_div: usize) -> (DecodeTrace, DecodeTrace) {
        let steps = devs.len() - 1;
        let ref_tokens: Vec<usize> = (0..steps).map(|i| 100 + i).collect();
        let mut bat_tokens = ref_tokens.clone();
        bat_tokens[p_div] = 999;
        let mut reference = trace(&ref_tokens);
        let mut batched = trace(&bat_tokens);
        reference.snapshots = devs.iter().map(|_| zero_column()).collect();
        batched.snapshots = devs.iter().map(|&d| column(d, d)).collect();
        (batched, reference)
    }

    #[test]
    fn spike_ratio_matches_the_injected_series() {
        // Deviation 0.5 everywhere before the divergence and 20.0 at Δ=0
        // must give pre-median 0.5 and spike 40x.
        let (batched, reference) = kv_pair(&[0.5, 0.5, 0.5, 0.5, 20.0, 0.5], 3);
        let pairs = [TracePair {
            batched: &batched,
            reference: &reference,
        }];
        let profile = align_kv_deviation(&pairs).unwrap();
        assert_eq!(profile.pre_median_k[0], 0.5);
        assert_eq!(profile.spike_ratio_k[0], Some(40.0));
        assert_eq!(profile.spike_ratio_v[0], Some(40.0));
    }

    #[test]
    fn collinear_pre_divergence_points_give_the_exact_slope() {
        // Deviations 0.5, 0.625, 0.75 at Δ = -3, -2, -1 (all exact in
        // BF16): OLS slope exactly 0.125/token.
        let (batched, reference) = kv_pair(&[0.5, 0.625, 0.75, 1.0, 1.0], 2);
        let pairs = [TracePair {
            batched: &batched,
            reference: &reference,
        }];
        let profile = align_kv_deviation(&pairs).unwrap();
        assert_eq!(profile.slope_k[0], Some(0.125));
    }

    #[test]
    fn no_diverging_trials_is_an_empty_input_error() {
        let t = trace(&[1, 2]);
        let pairs = [TracePair {
            batched: &t,
            reference: &t,
        }];
        assert!(matches!(
            align_kv_deviation(&pairs),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn cluster_count_matches_the_worked_example() {
        let window = vec![(0, 5.0f32), (1, 4.9), (2, 4.4), (3, 1.0)];
        assert_eq!(n_delta(&window, 0.25), (2, false));
        assert_eq!(n_delta(&window, 1.0), (3, false));
        // Width beyond the whole window exhausts it.
        assert_eq!(n_delta(&window, 10.0), (4, true));
    }

    fn geometry_trace(windows: Vec<Vec<(usize, f32)>>) -> DecodeTrace {
        DecodeTrace {
            prompt_len: 4,
            steps: windows
                .into_iter()
                .map(|w| StepRecord {
                    token: w[0].0,
                    margin: w[0].1 - w[1].1,
                    top_k: w,
                    tie: false,
                    logits: None,
                })
                .collect(),
            snapshots: Vec::new(),
            stop: StopReason::Cap,
        }
    }

    #[test]
    fn isolated_top_token_means_cluster_size_one() {
        // Top-1 isolated by more than 2.0 at every step: mean N(Δ) is 1.0
        // for every Δ up to 2.0, and nothing diverges.
        let windows: Vec<Vec<(usize, f32)>> = (0..5)
            .map(|i| vec![(i, 10.0f32), (i + 50, 7.5), (i + 60, 7.0)])
            .collect();
        let t = geometry_trace(windows);
        let pairs = [TracePair {
            batched: &t,
            reference: &t,
        }];
        let g = logit_geometry(&pairs).unwrap();
        assert_eq!(g.stable_steps, 5);
        assert_eq!(g.divergent_steps, 0);
        for i in 0..4 {
            assert_eq!(g.mean_n_stable[i], Some(1.0));
            assert_eq!(g.mean_n_divergent[i], None);
        }
        assert_eq!(g.events, 0);
        assert_eq!(g.topk_fraction(0), None);
    }

    #[test]
    fn reference_token_rank_lands_in_the_cumulative_buckets() {
        // Batched diverges at step 1 and the reference token is its rank-2
        // logit: it must count toward top-2, top-3, top-8 and top-50.
        let reference = geometry_trace(vec![
            vec![(1, 5.0), (2, 1.0)],
            vec![(7, 5.0), (8, 1.0)],
        ]);
        let batched = geometry_trace(vec![
            vec![(1, 5.0), (2, 1.0)],
            vec![(9, 5.0), (7, 4.9), (8, 1.0)],
        ]);
        let pairs = [TracePair {
            batched: &batched,
            reference: &reference,
        }];
        let g = logit_geometry(&pairs).unwrap();
        assert_eq!(g.events, 1);
        assert_eq!(g.topk_hits, [1, 1, 1, 1]);
        assert_eq!(g.topk_fraction(0), Some(1.0));
        assert_eq!(g.stable_steps, 1);
        assert_eq!(g.divergent_steps, 1);
    }

    #[test]
    fn recall_counts_margins_strictly_under_tau() {
        // Three diverging trials with batched margins 0.1, 0.3, 0.9.
        let mk = |margin: f32, seed: usize| -> (DecodeTrace, DecodeTrace) {
            let reference = geometry_trace(vec![vec![(seed, 5.0), (seed + 1, 1.0)]]);
            let batched = geometry_trace(vec![vec![
                (seed + 2, 5.0),
                (seed, 5.0 - margin),
            ]]);
            (batched, reference)
        };
        let trials: Vec<(DecodeTrace, DecodeTrace)> =
            vec![mk(0.1, 10), mk(0.3, 20), mk(0.9, 30)];
        let pairs: Vec<TracePair> = trials
            .iter()
            .map(|(b, r)| TracePair {
                batched: b,
                reference: r,
            })
            .collect();
        let recall = margin_recall(&pairs, 0.5).unwrap();
        assert!((recall - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(margin_recall(&pairs, f32::INFINITY).unwrap(), 1.0);
        assert_eq!(margin_recall(&pairs, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn recall_without_events_is_undefined() {
        let t = trace(&[1]);
        let pairs = [TracePair {
            batched: &t,
            reference: &t,
        }];
        assert!(matches!(
            margin_recall(&pairs, 0.5),
            Err(Error::Undefined(_))
        ));
    }

    #[test]
    fn layer_profile_isolates_the_nonzero_layer() {
        // Three layers, deviation only in layer 2's V.
        let layers = 3;
        let col = |v2: f32| ColumnSet {
            k: vec![vec![Bf16::ZERO]; layers],
            v: vec![
                vec![Bf16::ZERO],
                vec![Bf16::ZERO],
                vec![Bf16::from_f32(v2)],
            ],
        };
        let mut reference = trace(&[1, 2]);
        let mut batched = trace(&[1, 2]);
        reference.snapshots = vec![col(0.0), col(0.0), col(0.0)];
        batched.snapshots = vec![col(0.0), col(0.25), col(0.0)];
        let pairs = [TracePair {
            batched: &batched,
            reference: &reference,
        }];
        let p = layer_profile(&pairs).unwrap();
        assert_eq!(p.mean_max_k, vec![0.0, 0.0, 0.0]);
        assert_eq!(p.mean_max_v, vec![0.0, 0.0, 0.25]);
        assert_eq!((p.first, p.mid, p.last), (0, 1, 2));
    }

    #[test]
    fn constant_deviation_shows_up_at_every_layer() {
        let layers = 2;
        let col = |d: f32| ColumnSet {
            k: vec![vec![Bf16::from_f32(d)]; layers],
            v: vec![vec![Bf16::from_f32(d)]; layers],
        };
        let mut reference = trace(&[1, 2]);
        let mut batched = trace(&[1, 2]);
        reference.snapshots = vec![col(0.0); 3];
        batched.snapshots = vec![col(0.5); 3];
        let pairs = [TracePair {
            batched: &batched,
            reference: &reference,
        }];
        let p = layer_profile(&pairs).unwrap();
        assert_eq!(p.mean_max_k, vec![0.5, 0.5]);
        assert_eq!(p.mean_max_v, vec![0.5, 0.5]);
    }

    #[test]
    fn self_comparison_has_an_exactly_zero_floor() {
        let mut t = trace(&[3, 4, 5]);
        t.snapshots = (0..4)
            .map(|i| column(i as f32 * 0.125, 1.0))
            .collect();
        let pairs = [TracePair {
            batched: &t,
            reference: &t,
        }];
        let p = layer_profile(&pairs).unwrap();
        assert_eq!(p.mean_max_k, vec![0.0]);
        assert_eq!(p.mean_max_v, vec![0.0]);
    }

    /// Independent brute-force recomputations used by the fuzz equivalence
    /// test: written against the definitions, not the implementations.
    mod brute {
        use super::*;

        pub fn flip_rate(pairs: &[TracePair]) -> Option<f64> {
            let mut events = 0usize;
            let mut sync = 0usize;
            for pair in pairs {
                let b = pair.batched.tokens();
                let r = pair.reference.tokens();
                let mut diverged_at = None;
                for i in 0..b.len().max(r.len()) {
                    if b.get(i) != r.get(i) {
                        diverged_at = Some(i);
                        break;
                    }
                }
                match diverged_at {
                    Some(p) => {
                        events += 1;
                        sync += p + 1;
                    }
                    None => sync += r.len(),
                }
            }
            (sync > 0).then(|| events as f64 / sync as f64)
        }

        pub fn n_delta(window: &[(usize, f32)], delta: f32) -> usize {
            let top = window
                .iter()
                .map(|(_, v)| *v)
                .fold(f32::NEG_INFINITY, f32::max);
            window.iter().filter(|(_, v)| *v >= top - delta).count()
        }

        pub fn topk_hits(pairs: &[TracePair]) -> ([usize; 4], usize) {
            let mut hits = [0usize; 4];
            let mut events = 0usize;
            for pair in pairs {
                let b = pair.batched.tokens();
                let r = pair.reference.tokens();
                let overlap = b.len().min(r.len());
                let p = (0..overlap).find(|&i| b[i] != r[i]);
                let p = match p {
                    Some(p) => p,
                    None if b.len() != r.len() => overlap,
                    None => continue,
                };
                let Some(step) = pair.batched.steps.get(p) else {
                    continue;
                };
                events += 1;
                let want = pair.reference.steps[p].token;
                let mut sorted = step.top_k.clone();
                sorted.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
                if let Some(rank0) = sorted.iter().position(|(id, _)| *id == want) {
                    for (i, &k) in IDENTITY_KS.iter().enumerate() {
                        if rank0 + 1 <= k {
                            hits[i] += 1;
                        }
                    }
                }
            }
            (hits, events)
        }

        pub fn recall(pairs: &[TracePair], tau: f32) -> Option<f64> {
            let mut events = 0usize;
            let mut under = 0usize;
            for pair in pairs {
                let b = pair.batched.tokens();
                let r = pair.reference.tokens();
                let overlap = b.len().min(r.len());
                let p = match (0..overlap).find(|&i| b[i] != r[i]) {
                    Some(p) => p,
                    None if b.len() != r.len() => overlap,
                    None => continue,
                };
                if let Some(step) = pair.batched.steps.get(p) {
                    events += 1;
                    if step.margin < tau {
                        under += 1;
                    }
                }
            }
            (events > 0).then(|| under as f64 / events as f64)
        }

        pub fn ols(points: &[(f64, f64)]) -> Option<f64> {
            // Normal-equation form: slope = (nΣxy − ΣxΣy) / (nΣx² − (Σx)²).
            let n = points.len() as f64;
            if points.len() < 2 {
                return None;
            }
            let sx: f64 = points.iter().map(|p| p.0).sum();
            let sy: f64 = points.iter().map(|p| p.1).sum();
            let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
            let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
            let denom = n * sxx - sx * sx;
            (denom != 0.0).then(|| (n * sxy - sx * sy) / denom)
        }
    }

    /// Deterministic fuzzed trace set: a mix of clean, token-flipped, and
    /// truncated pairs with random top-k windows.
    fn fuzz_pairs(seed: u64) -> Vec<(DecodeTrace, DecodeTrace)> {
        let mut rng = SplitMix64::new(seed);
        let trials = 4 + (rng.next_u64() % 5) as usize;
        (0..trials)
            .map(|_| {
                let len = 2 + (rng.next_u64() % 8) as usize;
                let mut windows_r: Vec<Vec<(usize, f32)>> = Vec::new();
                let mut windows_b: Vec<Vec<(usize, f32)>> = Vec::new();
                for _ in 0..len {
                    let k = 2 + (rng.next_u64() % 6) as usize;
                    let mut ids: Vec<usize> = Vec::new();
                    while ids.len() < k {
                        let id = (rng.next_u64() % 64) as usize;
                        if !ids.contains(&id) {
                            ids.push(id);
                        }
                    }
                    let mut vals: Vec<f32> = (0..k)
                        .map(|_| (rng.next_unit_open() * 8.0) as f32)
                        .collect();
                    vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
                    windows_r.push(ids.iter().copied().zip(vals.iter().copied()).collect());
                    // The batched window reuses ids with a chance of a
                    // different leader.
                    let mut wb: Vec<(usize, f32)> =
                        ids.iter().copied().zip(vals.iter().copied()).collect();
                    if rng.next_u64() % 3 == 0 {
                        wb.swap(0, 1);
                        wb[0].1 += 0.25;
                        let reordered = wb.clone();
                        wb = reordered;
                        wb.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
                    }
                    windows_b.push(wb);
                }
                let mut reference = geometry_trace(windows_r);
                let mut batched = geometry_trace(windows_b);
                if rng.next_u64() % 4 == 0 && batched.steps.len() > 1 {
                    batched.steps.pop();
                }
                // Attach snapshots so slope brute-forcing has material.
                let snaps = batched.steps.len().max(reference.steps.len()) + 1;
                reference.snapshots = (0..snaps).map(|_| zero_column()).collect();
                batched.snapshots = (0..snaps)
                    .map(|_| column((rng.next_unit_open() * 0.5) as f32, 0.25))
                    .collect();
                (batched, reference)
            })
            .collect()
    }

    #[test]
    fn streaming_statistics_match_brute_force_on_fuzzed_sets() {
        for seed in 0..100u64 {
            let owned = fuzz_pairs(seed);
            let pairs: Vec<TracePair> = owned
                .iter()
                .map(|(b, r)| TracePair {
                    batched: b,
                    reference: r,
                })
                .collect();

            let reports: Vec<DivergenceReport> =
                pairs.iter().map(divergence_report).collect();
            match (flip_rate(&reports).ok(), brute::flip_rate(&pairs)) {
                (Some(a), Some(b)) => assert_eq!(a, b, "seed {seed}"),
                (a, b) => assert_eq!(a.is_none(), b.is_none(), "seed {seed} {a:?} {b:?}"),
            }

            if let Ok(g) = logit_geometry(&pairs) {
                let (hits, events) = brute::topk_hits(&pairs);
                assert_eq!(g.topk_hits, hits, "seed {seed}");
                assert_eq!(g.events, events, "seed {seed}");
                // Spot-check every batched window's N(Δ) against the naive
                // count when the window is not exhausted.
                for pair in &pairs {
                    for step in &pair.batched.steps {
                        for &delta in &CLUSTER_DELTAS {
                            let (n, exhausted) = n_delta(&step.top_k, delta);
                            if !exhausted {
                                assert_eq!(n, brute::n_delta(&step.top_k, delta));
                            }
                        }
                    }
                }
            }

            for tau in [0.0f32, 0.1, 0.5, 2.0] {
                match (margin_recall(&pairs, tau).ok(), brute::recall(&pairs, tau)) {
                    (Some(a), Some(b)) => assert_eq!(a, b, "seed {seed} tau {tau}"),
                    (a, b) => assert_eq!(a.is_none(), b.is_none(), "seed {seed}"),
                }
            }

            if let Ok(profile) = align_kv_deviation(&pairs) {
                // Recompute one trial's slope with the normal-equation form.
                let diverging: Vec<&TracePair> = pairs
                    .iter()
                    .filter(|p| find_first_divergence(p.batched, p.reference).is_some())
                    .collect();
                if let Some(pair) = diverging.first() {
                    let p_div =
                        find_first_divergence(pair.batched, pair.reference).unwrap();
                    let n = pair
                        .batched
                        .snapshots
                        .len()
                        .min(pair.reference.snapshots.len());
                    let mut pts = Vec::new();
                    for i in 0..n {
                        let delta = i as i64 - 1 - p_div as i64;
                        if delta < 0 && delta >= -SLOPE_WINDOW {
                            let dev = column_deviation(
                                &pair.batched.snapshots[i],
                                &pair.reference.snapshots[i],
                            )
                            .unwrap();
                            pts.push((delta as f64, dev[0].0 as f64));
                        }
                    }
                    if diverging.len() == 1 {
                        match (profile.slope_k[0], brute::ols(&pts)) {
                            (Some(a), Some(b)) => {
                                assert!((a - b).abs() < 1e-9, "seed {seed}: {a} vs {b}")
                            }
                            (a, b) => assert_eq!(a.is_none(), b.is_none(), "seed {seed}"),
                        }
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn cluster_size_is_monotone_in_delta(
            vals in proptest::collection::vec(-16.0f32..16.0, 2..24),
        ) {
            let mut window: Vec<(usize, f32)> = vals.iter().copied().enumerate().collect();
            window.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let mut last = 0usize;
            for &delta in &CLUSTER_DELTAS {
                let (n, _) = n_delta(&window, delta);
                prop_assert!(n >= last);
                prop_assert!(n >= 1);
                last = n;
            }
        }

        #[test]
        fn recall_is_monotone_in_tau(
            margins in proptest::collection::vec(0.0f32..4.0, 1..12),
            taus in proptest::collection::vec(0.0f32..5.0, 2..6),
        ) {
            let owned: Vec<(DecodeTrace, DecodeTrace)> = margins
                .iter()
                .enumerate()
                .map(|(i, &m)| {
                    let reference = geometry_trace(vec![vec![(i * 3, 5.0), (i * 3 + 1, 1.0)]]);
                    let batched =
                        geometry_trace(vec![vec![(i * 3 + 2, 5.0), (i * 3, 5.0 - m)]]);
                    (batched, reference)
                })
                .collect();
            let pairs: Vec<TracePair> = owned
                .iter()
                .map(|(b, r)| TracePair { batched: b, reference: r })
                .collect();
            let mut sorted = taus.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut last = -1.0f64;
            for tau in sorted {
                let r = margin_recall(&pairs, tau).unwrap();
                prop_assert!(r >= last);
                last = r;
            }
        }
    }
}
