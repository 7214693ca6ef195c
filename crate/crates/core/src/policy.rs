//! Intervention policies: oracle single-column repair and the margin-gated
//! selective verifier.
//!
//! Both policies decode the protected row under batched numerics while a
//! shadow single-row run under the reference profile tracks the committed
//! prefix. The shadow's pending logits are, by construction, exactly what
//! a from-scratch recompute of the committed prefix would produce (the
//! forward pass is pure and position-indexed), so consulting it is
//! bit-equivalent to calling the full-prefix verifier; the test suite
//! cross-checks that equivalence against a naive gate built directly on
//! [`verify_step`](crate::engines::verify_step). The cost model still
//! charges each consultation as a full-prefix recompute, which is what the
//! verifier contract specifies.

use crate::engines::{
    greedy_argmax, margin_of, top_k_of, BatchLayout, DecodeConfig, DecodeTrace, StepRecord,
    StopReason,
};
use crate::error::{Error, Result};
use crate::kvcache::KvCache;
use crate::model::{forward_step, Weights};
use crate::numerics::NumericsProfile;

/// Gate behavior selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    /// Verify only when the top-1/top-2 margin is below τ.
    MarginGate,
    /// Verify every step; repair iff the tokens differ.
    Oracle,
    /// Verify every step regardless of margin (τ = +∞ analog).
    AlwaysVerify,
    /// Never verify (τ = 0 analog); plain batched decoding.
    NeverVerify,
}

/// Threshold plus mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateConfig {
    pub tau: f32,
    pub mode: GateMode,
}

impl GateConfig {
    pub fn margin_gate(tau: f32) -> GateConfig {
        GateConfig {
            tau,
            mode: GateMode::MarginGate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau.is_nan() || self.tau < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "gate threshold must be >= 0, got {}",
                self.tau
            )));
        }
        Ok(())
    }

    /// The threshold actually compared against margins.
    fn effective_tau(&self) -> f32 {
        match self.mode {
            GateMode::MarginGate => self.tau,
            GateMode::Oracle | GateMode::AlwaysVerify => f32::INFINITY,
            GateMode::NeverVerify => 0.0,
        }
    }
}

/// What happened at one decode step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommitKind {
    Fast,
    Verified,
    Repair,
}

/// Per-step commit log entry.
#[derive(Debug, Clone, PartialEq)]
pub struct CommitRecord {
    pub step: usize,
    pub kind: CommitKind,
    pub margin: f32,
    pub tentative: usize,
    pub final_token: usize,
}

/// Aggregate outcome of one policy run over the protected row.
#[derive(Debug, Clone, PartialEq)]
pub struct GateStats {
    pub steps: usize,
    pub triggered: usize,
    pub repairs: usize,
    /// Triggered steps / total steps.
    pub r_verify: f64,
    /// Repair commits / total steps.
    pub r_repair: f64,
    /// Emitted sequence equals the reference decode of the same prompt.
    pub sequence_deterministic: bool,
    /// Cost model: committed-prefix length in tokens, summed over verifier
    /// invocations (each one is contractually a full-prefix recompute).
    pub verifier_prefix_tokens: u64,
}

/// Top-1 minus top-2 value of a logit or top-k window.
pub fn margin(values: &[f32]) -> Result<f32> {
    if values.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "margin needs at least 2 values, got {}",
            values.len()
        )));
    }
    Ok(margin_of(values))
}

/// Trigger rate of a threshold replayed over a frozen margin stream.
pub fn offline_trigger_rate(margins: &[f32], tau: f32) -> f64 {
    if margins.is_empty() {
        return 0.0;
    }
    margins.iter().filter(|&&g| g < tau).count() as f64 / margins.len() as f64
}

struct PolicyOutcome {
    trace: DecodeTrace,
    commits: Vec<CommitRecord>,
    stats: GateStats,
}

/// The shared gate loop.
///
/// Per step: the batched forward has already produced pending logits and a
/// tentative column (appended at the previous advance). If the margin
/// clears τ the tentative token fast-commits. Otherwise the verifier is
/// consulted: agreement keeps the tentative state (verified commit);
/// disagreement emits the verifier token and overwrites only the
/// repair-current column, the one written by the forward whose logits are
/// under dispute. Earlier columns are never rewritten.
fn run_policy(
    weights: &Weights,
    layout: &BatchLayout,
    cfg: &DecodeConfig,
    gate: &GateConfig,
    profile: &NumericsProfile,
) -> Result<PolicyOutcome> {
    cfg.validate()?;
    gate.validate()?;
    profile.validate()?;
    let prompt = &layout.rows[layout.protected_row];
    let m = prompt.len();
    let spec = &weights.spec;
    if m + cfg.max_new_tokens > spec.max_positions {
        return Err(Error::Capacity(format!(
            "prompt length {m} plus decode cap {} exceeds max_positions {}",
            cfg.max_new_tokens, spec.max_positions
        )));
    }
    let batch_size = layout.batch_size();
    let noise_row = layout.protected_row;
    let tau = gate.effective_tau();

    // Non-protected rows always fast-commit and never feed back into the
    // protected row (row isolation), so only the protected row is computed.
    let mut cache = KvCache::new(spec.layers, 1, m + cfg.max_new_tokens, spec.d_model)?;
    let mut shadow = KvCache::new(spec.layers, 1, m + cfg.max_new_tokens, spec.d_model)?;
    let reference = NumericsProfile::reference();

    let mut pending: Vec<f32> = Vec::new();
    let mut shadow_pending: Vec<f32> = Vec::new();
    for (q, &tok) in prompt.iter().enumerate() {
        let out = forward_step(weights, &cache, 0, tok, q, profile, batch_size, noise_row)?;
        cache.append_column(0, &out.new_columns)?;
        pending = out.logits;
        let out = forward_step(weights, &shadow, 0, tok, q, &reference, 1, 0)?;
        shadow.append_column(0, &out.new_columns)?;
        shadow_pending = out.logits;
    }

    let mut snapshots = Vec::new();
    if cfg.snapshot_kv {
        snapshots.push(cache.column_at(0, m - 1)?);
    }

    let mut steps: Vec<StepRecord> = Vec::with_capacity(cfg.max_new_tokens);
    let mut commits: Vec<CommitRecord> = Vec::with_capacity(cfg.max_new_tokens);
    let mut stop = StopReason::Cap;
    let mut triggered_count = 0usize;
    let mut repairs = 0usize;
    let mut prefix_tokens = 0u64;
    let mut deterministic = true;

    for t in 0..cfg.max_new_tokens {
        let tentative_token = greedy_argmax(&pending);
        let g = margin_of(&pending);
        let shadow_token = greedy_argmax(&shadow_pending);
        let triggered = g < tau;

        let (kind, final_token) = if !triggered {
            (CommitKind::Fast, tentative_token)
        } else {
            triggered_count += 1;
            prefix_tokens += (m + t) as u64;
            if shadow_token == tentative_token {
                (CommitKind::Verified, tentative_token)
            } else {
                // Repair: overwrite only the disputed column with the
                // verifier's, and prove nothing else moved.
                let position = m + t - 1;
                let outside_before = cache.digest_excluding(0, position);
                let repair_col = shadow.column_at(0, position)?;
                cache.overwrite_column(0, position, &repair_col)?;
                if cache.digest_excluding(0, position) != outside_before {
                    return Err(Error::Internal(format!(
                        "repair at step {t} touched cache state outside position {position}"
                    )));
                }
                repairs += 1;
                (CommitKind::Repair, shadow_token)
            }
        };

        if final_token != shadow_token {
            // The committed prefix leaves the reference trajectory here;
            // the sequence can no longer be deterministic.
            deterministic = false;
        }

        commits.push(CommitRecord {
            step: t,
            kind,
            margin: g,
            tentative: tentative_token,
            final_token,
        });
        steps.push(StepRecord {
            token: final_token,
            top_k: top_k_of(&pending, cfg.top_k),
            margin: g,
            tie: g == 0.0,
            logits: cfg.keep_logits.then(|| pending.clone()),
        });

        let hit_eos = cfg.eos_token == Some(final_token);
        let last = hit_eos || t + 1 == cfg.max_new_tokens;
        if !last || cfg.snapshot_kv {
            let out = forward_step(
                weights,
                &cache,
                0,
                final_token,
                m + t,
                profile,
                batch_size,
                noise_row,
            )?;
            cache.append_column(0, &out.new_columns)?;
            pending = out.logits;
            let out = forward_step(weights, &shadow, 0, final_token, m + t, &reference, 1, 0)?;
            shadow.append_column(0, &out.new_columns)?;
            shadow_pending = out.logits;
            if cfg.snapshot_kv {
                snapshots.push(cache.column_at(0, m + t)?);
            }
        }
        if hit_eos {
            stop = StopReason::Eos;
            break;
        }
    }

    let step_count = steps.len();
    let stats = GateStats {
        steps: step_count,
        triggered: triggered_count,
        repairs,
        r_verify: triggered_count as f64 / step_count as f64,
        r_repair: repairs as f64 / step_count as f64,
        sequence_deterministic: deterministic,
        verifier_prefix_tokens: prefix_tokens,
    };
    Ok(PolicyOutcome {
        trace: DecodeTrace {
            prompt_len: m,
            steps,
            snapshots,
            stop,
        },
        commits,
        stats,
    })
}

/// Margin-gated selective verification over the protected row.
///
/// Accepts the `MarginGate`, `AlwaysVerify`, and `NeverVerify` modes (the
/// latter two are the τ = +∞ and τ = 0 endpoints). The oracle has its own
/// entry point.
pub fn run_margingate(
    weights: &Weights,
    layout: &BatchLayout,
    cfg: &DecodeConfig,
    gate: &GateConfig,
    profile: &NumericsProfile,
) -> Result<(DecodeTrace, Vec<CommitRecord>, GateStats)> {
    if gate.mode == GateMode::Oracle {
        return Err(Error::InvalidArgument(
            "oracle mode runs via run_oracle_repair".into(),
        ));
    }
    let out = run_policy(weights, layout, cfg, gate, profile)?;
    Ok((out.trace, out.commits, out.stats))
}

/// Oracle repair: verify every step, repair exactly at true divergences.
///
/// Emits the reference token at every step by construction, so the
/// determinism flag reports true unless an internal invariant breaks; the
/// measured quantity is the repair count.
pub fn run_oracle_repair(
    weights: &Weights,
    layout: &BatchLayout,
    cfg: &DecodeConfig,
    profile: &NumericsProfile,
) -> Result<(DecodeTrace, usize, bool)> {
    let gate = GateConfig {
        tau: 0.0,
        mode: GateMode::Oracle,
    };
    let out = run_policy(weights, layout, cfg, &gate, profile)?;
    Ok((
        out.trace,
        out.stats.repairs,
        out.stats.sequence_deterministic,
    ))
}
