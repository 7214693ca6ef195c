//! Three execution paths over the same weights: the batch-shape-sensitive
//! engine, the batch-invariant reference engine, and the verifier.
//!
//! Rows in a batch are arithmetically isolated: a row's forward reads its
//! own tokens, positions, and cache, and the batch enters only through the
//! reduction plan (plus the row index in injected-noise mode). Left pads
//! are excluded from attention and the cache entirely, and content tokens
//! carry per-row positions, so a padded row computes bit-identically to an
//! unpadded solo run with the same chunk count. `decode_batched` therefore
//! runs each row as an independent loop and, outside injected-noise mode,
//! computes duplicate prompts once.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kvcache::{ColumnSet, KvCache};
use crate::model::{forward_step, Weights};
use crate::numerics::{Mode, NumericsProfile};

/// A batch: one prompt per row, left-padded to a common storage length,
/// with one protected row whose behavior the policies guard.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchLayout {
    pub rows: Vec<Vec<usize>>,
    pub protected_row: usize,
}

impl BatchLayout {
    pub fn new(rows: Vec<Vec<usize>>, protected_row: usize) -> Result<BatchLayout> {
        if rows.is_empty() {
            return Err(Error::EmptyInput("batch has no rows".into()));
        }
        if rows.iter().any(|r| r.is_empty()) {
            return Err(Error::EmptyInput("batch contains an empty prompt".into()));
        }
        if protected_row >= rows.len() {
            return Err(Error::InvalidArgument(format!(
                "protected row {protected_row} out of range for {} rows",
                rows.len()
            )));
        }
        Ok(BatchLayout {
            rows,
            protected_row,
        })
    }

    /// A batch of `copies` identical rows, protecting row 0.
    pub fn replicate(prompt: &[usize], copies: usize) -> Result<BatchLayout> {
        if copies == 0 {
            return Err(Error::InvalidArgument("batch needs >= 1 copy".into()));
        }
        BatchLayout::new(vec![prompt.to_vec(); copies], 0)
    }

    pub fn batch_size(&self) -> usize {
        self.rows.len()
    }

    /// Shared storage length all rows are left-padded to.
    pub fn storage_len(&self) -> usize {
        self.rows.iter().map(|r| r.len()).max().unwrap_or(0)
    }

    /// Leading pad count for a row.
    pub fn pad_offset(&self, row: usize) -> usize {
        self.storage_len() - self.rows[row].len()
    }
}

/// Decode-loop settings shared by all engines.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeConfig {
    pub max_new_tokens: usize,
    pub eos_token: Option<usize>,
    /// Capture per-step K/V column snapshots in the trace (needed by the
    /// cache-deviation diagnostics; costs one extra forward per row).
    pub snapshot_kv: bool,
    /// Keep the full logit vector per step (needed by perturbation
    /// calibration; top-k is always kept).
    pub keep_logits: bool,
    /// Logit window width recorded per step.
    pub top_k: usize,
}

impl DecodeConfig {
    pub fn new(max_new_tokens: usize) -> DecodeConfig {
        DecodeConfig {
            max_new_tokens,
            eos_token: None,
            snapshot_kv: false,
            keep_logits: false,
            top_k: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::InvalidArgument(
                "max_new_tokens must be >= 1".into(),
            ));
        }
        if self.top_k == 0 {
            return Err(Error::InvalidArgument("top_k must be >= 1".into()));
        }
        Ok(())
    }
}

/// Why a row stopped emitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Eos,
    Cap,
}

/// One emitted token plus the logit geometry around it.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub token: usize,
    /// `(token id, logit)` pairs, highest logit first, ties by lowest id.
    pub top_k: Vec<(usize, f32)>,
    /// Top-1 minus top-2 logit, in f32.
    pub margin: f32,
    /// The argmax was an exact tie (decided by lowest token id).
    pub tie: bool,
    /// Full logit vector, present only under `keep_logits`.
    pub logits: Option<Vec<f32>>,
}

/// Everything one row did during a decode run.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeTrace {
    pub prompt_len: usize,
    pub steps: Vec<StepRecord>,
    /// Present under `snapshot_kv`: `steps.len() + 1` column sets, where
    /// entry `i` is the cache column at content position
    /// `prompt_len - 1 + i`. Entry 0 is the last prompt column; entry
    /// `t + 1` is the column written by the forward that consumed the
    /// step-`t` token.
    pub snapshots: Vec<ColumnSet>,
    pub stop: StopReason,
}

impl DecodeTrace {
    pub fn tokens(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.token).collect()
    }
}

/// Greedy argmax; exact ties go to the lowest token id.
pub fn greedy_argmax(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Top-1 minus top-2 logit. Zero for exact ties.
pub fn margin_of(logits: &[f32]) -> f32 {
    debug_assert!(logits.len() >= 2);
    let (mut top1, mut top2) = if logits[0] >= logits[1] {
        (logits[0], logits[1])
    } else {
        (logits[1], logits[0])
    };
    for &v in &logits[2..] {
        if v > top1 {
            top2 = top1;
            top1 = v;
        } else if v > top2 {
            top2 = v;
        }
    }
    top1 - top2
}

/// The `k` largest logits as `(token id, value)`, value-descending with
/// ties by lowest id.
pub fn top_k_of(logits: &[f32], k: usize) -> Vec<(usize, f32)> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k.min(logits.len()));
    idx.into_iter().map(|i| (i, logits[i])).collect()
}

fn make_record(logits: Vec<f32>, cfg: &DecodeConfig) -> StepRecord {
    let token = greedy_argmax(&logits);
    let margin = margin_of(&logits);
    StepRecord {
        token,
        top_k: top_k_of(&logits, cfg.top_k),
        margin,
        tie: margin == 0.0,
        logits: cfg.keep_logits.then_some(logits),
    }
}

/// Decode one row to completion under a fixed batch size.
///
/// The shared engine loop: prefill consumes the whole prompt (the last
/// prefill forward's logits decide step 0), then each step records a token
/// and advances by one forward that consumes it. The advance after the
/// final token runs only when snapshots are requested; it changes no
/// emitted token.
fn decode_row(
    weights: &Weights,
    prompt: &[usize],
    cfg: &DecodeConfig,
    profile: &NumericsProfile,
    batch_size: usize,
    noise_row: usize,
) -> Result<DecodeTrace> {
    cfg.validate()?;
    profile.validate()?;
    let m = prompt.len();
    if m == 0 {
        return Err(Error::EmptyInput("prompt is empty".into()));
    }
    let spec = &weights.spec;
    if m + cfg.max_new_tokens > spec.max_positions {
        return Err(Error::Capacity(format!(
            "prompt length {m} plus decode cap {} exceeds max_positions {}",
            cfg.max_new_tokens, spec.max_positions
        )));
    }

    let mut cache = KvCache::new(
        spec.layers,
        1,
        m + cfg.max_new_tokens,
        spec.d_model,
    )?;
    let mut pending: Vec<f32> = Vec::new();
    for (q, &tok) in prompt.iter().enumerate() {
        let out = forward_step(weights, &cache, 0, tok, q, profile, batch_size, noise_row)?;
        cache.append_column(0, &out.new_columns)?;
        pending = out.logits;
    }

    let mut snapshots = Vec::new();
    if cfg.snapshot_kv {
        snapshots.push(cache.column_at(0, m - 1)?);
    }

    let mut steps = Vec::with_capacity(cfg.max_new_tokens);
    let mut stop = StopReason::Cap;
    for t in 0..cfg.max_new_tokens {
        let record = make_record(std::mem::take(&mut pending), cfg);
        let token = record.token;
        steps.push(record);
        let hit_eos = cfg.eos_token == Some(token);
        let last = hit_eos || t + 1 == cfg.max_new_tokens;
        if !last || cfg.snapshot_kv {
            let out =
                forward_step(weights, &cache, 0, token, m + t, profile, batch_size, noise_row)?;
            cache.append_column(0, &out.new_columns)?;
            pending = out.logits;
            if cfg.snapshot_kv {
                snapshots.push(cache.column_at(0, m + t)?);
            }
        }
        if hit_eos {
            stop = StopReason::Eos;
            break;
        }
    }

    Ok(DecodeTrace {
        prompt_len: m,
        steps,
        snapshots,
        stop,
    })
}

/// Greedy decode of a single prompt under the batch-invariant reference
/// profile. Deterministic and independent of any batching.
pub fn decode_reference(
    weights: &Weights,
    prompt: &[usize],
    cfg: &DecodeConfig,
) -> Result<DecodeTrace> {
    decode_row(weights, prompt, cfg, &NumericsProfile::reference(), 1, 0)
}

/// Greedy decode of every row in the batch under the given profile.
///
/// Each row stops independently at eos; finished rows keep occupying the
/// batch shape (the reduction plan is a function of row count, which never
/// changes mid-run). Outside injected-noise mode, rows with identical
/// prompts are computed once and their traces cloned; row isolation makes
/// this bit-exact. In injected-noise mode the row index feeds the noise
/// hash, so every row is computed.
pub fn decode_batched(
    weights: &Weights,
    layout: &BatchLayout,
    cfg: &DecodeConfig,
    profile: &NumericsProfile,
) -> Result<Vec<DecodeTrace>> {
    let batch_size = layout.batch_size();
    let mut traces: Vec<Option<DecodeTrace>> = vec![None; batch_size];
    if profile.mode == Mode::InjectedNoise {
        for (row, prompt) in layout.rows.iter().enumerate() {
            traces[row] = Some(decode_row(weights, prompt, cfg, profile, batch_size, row)?);
        }
    } else {
        let mut memo: HashMap<&[usize], usize> = HashMap::new();
        for (row, prompt) in layout.rows.iter().enumerate() {
            if let Some(&first) = memo.get(prompt.as_slice()) {
                traces[row] = Some(traces[first].clone().expect("computed earlier"));
            } else {
                traces[row] = Some(decode_row(weights, prompt, cfg, profile, batch_size, row)?);
                memo.insert(prompt.as_slice(), row);
            }
        }
    }
    Ok(traces.into_iter().map(|t| t.expect("all rows run")).collect())
}

/// Recompute one transition from scratch under the reference profile.
///
/// Forwards the whole committed prefix through a fresh single-row cache
/// and returns the greedy next token plus the K/V column at the final
/// prefix position (the repair-current column). Deterministic for fixed
/// weights and prefix; independent of any batch.
pub fn verify_step(weights: &Weights, committed_prefix: &[usize]) -> Result<(usize, ColumnSet)> {
    let n = committed_prefix.len();
    if n == 0 {
        return Err(Error::EmptyInput("verifier prefix is empty".into()));
    }
    let spec = &weights.spec;
    if n > spec.max_positions {
        return Err(Error::Capacity(format!(
            "prefix length {n} exceeds max_positions {}",
            spec.max_positions
        )));
    }
    let profile = NumericsProfile::reference();
    let mut cache = KvCache::new(spec.layers, 1, n, spec.d_model)?;
    let mut pending: Vec<f32> = Vec::new();
    for (q, &tok) in committed_prefix.iter().enumerate() {
        let out = forward_step(weights, &cache, 0, tok, q, &profile, 1, 0)?;
        cache.append_column(0, &out.new_columns)?;
        pending = out.logits;
    }
    Ok((greedy_argmax(&pending), cache.column_at(0, n - 1)?))
}
