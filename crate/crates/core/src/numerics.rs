//! Emulated BF16 arithmetic and batch-shape-dependent reduction schedules.
//!
//! Everything downstream of this module is deterministic given a
//! [`NumericsProfile`]: the profile decides how many chunks a reduction is
//! split into as a function of batch size, and chunk boundaries are a pure
//! function of (length, chunk count). Two runs of the same request under
//! different batch sizes therefore accumulate partial sums in different
//! orders and can disagree in the last bit, which is the effect the rest of
//! the crate measures and repairs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::hash_mix;

/// 16-bit brain float: 1 sign, 8 exponent, 7 mantissa bits.
///
/// Storage-only; arithmetic happens in f32 after widening.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[repr(transparent)]
pub struct Bf16(u16);

impl Bf16 {
    pub const ZERO: Bf16 = Bf16(0);
    pub const ONE: Bf16 = Bf16(0x3F80);

    #[inline]
    pub const fn from_bits(bits: u16) -> Bf16 {
        Bf16(bits)
    }

    #[inline]
    pub const fn to_bits(self) -> u16 {
        self.0
    }

    /// Round a 32-bit float to the nearest BF16 value, ties to even.
    ///
    /// NaN maps to a quiet NaN, infinities are preserved, and finite values
    /// beyond the BF16 range saturate to the infinity of matching sign
    /// (BF16 shares the f32 exponent range, so that can only happen for
    /// values above the largest representable mantissa step).
    #[inline]
    pub fn from_f32(x: f32) -> Bf16 {
        let bits = x.to_bits();
        if x.is_nan() {
            // Quiet NaN with the payload truncated into the BF16 mantissa.
            return Bf16(((bits >> 16) as u16) | 0x0040);
        }
        // Round-to-nearest-even in one add: the bias carries into the kept
        // mantissa exactly when the discarded half is > 0.5 ulp, or == 0.5
        // ulp with an odd kept lsb. Overflow carries into the exponent and
        // saturates to infinity naturally.
        let lsb = (bits >> 16) & 1;
        let rounded = bits.wrapping_add(0x7FFF + lsb);
        Bf16((rounded >> 16) as u16)
    }

    /// Widen to f32. Exact: every BF16 pattern is an f32 pattern with a
    /// zero low half.
    #[inline]
    pub const fn to_f32(self) -> f32 {
        f32::from_bits((self.0 as u32) << 16)
    }

    #[inline]
    pub fn is_nan(self) -> bool {
        (self.0 & 0x7FFF) > 0x7F80
    }
}

/// Round every element of a slice through BF16.
pub fn round_slice(values: &[f32], out: &mut Vec<Bf16>) {
    out.clear();
    out.extend(values.iter().map(|&v| Bf16::from_f32(v)));
}

/// How the engine perturbs (or refuses to perturb) its reductions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Batch-invariant: every reduction is a single left-to-right chunk and
    /// no noise is injected, regardless of batch size.
    Reference,
    /// Reductions are split into a batch-size-dependent number of chunks.
    ReductionOrder,
    /// Reductions stay sequential; a deterministic pseudo-random
    /// perturbation is added to the final logits instead.
    InjectedNoise,
}

/// Rounding mode plus the batch-shape-dependent reduction schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericsProfile {
    pub mode: Mode,
    /// Map from batch size to chunk count. Missing batch sizes fall back to
    /// `min(batch_size, 8)`.
    pub chunk_schedule: BTreeMap<usize, usize>,
    /// Relative noise scale for injected-noise mode; the perturbation bound
    /// for a logit `v` is `noise_amplitude * (1 + |v|)`.
    pub noise_amplitude: f32,
    pub noise_seed: u64,
}

impl NumericsProfile {
    /// Batch-invariant profile: chunk count 1 everywhere, no noise.
    pub fn reference() -> Self {
        NumericsProfile {
            mode: Mode::Reference,
            chunk_schedule: BTreeMap::new(),
            noise_amplitude: 0.0,
            noise_seed: 0,
        }
    }

    /// Reduction-order profile with the default `min(batch_size, 8)` rule.
    pub fn reduction_order() -> Self {
        NumericsProfile {
            mode: Mode::ReductionOrder,
            chunk_schedule: BTreeMap::new(),
            noise_amplitude: 0.0,
            noise_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (&bs, &c) in &self.chunk_schedule {
            if bs == 0 || c == 0 {
                return Err(Error::Config(format!(
                    "chunk_schedule entries must be >= 1, got {bs}={c}"
                )));
            }
        }
        if !self.noise_amplitude.is_finite() || self.noise_amplitude < 0.0 {
            return Err(Error::Config(format!(
                "noise_amplitude must be finite and >= 0, got {}",
                self.noise_amplitude
            )));
        }
        Ok(())
    }

    /// Chunk count for a batch size.
    ///
    /// Reference mode always answers 1. Injected-noise mode also answers 1:
    /// its perturbation lives in the logits, not the reduction order. In
    /// reduction-order mode the schedule is consulted, with missing batch
    /// sizes falling back to `min(batch_size, 8)`.
    pub fn chunks_for_batch(&self, batch_size: usize) -> usize {
        match self.mode {
            Mode::Reference | Mode::InjectedNoise => 1,
            Mode::ReductionOrder => self
                .chunk_schedule
                .get(&batch_size)
                .copied()
                .unwrap_or_else(|| batch_size.min(8).max(1)),
        }
    }
}

/// Contiguous partition of `[0, length)` into `chunk_count` pieces.
///
/// Chunk sizes are `length / chunk_count`, with the remainder distributed
/// one element each to the leading chunks. The effective chunk count is
/// clamped to `length` (for nonempty inputs) so no chunk is empty; the
/// boundaries are a pure function of `(length, chunk_count)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReductionPlan {
    length: usize,
    chunk_count: usize,
}

impl ReductionPlan {
    pub fn new(length: usize, chunk_count: usize) -> ReductionPlan {
        let chunk_count = chunk_count.max(1).min(length.max(1));
        ReductionPlan {
            length,
            chunk_count,
        }
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn chunk_count(&self) -> usize {
        self.chunk_count
    }

    /// Iterator over `(start, end)` chunk boundaries.
    pub fn chunks(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let base = self.length / self.chunk_count;
        let rem = self.length % self.chunk_count;
        let mut start = 0;
        (0..self.chunk_count).map(move |i| {
            let size = base + usize::from(i < rem);
            let range = (start, start + size);
            start += size;
            range
        })
    }
}

/// Dot product of two BF16 vectors under a reduction plan.
///
/// Products are formed in f32 from the widened inputs, accumulated
/// sequentially in f32 within each chunk, and the chunk partials are
/// combined left to right in f32. Deterministic for fixed inputs and plan;
/// `chunk_count == 1` is exactly the plain sequential sum.
pub fn chunked_dot(a: &[Bf16], b: &[Bf16], plan: ReductionPlan) -> Result<f32> {
    if a.len() != b.len() || a.len() != plan.length() {
        return Err(Error::InvalidArgument(format!(
            "chunked_dot length mismatch: a={}, b={}, plan={}",
            a.len(),
            b.len(),
            plan.length()
        )));
    }
    let mut total = 0.0f32;
    for (start, end) in plan.chunks() {
        let mut partial = 0.0f32;
        for (x, y) in a[start..end].iter().zip(&b[start..end]) {
            partial += x.to_f32() * y.to_f32();
        }
        total += partial;
    }
    Ok(total)
}

/// Sum of a BF16 vector under a reduction plan; equivalent to
/// [`chunked_dot`] against an all-ones vector.
pub fn chunked_sum(values: &[Bf16], plan: ReductionPlan) -> Result<f32> {
    if values.len() != plan.length() {
        return Err(Error::InvalidArgument(format!(
            "chunked_sum length mismatch: values={}, plan={}",
            values.len(),
            plan.length()
        )));
    }
    let mut total = 0.0f32;
    for (start, end) in plan.chunks() {
        let mut partial = 0.0f32;
        for v in &values[start..end] {
            partial += v.to_f32();
        }
        total += partial;
    }
    Ok(total)
}

/// Add the injected-noise perturbation to a logit vector.
///
/// Each coordinate gets a deterministic pseudo-random offset in
/// `[-amp * (1 + |v|), +amp * (1 + |v|)]`, derived from
/// `(noise_seed, step, row, batch_size, index)`. Batch size 1 is the solo
/// reference run and is returned bit-unchanged.
pub fn inject_ulp_noise(
    logits: &[f32],
    profile: &NumericsProfile,
    step: usize,
    row: usize,
    batch_size: usize,
) -> Result<Vec<f32>> {
    if profile.mode != Mode::InjectedNoise {
        return Err(Error::ModeViolation(format!(
            "inject_ulp_noise requires injected-noise mode, profile is {:?}",
            profile.mode
        )));
    }
    if batch_size == 1 || profile.noise_amplitude == 0.0 {
        return Ok(logits.to_vec());
    }
    let out = logits
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let h = hash_mix(&[
                profile.noise_seed,
                step as u64,
                row as u64,
                batch_size as u64,
                i as u64,
            ]);
            // Map the hash to [-1, 1) exactly like SplitMix64's signed unit.
            let unit = ((h >> 11) as f64) / (1u64 << 52) as f64 - 1.0;
            v + (unit as f32) * profile.noise_amplitude * (1.0 + v.abs())
        })
        .collect();
    Ok(out)
}
