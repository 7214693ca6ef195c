//! Seeded toy decoder-only transformer.
//!
//! Weights are a pure function of the spec (including its seed), and the
//! single-position forward pass routes every reduction through the
//! numerics profile. The model is deliberately small: large enough to show
//! the cache-deviation structure across first/mid/last layers, small
//! enough that full corpora decode in seconds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kvcache::{ColumnSet, KvCache};
use crate::numerics::{
    chunked_dot, chunked_sum, inject_ulp_noise, Bf16, Mode, NumericsProfile, ReductionPlan,
};
use crate::rng::SplitMix64;

const RMS_EPS: f32 = 1e-5;

/// Model shape plus the weight seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub vocab: usize,
    pub max_positions: usize,
    pub mlp_mult: usize,
    pub seed: u64,
    /// Scale of the twin offset between paired token embeddings. Real
    /// vocabularies contain near-synonymous tokens whose logits run neck
    /// and neck; drawing odd-numbered embeddings as a perturbed copy of
    /// their even neighbor reproduces that close-margin structure, and the
    /// scale controls how close. Zero disables pairing.
    pub twin_scale: f32,
}

impl ModelSpec {
    /// The desk-scale default shape: 4 layers, 4 heads, width 64,
    /// vocabulary 512, context 512, MLP expansion 4.
    pub fn default_with_seed(seed: u64) -> ModelSpec {
        ModelSpec {
            layers: 4,
            heads: 4,
            d_model: 64,
            vocab: 512,
            max_positions: 512,
            mlp_mult: 4,
            seed,
            twin_scale: 2.0f32.powi(-5),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.d_model * self.mlp_mult
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0
            || self.heads == 0
            || self.d_model == 0
            || self.mlp_mult == 0
            || self.max_positions == 0
        {
            return Err(Error::InvalidArgument(format!(
                "model dimensions must be >= 1: {self:?}"
            )));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.vocab < 2 {
            return Err(Error::InvalidArgument(format!(
                "vocab must be >= 2, got {}",
                self.vocab
            )));
        }
        if !self.twin_scale.is_finite() || self.twin_scale < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "twin_scale must be finite and >= 0, got {}",
                self.twin_scale
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct LayerWeights {
    wq: Vec<Bf16>,
    wk: Vec<Bf16>,
    wv: Vec<Bf16>,
    wo: Vec<Bf16>,
    /// `[hidden × d_model]`, row-major.
    w_in: Vec<Bf16>,
    /// `[d_model × hidden]`, row-major.
    w_out: Vec<Bf16>,
    attn_gain: Vec<Bf16>,
    mlp_gain: Vec<Bf16>,
}

/// All model parameters, stored BF16.
///
/// Built from a spec by [`build_model`]; bit-identical for identical specs.
/// The unembedding is tied to the token embedding.
#[derive(Debug, Clone)]
pub struct Weights {
    pub spec: ModelSpec,
    /// `[vocab × d_model]`, row-major.
    token_emb: Vec<Bf16>,
    /// `[max_positions × d_model]`, row-major.
    pos_emb: Vec<Bf16>,
    layers: Vec<LayerWeights>,
    final_gain: Vec<Bf16>,
}

impl Weights {
    pub fn token_embedding(&self, token: usize) -> &[Bf16] {
        let d = self.spec.d_model;
        &self.token_emb[token * d..(token + 1) * d]
    }

    pub fn position_embedding(&self, position: usize) -> &[Bf16] {
        let d = self.spec.d_model;
        &self.pos_emb[position * d..(position + 1) * d]
    }
}

/// Draw all weights from a single documented SplitMix64 stream.
///
/// Tensor order: token embedding, position embedding, then per layer
/// Wq, Wk, Wv, Wo, MLP-in, MLP-out. Norm gains are the constant 1 and
/// consume no draws. Every Gaussian sample takes exactly two generator
/// draws; linear layers are scaled by `1/sqrt(d_model)`, embeddings are
/// unit scale. Every value is rounded to BF16.
///
/// Token embeddings are drawn in twin pairs: row `2i` takes `d_model`
/// fresh unit Gaussians, then row `2i+1` is row `2i` plus `d_model` fresh
/// Gaussians scaled by `twin_scale` (an odd final row is drawn fresh).
/// The pairing is what gives the vocabulary close-margin competitors.
pub fn build_model(spec: &ModelSpec) -> Result<Weights> {
    spec.validate()?;
    let mut rng = SplitMix64::new(spec.seed);
    let d = spec.d_model;
    let hidden = spec.hidden();
    let linear_scale = 1.0 / (d as f64).sqrt();

    fn draw_tensor(rng: &mut SplitMix64, n: usize, scale: f64) -> Vec<Bf16> {
        (0..n)
            .map(|_| Bf16::from_f32((rng.next_gaussian() * scale) as f32))
            .collect()
    }

    let mut token_emb: Vec<Bf16> = Vec::with_capacity(spec.vocab * d);
    let mut row = 0;
    while row < spec.vocab {
        let base = draw_tensor(&mut rng, d, 1.0);
        token_emb.extend_from_slice(&base);
        row += 1;
        if row < spec.vocab {
            for b in &base {
                let offset = rng.next_gaussian() * spec.twin_scale as f64;
                token_emb.push(Bf16::from_f32((b.to_f32() as f64 + offset) as f32));
            }
            row += 1;
        }
    }
    let pos_emb = draw_tensor(&mut rng, spec.max_positions * d, 1.0);
    let layers = (0..spec.layers)
        .map(|_| LayerWeights {
            wq: draw_tensor(&mut rng, d * d, linear_scale),
            wk: draw_tensor(&mut rng, d * d, linear_scale),
            wv: draw_tensor(&mut rng, d * d, linear_scale),
            wo: draw_tensor(&mut rng, d * d, linear_scale),
            w_in: draw_tensor(&mut rng, hidden * d, linear_scale),
            w_out: draw_tensor(&mut rng, d * hidden, linear_scale),
            attn_gain: vec![Bf16::ONE; d],
            mlp_gain: vec![Bf16::ONE; d],
        })
        .collect();

    Ok(Weights {
        spec: spec.clone(),
        token_emb,
        pos_emb,
        layers,
        final_gain: vec![Bf16::ONE; d],
    })
}

/// Result of one forward pass: the next-token logits and the K/V columns
/// the caller may commit to the cache.
///
/// Logits stay in f32; they are the one tensor not written back through
/// BF16 rounding, so the gate's margin is read at full working precision.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub logits: Vec<f32>,
    pub new_columns: ColumnSet,
}

/// RMS-norm with the mean square routed through the chunked reduction.
fn rms_norm(x: &[Bf16], gain: &[Bf16], plan: ReductionPlan, out: &mut Vec<Bf16>) -> Result<()> {
    let mean_sq = chunked_dot(x, x, plan)? / x.len() as f32;
    let inv = 1.0 / (mean_sq + RMS_EPS).sqrt();
    out.clear();
    out.extend(
        x.iter()
            .zip(gain)
            .map(|(v, g)| Bf16::from_f32(v.to_f32() * inv * g.to_f32())),
    );
    Ok(())
}

/// Row-major matrix-vector product with every row reduced under the plan.
fn matvec(
    matrix: &[Bf16],
    x: &[Bf16],
    rows: usize,
    plan: ReductionPlan,
    out: &mut Vec<Bf16>,
) -> Result<()> {
    let width = x.len();
    out.clear();
    for r in 0..rows {
        let row = &matrix[r * width..(r + 1) * width];
        out.push(Bf16::from_f32(chunked_dot(row, x, plan)?));
    }
    Ok(())
}

/// One transformer step at a single position for a single row.
///
/// Standard pre-norm block: embed + position, then per layer RMS-norm,
/// attention over the row's cached columns plus the freshly computed one,
/// residual, RMS-norm, SiLU MLP, residual; final norm; tied unembedding.
/// Every reduction uses `chunks_for_batch(profile, batch_size)` chunks. In
/// injected-noise mode reductions are sequential and the perturbation is
/// added to the final logits, keyed by `(position, noise_row, batch_size)`.
///
/// Does not mutate the cache; appending the returned columns is the
/// caller's commit decision.
#[allow(clippy::too_many_arguments)]
pub fn forward_step(
    weights: &Weights,
    cache: &KvCache,
    cache_row: usize,
    token: usize,
    position: usize,
    profile: &NumericsProfile,
    batch_size: usize,
    noise_row: usize,
) -> Result<StepOutput> {
    let spec = &weights.spec;
    let d = spec.d_model;
    let head_dim = spec.head_dim();
    let hidden = spec.hidden();
    if token >= spec.vocab {
        return Err(Error::InvalidArgument(format!(
            "token {token} out of range for vocab {}",
            spec.vocab
        )));
    }
    if position >= spec.max_positions {
        return Err(Error::Capacity(format!(
            "position {position} exceeds max_positions {}",
            spec.max_positions
        )));
    }

    let chunks = profile.chunks_for_batch(batch_size);
    let plan_d = ReductionPlan::new(d, chunks);
    let plan_hd = ReductionPlan::new(head_dim, chunks);
    let plan_hidden = ReductionPlan::new(hidden, chunks);
    let scale = 1.0 / (head_dim as f32).sqrt();

    // Embedding + position, elementwise in f32, rounded back.
    let mut x: Vec<Bf16> = weights
        .token_embedding(token)
        .iter()
        .zip(weights.position_embedding(position))
        .map(|(t, p)| Bf16::from_f32(t.to_f32() + p.to_f32()))
        .collect();

    let n_ctx = cache.filled_length(cache_row);
    let plan_ctx = ReductionPlan::new(n_ctx + 1, chunks);

    let mut normed = Vec::with_capacity(d);
    let mut q = Vec::with_capacity(d);
    let mut k = Vec::with_capacity(d);
    let mut v = Vec::with_capacity(d);
    let mut attn = vec![Bf16::ZERO; d];
    let mut proj = Vec::with_capacity(d);
    let mut scores: Vec<Bf16> = Vec::with_capacity(n_ctx + 1);
    let mut exps: Vec<Bf16> = Vec::with_capacity(n_ctx + 1);
    let mut alphas: Vec<Bf16> = Vec::with_capacity(n_ctx + 1);
    let mut v_gather: Vec<Bf16> = Vec::with_capacity(n_ctx + 1);
    let mut mlp_hidden = Vec::with_capacity(hidden);
    let mut mlp_out = Vec::with_capacity(d);
    let mut new_k = Vec::with_capacity(spec.layers);
    let mut new_v = Vec::with_capacity(spec.layers);

    for (layer_idx, layer) in weights.layers.iter().enumerate() {
        rms_norm(&x, &layer.attn_gain, plan_d, &mut normed)?;
        matvec(&layer.wq, &normed, d, plan_d, &mut q)?;
        matvec(&layer.wk, &normed, d, plan_d, &mut k)?;
        matvec(&layer.wv, &normed, d, plan_d, &mut v)?;

        for h in 0..spec.heads {
            let lo = h * head_dim;
            let hi = lo + head_dim;
            let q_h = &q[lo..hi];

            // Scores over all cached columns plus the current one.
            scores.clear();
            for j in 0..n_ctx {
                let k_col = &cache.k_at(layer_idx, cache_row, j)[lo..hi];
                scores.push(Bf16::from_f32(chunked_dot(q_h, k_col, plan_hd)? * scale));
            }
            scores.push(Bf16::from_f32(chunked_dot(q_h, &k[lo..hi], plan_hd)? * scale));

            let max = scores
                .iter()
                .map(|s| s.to_f32())
                .fold(f32::NEG_INFINITY, f32::max);
            exps.clear();
            exps.extend(
                scores
                    .iter()
                    .map(|s| Bf16::from_f32((s.to_f32() - max).exp())),
            );
            let z = chunked_sum(&exps, plan_ctx)?;
            alphas.clear();
            alphas.extend(exps.iter().map(|e| Bf16::from_f32(e.to_f32() / z)));

            for dim in 0..head_dim {
                v_gather.clear();
                for j in 0..n_ctx {
                    v_gather.push(cache.v_at(layer_idx, cache_row, j)[lo + dim]);
                }
                v_gather.push(v[lo + dim]);
                attn[lo + dim] = Bf16::from_f32(chunked_dot(&alphas, &v_gather, plan_ctx)?);
            }
        }

        matvec(&layer.wo, &attn, d, plan_d, &mut proj)?;
        for (xi, pi) in x.iter_mut().zip(&proj) {
            *xi = Bf16::from_f32(xi.to_f32() + pi.to_f32());
        }

        rms_norm(&x, &layer.mlp_gain, plan_d, &mut normed)?;
        mlp_hidden.clear();
        for r in 0..hidden {
            let row = &layer.w_in[r * d..(r + 1) * d];
            let pre = chunked_dot(row, &normed, plan_d)?;
            // SiLU in f32, rounded back.
            mlp_hidden.push(Bf16::from_f32(pre / (1.0 + (-pre).exp())));
        }
        matvec(&layer.w_out, &mlp_hidden, d, plan_hidden, &mut mlp_out)?;
        for (xi, mi) in x.iter_mut().zip(&mlp_out) {
            *xi = Bf16::from_f32(xi.to_f32() + mi.to_f32());
        }

        new_k.push(k.clone());
        new_v.push(v.clone());
    }

    rms_norm(&x, &weights.final_gain, plan_d, &mut normed)?;

    // Tied unembedding; logits stay f32.
    let mut logits = Vec::with_capacity(spec.vocab);
    for t in 0..spec.vocab {
        logits.push(chunked_dot(weights.token_embedding(t), &normed, plan_d)?);
    }

    let logits = if profile.mode == Mode::InjectedNoise {
        inject_ulp_noise(&logits, profile, position, noise_row, batch_size)?
    } else {
        logits
    };

    Ok(StepOutput {
        logits,
        new_columns: ColumnSet { k: new_k, v: new_v },
    })
}
