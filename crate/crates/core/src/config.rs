//! Run configuration: a flat `key = value` text format with dotted key
//! prefixes, plus a canonical serialization whose SHA-256 digest identifies
//! the run in every manifest.
//!
//! Grammar, in full:
//!
//! * one `key = value` pair per line, split at the first `=`;
//! * `#` starts a comment (whole line or trailing); blank lines are ignored;
//! * keys and values are trimmed; unknown or duplicate keys are errors;
//! * lists are comma-separated (`batch.sizes = 2,4,8,16`);
//! * the chunk schedule is a comma list of `batch=chunks` pairs
//!   (`numerics.chunk_schedule = 2=2,4=4`), which is why only the first `=`
//!   on a line separates key from value.
//!
//! Every parse or validation failure comes back as [`Error::Config`], which
//! the CLI maps to exit code 2.

use crate::calibration::TopkSource;
use crate::corpus::CorpusSpec;
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::numerics::{Mode, NumericsProfile};
use crate::policy::{GateConfig, GateMode};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

/// Everything a pipeline command needs besides the output directory and
/// worker count, which stay on the command line because they never change
/// results.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub numerics: NumericsProfile,
    pub corpus: CorpusSpec,
    pub batch_sizes: Vec<usize>,
    pub gate: GateConfig,
    pub topk_source: TopkSource,
    /// Explicit calibration grid; `None` derives one from the measured
    /// perturbation threshold.
    pub grid: Option<Vec<f64>>,
    pub snapshot_kv: bool,
}

impl Default for RunConfig {
    /// The shipped tuned configuration. The model geometry, twin scale,
    /// chunk schedule, and corpus seed were adjusted together until the
    /// corpus-level flip rate landed inside the target band with a healthy
    /// number of diverging trials, then frozen; regression tests assume
    /// these exact values.
    fn default() -> RunConfig {
        let mut model = ModelSpec::default_with_seed(7);
        model.layers = 8;
        model.twin_scale = 0.015625;
        let mut numerics = NumericsProfile::reduction_order();
        numerics.chunk_schedule = [(2, 2), (4, 4), (8, 8), (16, 16)].into_iter().collect();
        RunConfig {
            model,
            numerics,
            corpus: CorpusSpec {
                prompt_count: 64,
                prompt_len: 32,
                prompt_len_min: 32,
                decode_cap: 48,
                seed: 2000,
            },
            batch_sizes: vec![2, 4, 8, 16],
            // The smallest fully deterministic threshold found by the
            // shipped sweep (a quarter of the measured perturbation bound),
            // so the gate command runs at the recommended operating point.
            gate: GateConfig::margin_gate(0.14232635498046875),
            topk_source: TopkSource::Reference,
            grid: None,
            snapshot_kv: true,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    /// Parses the documented text format on top of the default config, so a
    /// file only needs the keys it changes.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            };
            if line.trim().is_empty() {
                continue;
            }
            let eq = line.find('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = line[..eq].trim();
            let value = line[eq + 1..].trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key {key:?}",
                    lineno + 1
                )));
            }
            cfg.apply(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "model.layers" => self.model.layers = parse_num(key, value)?,
            "model.heads" => self.model.heads = parse_num(key, value)?,
            "model.d_model" => self.model.d_model = parse_num(key, value)?,
            "model.vocab" => self.model.vocab = parse_num(key, value)?,
            "model.max_positions" => self.model.max_positions = parse_num(key, value)?,
            "model.mlp_mult" => self.model.mlp_mult = parse_num(key, value)?,
            "model.seed" => self.model.seed = parse_num(key, value)?,
            "model.twin_scale" => self.model.twin_scale = parse_num(key, value)?,
            "numerics.mode" => {
                self.numerics.mode = match value {
                    "reference" => Mode::Reference,
                    "reduction-order" => Mode::ReductionOrder,
                    "injected-noise" => Mode::InjectedNoise,
                    other => {
                        return Err(Error::Config(format!(
                            "numerics.mode must be reference, reduction-order, or injected-noise, got {other:?}"
                        )))
                    }
                }
            }
            "numerics.chunk_schedule" => {
                self.numerics.chunk_schedule = parse_schedule(value)?
            }
            "numerics.noise_amplitude" => {
                self.numerics.noise_amplitude = parse_num(key, value)?
            }
            "numerics.noise_seed" => self.numerics.noise_seed = parse_num(key, value)?,
            "corpus.prompt_count" => self.corpus.prompt_count = parse_num(key, value)?,
            "corpus.prompt_len" => self.corpus.prompt_len = parse_num(key, value)?,
            "corpus.prompt_len_min" => self.corpus.prompt_len_min = parse_num(key, value)?,
            "corpus.decode_cap" => self.corpus.decode_cap = parse_num(key, value)?,
            "corpus.seed" => self.corpus.seed = parse_num(key, value)?,
            "batch.sizes" => self.batch_sizes = parse_list(key, value)?,
            "gate.tau" => self.gate.tau = parse_num(key, value)?,
            "gate.mode" => {
                self.gate.mode = match value {
                    "margin-gate" => GateMode::MarginGate,
                    "oracle" => GateMode::Oracle,
                    "always-verify" => GateMode::AlwaysVerify,
                    "never-verify" => GateMode::NeverVerify,
                    other => {
                        return Err(Error::Config(format!(
                            "gate.mode must be margin-gate, oracle, always-verify, or never-verify, got {other:?}"
                        )))
                    }
                }
            }
            "calibration.topk_source" => {
                self.topk_source = match value {
                    "reference" => TopkSource::Reference,
                    "batched" => TopkSource::Batched,
                    other => {
                        return Err(Error::Config(format!(
                            "calibration.topk_source must be reference or batched, got {other:?}"
                        )))
                    }
                }
            }
            "calibration.grid" => {
                self.grid = if value.is_empty() {
                    None
                } else {
                    Some(parse_list(key, value)?)
                }
            }
            "engine.snapshot_kv" => {
                self.snapshot_kv = match value {
                    "true" => true,
                    "false" => false,
                    other => {
                        return Err(Error::Config(format!(
                            "engine.snapshot_kv must be true or false, got {other:?}"
                        )))
                    }
                }
            }
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let reword = |e: Error| Error::Config(e.to_string());
        self.model.validate().map_err(reword)?;
        self.numerics.validate().map_err(reword)?;
        self.corpus.validate().map_err(reword)?;
        self.gate.validate().map_err(reword)?;
        if self.corpus.prompt_len + self.corpus.decode_cap > self.model.max_positions {
            return Err(Error::Config(format!(
                "prompt_len {} + decode_cap {} exceeds max_positions {}",
                self.corpus.prompt_len, self.corpus.decode_cap, self.model.max_positions
            )));
        }
        if self.batch_sizes.is_empty() {
            return Err(Error::Config("batch.sizes must not be empty".into()));
        }
        if !self.batch_sizes.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(
                "batch.sizes must be strictly increasing".into(),
            ));
        }
        if self.batch_sizes[0] == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if let Some(grid) = &self.grid {
            if grid.is_empty() || !grid.windows(2).all(|w| w[0] < w[1]) {
                return Err(Error::Config(
                    "calibration.grid must be non-empty and strictly increasing".into(),
                ));
            }
            if grid.iter().any(|t| !t.is_finite() || *t < 0.0) {
                return Err(Error::Config(
                    "calibration.grid entries must be finite and >= 0".into(),
                ));
            }
        }
        Ok(())
    }

    /// Canonical text form: every key, sorted, one per line. Parsing it back
    /// reproduces `self` exactly, and its digest is the config hash.
    pub fn to_canonical_string(&self) -> String {
        let mut pairs: Vec<(String, String)> = vec![
            ("model.layers".into(), self.model.layers.to_string()),
            ("model.heads".into(), self.model.heads.to_string()),
            ("model.d_model".into(), self.model.d_model.to_string()),
            ("model.vocab".into(), self.model.vocab.to_string()),
            (
                "model.max_positions".into(),
                self.model.max_positions.to_string(),
            ),
            ("model.mlp_mult".into(), self.model.mlp_mult.to_string()),
            ("model.seed".into(), self.model.seed.to_string()),
            ("model.twin_scale".into(), self.model.twin_scale.to_string()),
            (
                "numerics.mode".into(),
                match self.numerics.mode {
                    Mode::Reference => "reference",
                    Mode::ReductionOrder => "reduction-order",
                    Mode::InjectedNoise => "injected-noise",
                }
                .into(),
            ),
            (
                "numerics.chunk_schedule".into(),
                schedule_string(&self.numerics.chunk_schedule),
            ),
            (
                "numerics.noise_amplitude".into(),
                self.numerics.noise_amplitude.to_string(),
            ),
            (
                "numerics.noise_seed".into(),
                self.numerics.noise_seed.to_string(),
            ),
            (
                "corpus.prompt_count".into(),
                self.corpus.prompt_count.to_string(),
            ),
            ("corpus.prompt_len".into(), self.corpus.prompt_len.to_string()),
            (
                "corpus.prompt_len_min".into(),
                self.corpus.prompt_len_min.to_string(),
            ),
            ("corpus.decode_cap".into(), self.corpus.decode_cap.to_string()),
            ("corpus.seed".into(), self.corpus.seed.to_string()),
            (
                "batch.sizes".into(),
                self.batch_sizes
                    .iter()
                    .map(|b| b.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("gate.tau".into(), self.gate.tau.to_string()),
            (
                "gate.mode".into(),
                match self.gate.mode {
                    GateMode::MarginGate => "margin-gate",
                    GateMode::Oracle => "oracle",
                    GateMode::AlwaysVerify => "always-verify",
                    GateMode::NeverVerify => "never-verify",
                }
                .into(),
            ),
            (
                "calibration.topk_source".into(),
                match self.topk_source {
                    TopkSource::Reference => "reference",
                    TopkSource::Batched => "batched",
                }
                .into(),
            ),
            (
                "calibration.grid".into(),
                self.grid
                    .as_ref()
                    .map(|g| {
                        g.iter()
                            .map(|t| t.to_string())
                            .collect::<Vec<_>>()
                            .join(",")
                    })
                    .unwrap_or_default(),
            ),
            ("engine.snapshot_kv".into(), self.snapshot_kv.to_string()),
        ];
        pairs.sort();
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// SHA-256 of the canonical text, hex-encoded.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_canonical_string().as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|f| parse_num(key, f.trim()))
        .collect()
}

fn parse_schedule(value: &str) -> Result<BTreeMap<usize, usize>> {
    let mut schedule = BTreeMap::new();
    if value.is_empty() {
        return Ok(schedule);
    }
    for pair in value.split(',') {
        let (bs, c) = pair.trim().split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "numerics.chunk_schedule: expected batch=chunks, got {pair:?}"
            ))
        })?;
        let bs: usize = parse_num("numerics.chunk_schedule", bs.trim())?;
        let c: usize = parse_num("numerics.chunk_schedule", c.trim())?;
        if schedule.insert(bs, c).is_some() {
            return Err(Error::Config(format!(
                "numerics.chunk_schedule: duplicate batch size {bs}"
            )));
        }
    }
    Ok(schedule)
}

fn schedule_string(schedule: &BTreeMap<usize, usize>) -> String {
    schedule
        .iter()
        .map(|(bs, c)| format!("{bs}={c}"))
        .collect::<Vec<_>>()
        .join(",")
}
