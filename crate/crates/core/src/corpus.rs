//! Seeded prompt corpora and their plain-text on-disk format: one prompt
//! per line, token ids separated by single spaces.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// What to generate: `prompt_len_min == prompt_len` gives a homogeneous
/// corpus; a smaller minimum draws each prompt's length uniformly from
/// `[prompt_len_min, prompt_len]` for heterogeneous-batch runs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub prompt_count: usize,
    pub prompt_len: usize,
    pub prompt_len_min: usize,
    pub decode_cap: usize,
    pub seed: u64,
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.prompt_len == 0 {
            return Err(Error::InvalidArgument("prompt_len must be >= 1".into()));
        }
        if self.prompt_len_min == 0 || self.prompt_len_min > self.prompt_len {
            return Err(Error::InvalidArgument(format!(
                "prompt_len_min must be in 1..={}, got {}",
                self.prompt_len, self.prompt_len_min
            )));
        }
        if self.decode_cap == 0 {
            return Err(Error::InvalidArgument("decode_cap must be >= 1".into()));
        }
        Ok(())
    }
}

/// Draws the corpus from one continuous SplitMix64 stream seeded by
/// `spec.seed`: per prompt, first the length (only when the range is not
/// degenerate), then that many token draws below `vocab`.
pub fn generate_prompts(spec: &CorpusSpec, vocab: usize) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    if vocab == 0 {
        return Err(Error::InvalidArgument("vocab must be >= 1".into()));
    }
    let mut rng = SplitMix64::new(spec.seed);
    let mut prompts = Vec::with_capacity(spec.prompt_count);
    for _ in 0..spec.prompt_count {
        let len = if spec.prompt_len_min == spec.prompt_len {
            spec.prompt_len
        } else {
            let span = (spec.prompt_len - spec.prompt_len_min + 1) as u64;
            spec.prompt_len_min + rng.next_below(span) as usize
        };
        prompts.push(
            (0..len)
                .map(|_| rng.next_below(vocab as u64) as usize)
                .collect(),
        );
    }
    Ok(prompts)
}

pub fn write_corpus(path: &Path, prompts: &[Vec<usize>]) -> Result<()> {
    let mut out = String::new();
    for prompt in prompts {
        let line: Vec<String> = prompt.iter().map(|t| t.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads a corpus file back; blank lines are skipped, anything that is not
/// a space-separated list of unsigned integers is a capacity/corpus error.
pub fn read_corpus(path: &Path) -> Result<Vec<Vec<usize>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut prompts = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut prompt = Vec::new();
        for field in line.split_whitespace() {
            let token: usize = field.parse().map_err(|_| {
                Error::Capacity(format!(
                    "{}:{}: bad token id {field:?}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            prompt.push(token);
        }
        prompts.push(prompt);
    }
    Ok(prompts)
}
