//! Synthetic parallel corpora: copy, reverse, and substitution tasks.
//!
//! Sentences draw from a token alphabet c0..c{A-1}. The substitution task
//! applies a fixed random bijection over the alphabet, a deterministic
//! one-to-one "translation"; its permutation derives from `task_seed` so
//! train/valid/test splits generated with different sentence seeds share
//! the same mapping.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::DataError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    Copy,
    Reverse,
    Substitute,
}

impl SynthKind {
    pub fn parse(s: &str) -> Option<SynthKind> {
        match s {
            "copy" => Some(SynthKind::Copy),
            "reverse" => Some(SynthKind::Reverse),
            "substitute" => Some(SynthKind::Substitute),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub n: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub alphabet: usize,
    /// Seed for sentence sampling; splits use different values.
    pub seed: u64,
    /// Seed for the substitution bijection; shared across splits.
    pub task_seed: u64,
}

/// The substitution bijection over alphabet symbols.
pub fn substitution(alphabet: usize, task_seed: u64) -> Vec<usize> {
    let mut sigma: Vec<usize> = (0..alphabet).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(task_seed ^ 0x7365_6469_7375_6221);
    sigma.shuffle(&mut rng);
    sigma
}

/// Generate aligned (source, target) sentence strings. Pure in the spec.
pub fn generate(spec: &SynthSpec) -> Result<Vec<(String, String)>, DataError> {
    if spec.alphabet < 2 {
        return Err(DataError::AlphabetTooSmall {
            size: spec.alphabet,
        });
    }
    if spec.len_min == 0 || spec.len_min > spec.len_max {
        return Err(DataError::InvalidRange {
            lo: spec.len_min,
            hi: spec.len_max,
        });
    }
    let sigma = substitution(spec.alphabet, spec.task_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let len = rng.random_range(spec.len_min..=spec.len_max);
        let syms: Vec<usize> = (0..len).map(|_| rng.random_range(0..spec.alphabet)).collect();
        let tgt_syms: Vec<usize> = match spec.kind {
            SynthKind::Copy => syms.clone(),
            SynthKind::Reverse => syms.iter().rev().copied().collect(),
            SynthKind::Substitute => syms.iter().map(|&s| sigma[s]).collect(),
        };
        let render = |xs: &[usize]| {
            xs.iter()
                .map(|s| format!("c{s}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        out.push((render(&syms), render(&tgt_syms)));
    }
    Ok(out)
}

/// Write aligned `<prefix>.src` / `<prefix>.tgt` files, LF line endings.
pub fn write_corpus(dir: &Path, prefix: &str, pairs: &[(String, String)]) -> Result<(PathBuf, PathBuf), DataError> {
    fs::create_dir_all(dir).map_err(|e| DataError::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    let src_path = dir.join(format!("{prefix}.src"));
    let tgt_path = dir.join(format!("{prefix}.tgt"));
    let mut src = String::new();
    let mut tgt = String::new();
    for (s, t) in pairs {
        src.push_str(s);
        src.push('\n');
        tgt.push_str(t);
        tgt.push('\n');
    }
    fs::write(&src_path, src).map_err(|e| DataError::Io {
        path: src_path.display().to_string(),
        source: e,
    })?;
    fs::write(&tgt_path, tgt).map_err(|e| DataError::Io {
        path: tgt_path.display().to_string(),
        source: e,
    })?;
    Ok((src_path, tgt_path))
}
