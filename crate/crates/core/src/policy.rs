//! Wait-k policy layer: decoding paths, read/write traces, and the mask
//! tensors both architectures consume. Everything here is a pure function.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::tensor::Mask;

/// A lag value: wait-k for finite k, or wait-until-end.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Lag {
    Finite(usize),
    Infinite,
}

impl Lag {
    pub fn is_infinite(self) -> bool {
        matches!(self, Lag::Infinite)
    }
}

impl fmt::Display for Lag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Lag::Finite(k) => write!(f, "{k}"),
            Lag::Infinite => write!(f, "inf"),
        }
    }
}

impl FromStr for Lag {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, PolicyError> {
        if s.eq_ignore_ascii_case("inf") || s.eq_ignore_ascii_case("infinity") {
            return Ok(Lag::Infinite);
        }
        match s.parse::<usize>() {
            Ok(0) | Err(_) => Err(PolicyError::InvalidLag { input: s.to_string() }),
            Ok(k) => Ok(Lag::Finite(k)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PolicyError {
    /// k must be a positive integer or "inf"; wait-0 is not a decoding path.
    InvalidLag { input: String },
    ZeroLength { what: &'static str },
    EmptyLagSet,
    InvalidTrace { reason: String },
}

impl fmt::Display for PolicyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyError::InvalidLag { input } => {
                write!(f, "invalid lag {input:?}: expected a positive integer or \"inf\"")
            }
            PolicyError::ZeroLength { what } => write!(f, "{what} must be at least 1"),
            PolicyError::EmptyLagSet => write!(f, "lag set K must be nonempty"),
            PolicyError::InvalidTrace { reason } => write!(f, "invalid trace: {reason}"),
        }
    }
}

impl std::error::Error for PolicyError {}

/// The read schedule z_1..z_{tgt_len}: how many source tokens have been read
/// before each target write.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WaitKPath {
    pub k: Lag,
    pub src_len: usize,
    pub tgt_len: usize,
    z: Vec<usize>,
}

impl WaitKPath {
    /// z_t = min(k + t - 1, src_len), or src_len everywhere for wait-until-end.
    pub fn new(k: Lag, src_len: usize, tgt_len: usize) -> Result<Self, PolicyError> {
        if src_len == 0 {
            return Err(PolicyError::ZeroLength { what: "src_len" });
        }
        if tgt_len == 0 {
            return Err(PolicyError::ZeroLength { what: "tgt_len" });
        }
        if k == Lag::Finite(0) {
            return Err(PolicyError::InvalidLag { input: "0".to_string() });
        }
        let z = (1..=tgt_len)
            .map(|t| match k {
                Lag::Finite(k) => (k + t - 1).min(src_len),
                Lag::Infinite => src_len,
            })
            .collect();
        Ok(WaitKPath { k, src_len, tgt_len, z })
    }

    /// Reads done before the t-th write, 1-based t.
    pub fn z(&self, t: usize) -> usize {
        self.z[t - 1]
    }

    pub fn schedule(&self) -> &[usize] {
        &self.z
    }

    /// Attention mask over the source for each write: row t-1 allows
    /// columns 1..=z_t.
    pub fn cross_attention_mask(&self) -> Mask {
        let mut data = vec![false; self.tgt_len * self.src_len];
        for (t, &z) in self.z.iter().enumerate() {
            for j in 0..z {
                data[t * self.src_len + j] = true;
            }
        }
        Mask::new(vec![self.tgt_len, self.src_len], data).unwrap()
    }
}

/// Stacked per-sentence cross-attention masks for a padded batch,
/// [batch, tgt_width, src_width]. Each sentence's schedule caps at its own
/// source length, so pad columns are never attendable.
pub fn batch_cross_mask(
    k: Lag,
    src_lens: &[usize],
    src_width: usize,
    tgt_width: usize,
) -> Result<Mask, PolicyError> {
    let b = src_lens.len();
    let mut data = vec![false; b * tgt_width * src_width];
    for (bi, &src_len) in src_lens.iter().enumerate() {
        let path = WaitKPath::new(k, src_len, tgt_width)?;
        for t in 0..tgt_width {
            for j in 0..path.z(t + 1) {
                data[(bi * tgt_width + t) * src_width + j] = true;
            }
        }
    }
    Mask::new(vec![b, tgt_width, src_width], data).map_err(|_| PolicyError::ZeroLength {
        what: "mask dims",
    })
}

/// Grid-loss mask: cell (t, j), 1-based, is trainable iff j >= t. These are
/// exactly the cells some wait-k path with k >= 1 can write at.
pub fn grid_loss_mask(src_len: usize, tgt_len: usize) -> Mask {
    let mut data = vec![false; tgt_len * src_len];
    for t in 0..tgt_len {
        for j in 0..src_len {
            if j >= t {
                data[t * src_len + j] = true;
            }
        }
    }
    Mask::new(vec![tgt_len, src_len], data).unwrap()
}

/// Uniform draw from a nonempty lag set.
pub fn sample_k(set: &[usize], rng: &mut impl Rng) -> Result<usize, PolicyError> {
    if set.is_empty() {
        return Err(PolicyError::EmptyLagSet);
    }
    Ok(set[rng.random_range(0..set.len())])
}

/// One online decode realized as a string of reads and writes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Action {
    Read,
    Write,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReadWriteTrace {
    pub actions: Vec<Action>,
    pub source_len: usize,
    pub hypothesis: Vec<usize>,
}

impl ReadWriteTrace {
    pub fn actions_string(&self) -> String {
        self.actions
            .iter()
            .map(|a| match a {
                Action::Read => 'R',
                Action::Write => 'W',
            })
            .collect()
    }

    pub fn from_actions_string(s: &str, source_len: usize, hypothesis: Vec<usize>) -> Result<Self, PolicyError> {
        let mut actions = Vec::with_capacity(s.len());
        for ch in s.chars() {
            match ch {
                'R' => actions.push(Action::Read),
                'W' => actions.push(Action::Write),
                other => {
                    return Err(PolicyError::InvalidTrace {
                        reason: format!("unexpected action {other:?}"),
                    })
                }
            }
        }
        let trace = ReadWriteTrace {
            actions,
            source_len,
            hypothesis,
        };
        trace.validate()?;
        Ok(trace)
    }

    pub fn reads(&self) -> usize {
        self.actions.iter().filter(|a| **a == Action::Read).count()
    }

    pub fn writes(&self) -> usize {
        self.actions.iter().filter(|a| **a == Action::Write).count()
    }

    /// Reads completed before each write: the realized z sequence.
    pub fn read_counts(&self) -> Vec<usize> {
        let mut z = Vec::new();
        let mut reads = 0;
        for a in &self.actions {
            match a {
                Action::Read => reads += 1,
                Action::Write => z.push(reads),
            }
        }
        z
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.reads() > self.source_len {
            return Err(PolicyError::InvalidTrace {
                reason: format!("{} reads exceed source length {}", self.reads(), self.source_len),
            });
        }
        if self.writes() != self.hypothesis.len() {
            return Err(PolicyError::InvalidTrace {
                reason: format!(
                    "{} writes but hypothesis has {} tokens",
                    self.writes(),
                    self.hypothesis.len()
                ),
            });
        }
        for z in self.read_counts() {
            if z == 0 {
                return Err(PolicyError::InvalidTrace {
                    reason: "write before any read".to_string(),
                });
            }
        }
        Ok(())
    }
}
