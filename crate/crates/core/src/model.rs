//! Architecture-independent model surface: errors, the online decoding
//! session contract, and an offline greedy reference decoder.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{Batch, SentencePair, EOS};
use crate::pervasive::{PaModel, PaSession};
use crate::policy::{Lag, PolicyError, WaitKPath};
use crate::tensor::{Mask, Real, Tape, TensorError};
use crate::transformer::{TfSession, TransformerModel};

#[derive(Debug)]
pub enum ModelError {
    Config(String),
    SequenceTooLong { len: usize, max: usize },
    UnsupportedMode { op: &'static str, expected: &'static str },
    EmptyEncoderPrefix,
    EmptySource,
    Protocol(&'static str),
    Tensor(TensorError),
    Policy(PolicyError),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Config(msg) => write!(f, "invalid config: {msg}"),
            ModelError::SequenceTooLong { len, max } => {
                write!(f, "sequence of length {len} exceeds max_len {max}")
            }
            ModelError::UnsupportedMode { op, expected } => {
                write!(f, "{op} requires {expected}")
            }
            ModelError::EmptyEncoderPrefix => write!(f, "decoding requires at least one read source token"),
            ModelError::EmptySource => write!(f, "source sentence is empty"),
            ModelError::Protocol(msg) => write!(f, "session protocol violation: {msg}"),
            ModelError::Tensor(e) => write!(f, "{e}"),
            ModelError::Policy(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Tensor(e)
    }
}

impl From<PolicyError> for ModelError {
    fn from(e: PolicyError) -> Self {
        ModelError::Policy(e)
    }
}

/// One sentence's online decoding state. Reads consume source tokens;
/// writes alternate a distribution request with a commit of the emitted
/// token. Sessions own their caches, so sentences decode independently.
pub trait OnlineSession<F: Real> {
    fn src_len(&self) -> usize;
    fn reads_done(&self) -> usize;
    fn read_next(&mut self) -> Result<(), ModelError>;
    fn next_dist(&mut self) -> Result<Vec<F>, ModelError>;
    fn commit(&mut self, token: usize) -> Result<(), ModelError>;
    /// Encoder-side multiply-accumulates so far.
    fn encoder_macs(&self) -> u64;
}

/// Greedy pick with ties broken toward the lowest token id.
pub fn argmax_lowest<F: Real>(xs: &[F]) -> usize {
    let mut best = 0usize;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Transformer,
    Pa,
}

impl Arch {
    pub fn parse(s: &str) -> Option<Arch> {
        match s {
            "transformer" => Some(Arch::Transformer),
            "pa" => Some(Arch::Pa),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Arch::Transformer => "transformer",
            Arch::Pa => "pa",
        }
    }
}

/// Either architecture behind one decoding and training surface.
pub enum SeqModel<F: Real> {
    Tf(TransformerModel<F>),
    Pa(PaModel<F>),
}

impl<F: Real> SeqModel<F> {
    pub fn arch(&self) -> Arch {
        match self {
            SeqModel::Tf(_) => Arch::Transformer,
            SeqModel::Pa(_) => Arch::Pa,
        }
    }

    pub fn params(&self) -> &crate::params::Params<F> {
        match self {
            SeqModel::Tf(m) => &m.params,
            SeqModel::Pa(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut crate::params::Params<F> {
        match self {
            SeqModel::Tf(m) => &mut m.params,
            SeqModel::Pa(m) => &mut m.params,
        }
    }

    pub fn tgt_vocab(&self) -> usize {
        match self {
            SeqModel::Tf(m) => m.cfg.tgt_vocab,
            SeqModel::Pa(m) => m.cfg.tgt_vocab,
        }
    }

    pub fn max_len(&self) -> usize {
        match self {
            SeqModel::Tf(m) => m.cfg.max_len,
            SeqModel::Pa(m) => m.cfg.max_len,
        }
    }

    pub fn session<'m>(&'m self, src: Vec<usize>) -> Result<Box<dyn OnlineSession<F> + 'm>, ModelError> {
        match self {
            SeqModel::Tf(m) => Ok(Box::new(TfSession::new(m, src)?)),
            SeqModel::Pa(m) => Ok(Box::new(PaSession::new(m, src)?)),
        }
    }

    /// Reference offline greedy decode: recompute a full teacher-forced
    /// forward per emitted token. Deliberately cache-free, so it checks the
    /// incremental path from an independent route.
    pub fn offline_greedy(&self, src: &[usize], cap: usize) -> Result<Vec<usize>, ModelError> {
        let mut hyp: Vec<usize> = Vec::new();
        loop {
            let next = match self {
                SeqModel::Tf(m) => {
                    let mut shifted = hyp.clone();
                    shifted.push(EOS); // placeholder target slot for the next step
                    let batch = single_batch(src, &shifted);
                    let mut tape = Tape::new();
                    let bound = m.bind(&mut tape, false);
                    let enc = m.encode_tape(&mut tape, &bound, &batch, None)?;
                    let path = WaitKPath::new(Lag::Infinite, src.len(), batch.tgt_width)?;
                    let mask = Arc::new(batch_cross_mask_single(&path, batch.tgt_width, src.len()));
                    let logits = m.decode_train_tape(&mut tape, &bound, enc, &batch, &mask, None)?;
                    let v = m.cfg.tgt_vocab;
                    let row = &tape.value(logits).data()[(batch.tgt_width - 1) * v..][..v];
                    argmax_lowest(row)
                }
                SeqModel::Pa(m) => {
                    let row = m.offline_row_logits(src, &hyp)?;
                    argmax_lowest(&row)
                }
            };
            if next == EOS || hyp.len() >= cap {
                return Ok(hyp);
            }
            hyp.push(next);
        }
    }
}

fn single_batch(src: &[usize], tgt: &[usize]) -> Batch {
    let pairs = [SentencePair {
        source: src.to_vec(),
        target: tgt.to_vec(),
    }];
    let (mut batches, _) = crate::data::make_batches(&pairs, usize::MAX, 0);
    batches.remove(0)
}

fn batch_cross_mask_single(path: &WaitKPath, tgt_width: usize, src_width: usize) -> Mask {
    let single = path.cross_attention_mask();
    debug_assert_eq!(single.dims, vec![tgt_width, src_width]);
    Mask::new(vec![1, tgt_width, src_width], single.data).unwrap()
}
