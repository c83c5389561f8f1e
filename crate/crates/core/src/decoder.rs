//! Online greedy decoding: executes a wait-k policy against either
//! architecture, producing hypotheses and read/write traces.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{DataError, Vocabulary, EOS};
use crate::model::{argmax_lowest, ModelError, SeqModel};
use crate::policy::{Action, Lag, PolicyError, ReadWriteTrace};
use crate::tensor::Real;
use crate::transformer::EncoderMode;

#[derive(Debug)]
pub enum DecodeError {
    Model(ModelError),
    Data(DataError),
    Policy(PolicyError),
    Io { path: String, source: std::io::Error },
    Trace { path: String, line: usize, reason: String },
}

impl fmt::Display for DecodeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodeError::Model(e) => write!(f, "{e}"),
            DecodeError::Data(e) => write!(f, "{e}"),
            DecodeError::Policy(e) => write!(f, "{e}"),
            DecodeError::Io { path, source } => write!(f, "{path}: {source}"),
            DecodeError::Trace { path, line, reason } => {
                write!(f, "{path}:{line}: {reason}")
            }
        }
    }
}

impl std::error::Error for DecodeError {}

impl From<ModelError> for DecodeError {
    fn from(e: ModelError) -> Self {
        DecodeError::Model(e)
    }
}

impl From<DataError> for DecodeError {
    fn from(e: DataError) -> Self {
        DecodeError::Data(e)
    }
}

impl From<PolicyError> for DecodeError {
    fn from(e: PolicyError) -> Self {
        DecodeError::Policy(e)
    }
}

/// Write cap per sentence; generous enough that synthetic tasks never hit
/// it, tight enough to guarantee termination.
pub fn write_cap(src_len: usize) -> usize {
    2 * src_len + 10
}

/// Greedy wait-k decode of one sentence, returning the realized trace and
/// the encoder-side multiply-accumulate count.
pub fn simulate_counted<F: Real>(
    model: &SeqModel<F>,
    src: &[usize],
    k: Lag,
) -> Result<(ReadWriteTrace, u64), ModelError> {
    if k == Lag::Finite(0) {
        return Err(ModelError::Policy(PolicyError::InvalidLag {
            input: "0".to_string(),
        }));
    }
    let src_len = src.len();
    let cap = write_cap(src_len);
    let mut session = model.session(src.to_vec())?;
    let mut actions = Vec::new();
    let mut hypothesis = Vec::new();
    let initial = match k {
        Lag::Finite(k) => k.min(src_len),
        Lag::Infinite => src_len,
    };
    for _ in 0..initial {
        session.read_next()?;
        actions.push(Action::Read);
    }
    loop {
        let dist = session.next_dist()?;
        let token = argmax_lowest(&dist);
        if token == EOS {
            // The terminating write is not recorded and eos is excluded
            // from the hypothesis.
            break;
        }
        session.commit(token)?;
        actions.push(Action::Write);
        hypothesis.push(token);
        if hypothesis.len() >= cap {
            break;
        }
        if session.reads_done() < src_len {
            session.read_next()?;
            actions.push(Action::Read);
        }
    }
    let macs = session.encoder_macs();
    let trace = ReadWriteTrace {
        actions,
        source_len: src_len,
        hypothesis,
    };
    trace.validate()?;
    Ok((trace, macs))
}

pub fn simulate<F: Real>(
    model: &SeqModel<F>,
    src: &[usize],
    k: Lag,
) -> Result<ReadWriteTrace, ModelError> {
    simulate_counted(model, src, k).map(|(t, _)| t)
}

/// The deliberately slow reference: a bidirectional encoder re-encodes the
/// whole prefix after every read. Returns the trace and the encoder MACs.
pub fn simulate_bidirectional_baseline<F: Real>(
    model: &SeqModel<F>,
    src: &[usize],
    k: Lag,
) -> Result<(ReadWriteTrace, u64), ModelError> {
    match model {
        SeqModel::Tf(m) if m.cfg.encoder_mode == EncoderMode::Bidirectional => {
            simulate_counted(model, src, k)
        }
        _ => Err(ModelError::UnsupportedMode {
            op: "simulate_bidirectional_baseline",
            expected: "a transformer checkpoint trained with a bidirectional encoder",
        }),
    }
}

/// One trace file line. Field order is part of the format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub id: u64,
    pub src_len: usize,
    pub actions: String,
    pub hyp: String,
}

impl TraceRecord {
    pub fn to_trace(&self, tgt_vocab: &Vocabulary) -> Result<ReadWriteTrace, PolicyError> {
        let hyp_ids = tgt_vocab.encode(&self.hyp);
        ReadWriteTrace::from_actions_string(&self.actions, self.src_len, hyp_ids)
    }
}

pub struct TranslateOutput {
    pub hypotheses: Vec<String>,
    pub traces: Vec<TraceRecord>,
}

/// Translate a whole corpus line by line. Deterministic: rerunning with the
/// same inputs produces byte-identical outputs.
pub fn batch_translate<F: Real>(
    model: &SeqModel<F>,
    src_lines: &[String],
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    src_eos: bool,
    k: Lag,
) -> Result<TranslateOutput, DecodeError> {
    let mut hypotheses = Vec::with_capacity(src_lines.len());
    let mut traces = Vec::with_capacity(src_lines.len());
    for (i, line) in src_lines.iter().enumerate() {
        let mut ids = src_vocab.encode(line);
        if src_eos {
            ids.push(EOS);
        }
        if ids.is_empty() {
            return Err(DecodeError::Data(DataError::EmptyLine {
                path: "<input>".to_string(),
                line: i + 1,
            }));
        }
        let trace = simulate(model, &ids, k)?;
        let hyp_text = tgt_vocab.decode(&trace.hypothesis)?;
        traces.push(TraceRecord {
            id: i as u64,
            src_len: trace.source_len,
            actions: trace.actions_string(),
            hyp: hyp_text.clone(),
        });
        hypotheses.push(hyp_text);
    }
    Ok(TranslateOutput { hypotheses, traces })
}

/// Hypotheses: one line per input sentence, LF terminated.
pub fn write_hypotheses(path: &Path, hyps: &[String]) -> Result<(), DecodeError> {
    let mut out = String::new();
    for h in hyps {
        out.push_str(h);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| DecodeError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Trace file: one JSON object per line, UTF-8, LF terminated.
pub fn write_traces(path: &Path, traces: &[TraceRecord]) -> Result<(), DecodeError> {
    let mut f = fs::File::create(path).map_err(|e| DecodeError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    for t in traces {
        let line = serde_json::to_string(t).expect("trace serialization");
        writeln!(f, "{line}").map_err(|e| DecodeError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
    }
    Ok(())
}

pub fn read_traces(path: &Path) -> Result<Vec<TraceRecord>, DecodeError> {
    let lines = crate::data::read_lines(path)?;
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        let rec: TraceRecord = serde_json::from_str(line).map_err(|e| DecodeError::Trace {
            path: path.display().to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}
