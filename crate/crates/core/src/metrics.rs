//! Latency and quality measurement: Average Lagging, Average Proportion,
//! corpus BLEU, and quality-latency sweeps. All metrics are pure functions
//! of traces, hypotheses and references.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use crate::data::Vocabulary;
use crate::decoder::{simulate, DecodeError};
use crate::model::{ModelError, SeqModel};
use crate::policy::{Lag, ReadWriteTrace};
use crate::tensor::Real;

#[derive(Debug)]
pub enum MetricError {
    EmptyHypothesis,
    LineCountMismatch { hyp: usize, refs: usize },
    EmptyLagList,
    Model(ModelError),
    Decode(DecodeError),
    Io { path: String, source: std::io::Error },
}

impl fmt::Display for MetricError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricError::EmptyHypothesis => write!(f, "metric undefined for an empty hypothesis"),
            MetricError::LineCountMismatch { hyp, refs } => {
                write!(f, "hypothesis/reference line counts differ: {hyp} vs {refs}")
            }
            MetricError::EmptyLagList => write!(f, "k list must be nonempty"),
            MetricError::Model(e) => write!(f, "{e}"),
            MetricError::Decode(e) => write!(f, "{e}"),
            MetricError::Io { path, source } => write!(f, "{path}: {source}"),
        }
    }
}

impl std::error::Error for MetricError {}

impl From<ModelError> for MetricError {
    fn from(e: ModelError) -> Self {
        MetricError::Model(e)
    }
}

impl From<DecodeError> for MetricError {
    fn from(e: DecodeError) -> Self {
        MetricError::Decode(e)
    }
}

/// Source steps by which the system lags behind an ideal wait-0 translator:
/// AL = (1/tau) * sum_{t<=tau} (z_t - (t-1)/r) with r = |hyp|/|x| and tau
/// the first write with the whole source read, or |hyp| if never reached.
/// Negative when decoding stops with most of the source unread.
pub fn average_lagging(trace: &ReadWriteTrace) -> Result<f64, MetricError> {
    let z = trace.read_counts();
    let hyp_len = z.len();
    if hyp_len == 0 {
        return Err(MetricError::EmptyHypothesis);
    }
    let src_len = trace.source_len;
    let tau = z
        .iter()
        .position(|&zt| zt == src_len)
        .map(|i| i + 1)
        .unwrap_or(hyp_len);
    let r = hyp_len as f64 / src_len as f64;
    let mut sum = 0.0;
    for (t, &zt) in z.iter().take(tau).enumerate() {
        sum += zt as f64 - t as f64 / r;
    }
    Ok(sum / tau as f64)
}

/// Normalized area under the read schedule: sum_t z_t / (|x| * |hyp|).
pub fn average_proportion(trace: &ReadWriteTrace) -> Result<f64, MetricError> {
    let z = trace.read_counts();
    if z.is_empty() {
        return Err(MetricError::EmptyHypothesis);
    }
    let total: usize = z.iter().sum();
    Ok(total as f64 / (trace.source_len * z.len()) as f64)
}

/// Corpus BLEU-4 with the usual modified n-gram precision and brevity
/// penalty, no smoothing: any zero precision zeroes the score. Tokens are
/// whitespace-split and case-sensitive.
#[derive(Clone, Debug, PartialEq)]
pub struct BleuScore {
    pub bleu: f64,
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<'a>(tokens: &[&'a str], n: usize) -> HashMap<Vec<&'a str>, usize> {
    let mut map = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *map.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    map
}

pub fn bleu(hyp_lines: &[String], ref_lines: &[String]) -> Result<BleuScore, MetricError> {
    if hyp_lines.len() != ref_lines.len() {
        return Err(MetricError::LineCountMismatch {
            hyp: hyp_lines.len(),
            refs: ref_lines.len(),
        });
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (h, r) in hyp_lines.iter().zip(ref_lines) {
        let ht: Vec<&str> = h.split_whitespace().collect();
        let rt: Vec<&str> = r.split_whitespace().collect();
        hyp_len += ht.len();
        ref_len += rt.len();
        for n in 1..=4 {
            let hc = ngram_counts(&ht, n);
            let rc = ngram_counts(&rt, n);
            for (gram, count) in &hc {
                total[n - 1] += count;
                if let Some(&rcount) = rc.get(gram) {
                    matched[n - 1] += count.min(&rcount);
                }
            }
        }
    }
    let mut precisions = [0.0f64; 4];
    for n in 0..4 {
        precisions[n] = if total[n] == 0 {
            0.0
        } else {
            matched[n] as f64 / total[n] as f64
        };
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let bleu = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        let log_mean: f64 = precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0;
        brevity_penalty * log_mean.exp() * 100.0
    };
    Ok(BleuScore {
        bleu,
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

pub fn bleu_files(hyp_path: &Path, ref_path: &Path) -> Result<BleuScore, MetricError> {
    let hyp = crate::data::read_lines(hyp_path).map_err(decode_io)?;
    let refs = crate::data::read_lines(ref_path).map_err(decode_io)?;
    bleu(&hyp, &refs)
}

fn decode_io(e: crate::data::DataError) -> MetricError {
    MetricError::Decode(DecodeError::Data(e))
}

/// One sweep record: quality and latency at a single evaluation lag.
#[derive(Clone, Debug, PartialEq)]
pub struct LatencyRecord {
    pub k: Lag,
    pub al: f64,
    pub ap: f64,
    pub bleu: f64,
    /// Sentences that produced an empty hypothesis and were left out of the
    /// AL/AP means.
    pub empty_hyps: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LatencyReport {
    pub records: Vec<LatencyRecord>,
}

impl LatencyReport {
    /// CSV rows `k,AL,AP,BLEU` sorted by k, wait-until-end last.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,AL,AP,BLEU\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{:.4},{:.4},{:.2}\n",
                r.k, r.al, r.ap, r.bleu
            ));
        }
        out
    }
}

fn lag_sort_key(k: Lag) -> (u8, usize) {
    match k {
        Lag::Finite(v) => (0, v),
        Lag::Infinite => (1, 0),
    }
}

/// Decode the corpus at every lag in `k_list` and assemble the
/// quality-latency curve against the references.
pub fn sweep<F: Real>(
    model: &SeqModel<F>,
    sources: &[Vec<usize>],
    ref_lines: &[String],
    tgt_vocab: &Vocabulary,
    k_list: &[Lag],
) -> Result<LatencyReport, MetricError> {
    if k_list.is_empty() {
        return Err(MetricError::EmptyLagList);
    }
    if sources.len() != ref_lines.len() {
        return Err(MetricError::LineCountMismatch {
            hyp: sources.len(),
            refs: ref_lines.len(),
        });
    }
    let mut ks = k_list.to_vec();
    ks.sort_by_key(|&k| lag_sort_key(k));
    ks.dedup();
    let mut records = Vec::with_capacity(ks.len());
    for &k in &ks {
        let mut al_sum = 0.0;
        let mut ap_sum = 0.0;
        let mut counted = 0usize;
        let mut empty = 0usize;
        let mut hyps = Vec::with_capacity(sources.len());
        for src in sources {
            let trace = simulate(model, src, k)?;
            if trace.hypothesis.is_empty() {
                empty += 1;
            } else {
                al_sum += average_lagging(&trace)?;
                ap_sum += average_proportion(&trace)?;
                counted += 1;
            }
            hyps.push(
                tgt_vocab
                    .decode(&trace.hypothesis)
                    .map_err(|e| MetricError::Decode(DecodeError::Data(e)))?,
            );
        }
        let score = bleu(&hyps, ref_lines)?;
        records.push(LatencyRecord {
            k,
            al: if counted > 0 { al_sum / counted as f64 } else { 0.0 },
            ap: if counted > 0 { ap_sum / counted as f64 } else { 0.0 },
            bleu: score.bleu,
            empty_hyps: empty,
        });
    }
    Ok(LatencyReport { records })
}
