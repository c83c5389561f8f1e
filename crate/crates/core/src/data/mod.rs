//! Corpus ingestion, vocabulary construction, batching, and synthetic tasks.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

pub mod batch;
pub mod synth;

pub use batch::{make_batches, Batch};
pub use synth::{generate, write_corpus, SynthKind, SynthSpec};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Debug)]
pub enum DataError {
    Io { path: String, source: std::io::Error },
    MalformedUtf8 { path: String, line: usize },
    EmptyCorpus { path: String },
    EmptyLine { path: String, line: usize },
    LineCountMismatch { src: usize, tgt: usize },
    IdOutOfRange { id: usize, vocab: usize },
    BadVocabFile { path: String, reason: String },
    InvalidRange { lo: usize, hi: usize },
    AlphabetTooSmall { size: usize },
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Io { path, source } => write!(f, "{path}: {source}"),
            DataError::MalformedUtf8 { path, line } => {
                write!(f, "{path}: malformed UTF-8 on line {line}")
            }
            DataError::EmptyCorpus { path } => write!(f, "{path}: empty corpus"),
            DataError::EmptyLine { path, line } => write!(f, "{path}: empty sentence on line {line}"),
            DataError::LineCountMismatch { src, tgt } => {
                write!(f, "parallel files differ: {src} source lines vs {tgt} target lines")
            }
            DataError::IdOutOfRange { id, vocab } => {
                write!(f, "token id {id} outside vocabulary of size {vocab}")
            }
            DataError::BadVocabFile { path, reason } => write!(f, "{path}: {reason}"),
            DataError::InvalidRange { lo, hi } => write!(f, "invalid length range {lo}..{hi}"),
            DataError::AlphabetTooSmall { size } => {
                write!(f, "alphabet size must be at least 2, got {size}")
            }
        }
    }
}

impl std::error::Error for DataError {}

/// Token-to-id bijection with four fixed reserved ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: std::collections::HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let mut index = std::collections::HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            index.insert(t.clone(), i);
        }
        Vocabulary { tokens, index }
    }

    /// Count whitespace tokens of a lowercased corpus; tokens below
    /// `min_count` fall back to `<unk>` at encode time. Ids are assigned by
    /// descending count, ties broken lexicographically.
    pub fn build(lines: &[String], min_count: usize) -> Result<Self, DataError> {
        let mut counts: std::collections::HashMap<String, usize> = std::collections::HashMap::new();
        let mut any_token = false;
        for line in lines {
            for tok in line.split_whitespace() {
                any_token = true;
                *counts.entry(tok.to_lowercase()).or_insert(0) += 1;
            }
        }
        if !any_token {
            return Err(DataError::EmptyCorpus {
                path: "<memory>".to_string(),
            });
        }
        let mut entries: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count)
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(entries.into_iter().map(|(t, _)| t));
        Ok(Self::from_tokens(tokens))
    }

    pub fn build_from_file(path: &Path, min_count: usize) -> Result<Self, DataError> {
        let lines = read_lines(path)?;
        if lines.is_empty() {
            return Err(DataError::EmptyCorpus {
                path: path.display().to_string(),
            });
        }
        Self::build(&lines, min_count).map_err(|e| match e {
            DataError::EmptyCorpus { .. } => DataError::EmptyCorpus {
                path: path.display().to_string(),
            },
            other => other,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Result<&str, DataError> {
        self.tokens
            .get(id)
            .map(|s| s.as_str())
            .ok_or(DataError::IdOutOfRange {
                id,
                vocab: self.tokens.len(),
            })
    }

    /// Lowercase, split on whitespace, map out-of-vocabulary tokens to unk.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|tok| {
                let lower = tok.to_lowercase();
                self.index.get(&lower).copied().unwrap_or(UNK)
            })
            .collect()
    }

    /// Space-joined tokens; unknown ids are an error, unk renders literally.
    pub fn decode(&self, ids: &[usize]) -> Result<String, DataError> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            out.push(self.token(id)?);
        }
        Ok(out.join(" "))
    }

    /// Vocabulary file: the fixed reserved header, then one token per line
    /// at line id - 4.
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut body = String::new();
        for t in &self.tokens {
            body.push_str(t);
            body.push('\n');
        }
        let mut f = fs::File::create(path).map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        f.write_all(body.as_bytes()).map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let lines = read_lines(path)?;
        if lines.len() < RESERVED.len() {
            return Err(DataError::BadVocabFile {
                path: path.display().to_string(),
                reason: format!("expected at least {} header lines", RESERVED.len()),
            });
        }
        for (i, expect) in RESERVED.iter().enumerate() {
            if lines[i] != *expect {
                return Err(DataError::BadVocabFile {
                    path: path.display().to_string(),
                    reason: format!("header line {i} is {:?}, expected {expect:?}", lines[i]),
                });
            }
        }
        Ok(Self::from_tokens(lines))
    }

    /// FNV-1a digest of the token list; stored in checkpoints to catch
    /// vocabulary drift at load time.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for t in &self.tokens {
            for b in t.as_bytes() {
                h ^= *b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            h ^= 0xff;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

/// Paired source/target fingerprint as stored in checkpoint headers.
pub fn vocab_fingerprint(src: &Vocabulary, tgt: &Vocabulary) -> String {
    format!("{:016x}{:016x}", src.fingerprint(), tgt.fingerprint())
}

/// Read a UTF-8 text file into lines, reporting the first bad line.
pub fn read_lines(path: &Path) -> Result<Vec<String>, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut lines = Vec::new();
    for (i, raw) in bytes.split(|&b| b == b'\n').enumerate() {
        let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
        match std::str::from_utf8(raw) {
            Ok(s) => lines.push(s.to_string()),
            Err(_) => {
                return Err(DataError::MalformedUtf8 {
                    path: path.display().to_string(),
                    line: i + 1,
                })
            }
        }
    }
    // A trailing newline produces one empty tail element, not a sentence.
    if lines.last().is_some_and(|l| l.is_empty()) {
        lines.pop();
    }
    Ok(lines)
}

/// One encoded pair. The target always carries a terminal eos; bos is added
/// by decoders at runtime. Source eos is a corpus-level policy knob.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentencePair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

/// Encode aligned line lists into id pairs.
pub fn encode_pairs(
    src_lines: &[String],
    tgt_lines: &[String],
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    src_eos: bool,
) -> Result<Vec<SentencePair>, DataError> {
    if src_lines.len() != tgt_lines.len() {
        return Err(DataError::LineCountMismatch {
            src: src_lines.len(),
            tgt: tgt_lines.len(),
        });
    }
    let mut pairs = Vec::with_capacity(src_lines.len());
    for (i, (s, t)) in src_lines.iter().zip(tgt_lines).enumerate() {
        let mut source = src_vocab.encode(s);
        let mut target = tgt_vocab.encode(t);
        if source.is_empty() {
            return Err(DataError::EmptyLine {
                path: "<source>".to_string(),
                line: i + 1,
            });
        }
        if target.is_empty() {
            return Err(DataError::EmptyLine {
                path: "<target>".to_string(),
                line: i + 1,
            });
        }
        if src_eos {
            source.push(EOS);
        }
        target.push(EOS);
        pairs.push(SentencePair { source, target });
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lines(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn vocab_counting_oracle() {
        // "a a b": a has count 2 -> id 4, b count 1 -> id 5, V = 6.
        let v = Vocabulary::build(&lines(&["a a b"]), 1).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id_of("a"), Some(4));
        assert_eq!(v.id_of("b"), Some(5));
    }

    #[test]
    fn vocab_min_count_drops_to_reserved_only() {
        let v = Vocabulary::build(&lines(&["a"]), 2).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v.encode("a"), vec![UNK]);
    }

    #[test]
    fn vocab_is_deterministic() {
        let corpus = lines(&["b c c", "a a b"]);
        let v1 = Vocabulary::build(&corpus, 1).unwrap();
        let v2 = Vocabulary::build(&corpus, 1).unwrap();
        assert_eq!(v1, v2);
        // Ties by count break lexicographically: a and b both count 2.
        assert!(v1.id_of("a").unwrap() < v1.id_of("b").unwrap());
    }

    #[test]
    fn vocab_rejects_empty_corpus() {
        assert!(matches!(
            Vocabulary::build(&lines(&["", "  "]), 1),
            Err(DataError::EmptyCorpus { .. })
        ));
    }

    #[test]
    fn encode_decode_roundtrip_lowercases() {
        let v = Vocabulary::build(&lines(&["hello world"]), 1).unwrap();
        let ids = v.encode("Hello world");
        assert_eq!(ids.len(), 2);
        assert_eq!(v.decode(&ids).unwrap(), "hello world");
    }

    #[test]
    fn out_of_vocab_roundtrips_as_unk_literal() {
        let v = Vocabulary::build(&lines(&["hello"]), 1).unwrap();
        let ids = v.encode("goodbye");
        assert_eq!(ids, vec![UNK]);
        assert_eq!(v.decode(&ids).unwrap(), "<unk>");
    }

    #[test]
    fn empty_string_encodes_to_empty() {
        let v = Vocabulary::build(&lines(&["x"]), 1).unwrap();
        assert!(v.encode("").is_empty());
        assert_eq!(v.decode(&[]).unwrap(), "");
    }

    #[test]
    fn decode_rejects_out_of_range_id() {
        let v = Vocabulary::build(&lines(&["x"]), 1).unwrap();
        assert!(matches!(
            v.decode(&[99]),
            Err(DataError::IdOutOfRange { id: 99, .. })
        ));
    }

    #[test]
    fn vocab_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocabulary::build(&lines(&["a a b"]), 1).unwrap();
        v.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(v, loaded);
        assert_eq!(v.fingerprint(), loaded.fingerprint());
        // Line id - 4 convention: token "a" (id 4) on the line after the
        // 4-line reserved header.
        let text = std::fs::read_to_string(&path).unwrap();
        let file_lines: Vec<&str> = text.lines().collect();
        assert_eq!(&file_lines[..5], &["<pad>", "<bos>", "<eos>", "<unk>", "a"]);
    }

    #[test]
    fn utf8_error_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        fs::write(&path, b"ok line\n\xff\xfe broken\n").unwrap();
        match read_lines(&path) {
            Err(DataError::MalformedUtf8 { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected utf8 error, got {other:?}"),
        }
    }

    #[test]
    fn pairs_carry_terminal_eos() {
        let v = Vocabulary::build(&lines(&["a b"]), 1).unwrap();
        let pairs = encode_pairs(&lines(&["a b"]), &lines(&["b a"]), &v, &v, true).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(*pairs[0].source.last().unwrap(), EOS);
        assert_eq!(*pairs[0].target.last().unwrap(), EOS);
        let no_eos = encode_pairs(&lines(&["a b"]), &lines(&["b a"]), &v, &v, false).unwrap();
        assert_eq!(no_eos[0].source.len(), 2);
        assert!(!no_eos[0].source.contains(&EOS));
    }

    #[test]
    fn mismatched_parallel_files_error() {
        let v = Vocabulary::build(&lines(&["a"]), 1).unwrap();
        assert!(matches!(
            encode_pairs(&lines(&["a", "a"]), &lines(&["a"]), &v, &v, false),
            Err(DataError::LineCountMismatch { src: 2, tgt: 1 })
        ));
    }
}
