//! simuk: train, decode and evaluate wait-k online translation models.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use simuk::checkpoint;
use simuk::data::{self, encode_pairs, Vocabulary};
use simuk::decoder;
use simuk::metrics;
use simuk::model::{Arch, SeqModel};
use simuk::pervasive::{PaConfig, PaMode, PaModel};
use simuk::policy::Lag;
use simuk::training::{self, CkptEvent, Objective, TrainPlan};
use simuk::transformer::{EncoderMode, TransformerConfig, TransformerModel};

/// Training and decoding run in 32-bit; gradient checks live in the test
/// suite at 64-bit.
type F = f32;

#[derive(Parser)]
#[command(name = "simuk", version, about = "Simultaneous (online) machine translation with wait-k decoding")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic parallel corpus (train/valid/test splits).
    Synth(SynthArgs),
    /// Train a model on a corpus directory.
    Train(Box<TrainArgs>),
    /// Translate a file with a trained checkpoint at a fixed lag.
    Translate(TranslateArgs),
    /// Quality-latency sweep over several evaluation lags.
    Sweep(SweepArgs),
    /// Corpus BLEU of a hypothesis file against a reference file.
    Score(ScoreArgs),
    /// Latency statistics of a trace file.
    Latency(LatencyArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// copy | reverse | substitute
    #[arg(long)]
    task: String,
    /// Training pairs
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 500)]
    n_valid: usize,
    #[arg(long, default_value_t = 500)]
    n_test: usize,
    #[arg(long, default_value_t = 5)]
    len_min: usize,
    #[arg(long, default_value_t = 15)]
    len_max: usize,
    #[arg(long, default_value_t = 32)]
    alphabet: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// transformer | pa
    #[arg(long)]
    arch: String,
    /// waitk:K | multipath | offline
    #[arg(long)]
    objective: String,
    /// Corpus directory holding train.src/train.tgt (valid.* optional)
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints, vocabularies and metrics
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    /// key = value file merged under the flags
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long)]
    max_tokens: Option<usize>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    min_count: Option<usize>,
    /// Do not append eos to encoded source sentences
    #[arg(long)]
    no_src_eos: bool,
    /// Transformer: use a bidirectional source encoder (reference baseline)
    #[arg(long)]
    bidirectional: bool,
    /// Pervasive Attention: offline pooling and source-unrestricted kernels
    #[arg(long)]
    offline_pa: bool,
    /// Transformer preset small | base | big (full-scale, not CI-tested)
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    model_dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ffn_dim: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    kernel: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    emb_dim: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    log_every: Option<usize>,
}

#[derive(Args)]
struct TranslateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Evaluation lag: a positive integer or "inf"
    #[arg(long)]
    k: String,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Also write a JSON-lines read/write trace
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    src_vocab: Option<PathBuf>,
    #[arg(long)]
    tgt_vocab: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Comma-separated lags, e.g. 1,3,5,7,9,inf
    #[arg(long)]
    k_list: String,
    /// CSV output path (printed to stdout as well)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    src_vocab: Option<PathBuf>,
    #[arg(long)]
    tgt_vocab: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
}

#[derive(Args)]
struct LatencyArgs {
    #[arg(long)]
    trace: PathBuf,
}

enum CliError {
    Usage(String),
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

macro_rules! runtime_from {
    ($($ty:ty),+) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Runtime(e.to_string())
            }
        }
    )+};
}

runtime_from!(
    simuk::data::DataError,
    simuk::decoder::DecodeError,
    simuk::metrics::MetricError,
    simuk::model::ModelError,
    simuk::training::TrainError,
    simuk::checkpoint::CkptError
);

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Train(a) => cmd_train(*a),
        Cmd::Translate(a) => cmd_translate(a),
        Cmd::Sweep(a) => cmd_sweep(a),
        Cmd::Score(a) => cmd_score(a),
        Cmd::Latency(a) => cmd_latency(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn cmd_synth(a: SynthArgs) -> Result<(), CliError> {
    let kind = data::SynthKind::parse(&a.task)
        .ok_or_else(|| usage(format!("unknown task {:?}: expected copy, reverse or substitute", a.task)))?;
    let base = data::SynthSpec {
        kind,
        n: a.n,
        len_min: a.len_min,
        len_max: a.len_max,
        alphabet: a.alphabet,
        seed: a.seed,
        task_seed: a.seed,
    };
    for (prefix, n, seed) in [
        ("train", a.n, a.seed),
        ("valid", a.n_valid, a.seed.wrapping_add(1)),
        ("test", a.n_test, a.seed.wrapping_add(2)),
    ] {
        let pairs = data::generate(&data::SynthSpec { n, seed, ..base })?;
        data::write_corpus(&a.out, prefix, &pairs)?;
    }
    println!(
        "wrote {} train / {} valid / {} test pairs to {}",
        a.n,
        a.n_valid,
        a.n_test,
        a.out.display()
    );
    Ok(())
}

fn parse_objective(s: &str) -> Result<Objective, CliError> {
    if s == "multipath" {
        return Ok(Objective::MultiPath);
    }
    if s == "offline" {
        return Ok(Objective::Offline);
    }
    if let Some(kstr) = s.strip_prefix("waitk:") {
        let k: Lag = kstr
            .parse()
            .map_err(|_| usage(format!("invalid objective {s:?}: k must be a positive integer or \"inf\"")))?;
        return Ok(Objective::SinglePath(k));
    }
    Err(usage(format!(
        "unknown objective {s:?}: expected waitk:K, multipath or offline"
    )))
}

/// key = value lines, '#' comments; flags override config entries.
fn load_config(path: &Path) -> Result<HashMap<String, String>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let mut map = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(usage(format!(
                "{}:{}: expected key = value",
                path.display(),
                i + 1
            )));
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

struct Settings {
    config: HashMap<String, String>,
    used: std::cell::RefCell<std::collections::HashSet<String>>,
}

impl Settings {
    fn get<T: std::str::FromStr>(&self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError> {
        self.used.borrow_mut().insert(key.to_string());
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.config.get(key) {
            Some(raw) => raw
                .parse::<T>()
                .map_err(|_| usage(format!("config key {key}: cannot parse {raw:?}"))),
            None => Ok(default),
        }
    }

    fn reject_unknown(&self) -> Result<(), CliError> {
        let used = self.used.borrow();
        for key in self.config.keys() {
            if !used.contains(key) {
                return Err(usage(format!("config key {key:?} is not recognized")));
            }
        }
        Ok(())
    }
}

fn read_corpus_side(dir: &Path, name: &str) -> Result<Vec<String>, CliError> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(usage(format!("{} not found", path.display())));
    }
    Ok(data::read_lines(&path)?)
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let arch = Arch::parse(&a.arch)
        .ok_or_else(|| usage(format!("unknown arch {:?}: expected transformer or pa", a.arch)))?;
    let objective = parse_objective(&a.objective)?;
    if !a.data.is_dir() {
        return Err(usage(format!("data directory {} does not exist", a.data.display())));
    }
    let config = match &a.config {
        Some(path) => load_config(path)?,
        None => HashMap::new(),
    };
    let s = Settings {
        config,
        used: Default::default(),
    };

    let train_src = read_corpus_side(&a.data, "train.src")?;
    let train_tgt = read_corpus_side(&a.data, "train.tgt")?;
    let min_count = s.get("min-count", a.min_count, 1)?;
    let src_vocab = Vocabulary::build(&train_src, min_count)?;
    let tgt_vocab = Vocabulary::build(&train_tgt, min_count)?;
    let src_eos = !a.no_src_eos;
    let train_pairs = encode_pairs(&train_src, &train_tgt, &src_vocab, &tgt_vocab, src_eos)?;
    let valid_pairs = if a.data.join("valid.src").is_file() {
        let vs = read_corpus_side(&a.data, "valid.src")?;
        let vt = read_corpus_side(&a.data, "valid.tgt")?;
        encode_pairs(&vs, &vt, &src_vocab, &tgt_vocab, src_eos)?
    } else {
        Vec::new()
    };

    let max_len = s.get("max-len", a.max_len, 256)?;
    let dropout = s.get("dropout", a.dropout, 0.1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut model: SeqModel<F> = match arch {
        Arch::Transformer => {
            let (layers, d, heads, ffn) = match a.preset.as_deref() {
                None => (
                    s.get("layers", a.layers, 2)?,
                    s.get("model-dim", a.model_dim, 64)?,
                    s.get("heads", a.heads, 4)?,
                    s.get("ffn-dim", a.ffn_dim, 256)?,
                ),
                Some("small") => (6, 512, 4, 1024),
                Some("base") => (6, 512, 8, 2048),
                Some("big") => (6, 1024, 16, 4096),
                Some(other) => {
                    return Err(usage(format!(
                        "unknown preset {other:?}: expected small, base or big"
                    )))
                }
            };
            let cfg = TransformerConfig {
                layers,
                model_dim: d,
                heads,
                ffn_dim: ffn,
                dropout,
                encoder_mode: if a.bidirectional {
                    EncoderMode::Bidirectional
                } else {
                    EncoderMode::Unidirectional
                },
                max_len,
                src_vocab: src_vocab.len(),
                tgt_vocab: tgt_vocab.len(),
            };
            SeqModel::Tf(TransformerModel::new(cfg, &mut rng)?)
        }
        Arch::Pa => {
            let cfg = PaConfig {
                layers: s.get("layers", a.layers, 3)?,
                kernel: s.get("kernel", a.kernel, 3)?,
                channels: s.get("channels", a.channels, 64)?,
                emb_dim: s.get("emb-dim", a.emb_dim, 32)?,
                mode: if a.offline_pa { PaMode::Offline } else { PaMode::Online },
                max_len,
                src_vocab: src_vocab.len(),
                tgt_vocab: tgt_vocab.len(),
            };
            SeqModel::Pa(PaModel::new(cfg, &mut rng)?)
        }
    };

    let plan = TrainPlan {
        objective,
        epochs: s.get("epochs", a.epochs, 10)?,
        seed: a.seed,
        max_tokens: s.get("max-tokens", a.max_tokens, 400)?,
        lr: s.get("lr", a.lr, 5e-4)?,
        warmup: s.get("warmup", a.warmup, 400)?,
        clip_norm: s.get("clip-norm", a.clip_norm, 1.0)?,
        checkpoint_every: s.get("checkpoint-every", a.checkpoint_every, 0)?,
        log_every: s.get("log-every", a.log_every, 50)?,
    };
    s.reject_unknown()?;

    fs::create_dir_all(&a.out).map_err(|e| CliError::Runtime(format!("{}: {e}", a.out.display())))?;
    src_vocab.save(&a.out.join("src.vocab"))?;
    tgt_vocab.save(&a.out.join("tgt.vocab"))?;
    let fingerprint = data::vocab_fingerprint(&src_vocab, &tgt_vocab);

    let out = a.out.clone();
    let fp = fingerprint.clone();
    let stats = training::train(
        &mut model,
        &plan,
        &train_pairs,
        &valid_pairs,
        &a.out.join("metrics.csv"),
        |m, event| {
            let path = match event {
                CkptEvent::BestSoFar { .. } => out.join("best.ckpt"),
                CkptEvent::Final => out.join("last.ckpt"),
                CkptEvent::Periodic { epoch } => out.join(format!("epoch{epoch}.ckpt")),
            };
            checkpoint::save(&path, m, &fp, src_eos)
                .map_err(|e| simuk::training::TrainError::Io {
                    path: path.display().to_string(),
                    source: std::io::Error::other(e.to_string()),
                })
        },
    )?;
    println!(
        "trained {arch} {objective} for {} epochs ({} steps); best val loss {:.6} at epoch {}",
        stats.epochs,
        stats.steps,
        stats.best_val_loss,
        stats.best_epoch,
        arch = arch.name(),
        objective = plan.objective,
    );
    if stats.skipped_sentences > 0 {
        eprintln!(
            "warning: skipped {} sentences longer than max-tokens",
            stats.skipped_sentences
        );
    }
    println!("checkpoints and metrics in {}", a.out.display());
    Ok(())
}

struct LoadedModel {
    model: SeqModel<F>,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    src_eos: bool,
}

fn load_model(
    ckpt: &Path,
    src_vocab_flag: &Option<PathBuf>,
    tgt_vocab_flag: &Option<PathBuf>,
) -> Result<LoadedModel, CliError> {
    let dir = ckpt.parent().unwrap_or(Path::new("."));
    let src_path = src_vocab_flag.clone().unwrap_or_else(|| dir.join("src.vocab"));
    let tgt_path = tgt_vocab_flag.clone().unwrap_or_else(|| dir.join("tgt.vocab"));
    let src_vocab = Vocabulary::load(&src_path)?;
    let tgt_vocab = Vocabulary::load(&tgt_path)?;
    let fingerprint = data::vocab_fingerprint(&src_vocab, &tgt_vocab);
    let loaded = checkpoint::load::<F>(ckpt, Some(&fingerprint))?;
    Ok(LoadedModel {
        model: loaded.model,
        src_vocab,
        tgt_vocab,
        src_eos: loaded.src_eos,
    })
}

fn parse_k(s: &str) -> Result<Lag, CliError> {
    s.parse()
        .map_err(|_| usage(format!("invalid k {s:?}: expected a positive integer or \"inf\"")))
}

fn cmd_translate(a: TranslateArgs) -> Result<(), CliError> {
    let k = parse_k(&a.k)?;
    if !a.input.is_file() {
        return Err(usage(format!("input file {} not found", a.input.display())));
    }
    let lm = load_model(&a.ckpt, &a.src_vocab, &a.tgt_vocab)?;
    let lines = data::read_lines(&a.input)?;
    let out = decoder::batch_translate(&lm.model, &lines, &lm.src_vocab, &lm.tgt_vocab, lm.src_eos, k)?;
    decoder::write_hypotheses(&a.output, &out.hypotheses)?;
    if let Some(trace_path) = &a.trace {
        decoder::write_traces(trace_path, &out.traces)?;
    }
    println!("translated {} sentences at k={k}", out.hypotheses.len());
    Ok(())
}

fn parse_k_list(s: &str) -> Result<Vec<Lag>, CliError> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        if part.is_empty() {
            return Err(usage(format!("malformed k list {s:?}")));
        }
        out.push(parse_k(part)?);
    }
    if out.is_empty() {
        return Err(usage("k list must be nonempty"));
    }
    Ok(out)
}

fn cmd_sweep(a: SweepArgs) -> Result<(), CliError> {
    let ks = parse_k_list(&a.k_list)?;
    if !a.input.is_file() {
        return Err(usage(format!("input file {} not found", a.input.display())));
    }
    if !a.reference.is_file() {
        return Err(usage(format!("reference file {} not found", a.reference.display())));
    }
    let lm = load_model(&a.ckpt, &a.src_vocab, &a.tgt_vocab)?;
    let src_lines = data::read_lines(&a.input)?;
    let ref_lines = data::read_lines(&a.reference)?;
    let mut sources = Vec::with_capacity(src_lines.len());
    for line in &src_lines {
        let mut ids = lm.src_vocab.encode(line);
        if lm.src_eos {
            ids.push(data::EOS);
        }
        sources.push(ids);
    }
    let report = metrics::sweep(&lm.model, &sources, &ref_lines, &lm.tgt_vocab, &ks)?;
    let csv = report.to_csv();
    print!("{csv}");
    if let Some(path) = &a.out {
        fs::write(path, &csv).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn cmd_score(a: ScoreArgs) -> Result<(), CliError> {
    let score = metrics::bleu_files(&a.hyp, &a.reference)?;
    println!("{:.2}", score.bleu);
    Ok(())
}

fn cmd_latency(a: LatencyArgs) -> Result<(), CliError> {
    let records = decoder::read_traces(&a.trace)?;
    let mut al_sum = 0.0;
    let mut ap_sum = 0.0;
    let mut counted = 0usize;
    let mut empty = 0usize;
    for rec in &records {
        let hyp_len = rec.hyp.split_whitespace().count();
        let trace = simuk::policy::ReadWriteTrace::from_actions_string(
            &rec.actions,
            rec.src_len,
            vec![4; hyp_len],
        )
        .map_err(|e| CliError::Runtime(format!("trace id {}: {e}", rec.id)))?;
        if hyp_len == 0 {
            empty += 1;
            continue;
        }
        al_sum += metrics::average_lagging(&trace)?;
        ap_sum += metrics::average_proportion(&trace)?;
        counted += 1;
    }
    println!("sentences {}", records.len());
    if counted > 0 {
        println!("AL {:.4}", al_sum / counted as f64);
        println!("AP {:.4}", ap_sum / counted as f64);
    }
    if empty > 0 {
        println!("empty {empty}");
    }
    Ok(())
}
