//! Training objectives and the optimization loop.
//!
//! Three objectives: a single wait-k path (wait-until-end reduces to the
//! offline teacher-forcing loss), the sampled multi-path objective for the
//! Transformer, and the grid objective for Pervasive Attention, which
//! scores every cell on or above the diagonal in one forward pass.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Batch, DataError, SentencePair, PAD};
use crate::model::{ModelError, SeqModel};
use crate::params::Bound;
use crate::policy::{batch_cross_mask, sample_k, Lag, PolicyError};
use crate::tensor::{clip_global_norm, Adam, AdamConfig, LrSchedule, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    SinglePath(Lag),
    MultiPath,
    Offline,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Objective::SinglePath(k) => write!(f, "waitk:{k}"),
            Objective::MultiPath => write!(f, "multipath"),
            Objective::Offline => write!(f, "offline"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainPlan {
    pub objective: Objective,
    pub epochs: usize,
    pub seed: u64,
    pub max_tokens: usize,
    pub lr: f64,
    pub warmup: u64,
    pub clip_norm: f64,
    /// Save a periodic checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Emit a metrics row every this many steps.
    pub log_every: usize,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            objective: Objective::MultiPath,
            epochs: 10,
            seed: 1,
            max_tokens: 2000,
            lr: 5e-4,
            warmup: 400,
            clip_norm: 1.0,
            checkpoint_every: 0,
            log_every: 50,
        }
    }
}

#[derive(Debug)]
pub enum TrainError {
    Diverged { epoch: usize, step: u64, loss: f64 },
    Model(ModelError),
    Data(DataError),
    Policy(PolicyError),
    Io { path: String, source: std::io::Error },
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Diverged { epoch, step, loss } => {
                write!(f, "training diverged at epoch {epoch}, step {step}: loss = {loss}")
            }
            TrainError::Model(e) => write!(f, "{e}"),
            TrainError::Data(e) => write!(f, "{e}"),
            TrainError::Policy(e) => write!(f, "{e}"),
            TrainError::Io { path, source } => write!(f, "{path}: {source}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

impl From<crate::tensor::TensorError> for TrainError {
    fn from(e: crate::tensor::TensorError) -> Self {
        TrainError::Model(ModelError::Tensor(e))
    }
}

impl From<PolicyError> for TrainError {
    fn from(e: PolicyError) -> Self {
        TrainError::Policy(e)
    }
}

/// Bookkeeping a loss evaluation hands back to its caller.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossInfo {
    /// Encoder forward passes executed (the multi-path objective must not
    /// re-encode per sampled path).
    pub encoder_forwards: u32,
    /// The lag actually optimized, when the objective has one.
    pub k_used: Option<Lag>,
    /// Number of cross-entropy terms behind the mean.
    pub loss_terms: usize,
}

fn tf_targets(batch: &Batch) -> (Vec<usize>, usize) {
    let mut terms = 0;
    let targets = batch.target.clone();
    for &t in &targets {
        if t != PAD {
            terms += 1;
        }
    }
    (targets, terms)
}

/// Grid-cell targets: cell (b, r, c) learns target token r when `keep`
/// allows the cell; everything else is ignored.
fn pa_targets(batch: &Batch, keep: impl Fn(usize, usize, usize) -> bool) -> (Vec<usize>, usize) {
    let (b, rows, cols) = (batch.len(), batch.tgt_width, batch.src_width);
    let mut targets = vec![PAD; b * rows * cols];
    let mut terms = 0;
    for bi in 0..b {
        let tgt = batch.target_row(bi);
        for r in 0..batch.tgt_lens[bi] {
            for c in 0..batch.src_lens[bi] {
                if keep(bi, r, c) && tgt[r] != PAD {
                    targets[(bi * rows + r) * cols + c] = tgt[r];
                    terms += 1;
                }
            }
        }
    }
    (targets, terms)
}

/// Mean NLL along one wait-k decoding path (Transformer) or at the cells
/// that path writes (Pervasive Attention). Wait-until-end is exactly the
/// offline teacher-forcing loss.
pub fn loss_single_path<F: Real>(
    tape: &mut Tape<F>,
    model: &SeqModel<F>,
    bound: &Bound,
    batch: &Batch,
    k: Lag,
    drop_rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var, LossInfo), TrainError> {
    match model {
        SeqModel::Tf(m) => {
            let mut rng = drop_rng;
            let enc = m.encode_tape(tape, bound, batch, rng.as_deref_mut())?;
            let mask = Arc::new(batch_cross_mask(
                k,
                &batch.src_lens,
                batch.src_width,
                batch.tgt_width,
            )?);
            let logits = m.decode_train_tape(tape, bound, enc, batch, &mask, rng)?;
            let flat = tape.reshape(logits, &[batch.len() * batch.tgt_width, m.cfg.tgt_vocab])?;
            let (targets, terms) = tf_targets(batch);
            let loss = tape.cross_entropy(flat, &targets, Some(PAD))?;
            Ok((
                loss,
                LossInfo {
                    encoder_forwards: 1,
                    k_used: Some(k),
                    loss_terms: terms,
                },
            ))
        }
        SeqModel::Pa(m) => {
            let grid = m.grid_forward_tape(tape, bound, batch)?;
            let logits = m.grid_logits_all_tape(tape, bound, grid)?;
            let flat = tape.reshape(
                logits,
                &[batch.len() * batch.tgt_width * batch.src_width, m.cfg.tgt_vocab],
            )?;
            let (targets, terms) = pa_targets(batch, |bi, r, c| {
                let src_len = batch.src_lens[bi];
                let z = match k {
                    Lag::Finite(k) => (k + r).min(src_len),
                    Lag::Infinite => src_len,
                };
                c + 1 == z
            });
            let loss = tape.cross_entropy(flat, &targets, Some(PAD))?;
            Ok((
                loss,
                LossInfo {
                    encoder_forwards: 0,
                    k_used: Some(k),
                    loss_terms: terms,
                },
            ))
        }
    }
}

/// Sampled multi-path objective: draw k uniformly from [1, max |x| in the
/// batch] and optimize that path. The source is encoded once per call.
pub fn loss_multipath_transformer<F: Real>(
    tape: &mut Tape<F>,
    model: &SeqModel<F>,
    bound: &Bound,
    batch: &Batch,
    k_rng: &mut ChaCha8Rng,
    drop_rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var, LossInfo), TrainError> {
    let max_k = batch.max_src_len().max(1);
    let set: Vec<usize> = (1..=max_k).collect();
    let k = sample_k(&set, k_rng)?;
    loss_single_path(tape, model, bound, batch, Lag::Finite(k), drop_rng)
}

/// Grid objective: mean cell NLL over the area on or above the diagonal
/// (source index at least target index), every cell from one forward pass.
pub fn loss_grid_pa<F: Real>(
    tape: &mut Tape<F>,
    model: &SeqModel<F>,
    bound: &Bound,
    batch: &Batch,
) -> Result<(Var, LossInfo), TrainError> {
    let SeqModel::Pa(m) = model else {
        return Err(TrainError::Model(ModelError::UnsupportedMode {
            op: "grid loss",
            expected: "the pervasive-attention architecture",
        }));
    };
    let grid = m.grid_forward_tape(tape, bound, batch)?;
    let logits = m.grid_logits_all_tape(tape, bound, grid)?;
    let flat = tape.reshape(
        logits,
        &[batch.len() * batch.tgt_width * batch.src_width, m.cfg.tgt_vocab],
    )?;
    let (targets, terms) = pa_targets(batch, |_, r, c| c >= r);
    let loss = tape.cross_entropy(flat, &targets, Some(PAD))?;
    Ok((
        loss,
        LossInfo {
            encoder_forwards: 0,
            k_used: None,
            loss_terms: terms,
        },
    ))
}

/// Dispatch an objective for one batch.
pub fn objective_loss<F: Real>(
    tape: &mut Tape<F>,
    model: &SeqModel<F>,
    bound: &Bound,
    batch: &Batch,
    objective: Objective,
    k_rng: &mut ChaCha8Rng,
    drop_rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var, LossInfo), TrainError> {
    match (objective, model) {
        (Objective::SinglePath(k), _) => loss_single_path(tape, model, bound, batch, k, drop_rng),
        (Objective::Offline, _) => {
            loss_single_path(tape, model, bound, batch, Lag::Infinite, drop_rng)
        }
        (Objective::MultiPath, SeqModel::Tf(_)) => {
            loss_multipath_transformer(tape, model, bound, batch, k_rng, drop_rng)
        }
        (Objective::MultiPath, SeqModel::Pa(_)) => loss_grid_pa(tape, model, bound, batch),
    }
}

/// Checkpoint moments the training loop reports to its caller.
pub enum CkptEvent {
    Periodic { epoch: usize },
    BestSoFar { epoch: usize, val_loss: f64 },
    Final,
}

#[derive(Clone, Debug, Default)]
pub struct TrainStats {
    pub steps: u64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub final_val_loss: f64,
    pub skipped_sentences: usize,
    /// (epoch, mean train loss, val loss) per epoch.
    pub curve: Vec<(usize, f64, f64)>,
}

/// Term-weighted mean objective over a pair list, dropout off. The lag
/// sampler is reseeded identically per call, so values are comparable
/// across epochs.
pub fn evaluate_loss<F: Real>(
    model: &SeqModel<F>,
    pairs: &[SentencePair],
    objective: Objective,
    max_tokens: usize,
    seed: u64,
) -> Result<f64, TrainError> {
    let (batches, _) = crate::data::make_batches(pairs, max_tokens, seed ^ 0x76616c);
    let mut k_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6b76616c);
    let mut total = 0.0;
    let mut terms = 0usize;
    for batch in &batches {
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape, false);
        let (loss, info) = objective_loss(&mut tape, model, &bound, batch, objective, &mut k_rng, None)?;
        total += tape.value(loss).item().as_f64() * info.loss_terms as f64;
        terms += info.loss_terms;
    }
    Ok(if terms == 0 { 0.0 } else { total / terms as f64 })
}

/// Run the optimization loop. The model ends up holding the best-validation
/// parameters; `on_checkpoint` sees periodic, best and final states as they
/// occur.
pub fn train<F: Real>(
    model: &mut SeqModel<F>,
    plan: &TrainPlan,
    train_pairs: &[SentencePair],
    valid_pairs: &[SentencePair],
    metrics_path: &Path,
    mut on_checkpoint: impl FnMut(&SeqModel<F>, CkptEvent) -> Result<(), TrainError>,
) -> Result<TrainStats, TrainError> {
    let mut csv = fs::File::create(metrics_path).map_err(|e| TrainError::Io {
        path: metrics_path.display().to_string(),
        source: e,
    })?;
    let mut csv_write = |line: String| -> Result<(), TrainError> {
        csv.write_all(line.as_bytes()).map_err(|e| TrainError::Io {
            path: metrics_path.display().to_string(),
            source: e,
        })
    };
    csv_write("epoch,step,loss,val_loss\n".to_string())?;

    let mut adam: Adam<F> = Adam::new(
        AdamConfig {
            schedule: LrSchedule::InverseSqrt {
                base: plan.lr,
                warmup: plan.warmup,
            },
            ..Default::default()
        },
        &model.params().sizes(),
    );
    let mut k_rng = ChaCha8Rng::seed_from_u64(plan.seed ^ 0x6b5f726e67);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(plan.seed ^ 0x64726f70);
    let mut stats = TrainStats {
        best_val_loss: f64::INFINITY,
        ..Default::default()
    };
    let mut best_snapshot: Option<Vec<Tensor<F>>> = None;
    let mut step: u64 = 0;

    for epoch in 1..=plan.epochs {
        let (batches, skipped) =
            crate::data::make_batches(train_pairs, plan.max_tokens, plan.seed.wrapping_add(epoch as u64));
        stats.skipped_sentences += skipped;
        let mut epoch_loss = 0.0;
        let mut epoch_terms = 0usize;
        for batch in &batches {
            let mut tape = Tape::new();
            let bound = model.params().bind(&mut tape, true);
            let (loss_var, info) = objective_loss(
                &mut tape,
                model,
                &bound,
                batch,
                plan.objective,
                &mut k_rng,
                Some(&mut drop_rng),
            )?;
            let loss = tape.value(loss_var).item().as_f64();
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch, step, loss });
            }
            tape.backward(loss_var)?;
            let mut grads = model.params().collect_grads(&tape, &bound);
            clip_global_norm(&mut grads, plan.clip_norm);
            adam.step(&mut model.params_mut().tensors_mut(), &grads)?;
            step += 1;
            epoch_loss += loss * info.loss_terms as f64;
            epoch_terms += info.loss_terms;
            if plan.log_every > 0 && step % plan.log_every as u64 == 0 {
                csv_write(format!("{epoch},{step},{loss:.6},\n"))?;
            }
        }
        let train_mean = if epoch_terms > 0 {
            epoch_loss / epoch_terms as f64
        } else {
            0.0
        };
        let val_pairs = if valid_pairs.is_empty() { train_pairs } else { valid_pairs };
        let val_loss = evaluate_loss(model, val_pairs, plan.objective, plan.max_tokens, plan.seed)?;
        csv_write(format!("{epoch},{step},{train_mean:.6},{val_loss:.6}\n"))?;
        stats.curve.push((epoch, train_mean, val_loss));
        stats.final_val_loss = val_loss;
        if val_loss < stats.best_val_loss {
            stats.best_val_loss = val_loss;
            stats.best_epoch = epoch;
            best_snapshot = Some(model.params().iter().map(|(_, t)| t.clone()).collect());
            on_checkpoint(model, CkptEvent::BestSoFar { epoch, val_loss })?;
        }
        if plan.checkpoint_every > 0 && epoch % plan.checkpoint_every == 0 {
            on_checkpoint(model, CkptEvent::Periodic { epoch })?;
        }
    }
    stats.steps = step;
    stats.epochs = plan.epochs;
    on_checkpoint(model, CkptEvent::Final)?;
    // Leave the best-validation weights in the live model.
    if let Some(snapshot) = best_snapshot {
        let names: Vec<String> = model.params().iter().map(|(n, _)| n.to_string()).collect();
        for (name, tensor) in names.iter().zip(snapshot) {
            *model.params_mut().get_mut(name) = tensor;
        }
    }
    Ok(stats)
}

pub fn metrics_path(out_dir: &Path) -> PathBuf {
    out_dir.join("metrics.csv")
}
