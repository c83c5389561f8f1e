//! Pervasive Attention: the source and target sequences are jointly encoded
//! on a 2D grid by a stack of masked convolutions.
//!
//! The online variant masks kernels in both grid directions, so the feature
//! at (t, j) encodes target context up to row t and source context up to
//! column j. Predictions max-pool a row prefix and never depend on how the
//! decode arrived at that cell.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, BOS};
use crate::model::ModelError;
use crate::params::{xavier, Bound, Params};
use crate::tensor::{kernels, ConvMask, Mask, Real, Tape, Tensor, Var};
use crate::transformer::positional_encoding;

pub mod incremental;

pub use incremental::PaSession;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaMode {
    /// Source- and target-causal convolutions with prefix pooling.
    Online,
    /// Target-causal convolutions only, full-row pooling.
    Offline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PaConfig {
    pub layers: usize,
    pub kernel: usize,
    pub channels: usize,
    pub emb_dim: usize,
    pub mode: PaMode,
    pub max_len: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
}

impl PaConfig {
    /// Desk-scale defaults; the full-scale reference stacks 14 layers of
    /// 11x11 kernels.
    pub fn small(src_vocab: usize, tgt_vocab: usize) -> Self {
        PaConfig {
            layers: 3,
            kernel: 3,
            channels: 64,
            emb_dim: 32,
            mode: PaMode::Online,
            max_len: 256,
            src_vocab,
            tgt_vocab,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layers == 0 {
            return Err(ModelError::Config("layers must be at least 1".to_string()));
        }
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(ModelError::Config(format!(
                "kernel width must be odd, got {}",
                self.kernel
            )));
        }
        if self.src_vocab < 4 || self.tgt_vocab < 4 {
            return Err(ModelError::Config(
                "vocabularies must include the reserved ids".to_string(),
            ));
        }
        Ok(())
    }

    pub fn conv_mask(&self) -> ConvMask {
        match self.mode {
            PaMode::Online => ConvMask::SourceAndTargetCausal,
            PaMode::Offline => ConvMask::TargetCausal,
        }
    }
}

/// Joint feature grid from one forward pass, with the lengths needed to
/// keep pad cells out of pooling.
pub struct GridActivations<F> {
    pub data: Tensor<F>,
    pub src_lens: Vec<usize>,
    pub tgt_lens: Vec<usize>,
}

impl<F: Real> GridActivations<F> {
    pub fn batch(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn rows(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn cols(&self) -> usize {
        self.data.dims()[2]
    }

    pub fn channels(&self) -> usize {
        self.data.dims()[3]
    }

    pub fn cell(&self, b: usize, r: usize, c: usize) -> &[F] {
        let ch = self.channels();
        &self.data.data()[(((b * self.rows()) + r) * self.cols() + c) * ch..][..ch]
    }
}

pub struct PaModel<F: Real> {
    pub cfg: PaConfig,
    pub params: Params<F>,
    pos: Tensor<F>,
}

fn pa_name(layer: usize, field: &str) -> String {
    format!("pa{layer}.{field}")
}

/// Taps the mask forbids are pinned to zero; the conv never reads them and
/// their gradient is identically zero, so they stay zero through training.
pub fn zero_masked_taps<F: Real>(kernel: &mut Tensor<F>, mode: ConvMask) {
    let kw = kernel.dims()[0];
    let (c_in, c_out) = (kernel.dims()[2], kernel.dims()[3]);
    let hw = (kw / 2) as isize;
    let src_causal = mode.source_causal();
    let data = kernel.data_mut();
    for ti in 0..kw {
        for tj in 0..kw {
            let dt = ti as isize - hw;
            let dj = tj as isize - hw;
            if dt > 0 || (src_causal && dj > 0) {
                let base = (ti * kw + tj) * c_in * c_out;
                for x in &mut data[base..base + c_in * c_out] {
                    *x = F::zero();
                }
            }
        }
    }
}

impl<F: Real> PaModel<F> {
    pub fn new(cfg: PaConfig, rng: &mut ChaCha8Rng) -> Result<Self, ModelError> {
        cfg.validate()?;
        let (e, ch, k) = (cfg.emb_dim, cfg.channels, cfg.kernel);
        let mut params = Params::new();
        params.insert("src_embed", xavier(vec![cfg.src_vocab, e], cfg.src_vocab, e, rng));
        params.insert("tgt_embed", xavier(vec![cfg.tgt_vocab, e], cfg.tgt_vocab, e, rng));
        params.insert("in_proj.w", xavier(vec![2 * e, ch], 2 * e, ch, rng));
        params.insert("in_proj.b", Tensor::zeros(vec![ch]));
        for l in 0..cfg.layers {
            params.insert(pa_name(l, "ln.g"), Tensor::filled(vec![ch], F::one()));
            params.insert(pa_name(l, "ln.b"), Tensor::zeros(vec![ch]));
            let fan = k * k * ch;
            let mut kernel = xavier(vec![k, k, ch, ch], fan, fan, rng);
            zero_masked_taps(&mut kernel, cfg.conv_mask());
            params.insert(pa_name(l, "conv.w"), kernel);
            params.insert(pa_name(l, "conv.b"), Tensor::zeros(vec![ch]));
        }
        // Zero output projection: the initial loss is ln V exactly.
        params.insert("out.w", Tensor::zeros(vec![ch, cfg.tgt_vocab]));
        params.insert("out.b", Tensor::zeros(vec![cfg.tgt_vocab]));
        let pos = positional_encoding(cfg.max_len, e);
        Ok(PaModel { cfg, params, pos })
    }

    pub fn from_parts(cfg: PaConfig, params: Params<F>) -> Result<Self, ModelError> {
        cfg.validate()?;
        let pos = positional_encoding(cfg.max_len, cfg.emb_dim);
        Ok(PaModel { cfg, params, pos })
    }

    pub(crate) fn pos_rows(&self, n: usize) -> Tensor<F> {
        let e = self.cfg.emb_dim;
        Tensor::new(vec![n, e], self.pos.data()[..n * e].to_vec()).unwrap()
    }

    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> Bound {
        self.params.bind(tape, trainable)
    }

    /// Pad cells contribute exactly zero to convolutions: scrub their
    /// embeddings with a 0/1 mask.
    fn pad_scrub(
        &self,
        tape: &mut Tape<F>,
        emb: Var,
        lens: &[usize],
        width: usize,
        e: usize,
    ) -> Result<Var, ModelError> {
        let b = lens.len();
        let gate = Tensor::from_fn(vec![b, width, e], |i| {
            let pos = (i / e) % width;
            let bi = i / (e * width);
            if pos < lens[bi] {
                F::one()
            } else {
                F::zero()
            }
        });
        let gate = tape.leaf(gate);
        Ok(tape.mul(emb, gate)?)
    }

    /// Residual-cumulative conv stack over the joint grid; returns the
    /// running sum after the last layer, [B, R, C, ch].
    pub fn grid_forward_tape(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        batch: &Batch,
    ) -> Result<Var, ModelError> {
        let (b, rows, cols) = (batch.len(), batch.tgt_width, batch.src_width);
        if rows > self.cfg.max_len || cols > self.cfg.max_len {
            return Err(ModelError::SequenceTooLong {
                len: rows.max(cols),
                max: self.cfg.max_len,
            });
        }
        let (e, ch) = (self.cfg.emb_dim, self.cfg.channels);
        // Decoder-style shifted rows: bos then the target prefix.
        let mut dec_in = Vec::with_capacity(b * rows);
        for bi in 0..b {
            let row = batch.target_row(bi);
            dec_in.push(BOS);
            dec_in.extend_from_slice(&row[..rows - 1]);
        }
        let tgt_flat = tape.gather_rows(bound.var("tgt_embed"), &dec_in)?;
        let tgt3 = tape.reshape(tgt_flat, &[b, rows, e])?;
        // Grid coordinates enter through the same sinusoidal table the
        // attention model uses; without them, pooled rows cannot tell
        // repeated tokens apart.
        let tgt3 = tape.add_cycle(tgt3, &self.pos_rows(rows))?;
        // Shifted rows stay valid one position longer than the raw target.
        let row_lens: Vec<usize> = batch.tgt_lens.iter().map(|&l| (l + 1).min(rows)).collect();
        let tgt3 = self.pad_scrub(tape, tgt3, &row_lens, rows, e)?;
        let src_flat = tape.gather_rows(bound.var("src_embed"), &batch.source)?;
        let src3 = tape.reshape(src_flat, &[b, cols, e])?;
        let src3 = tape.add_cycle(src3, &self.pos_rows(cols))?;
        let src3 = self.pad_scrub(tape, src3, &batch.src_lens, cols, e)?;

        let grid = tape.grid_embed(tgt3, src3)?;
        let flat = tape.reshape(grid, &[b * rows * cols, 2 * e])?;
        let proj = tape.matmul(flat, bound.var("in_proj.w"))?;
        let proj = tape.add_bias(proj, bound.var("in_proj.b"))?;
        let mut acc = tape.reshape(proj, &[b, rows, cols, ch])?;
        for l in 0..self.cfg.layers {
            let h = {
                let g = bound.var(&pa_name(l, "ln.g"));
                let bb = bound.var(&pa_name(l, "ln.b"));
                tape.layer_norm(acc, g, bb)?
            };
            let conv = tape.causal_conv2d(h, bound.var(&pa_name(l, "conv.w")), self.cfg.conv_mask())?;
            let conv = tape.add_bias(conv, bound.var(&pa_name(l, "conv.b")))?;
            let out = tape.relu(conv);
            acc = tape.add(acc, out)?;
        }
        Ok(acc)
    }

    /// Forward pass producing the feature grid as plain values.
    pub fn grid_forward(&self, batch: &Batch) -> Result<GridActivations<F>, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let grid = self.grid_forward_tape(&mut tape, &bound, batch)?;
        Ok(GridActivations {
            data: tape.value(grid).clone(),
            src_lens: batch.src_lens.clone(),
            tgt_lens: batch.tgt_lens.clone(),
        })
    }

    /// Distribution for y_t of sentence b after reading z source tokens:
    /// max-pool row t-1 over columns 1..=z, then project. A pure function
    /// of the grid cell contents, independent of any decoding path.
    pub fn predict_at(
        &self,
        grid: &GridActivations<F>,
        b: usize,
        t: usize,
        z: usize,
    ) -> Result<Vec<F>, ModelError> {
        let logits = self.cell_logits(grid, b, t, z)?;
        let all = vec![true; logits.len()];
        let mut probs = vec![F::zero(); logits.len()];
        kernels::masked_softmax_row(&logits, &all, &mut probs);
        Ok(probs)
    }

    /// Logits variant of [`Self::predict_at`].
    pub fn cell_logits(
        &self,
        grid: &GridActivations<F>,
        b: usize,
        t: usize,
        z: usize,
    ) -> Result<Vec<F>, ModelError> {
        if b >= grid.batch() {
            return Err(ModelError::Tensor(crate::tensor::TensorError::OutOfBounds {
                what: "batch index",
                got: b,
                limit: grid.batch(),
            }));
        }
        let valid_cols = grid.src_lens[b];
        if t == 0 || t > grid.rows() {
            return Err(ModelError::Tensor(crate::tensor::TensorError::OutOfBounds {
                what: "target position t",
                got: t,
                limit: grid.rows(),
            }));
        }
        if z == 0 || z > valid_cols {
            return Err(ModelError::Tensor(crate::tensor::TensorError::OutOfBounds {
                what: "prefix limit z",
                got: z,
                limit: valid_cols,
            }));
        }
        let ch = grid.channels();
        let mut pooled = grid.cell(b, t - 1, 0).to_vec();
        let mut arg = vec![0u32; ch];
        for c in 1..z {
            kernels::running_max(&mut pooled, &mut arg, grid.cell(b, t - 1, c), c as u32);
        }
        Ok(self.project(&pooled))
    }

    pub(crate) fn project(&self, pooled: &[F]) -> Vec<F> {
        let w = self.params.get("out.w");
        let b = self.params.get("out.b");
        let mut out = vec![F::zero(); self.cfg.tgt_vocab];
        kernels::vec_mat_acc(pooled, w.data(), self.cfg.channels, self.cfg.tgt_vocab, &mut out);
        for (o, &bv) in out.iter_mut().zip(b.data()) {
            *o = *o + bv;
        }
        out
    }

    /// Cumulative-max sweep over each row, then the vocabulary projection:
    /// logits for every (t, j) cell in one pass, [B, R, C, V].
    pub fn grid_logits_all_tape(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        grid: Var,
    ) -> Result<Var, ModelError> {
        let dims = tape.value(grid).dims().to_vec();
        let (b, rows, cols, ch) = (dims[0], dims[1], dims[2], dims[3]);
        let pooled = tape.cummax_cols(grid)?;
        let flat = tape.reshape(pooled, &[b * rows * cols, ch])?;
        let logits = tape.matmul(flat, bound.var("out.w"))?;
        let logits = tape.add_bias(logits, bound.var("out.b"))?;
        Ok(tape.reshape(logits, &[b, rows, cols, self.cfg.tgt_vocab])?)
    }

    /// Reference logits for the next token after `hyp`, reading the whole
    /// source: a fresh full-grid forward with offline pooling.
    pub fn offline_row_logits(&self, src: &[usize], hyp: &[usize]) -> Result<Vec<F>, ModelError> {
        use crate::data::SentencePair;
        let mut tgt = hyp.to_vec();
        tgt.push(crate::data::EOS); // placeholder slot for the pending position
        let pairs = [SentencePair {
            source: src.to_vec(),
            target: tgt,
        }];
        let (mut batches, _) = crate::data::make_batches(&pairs, usize::MAX, 0);
        let grid = self.grid_forward(&batches.remove(0))?;
        self.cell_logits(&grid, 0, grid.rows(), src.len())
    }

    /// Trainable-cell mask for the grid objectives: row r of sentence b is a
    /// real target position and column c is a real source position.
    pub fn valid_cells(&self, batch: &Batch) -> Mask {
        let (b, rows, cols) = (batch.len(), batch.tgt_width, batch.src_width);
        let mut data = vec![false; b * rows * cols];
        for bi in 0..b {
            for r in 0..batch.tgt_lens[bi].min(rows) {
                for c in 0..batch.src_lens[bi] {
                    data[(bi * rows + r) * cols + c] = true;
                }
            }
        }
        Mask::new(vec![b, rows, cols], data).unwrap()
    }
}
