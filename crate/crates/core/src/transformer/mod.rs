//! Transformer encoder-decoder with switchable source self-attention
//! direction and per-step cross-attention masking.
//!
//! The unidirectional encoder masks self-attention to previous time steps,
//! so prefix states never change as more source arrives; decoding then
//! appends encoder states instead of re-encoding (see `incremental`).

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, BOS};
use crate::model::ModelError;
use crate::params::{xavier, Bound, Params};
use crate::tensor::{Mask, Real, Tape, Tensor, Var};

pub mod incremental;

pub use incremental::{DecoderCache, EncoderStateCache, TfSession};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    Unidirectional,
    Bidirectional,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub encoder_mode: EncoderMode,
    pub max_len: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
}

impl TransformerConfig {
    /// Desk-scale defaults: trains on synthetic tasks in minutes while
    /// exercising every code path.
    pub fn small(src_vocab: usize, tgt_vocab: usize) -> Self {
        TransformerConfig {
            layers: 2,
            model_dim: 64,
            heads: 4,
            ffn_dim: 256,
            dropout: 0.1,
            encoder_mode: EncoderMode::Unidirectional,
            max_len: 256,
            src_vocab,
            tgt_vocab,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layers == 0 || self.model_dim == 0 || self.heads == 0 {
            return Err(ModelError::Config(
                "layers, model_dim and heads must be positive".to_string(),
            ));
        }
        if self.model_dim % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.src_vocab < 4 || self.tgt_vocab < 4 {
            return Err(ModelError::Config(
                "vocabularies must include the reserved ids".to_string(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

/// Fixed sinusoidal position table, computed once per model.
pub fn positional_encoding<F: Real>(max_len: usize, dim: usize) -> Tensor<F> {
    Tensor::from_fn(vec![max_len, dim], |i| {
        let (pos, j) = (i / dim, i % dim);
        let pair = (j / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
        F::of(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

pub struct TransformerModel<F: Real> {
    pub cfg: TransformerConfig,
    pub params: Params<F>,
    pos: Tensor<F>,
}

fn enc_name(layer: usize, field: &str) -> String {
    format!("enc{layer}.{field}")
}

fn dec_name(layer: usize, field: &str) -> String {
    format!("dec{layer}.{field}")
}

fn insert_ln<F: Real>(params: &mut Params<F>, name: &str, d: usize) {
    params.insert(format!("{name}.g"), Tensor::filled(vec![d], F::one()));
    params.insert(format!("{name}.b"), Tensor::zeros(vec![d]));
}

fn insert_attn<F: Real>(params: &mut Params<F>, name: &str, d: usize, rng: &mut impl Rng) {
    for proj in ["wq", "wk", "wv", "wo"] {
        params.insert(format!("{name}.{proj}"), xavier(vec![d, d], d, d, rng));
    }
    for bias in ["bq", "bk", "bv", "bo"] {
        params.insert(format!("{name}.{bias}"), Tensor::zeros(vec![d]));
    }
}

impl<F: Real> TransformerModel<F> {
    pub fn new(cfg: TransformerConfig, rng: &mut ChaCha8Rng) -> Result<Self, ModelError> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let mut params = Params::new();
        params.insert("src_embed", xavier(vec![cfg.src_vocab, d], cfg.src_vocab, d, rng));
        params.insert("tgt_embed", xavier(vec![cfg.tgt_vocab, d], cfg.tgt_vocab, d, rng));
        for l in 0..cfg.layers {
            insert_ln(&mut params, &enc_name(l, "ln1"), d);
            insert_attn(&mut params, &enc_name(l, "attn"), d, rng);
            insert_ln(&mut params, &enc_name(l, "ln2"), d);
            params.insert(enc_name(l, "ffn.w1"), xavier(vec![d, cfg.ffn_dim], d, cfg.ffn_dim, rng));
            params.insert(enc_name(l, "ffn.b1"), Tensor::zeros(vec![cfg.ffn_dim]));
            params.insert(enc_name(l, "ffn.w2"), xavier(vec![cfg.ffn_dim, d], cfg.ffn_dim, d, rng));
            params.insert(enc_name(l, "ffn.b2"), Tensor::zeros(vec![d]));
        }
        insert_ln(&mut params, "enc_ln", d);
        for l in 0..cfg.layers {
            insert_ln(&mut params, &dec_name(l, "ln1"), d);
            insert_attn(&mut params, &dec_name(l, "self"), d, rng);
            insert_ln(&mut params, &dec_name(l, "ln2"), d);
            insert_attn(&mut params, &dec_name(l, "cross"), d, rng);
            insert_ln(&mut params, &dec_name(l, "ln3"), d);
            params.insert(dec_name(l, "ffn.w1"), xavier(vec![d, cfg.ffn_dim], d, cfg.ffn_dim, rng));
            params.insert(dec_name(l, "ffn.b1"), Tensor::zeros(vec![cfg.ffn_dim]));
            params.insert(dec_name(l, "ffn.w2"), xavier(vec![cfg.ffn_dim, d], cfg.ffn_dim, d, rng));
            params.insert(dec_name(l, "ffn.b2"), Tensor::zeros(vec![d]));
        }
        insert_ln(&mut params, "dec_ln", d);
        // Zero output projection: a fresh model starts at the uniform
        // distribution, so the initial loss is ln V exactly.
        params.insert("out.w", Tensor::zeros(vec![d, cfg.tgt_vocab]));
        params.insert("out.b", Tensor::zeros(vec![cfg.tgt_vocab]));
        let pos = positional_encoding(cfg.max_len, d);
        Ok(TransformerModel { cfg, params, pos })
    }

    pub fn from_parts(cfg: TransformerConfig, params: Params<F>) -> Result<Self, ModelError> {
        cfg.validate()?;
        let pos = positional_encoding(cfg.max_len, cfg.model_dim);
        Ok(TransformerModel { cfg, params, pos })
    }

    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> Bound {
        self.params.bind(tape, trainable)
    }

    pub(crate) fn pos_rows(&self, n: usize) -> Tensor<F> {
        let d = self.cfg.model_dim;
        Tensor::new(vec![n, d], self.pos.data()[..n * d].to_vec()).unwrap()
    }

    /// Key mask for encoder self-attention: pad columns are never valid;
    /// unidirectional mode additionally restricts to previous time steps.
    fn encoder_self_mask(&self, batch: &Batch) -> Mask {
        let s = batch.src_width;
        let b = batch.len();
        let uni = self.cfg.encoder_mode == EncoderMode::Unidirectional;
        let mut data = vec![false; b * s * s];
        for (bi, &len) in batch.src_lens.iter().enumerate() {
            for i in 0..s {
                for j in 0..len {
                    if !uni || j <= i {
                        data[(bi * s + i) * s + j] = true;
                    }
                }
            }
        }
        Mask::new(vec![b, s, s], data).unwrap()
    }

    fn causal_mask(rows: usize) -> Mask {
        let mut data = vec![false; rows * rows];
        for i in 0..rows {
            for j in 0..=i {
                data[i * rows + j] = true;
            }
        }
        Mask::new(vec![1, rows, rows], data).unwrap()
    }

    /// Split [B, S, d] into [B*H, S, dh] head-major batches.
    fn split_heads(&self, tape: &mut Tape<F>, x: Var, b: usize, s: usize) -> Result<Var, ModelError> {
        let (h, dh) = (self.cfg.heads, self.cfg.head_dim());
        let x4 = tape.reshape(x, &[b, s, h, dh])?;
        let xp = tape.permute(x4, &[0, 2, 1, 3])?;
        Ok(tape.reshape(xp, &[b * h, s, dh])?)
    }

    fn merge_heads(&self, tape: &mut Tape<F>, x: Var, b: usize, s: usize) -> Result<Var, ModelError> {
        let (h, dh) = (self.cfg.heads, self.cfg.head_dim());
        let x4 = tape.reshape(x, &[b, h, s, dh])?;
        let xp = tape.permute(x4, &[0, 2, 1, 3])?;
        Ok(tape.reshape(xp, &[b * s, h * dh])?)
    }

    fn linear(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        x: Var,
        w: &str,
        b: &str,
    ) -> Result<Var, ModelError> {
        let wv = bound.var(w);
        let bv = bound.var(b);
        let y = tape.matmul(x, wv)?;
        Ok(tape.add_bias(y, bv)?)
    }

    /// Multi-head attention sublayer. `q_in` is [B, Sq, d] already
    /// normalized; `kv_in` is [B, Sk, d].
    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        prefix: &str,
        q_in: Var,
        kv_in: Var,
        mask: &Arc<Mask>,
        repeat: usize,
    ) -> Result<Var, ModelError> {
        let d = self.cfg.model_dim;
        let (b, sq) = (tape.value(q_in).dims()[0], tape.value(q_in).dims()[1]);
        let sk = tape.value(kv_in).dims()[1];
        let q_flat = tape.reshape(q_in, &[b * sq, d])?;
        let kv_flat = tape.reshape(kv_in, &[b * sk, d])?;
        let q = self.linear(tape, bound, q_flat, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
        let k = self.linear(tape, bound, kv_flat, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
        let v = self.linear(tape, bound, kv_flat, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
        let q3 = tape.reshape(q, &[b, sq, d])?;
        let k3 = tape.reshape(k, &[b, sk, d])?;
        let v3 = tape.reshape(v, &[b, sk, d])?;
        let qh = self.split_heads(tape, q3, b, sq)?;
        let kh = self.split_heads(tape, k3, b, sk)?;
        let vh = self.split_heads(tape, v3, b, sk)?;
        let scores = tape.bmm_nt(qh, kh)?;
        let scaled = tape.scale(scores, 1.0 / (self.cfg.head_dim() as f64).sqrt());
        let probs = tape.masked_softmax(scaled, mask, repeat)?;
        let ctx = tape.bmm(probs, vh)?;
        let merged = self.merge_heads(tape, ctx, b, sq)?;
        let out = self.linear(tape, bound, merged, &format!("{prefix}.wo"), &format!("{prefix}.bo"))?;
        Ok(tape.reshape(out, &[b, sq, d])?)
    }

    fn ln(&self, tape: &mut Tape<F>, bound: &Bound, x: Var, name: &str) -> Result<Var, ModelError> {
        let g = bound.var(&format!("{name}.g"));
        let b = bound.var(&format!("{name}.b"));
        Ok(tape.layer_norm(x, g, b)?)
    }

    fn ffn(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        x: Var,
        prefix: &str,
        rows: usize,
    ) -> Result<Var, ModelError> {
        let d = self.cfg.model_dim;
        let flat = tape.reshape(x, &[rows, d])?;
        let h = self.linear(tape, bound, flat, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
        let r = tape.relu(h);
        let out = self.linear(tape, bound, r, &format!("{prefix}.w2"), &format!("{prefix}.b2"))?;
        Ok(out)
    }

    fn maybe_dropout(&self, tape: &mut Tape<F>, x: Var, rng: &mut Option<&mut ChaCha8Rng>) -> Var {
        match rng {
            Some(r) => tape.dropout(x, self.cfg.dropout, *r),
            None => x,
        }
    }

    fn embed(
        &self,
        tape: &mut Tape<F>,
        table: Var,
        ids: &[usize],
        b: usize,
        s: usize,
    ) -> Result<Var, ModelError> {
        if s > self.cfg.max_len {
            return Err(ModelError::SequenceTooLong {
                len: s,
                max: self.cfg.max_len,
            });
        }
        let g = tape.gather_rows(table, ids)?;
        let scaled = tape.scale(g, (self.cfg.model_dim as f64).sqrt());
        let x = tape.reshape(scaled, &[b, s, self.cfg.model_dim])?;
        Ok(tape.add_cycle(x, &self.pos_rows(s))?)
    }

    /// Full-batch source encoding, [B, Sx, d]. Unidirectional mode keeps
    /// state j a function of tokens up to j only.
    pub fn encode_tape(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        batch: &Batch,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, ModelError> {
        let (b, s) = (batch.len(), batch.src_width);
        let mut x = self.embed(tape, bound.var("src_embed"), &batch.source, b, s)?;
        x = self.maybe_dropout(tape, x, &mut rng);
        let mask = Arc::new(self.encoder_self_mask(batch));
        for l in 0..self.cfg.layers {
            let h = self.ln(tape, bound, x, &enc_name(l, "ln1"))?;
            let attn = self.attention(tape, bound, &enc_name(l, "attn"), h, h, &mask, self.cfg.heads)?;
            let attn = self.maybe_dropout(tape, attn, &mut rng);
            x = tape.add(x, attn)?;
            let h2 = self.ln(tape, bound, x, &enc_name(l, "ln2"))?;
            let f = self.ffn(tape, bound, h2, &enc_name(l, "ffn"), b * s)?;
            let f3 = tape.reshape(f, &[b, s, self.cfg.model_dim])?;
            let f3 = self.maybe_dropout(tape, f3, &mut rng);
            x = tape.add(x, f3)?;
        }
        self.ln(tape, bound, x, "enc_ln")
    }

    /// Teacher-forced decoder logits [B, Sy, V]. Position t sees target
    /// history before t and the source columns its cross-mask row allows.
    pub fn decode_train_tape(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        enc: Var,
        batch: &Batch,
        cross_mask: &Arc<Mask>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, ModelError> {
        let (b, sy) = (batch.len(), batch.tgt_width);
        let sx = tape.value(enc).dims()[1];
        if cross_mask.dims != [b, sy, sx] {
            return Err(ModelError::Tensor(crate::tensor::TensorError::ShapeMismatch {
                op: "decode_train cross mask",
                lhs: cross_mask.dims.clone(),
                rhs: vec![b, sy, sx],
            }));
        }
        // Shifted decoder input: bos, then the target prefix.
        let mut dec_in = Vec::with_capacity(b * sy);
        for bi in 0..b {
            let row = batch.target_row(bi);
            dec_in.push(BOS);
            dec_in.extend_from_slice(&row[..sy - 1]);
        }
        let mut x = self.embed(tape, bound.var("tgt_embed"), &dec_in, b, sy)?;
        x = self.maybe_dropout(tape, x, &mut rng);
        let self_mask = Arc::new(Self::causal_mask(sy));
        let cross = Arc::clone(cross_mask);
        for l in 0..self.cfg.layers {
            let h = self.ln(tape, bound, x, &dec_name(l, "ln1"))?;
            let sa = self.attention(
                tape,
                bound,
                &dec_name(l, "self"),
                h,
                h,
                &self_mask,
                b * self.cfg.heads,
            )?;
            let sa = self.maybe_dropout(tape, sa, &mut rng);
            x = tape.add(x, sa)?;
            let h2 = self.ln(tape, bound, x, &dec_name(l, "ln2"))?;
            let ca = self.attention(tape, bound, &dec_name(l, "cross"), h2, enc, &cross, self.cfg.heads)?;
            let ca = self.maybe_dropout(tape, ca, &mut rng);
            x = tape.add(x, ca)?;
            let h3 = self.ln(tape, bound, x, &dec_name(l, "ln3"))?;
            let f = self.ffn(tape, bound, h3, &dec_name(l, "ffn"), b * sy)?;
            let f3 = tape.reshape(f, &[b, sy, self.cfg.model_dim])?;
            let f3 = self.maybe_dropout(tape, f3, &mut rng);
            x = tape.add(x, f3)?;
        }
        let x = self.ln(tape, bound, x, "dec_ln")?;
        let flat = tape.reshape(x, &[b * sy, self.cfg.model_dim])?;
        let logits = self.linear(tape, bound, flat, "out.w", "out.b")?;
        Ok(tape.reshape(logits, &[b, sy, self.cfg.tgt_vocab])?)
    }
}
