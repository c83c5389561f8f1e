//! Online decoding over a growable feature grid.
//!
//! Reads append a source column, writes append a target row; causal masking
//! means existing cells never change, so each append computes only the new
//! row or column per layer. Cell values are bit-identical to a full
//! [`super::PaModel::grid_forward`] of the same prefix.

use crate::data::BOS;
use crate::model::{ModelError, OnlineSession};
use crate::tensor::{kernels, Real};

use super::{pa_name, PaMode, PaModel};

/// Preallocated [rows x cols x ch] grid that grows in both directions.
struct Grow<F> {
    data: Vec<F>,
    max_cols: usize,
    ch: usize,
}

impl<F: Real> Grow<F> {
    fn new(max_rows: usize, max_cols: usize, ch: usize) -> Self {
        Grow {
            data: vec![F::zero(); max_rows * max_cols * ch],
            max_cols,
            ch,
        }
    }

    fn cell(&self, r: usize, c: usize) -> &[F] {
        &self.data[(r * self.max_cols + c) * self.ch..][..self.ch]
    }

    fn cell_mut(&mut self, r: usize, c: usize) -> &mut [F] {
        &mut self.data[(r * self.max_cols + c) * self.ch..][..self.ch]
    }
}

pub struct PaSession<'m, F: Real> {
    model: &'m PaModel<F>,
    src: Vec<usize>,
    history: Vec<usize>,
    rows: usize,
    cols: usize,
    /// acc[l]: running sum after l conv layers; acc[0] is the projection.
    acc: Vec<Grow<F>>,
    /// h[l]: layer-normalized view of acc[l], the input of conv layer l.
    h: Vec<Grow<F>>,
    macs: u64,
}

impl<'m, F: Real> PaSession<'m, F> {
    pub fn new(model: &'m PaModel<F>, src: Vec<usize>) -> Result<Self, ModelError> {
        if model.cfg.mode != PaMode::Online {
            return Err(ModelError::UnsupportedMode {
                op: "online grid decoding",
                expected: "online pooling mode",
            });
        }
        if src.is_empty() {
            return Err(ModelError::EmptySource);
        }
        if src.len() > model.cfg.max_len {
            return Err(ModelError::SequenceTooLong {
                len: src.len(),
                max: model.cfg.max_len,
            });
        }
        let ch = model.cfg.channels;
        let max_rows = (2 * src.len() + 12).min(model.cfg.max_len);
        let max_cols = src.len();
        let layers = model.cfg.layers;
        let mut session = PaSession {
            model,
            src,
            history: Vec::new(),
            rows: 0,
            cols: 0,
            acc: (0..=layers).map(|_| Grow::new(max_rows, max_cols, ch)).collect(),
            h: (0..layers).map(|_| Grow::new(max_rows, max_cols, ch)).collect(),
            macs: 0,
        };
        // Row 0 carries bos; it has no cells until the first read.
        session.rows = 1;
        Ok(session)
    }

    fn row_token(&self, r: usize) -> usize {
        if r == 0 {
            BOS
        } else {
            self.history[r - 1]
        }
    }

    /// Projection of one (row token, source token) embedding pair.
    fn project_cell(&mut self, r: usize, c: usize) -> Result<(), ModelError> {
        let m = self.model;
        let e = m.cfg.emb_dim;
        let ch = m.cfg.channels;
        let tok_t = self.row_token(r);
        let tok_s = self.src[c];
        let temb = m.params.get("tgt_embed");
        let semb = m.params.get("src_embed");
        if tok_t >= temb.dims()[0] || tok_s >= semb.dims()[0] {
            return Err(ModelError::Tensor(crate::tensor::TensorError::OutOfBounds {
                what: "token id",
                got: tok_t.max(tok_s),
                limit: temb.dims()[0].min(semb.dims()[0]),
            }));
        }
        let pos = m.pos_rows(r.max(c) + 1);
        let pos_t = &pos.data()[r * e..][..e];
        let pos_s = &pos.data()[c * e..][..e];
        let mut cell = Vec::with_capacity(2 * e);
        for (i, &v) in temb.data()[tok_t * e..][..e].iter().enumerate() {
            cell.push(v + pos_t[i]);
        }
        for (i, &v) in semb.data()[tok_s * e..][..e].iter().enumerate() {
            cell.push(v + pos_s[i]);
        }
        let w = m.params.get("in_proj.w");
        let b = m.params.get("in_proj.b");
        let out = self.acc[0].cell_mut(r, c);
        for o in out.iter_mut() {
            *o = F::zero();
        }
        kernels::vec_mat_acc(&cell, w.data(), 2 * e, ch, out);
        for (o, &bv) in out.iter_mut().zip(b.data()) {
            *o = *o + bv;
        }
        self.macs += (2 * e * ch) as u64;
        Ok(())
    }

    fn ln_cell(&mut self, layer: usize, r: usize, c: usize) {
        let m = self.model;
        let g = m.params.get(&pa_name(layer, "ln.g"));
        let b = m.params.get(&pa_name(layer, "ln.b"));
        let mut out = vec![F::zero(); m.cfg.channels];
        kernels::layer_norm_row(self.acc[layer].cell(r, c), g.data(), b.data(), F::of(1e-5), &mut out);
        self.h[layer].cell_mut(r, c).copy_from_slice(&out);
    }

    fn conv_cell(&mut self, layer: usize, r: usize, c: usize) {
        let m = self.model;
        let kw = m.cfg.kernel;
        let ch = m.cfg.channels;
        let kernel = m.params.get(&pa_name(layer, "conv.w"));
        let bias = m.params.get(&pa_name(layer, "conv.b"));
        let mut out = vec![F::zero(); ch];
        kernels::conv_cell_strided(
            &self.h[layer].data,
            self.rows,
            self.cols,
            self.h[layer].max_cols,
            ch,
            kernel.data(),
            kw,
            ch,
            r,
            c,
            true,
            &mut out,
        );
        self.macs += (((kw / 2 + 1) * (kw / 2 + 1)) * ch * ch) as u64;
        let prev = self.acc[layer].cell(r, c).to_vec();
        let dst = self.acc[layer + 1].cell_mut(r, c);
        for j in 0..ch {
            let v = out[j] + bias.data()[j];
            let relu = if v > F::zero() { v } else { F::zero() };
            dst[j] = prev[j] + relu;
        }
    }

    /// Fill every layer's cells for one new column (all rows) or row (all
    /// columns). `cells` lists (r, c) in evaluation order.
    fn fill(&mut self, cells: &[(usize, usize)]) -> Result<(), ModelError> {
        for &(r, c) in cells {
            self.project_cell(r, c)?;
        }
        for l in 0..self.model.cfg.layers {
            for &(r, c) in cells {
                self.ln_cell(l, r, c);
            }
            for &(r, c) in cells {
                self.conv_cell(l, r, c);
            }
        }
        Ok(())
    }
}

impl<F: Real> OnlineSession<F> for PaSession<'_, F> {
    fn src_len(&self) -> usize {
        self.src.len()
    }

    fn reads_done(&self) -> usize {
        self.cols
    }

    fn read_next(&mut self) -> Result<(), ModelError> {
        if self.cols >= self.src.len() {
            return Err(ModelError::Protocol("read past the end of the source"));
        }
        let c = self.cols;
        self.cols += 1;
        let cells: Vec<(usize, usize)> = (0..self.rows).map(|r| (r, c)).collect();
        self.fill(&cells)
    }

    fn next_dist(&mut self) -> Result<Vec<F>, ModelError> {
        if self.cols == 0 {
            return Err(ModelError::EmptyEncoderPrefix);
        }
        let m = self.model;
        let last = self.model.cfg.layers;
        let r = self.rows - 1;
        let mut pooled = self.acc[last].cell(r, 0).to_vec();
        let mut arg = vec![0u32; m.cfg.channels];
        for c in 1..self.cols {
            kernels::running_max(&mut pooled, &mut arg, self.acc[last].cell(r, c), c as u32);
        }
        let logits = m.project(&pooled);
        let all = vec![true; logits.len()];
        let mut probs = vec![F::zero(); logits.len()];
        kernels::masked_softmax_row(&logits, &all, &mut probs);
        Ok(probs)
    }

    fn commit(&mut self, token: usize) -> Result<(), ModelError> {
        let r = self.rows;
        if r >= (2 * self.src.len() + 12).min(self.model.cfg.max_len) {
            return Err(ModelError::SequenceTooLong {
                len: r + 1,
                max: self.model.cfg.max_len,
            });
        }
        self.history.push(token);
        self.rows += 1;
        let cells: Vec<(usize, usize)> = (0..self.cols).map(|c| (r, c)).collect();
        self.fill(&cells)
    }

    fn encoder_macs(&self) -> u64 {
        self.macs
    }
}
