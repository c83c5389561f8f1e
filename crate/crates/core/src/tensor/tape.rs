//! Wengert tape: forward ops record nodes, backward replays them in reverse.
//!
//! Vars are indices into the tape, so the node graph is acyclic and already
//! topologically ordered by construction. Gradients accumulate additively
//! across fan-out. A tape lives for one training step and is then dropped.

use std::sync::Arc;

use rand::Rng;

use super::kernels;
use super::{Mask, Real, Tensor, TensorError};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Which directions a grid convolution is masked in. The target direction is
/// always causal; source masking distinguishes the offline and online nets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvMask {
    TargetCausal,
    SourceAndTargetCausal,
}

impl ConvMask {
    pub fn source_causal(self) -> bool {
        matches!(self, ConvMask::SourceAndTargetCausal)
    }
}

enum Op<F: Real> {
    Leaf,
    Add {
        a: Var,
        b: Var,
    },
    /// x[..., d] + b[d], broadcast over leading dims.
    AddBias {
        x: Var,
        b: Var,
    },
    /// x + const rows cycled; the constant gets no gradient.
    AddCycle {
        x: Var,
    },
    Scale {
        x: Var,
        c: F,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Relu {
        x: Var,
    },
    /// [m,k] x [k,n]
    Matmul {
        a: Var,
        b: Var,
    },
    /// [B,m,k] x [B,k,n]
    Bmm {
        a: Var,
        b: Var,
    },
    /// [B,m,k] x [B,n,k]^T
    BmmNt {
        a: Var,
        b: Var,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    MaskedSoftmax {
        x: Var,
        mask: Arc<Mask>,
        repeat: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Vec<(F, F)>,
    },
    CausalConv2d {
        grid: Var,
        kernel: Var,
        mode: ConvMask,
    },
    CumMaxCols {
        x: Var,
        argmax: Vec<u32>,
    },
    GridEmbed {
        tgt: Var,
        src: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: Option<usize>,
        probs: Vec<F>,
        valid: usize,
    },
    Sum {
        x: Var,
    },
    Dropout {
        x: Var,
        keep: Vec<bool>,
        scale: F,
    },
}

struct Node<F: Real> {
    value: Tensor<F>,
    grad: Option<Vec<F>>,
    requires_grad: bool,
    op: Op<F>,
}

/// Reverse-mode differentiation tape.
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
    macs: u64,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * dims[i + 1];
    }
    s
}

fn permute_slice<F: Copy>(data: &[F], dims: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<F>) {
    let rank = dims.len();
    let new_dims: Vec<usize> = perm.iter().map(|&p| dims[p]).collect();
    let old_strides = strides(dims);
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let mut off = 0;
        for i in 0..rank {
            off += idx[i] * old_strides[perm[i]];
        }
        out.push(data[off]);
        for i in (0..rank).rev() {
            idx[i] += 1;
            if idx[i] < new_dims[i] {
                break;
            }
            idx[i] = 0;
        }
    }
    (new_dims, out)
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Grid dims as (batch, rows, cols, channels); rank 3 means batch of one.
fn grid_dims(dims: &[usize]) -> Option<(usize, usize, usize, usize)> {
    match dims.len() {
        3 => Some((1, dims[0], dims[1], dims[2])),
        4 => Some((dims[0], dims[1], dims[2], dims[3])),
        _ => None,
    }
}

fn conv_cell_taps(rows: usize, cols: usize, r: usize, c: usize, kw: usize, source_causal: bool) -> usize {
    let hw = (kw / 2) as isize;
    let dj_hi = if source_causal { 0 } else { hw };
    let mut n = 0;
    for dt in -hw..=0 {
        let rr = r as isize + dt;
        if rr < 0 || rr >= rows as isize {
            continue;
        }
        for dj in -hw..=dj_hi {
            let cc = c as isize + dj;
            if cc >= 0 && cc < cols as isize {
                n += 1;
            }
        }
    }
    n
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            macs: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate count of all forward ops so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// Constant input; no gradient is tracked.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable input; receives a gradient on backward().
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient buffer of a node, present after backward() for every
    /// requires-grad node.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims() != tb.dims() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: ta.dims().to_vec(),
                rhs: tb.dims().to_vec(),
            });
        }
        let data: Vec<F> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(ta.dims().to_vec(), data).unwrap();
        let rg = self.req(a) || self.req(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        let (tx, tb) = (self.value(x), self.value(b));
        let d = *tx.dims().last().unwrap_or(&0);
        if tb.rank() != 1 || tb.dims()[0] != d {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: tx.dims().to_vec(),
                rhs: tb.dims().to_vec(),
            });
        }
        let mut data = tx.data().to_vec();
        let bias = tb.data();
        for row in data.chunks_mut(d) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o = *o + bv;
            }
        }
        let value = Tensor::new(tx.dims().to_vec(), data).unwrap();
        let rg = self.req(x) || self.req(b);
        Ok(self.push(value, Op::AddBias { x, b }, rg))
    }

    /// x + c with the rows of `c` repeated cyclically over the rows of x.
    /// Used for fixed positional encodings; `c` receives no gradient.
    pub fn add_cycle(&mut self, x: Var, c: &Tensor<F>) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let d = *tx.dims().last().unwrap_or(&0);
        if c.rank() != 2 || c.dims()[1] != d || tx.numel() % c.numel() != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "add_cycle",
                lhs: tx.dims().to_vec(),
                rhs: c.dims().to_vec(),
            });
        }
        let crows = c.dims()[0];
        let mut data = tx.data().to_vec();
        for (r, row) in data.chunks_mut(d).enumerate() {
            let crow = &c.data()[(r % crows) * d..][..d];
            for (o, &cv) in row.iter_mut().zip(crow) {
                *o = *o + cv;
            }
        }
        let value = Tensor::new(tx.dims().to_vec(), data).unwrap();
        let rg = self.req(x);
        Ok(self.push(value, Op::AddCycle { x }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = F::of(c);
        let tx = self.value(x);
        let data: Vec<F> = tx.data().iter().map(|&v| v * c).collect();
        let value = Tensor::new(tx.dims().to_vec(), data).unwrap();
        let rg = self.req(x);
        self.push(value, Op::Scale { x, c }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims() != tb.dims() {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: ta.dims().to_vec(),
                rhs: tb.dims().to_vec(),
            });
        }
        let data: Vec<F> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(ta.dims().to_vec(), data).unwrap();
        let rg = self.req(a) || self.req(b);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data: Vec<F> = tx
            .data()
            .iter()
            .map(|&v| if v > F::zero() { v } else { F::zero() })
            .collect();
        let value = Tensor::new(tx.dims().to_vec(), data).unwrap();
        let rg = self.req(x);
        self.push(value, Op::Relu { x }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ok = ta.rank() == 2 && tb.rank() == 2 && ta.dims()[1] == tb.dims()[0];
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ta.dims().to_vec(),
                rhs: tb.dims().to_vec(),
            });
        }
        let (m, k, n) = (ta.dims()[0], ta.dims()[1], tb.dims()[1]);
        let mut out = vec![F::zero(); m * n];
        kernels::matmul_acc(ta.data(), tb.data(), m, k, n, &mut out);
        self.macs += (m * k * n) as u64;
        let value = Tensor::new(vec![m, n], out).unwrap();
        let rg = self.req(a) || self.req(b);
        Ok(self.push(value, Op::Matmul { a, b }, rg))
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ok = ta.rank() == 3
            && tb.rank() == 3
            && ta.dims()[0] == tb.dims()[0]
            && ta.dims()[2] == tb.dims()[1];
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                lhs: ta.dims().to_vec(),
                rhs: tb.dims().to_vec(),
            });
        }
        let (bs, m, k, n) = (ta.dims()[0], ta.dims()[1], ta.dims()[2], tb.dims()[2]);
        let mut out = vec![F::zero(); bs * m * n];
        for i in 0..bs {
            kernels::matmul_acc(
                &ta.data()[i * m * k..][..m * k],
                &tb.data()[i * k * n..][..k * n],
                m,
                k,
                n,
                &mut out[i * m * n..][..m * n],
            );
        }
        self.macs += (bs * m * k * n) as u64;
        let value = Tensor::new(vec![bs, m, n], out).unwrap();
        let rg = self.req(a) || self.req(b);
        Ok(self.push(value, Op::Bmm { a, b }, rg))
    }

    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ok = ta.rank() == 3
            && tb.rank() == 3
            && ta.dims()[0] == tb.dims()[0]
            && ta.dims()[2] == tb.dims()[2];
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "bmm_nt",
                lhs: ta.dims().to_vec(),
                rhs: tb.dims().to_vec(),
            });
        }
        let (bs, m, k, n) = (ta.dims()[0], ta.dims()[1], ta.dims()[2], tb.dims()[1]);
        let mut out = vec![F::zero(); bs * m * n];
        for i in 0..bs {
            kernels::matmul_nt_acc(
                &ta.data()[i * m * k..][..m * k],
                &tb.data()[i * n * k..][..n * k],
                m,
                k,
                n,
                &mut out[i * m * n..][..m * n],
            );
        }
        self.macs += (bs * m * k * n) as u64;
        let value = Tensor::new(vec![bs, m, n], out).unwrap();
        let rg = self.req(a) || self.req(b);
        Ok(self.push(value, Op::BmmNt { a, b }, rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let rank = tx.rank();
        let mut seen = vec![false; rank];
        let valid = perm.len() == rank
            && perm.iter().all(|&p| {
                if p >= rank || seen[p] {
                    false
                } else {
                    seen[p] = true;
                    true
                }
            });
        if !valid {
            return Err(TensorError::BadPermutation {
                perm: perm.to_vec(),
                rank,
            });
        }
        let (new_dims, data) = permute_slice(tx.data(), tx.dims(), perm);
        let value = Tensor::new(new_dims, data).unwrap();
        let rg = self.req(x);
        Ok(self.push(
            value,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let expected: usize = dims.iter().product();
        if expected != tx.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: tx.dims().to_vec(),
                rhs: dims.to_vec(),
            });
        }
        let value = Tensor::new(dims.to_vec(), tx.data().to_vec()).unwrap();
        let rg = self.req(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Row lookup: out[i] = table[ids[i]].
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let tt = self.value(table);
        if tt.rank() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "gather_rows",
                lhs: tt.dims().to_vec(),
                rhs: vec![],
            });
        }
        let (rows, d) = (tt.dims()[0], tt.dims()[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= rows) {
            return Err(TensorError::OutOfBounds {
                what: "gather id",
                got: bad,
                limit: rows,
            });
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&tt.data()[id * d..][..d]);
        }
        let value = Tensor::new(vec![ids.len(), d], data).unwrap();
        let rg = self.req(table);
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Softmax over the last dim with masked entries pinned to exactly zero.
    ///
    /// `mask` must match x's dims except that x's leading dim may be
    /// `repeat` times larger (attention heads sharing one mask).
    pub fn masked_softmax(
        &mut self,
        x: Var,
        mask: &Arc<Mask>,
        repeat: usize,
    ) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let n = *tx.dims().last().unwrap_or(&0);
        let compatible = repeat >= 1
            && mask.dims.last() == Some(&n)
            && tx.rank() == mask.dims.len()
            && tx.dims()[1..] == mask.dims[1..]
            && mask.dims[0] * repeat == tx.dims()[0];
        if !compatible {
            return Err(TensorError::ShapeMismatch {
                op: "masked_softmax",
                lhs: tx.dims().to_vec(),
                rhs: mask.dims.clone(),
            });
        }
        let rows = tx.numel() / n;
        let per_batch = rows / tx.dims()[0];
        let mut out = vec![F::zero(); tx.numel()];
        for r in 0..rows {
            let batch = r / per_batch;
            let within = r % per_batch;
            let mrow = (batch / repeat) * per_batch + within;
            let ok = kernels::masked_softmax_row(
                &tx.data()[r * n..][..n],
                &mask.data[mrow * n..][..n],
                &mut out[r * n..][..n],
            );
            if !ok {
                return Err(TensorError::FullyMaskedRow { row: r });
            }
        }
        let value = Tensor::new(tx.dims().to_vec(), out).unwrap();
        let rg = self.req(x);
        Ok(self.push(
            value,
            Op::MaskedSoftmax {
                x,
                mask: Arc::clone(mask),
                repeat,
            },
            rg,
        ))
    }

    /// Layer norm over the last dim with learned gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        let eps = F::of(1e-5);
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = *tx.dims().last().unwrap_or(&0);
        if tg.dims() != [d] || tb.dims() != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: tx.dims().to_vec(),
                rhs: tg.dims().to_vec(),
            });
        }
        let rows = tx.numel() / d;
        let mut out = vec![F::zero(); tx.numel()];
        let mut stats = Vec::with_capacity(rows);
        for r in 0..rows {
            let st = kernels::layer_norm_row(
                &tx.data()[r * d..][..d],
                tg.data(),
                tb.data(),
                eps,
                &mut out[r * d..][..d],
            );
            stats.push(st);
        }
        let value = Tensor::new(tx.dims().to_vec(), out).unwrap();
        let rg = self.req(x) || self.req(gamma) || self.req(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
            rg,
        ))
    }

    /// Masked 2D convolution over a [b?, rows, cols, c_in] grid with an odd
    /// [k, k, c_in, c_out] kernel, zero padding, output dims equal input dims.
    pub fn causal_conv2d(&mut self, grid: Var, kernel: Var, mode: ConvMask) -> Result<Var, TensorError> {
        let (tg, tk) = (self.value(grid), self.value(kernel));
        let Some((b, rows, cols, c_in)) = grid_dims(tg.dims()) else {
            return Err(TensorError::ShapeMismatch {
                op: "causal_conv2d",
                lhs: tg.dims().to_vec(),
                rhs: tk.dims().to_vec(),
            });
        };
        if tk.rank() != 4 || tk.dims()[0] != tk.dims()[1] || tk.dims()[2] != c_in {
            return Err(TensorError::ShapeMismatch {
                op: "causal_conv2d",
                lhs: tg.dims().to_vec(),
                rhs: tk.dims().to_vec(),
            });
        }
        let kw = tk.dims()[0];
        if kw % 2 == 0 {
            return Err(TensorError::EvenKernelWidth { width: kw });
        }
        let c_out = tk.dims()[3];
        let src_causal = mode.source_causal();
        let mut out = vec![F::zero(); b * rows * cols * c_out];
        let mut macs = 0u64;
        for bi in 0..b {
            let g = &tg.data()[bi * rows * cols * c_in..][..rows * cols * c_in];
            let o = &mut out[bi * rows * cols * c_out..][..rows * cols * c_out];
            for r in 0..rows {
                for c in 0..cols {
                    kernels::conv_cell_acc(
                        g,
                        rows,
                        cols,
                        c_in,
                        tk.data(),
                        kw,
                        c_out,
                        r,
                        c,
                        src_causal,
                        &mut o[(r * cols + c) * c_out..][..c_out],
                    );
                    macs += (conv_cell_taps(rows, cols, r, c, kw, src_causal) * c_in * c_out) as u64;
                }
            }
        }
        let mut out_dims = tg.dims().to_vec();
        *out_dims.last_mut().unwrap() = c_out;
        let value = Tensor::new(out_dims, out).unwrap();
        self.macs += macs;
        let rg = self.req(grid) || self.req(kernel);
        Ok(self.push(value, Op::CausalConv2d { grid, kernel, mode }, rg))
    }

    /// Per-row cumulative max over the column axis of a [b?, rows, cols, c]
    /// grid. Ties keep the earliest column.
    pub fn cummax_cols(&mut self, x: Var) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let Some((b, rows, cols, ch)) = grid_dims(tx.dims()) else {
            return Err(TensorError::ShapeMismatch {
                op: "cummax_cols",
                lhs: tx.dims().to_vec(),
                rhs: vec![],
            });
        };
        let mut out = vec![F::zero(); tx.numel()];
        let mut argmax = vec![0u32; tx.numel()];
        for bi in 0..b {
            for r in 0..rows {
                let base = (bi * rows + r) * cols * ch;
                let mut acc = tx.data()[base..][..ch].to_vec();
                let mut arg = vec![0u32; ch];
                out[base..][..ch].copy_from_slice(&acc);
                argmax[base..][..ch].copy_from_slice(&arg);
                for c in 1..cols {
                    let cell = &tx.data()[base + c * ch..][..ch];
                    kernels::running_max(&mut acc, &mut arg, cell, c as u32);
                    out[base + c * ch..][..ch].copy_from_slice(&acc);
                    argmax[base + c * ch..][..ch].copy_from_slice(&arg);
                }
            }
        }
        let value = Tensor::new(tx.dims().to_vec(), out).unwrap();
        let rg = self.req(x);
        Ok(self.push(value, Op::CumMaxCols { x, argmax }, rg))
    }

    /// Joint grid embedding: out[b,r,c] = concat(tgt[b,r], src[b,c]).
    pub fn grid_embed(&mut self, tgt: Var, src: Var) -> Result<Var, TensorError> {
        let (tt, ts) = (self.value(tgt), self.value(src));
        let ok = tt.rank() == 3 && ts.rank() == 3 && tt.dims()[0] == ts.dims()[0] && tt.dims()[2] == ts.dims()[2];
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "grid_embed",
                lhs: tt.dims().to_vec(),
                rhs: ts.dims().to_vec(),
            });
        }
        let (b, rows, e) = (tt.dims()[0], tt.dims()[1], tt.dims()[2]);
        let cols = ts.dims()[1];
        let mut data = Vec::with_capacity(b * rows * cols * 2 * e);
        for bi in 0..b {
            for r in 0..rows {
                let trow = &tt.data()[(bi * rows + r) * e..][..e];
                for c in 0..cols {
                    let srow = &ts.data()[(bi * cols + c) * e..][..e];
                    data.extend_from_slice(trow);
                    data.extend_from_slice(srow);
                }
            }
        }
        let value = Tensor::new(vec![b, rows, cols, 2 * e], data).unwrap();
        let rg = self.req(tgt) || self.req(src);
        Ok(self.push(value, Op::GridEmbed { tgt, src }, rg))
    }

    /// Mean negative log-likelihood over the non-ignored rows of
    /// [n, classes] logits.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore: Option<usize>,
    ) -> Result<Var, TensorError> {
        let tl = self.value(logits);
        if tl.rank() != 2 || tl.dims()[0] != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: tl.dims().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let (n, classes) = (tl.dims()[0], tl.dims()[1]);
        let mut probs = vec![F::zero(); n * classes];
        let mut total = F::zero();
        let mut valid = 0usize;
        for (i, &t) in targets.iter().enumerate() {
            if Some(t) == ignore {
                continue;
            }
            if t >= classes {
                return Err(TensorError::TargetOutOfRange {
                    target: t,
                    classes,
                });
            }
            let row = &tl.data()[i * classes..][..classes];
            let lse = kernels::log_sum_exp(row);
            for (j, &l) in row.iter().enumerate() {
                probs[i * classes + j] = (l - lse).exp();
            }
            total = total + (lse - row[t]);
            valid += 1;
        }
        if valid == 0 {
            return Err(TensorError::AllIgnored);
        }
        let value = Tensor::scalar(total / F::of(valid as f64));
        let rg = self.req(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs,
                valid,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let mut s = F::zero();
        for &v in tx.data() {
            s = s + v;
        }
        let rg = self.req(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// Inverted dropout; identity when p == 0.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut impl Rng) -> Var {
        if p <= 0.0 {
            return x;
        }
        let tx = self.value(x);
        let keep_prob = 1.0 - p;
        let scale = F::of(1.0 / keep_prob);
        let keep: Vec<bool> = (0..tx.numel()).map(|_| rng.random::<f64>() < keep_prob).collect();
        let data: Vec<F> = tx
            .data()
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v * scale } else { F::zero() })
            .collect();
        let value = Tensor::new(tx.dims().to_vec(), data).unwrap();
        let rg = self.req(x);
        self.push(value, Op::Dropout { x, keep, scale }, rg)
    }

    /// Accumulate contribution into a node's gradient buffer.
    fn accumulate(nodes: &mut [Node<F>], v: Var, contrib: &[F]) {
        let node = &mut nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let buf = node
            .grad
            .get_or_insert_with(|| vec![F::zero(); node.value.numel()]);
        for (g, &c) in buf.iter_mut().zip(contrib) {
            *g = *g + c;
        }
    }

    /// Reverse pass from a scalar loss. Gradients of every requires-grad
    /// node reachable from the loss are populated afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NotScalar {
                dims: self.nodes[loss.0].value.dims().to_vec(),
            });
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        // Pre-populate grads for requires-grad nodes so the contract
        // "every reachable tensor has a grad" holds even off-path.
        for node in self.nodes.iter_mut() {
            if node.requires_grad && node.grad.is_none() {
                node.grad = Some(vec![F::zero(); node.value.numel()]);
            }
        }
        self.nodes[loss.0].grad = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &tail[0];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = node.grad.as_deref() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {}
                Op::Add { a, b } => {
                    Self::accumulate(head, *a, g);
                    Self::accumulate(head, *b, g);
                }
                Op::AddBias { x, b } => {
                    Self::accumulate(head, *x, g);
                    let d = head[b.0].value.numel();
                    let mut db = vec![F::zero(); d];
                    for row in g.chunks(d) {
                        for (o, &gv) in db.iter_mut().zip(row) {
                            *o = *o + gv;
                        }
                    }
                    Self::accumulate(head, *b, &db);
                }
                Op::AddCycle { x } => {
                    Self::accumulate(head, *x, g);
                }
                Op::Scale { x, c } => {
                    let dx: Vec<F> = g.iter().map(|&gv| gv * *c).collect();
                    Self::accumulate(head, *x, &dx);
                }
                Op::Mul { a, b } => {
                    let da: Vec<F> = g
                        .iter()
                        .zip(head[b.0].value.data())
                        .map(|(&gv, &bv)| gv * bv)
                        .collect();
                    let db: Vec<F> = g
                        .iter()
                        .zip(head[a.0].value.data())
                        .map(|(&gv, &av)| gv * av)
                        .collect();
                    Self::accumulate(head, *a, &da);
                    Self::accumulate(head, *b, &db);
                }
                Op::Relu { x } => {
                    let dx: Vec<F> = g
                        .iter()
                        .zip(head[x.0].value.data())
                        .map(|(&gv, &xv)| if xv > F::zero() { gv } else { F::zero() })
                        .collect();
                    Self::accumulate(head, *x, &dx);
                }
                Op::Matmul { a, b } => {
                    let ta = &head[a.0].value;
                    let tb = &head[b.0].value;
                    let (m, k, n) = (ta.dims()[0], ta.dims()[1], tb.dims()[1]);
                    let mut da = vec![F::zero(); m * k];
                    kernels::matmul_nt_acc(g, tb.data(), m, n, k, &mut da);
                    let mut db = vec![F::zero(); k * n];
                    kernels::matmul_tn_acc(ta.data(), g, k, m, n, &mut db);
                    Self::accumulate(head, *a, &da);
                    Self::accumulate(head, *b, &db);
                }
                Op::Bmm { a, b } => {
                    let ta = &head[a.0].value;
                    let tb = &head[b.0].value;
                    let (bs, m, k, n) = (ta.dims()[0], ta.dims()[1], ta.dims()[2], tb.dims()[2]);
                    let mut da = vec![F::zero(); bs * m * k];
                    let mut db = vec![F::zero(); bs * k * n];
                    for i in 0..bs {
                        kernels::matmul_nt_acc(
                            &g[i * m * n..][..m * n],
                            &tb.data()[i * k * n..][..k * n],
                            m,
                            n,
                            k,
                            &mut da[i * m * k..][..m * k],
                        );
                        kernels::matmul_tn_acc(
                            &ta.data()[i * m * k..][..m * k],
                            &g[i * m * n..][..m * n],
                            k,
                            m,
                            n,
                            &mut db[i * k * n..][..k * n],
                        );
                    }
                    Self::accumulate(head, *a, &da);
                    Self::accumulate(head, *b, &db);
                }
                Op::BmmNt { a, b } => {
                    // c = a b^T: da = g b; db = g^T a
                    let ta = &head[a.0].value;
                    let tb = &head[b.0].value;
                    let (bs, m, k, n) = (ta.dims()[0], ta.dims()[1], ta.dims()[2], tb.dims()[1]);
                    let mut da = vec![F::zero(); bs * m * k];
                    let mut db = vec![F::zero(); bs * n * k];
                    for i in 0..bs {
                        kernels::matmul_acc(
                            &g[i * m * n..][..m * n],
                            &tb.data()[i * n * k..][..n * k],
                            m,
                            n,
                            k,
                            &mut da[i * m * k..][..m * k],
                        );
                        kernels::matmul_tn_acc(
                            &g[i * m * n..][..m * n],
                            &ta.data()[i * m * k..][..m * k],
                            n,
                            m,
                            k,
                            &mut db[i * n * k..][..n * k],
                        );
                    }
                    Self::accumulate(head, *a, &da);
                    Self::accumulate(head, *b, &db);
                }
                Op::Permute { x, perm } => {
                    let inv = invert_perm(perm);
                    let (_, dx) = permute_slice(g, node.value.dims(), &inv);
                    Self::accumulate(head, *x, &dx);
                }
                Op::Reshape { x } => {
                    Self::accumulate(head, *x, g);
                }
                Op::GatherRows { table, ids } => {
                    let tt = &head[table.0].value;
                    let d = tt.dims()[1];
                    let mut dt = vec![F::zero(); tt.numel()];
                    for (i, &id) in ids.iter().enumerate() {
                        let grow = &g[i * d..][..d];
                        let trow = &mut dt[id * d..][..d];
                        for (o, &gv) in trow.iter_mut().zip(grow) {
                            *o = *o + gv;
                        }
                    }
                    Self::accumulate(head, *table, &dt);
                }
                Op::MaskedSoftmax { x, mask, repeat } => {
                    let p = node.value.data();
                    let n = *node.value.dims().last().unwrap();
                    let rows = node.value.numel() / n;
                    let per_batch = rows / node.value.dims()[0];
                    let mut dx = vec![F::zero(); node.value.numel()];
                    for r in 0..rows {
                        let batch = r / per_batch;
                        let within = r % per_batch;
                        let mrow = (batch / repeat) * per_batch + within;
                        let mrow_mask = &mask.data[mrow * n..][..n];
                        let prow = &p[r * n..][..n];
                        let grow = &g[r * n..][..n];
                        let mut inner = F::zero();
                        for j in 0..n {
                            if mrow_mask[j] {
                                inner = inner + prow[j] * grow[j];
                            }
                        }
                        let drow = &mut dx[r * n..][..n];
                        for j in 0..n {
                            if mrow_mask[j] {
                                drow[j] = prow[j] * (grow[j] - inner);
                            }
                        }
                    }
                    Self::accumulate(head, *x, &dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    stats,
                } => {
                    let tx = &head[x.0].value;
                    let tg = &head[gamma.0].value;
                    let d = tg.numel();
                    let rows = tx.numel() / d;
                    let inv_n = F::one() / F::of(d as f64);
                    let mut dx = vec![F::zero(); tx.numel()];
                    let mut dgamma = vec![F::zero(); d];
                    let mut dbeta = vec![F::zero(); d];
                    for r in 0..rows {
                        let (mean, inv_std) = stats[r];
                        let xrow = &tx.data()[r * d..][..d];
                        let grow = &g[r * d..][..d];
                        let mut sum_gy = F::zero();
                        let mut sum_gyx = F::zero();
                        for j in 0..d {
                            let xhat = (xrow[j] - mean) * inv_std;
                            let gy = grow[j] * tg.data()[j];
                            sum_gy = sum_gy + gy;
                            sum_gyx = sum_gyx + gy * xhat;
                            dgamma[j] = dgamma[j] + grow[j] * xhat;
                            dbeta[j] = dbeta[j] + grow[j];
                        }
                        let mean_gy = sum_gy * inv_n;
                        let mean_gyx = sum_gyx * inv_n;
                        let drow = &mut dx[r * d..][..d];
                        for j in 0..d {
                            let xhat = (xrow[j] - mean) * inv_std;
                            let gy = grow[j] * tg.data()[j];
                            drow[j] = inv_std * (gy - mean_gy - xhat * mean_gyx);
                        }
                    }
                    Self::accumulate(head, *x, &dx);
                    Self::accumulate(head, *gamma, &dgamma);
                    Self::accumulate(head, *beta, &dbeta);
                }
                Op::CausalConv2d { grid, kernel, mode } => {
                    let tg = &head[grid.0].value;
                    let tk = &head[kernel.0].value;
                    let (b, rows, cols, c_in) = grid_dims(tg.dims()).unwrap();
                    let kw = tk.dims()[0];
                    let c_out = tk.dims()[3];
                    let hw = (kw / 2) as isize;
                    let dj_hi = if mode.source_causal() { 0 } else { hw };
                    let mut dgrid = vec![F::zero(); tg.numel()];
                    let mut dkernel = vec![F::zero(); tk.numel()];
                    for bi in 0..b {
                        let gsl = &tg.data()[bi * rows * cols * c_in..][..rows * cols * c_in];
                        let osl = &g[bi * rows * cols * c_out..][..rows * cols * c_out];
                        let dsl = &mut dgrid[bi * rows * cols * c_in..][..rows * cols * c_in];
                        for r in 0..rows {
                            for c in 0..cols {
                                let gout = &osl[(r * cols + c) * c_out..][..c_out];
                                for dt in -hw..=0 {
                                    let rr = r as isize + dt;
                                    if rr < 0 || rr >= rows as isize {
                                        continue;
                                    }
                                    for dj in -hw..=dj_hi {
                                        let cc = c as isize + dj;
                                        if cc < 0 || cc >= cols as isize {
                                            continue;
                                        }
                                        let cell = ((rr as usize * cols) + cc as usize) * c_in;
                                        let tap =
                                            (((dt + hw) as usize * kw) + (dj + hw) as usize) * c_in * c_out;
                                        for ci in 0..c_in {
                                            let w_row = &tk.data()[tap + ci * c_out..][..c_out];
                                            let dw = &mut dkernel[tap + ci * c_out..][..c_out];
                                            let xv = gsl[cell + ci];
                                            let mut acc = F::zero();
                                            for co in 0..c_out {
                                                acc = acc + gout[co] * w_row[co];
                                                dw[co] = dw[co] + xv * gout[co];
                                            }
                                            dsl[cell + ci] = dsl[cell + ci] + acc;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    Self::accumulate(head, *grid, &dgrid);
                    Self::accumulate(head, *kernel, &dkernel);
                }
                Op::CumMaxCols { x, argmax } => {
                    let tx = &head[x.0].value;
                    let (b, rows, cols, ch) = grid_dims(tx.dims()).unwrap();
                    let mut dx = vec![F::zero(); tx.numel()];
                    for bi in 0..b {
                        for r in 0..rows {
                            let base = (bi * rows + r) * cols * ch;
                            for c in 0..cols {
                                for j in 0..ch {
                                    let src = argmax[base + c * ch + j] as usize;
                                    dx[base + src * ch + j] =
                                        dx[base + src * ch + j] + g[base + c * ch + j];
                                }
                            }
                        }
                    }
                    Self::accumulate(head, *x, &dx);
                }
                Op::GridEmbed { tgt, src } => {
                    let tt = &head[tgt.0].value;
                    let ts = &head[src.0].value;
                    let (b, rows, e) = (tt.dims()[0], tt.dims()[1], tt.dims()[2]);
                    let cols = ts.dims()[1];
                    let mut dtgt = vec![F::zero(); tt.numel()];
                    let mut dsrc = vec![F::zero(); ts.numel()];
                    for bi in 0..b {
                        for r in 0..rows {
                            for c in 0..cols {
                                let cell = &g[(((bi * rows) + r) * cols + c) * 2 * e..][..2 * e];
                                let dt = &mut dtgt[(bi * rows + r) * e..][..e];
                                for j in 0..e {
                                    dt[j] = dt[j] + cell[j];
                                }
                                let ds = &mut dsrc[(bi * cols + c) * e..][..e];
                                for j in 0..e {
                                    ds[j] = ds[j] + cell[e + j];
                                }
                            }
                        }
                    }
                    Self::accumulate(head, *tgt, &dtgt);
                    Self::accumulate(head, *src, &dsrc);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    ignore,
                    probs,
                    valid,
                } => {
                    let classes = head[logits.0].value.dims()[1];
                    let gscale = g[0] / F::of(*valid as f64);
                    let mut dl = vec![F::zero(); head[logits.0].value.numel()];
                    for (i, &t) in targets.iter().enumerate() {
                        if Some(t) == *ignore {
                            continue;
                        }
                        let prow = &probs[i * classes..][..classes];
                        let drow = &mut dl[i * classes..][..classes];
                        for j in 0..classes {
                            let indicator = if j == t { F::one() } else { F::zero() };
                            drow[j] = (prow[j] - indicator) * gscale;
                        }
                    }
                    Self::accumulate(head, *logits, &dl);
                }
                Op::Sum { x } => {
                    let n = head[x.0].value.numel();
                    let dx = vec![g[0]; n];
                    Self::accumulate(head, *x, &dx);
                }
                Op::Dropout { x, keep, scale } => {
                    let dx: Vec<F> = g
                        .iter()
                        .zip(keep)
                        .map(|(&gv, &k)| if k { gv * *scale } else { F::zero() })
                        .collect();
                    Self::accumulate(head, *x, &dx);
                }
            }
        }
        Ok(())
    }
}

/// Elementwise max over the first `z` valid columns of a [cols, c] row.
///
/// `valid_cols` marks how many leading columns hold real (non-pad) data.
pub fn prefix_maxpool<F: Real>(
    row: &Tensor<F>,
    z: usize,
    valid_cols: usize,
) -> Result<Vec<F>, TensorError> {
    if row.rank() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "prefix_maxpool",
            lhs: row.dims().to_vec(),
            rhs: vec![],
        });
    }
    let (cols, ch) = (row.dims()[0], row.dims()[1]);
    if valid_cols == 0 || valid_cols > cols {
        return Err(TensorError::OutOfBounds {
            what: "valid_cols",
            got: valid_cols,
            limit: cols,
        });
    }
    if z == 0 || z > valid_cols {
        return Err(TensorError::OutOfBounds {
            what: "prefix limit z",
            got: z,
            limit: valid_cols,
        });
    }
    let mut acc = row.data()[..ch].to_vec();
    let mut arg = vec![0u32; ch];
    for c in 1..z {
        kernels::running_max(&mut acc, &mut arg, &row.data()[c * ch..][..ch], c as u32);
    }
    Ok(acc)
}
