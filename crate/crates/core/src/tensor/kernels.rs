//! Shared numeric kernels.
//!
//! Both the tape ops and the incremental decoding paths call into these
//! routines. Keeping a single implementation per primitive pins the floating
//! point summation order, so a cached decode reproduces the batched forward
//! bit for bit.

use super::Real;

/// C[m,n] += A[m,k] * B[k,n], accumulating over k in ascending order.
pub fn matmul_acc<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] = out_row[j] + aip * b_row[j];
            }
        }
    }
}

/// out[n] += x[k] * W[k,n]; the m = 1 case of [`matmul_acc`].
pub fn vec_mat_acc<F: Real>(x: &[F], w: &[F], k: usize, n: usize, out: &mut [F]) {
    matmul_acc(x, w, 1, k, n, out);
}

/// Dot product with a fixed four-way accumulator pattern.
pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let len = a.len();
    let head = len / 4 * 4;
    let mut s0 = F::zero();
    let mut s1 = F::zero();
    let mut s2 = F::zero();
    let mut s3 = F::zero();
    let mut i = 0;
    while i < head {
        s0 = s0 + a[i] * b[i];
        s1 = s1 + a[i + 1] * b[i + 1];
        s2 = s2 + a[i + 2] * b[i + 2];
        s3 = s3 + a[i + 3] * b[i + 3];
        i += 4;
    }
    let mut s = ((s0 + s1) + s2) + s3;
    while i < len {
        s = s + a[i] * b[i];
        i += 1;
    }
    s
}

/// C[m,n] += A[m,k] * B[n,k]^T via row dots.
pub fn matmul_nt_acc<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] = out[i * n + j] + dot(a_row, b_row);
        }
    }
}

/// C[m,n] += A[k,m]^T * B[k,n]. Backward-pass helper.
pub fn matmul_tn_acc<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a_row[i];
            let out_row = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                out_row[j] = out_row[j] + api * b_row[j];
            }
        }
    }
}

/// Softmax over the unmasked entries of one row; masked entries become
/// exactly zero. Returns false when every entry is masked.
pub fn masked_softmax_row<F: Real>(logits: &[F], mask: &[bool], out: &mut [F]) -> bool {
    debug_assert_eq!(logits.len(), mask.len());
    debug_assert_eq!(logits.len(), out.len());
    let mut max = F::neg_infinity();
    let mut any = false;
    for (j, &l) in logits.iter().enumerate() {
        if mask[j] {
            any = true;
            if l > max {
                max = l;
            }
        }
    }
    if !any {
        return false;
    }
    let mut sum = F::zero();
    for (j, &l) in logits.iter().enumerate() {
        if mask[j] {
            let e = (l - max).exp();
            out[j] = e;
            sum = sum + e;
        } else {
            out[j] = F::zero();
        }
    }
    let inv = F::one() / sum;
    for (j, o) in out.iter_mut().enumerate() {
        if mask[j] {
            *o = *o * inv;
        }
    }
    true
}

/// Layer norm over one row; returns (mean, inv_std) for the backward pass.
pub fn layer_norm_row<F: Real>(x: &[F], gamma: &[F], beta: &[F], eps: F, out: &mut [F]) -> (F, F) {
    let n = F::of(x.len() as f64);
    let mut mean = F::zero();
    for &v in x {
        mean = mean + v;
    }
    mean = mean / n;
    let mut var = F::zero();
    for &v in x {
        let d = v - mean;
        var = var + d * d;
    }
    var = var / n;
    let inv_std = F::one() / (var + eps).sqrt();
    for j in 0..x.len() {
        out[j] = (x[j] - mean) * inv_std * gamma[j] + beta[j];
    }
    (mean, inv_std)
}

/// Log-sum-exp of one row, numerically stable.
pub fn log_sum_exp<F: Real>(row: &[F]) -> F {
    let mut max = F::neg_infinity();
    for &v in row {
        if v > max {
            max = v;
        }
    }
    let mut sum = F::zero();
    for &v in row {
        sum = sum + (v - max).exp();
    }
    max + sum.ln()
}

/// One output cell of a masked 2D convolution over a [rows, cols, c_in] grid.
///
/// Taps step over (dt, dj) offsets; `source_causal` drops dj > 0 taps and the
/// target direction is always causal (dt <= 0). Out-of-grid taps read zero.
#[allow(clippy::too_many_arguments)]
pub fn conv_cell_acc<F: Real>(
    grid: &[F],
    rows: usize,
    cols: usize,
    c_in: usize,
    kernel: &[F],
    kw: usize,
    c_out: usize,
    r: usize,
    c: usize,
    source_causal: bool,
    out_cell: &mut [F],
) {
    debug_assert_eq!(grid.len(), rows * cols * c_in);
    conv_cell_strided(
        grid,
        rows,
        cols,
        cols,
        c_in,
        kernel,
        kw,
        c_out,
        r,
        c,
        source_causal,
        out_cell,
    );
}

/// [`conv_cell_acc`] over a grid whose rows are `row_stride` cells apart,
/// letting preallocated growable grids share one tap order.
#[allow(clippy::too_many_arguments)]
pub fn conv_cell_strided<F: Real>(
    grid: &[F],
    rows: usize,
    cols: usize,
    row_stride: usize,
    c_in: usize,
    kernel: &[F],
    kw: usize,
    c_out: usize,
    r: usize,
    c: usize,
    source_causal: bool,
    out_cell: &mut [F],
) {
    debug_assert_eq!(kernel.len(), kw * kw * c_in * c_out);
    debug_assert_eq!(out_cell.len(), c_out);
    debug_assert!(cols <= row_stride);
    let hw = (kw / 2) as isize;
    let dj_hi = if source_causal { 0 } else { hw };
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
            let cell = &grid[((rr as usize * row_stride) + cc as usize) * c_in..][..c_in];
            let tap = (((dt + hw) as usize * kw) + (dj + hw) as usize) * c_in * c_out;
            for (ci, &v) in cell.iter().enumerate() {
                let w_row = &kernel[tap + ci * c_out..][..c_out];
                for co in 0..c_out {
                    out_cell[co] = out_cell[co] + v * w_row[co];
                }
            }
        }
    }
}

/// Elementwise maximum of `acc` and `cell`, tracking first-seen argmax
/// column indices. Ties keep the earlier column.
pub fn running_max<F: Real>(acc: &mut [F], argmax: &mut [u32], cell: &[F], col: u32) {
    for ch in 0..acc.len() {
        if cell[ch] > acc[ch] {
            acc[ch] = cell[ch];
            argmax[ch] = col;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_hand_product() {
        // [[1,2],[3,4]] x [[1],[1]] = [[3],[7]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [1.0, 1.0];
        let mut out = [0.0; 2];
        matmul_acc(&a, &b, 2, 2, 1, &mut out);
        assert_eq!(out, [3.0, 7.0]);
    }

    #[test]
    fn nt_and_tn_agree_with_explicit_transposes() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.5, -1.0, 2.0, 0.0, 3.0]; // 2x3
        let mut nt = [0.0; 4];
        matmul_nt_acc(&a, &b, 2, 3, 2, &mut nt);
        // a * b^T by hand
        assert_eq!(nt, [-1.0, 11.0, 0.5, 26.0]);

        let mut tn = [0.0; 9];
        matmul_tn_acc(&a, &b, 3, 2, 3, &mut tn);
        // a^T(3x2) * b(2x3)
        assert_eq!(tn[0], 1.0 * 1.0 + 4.0 * 2.0);
        assert_eq!(tn[8], 3.0 * (-1.0) + 6.0 * 3.0);
    }

    #[test]
    fn softmax_row_masks_exactly() {
        let logits = [5.0f64, 123.0, 5.0];
        let mask = [true, false, true];
        let mut out = [0.0; 3];
        assert!(masked_softmax_row(&logits, &mask, &mut out));
        assert_eq!(out[1], 0.0);
        assert!((out[0] - 0.5).abs() < 1e-12);
        assert!((out[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_row_reports_fully_masked() {
        let mut out = [0.0f64; 2];
        assert!(!masked_softmax_row(&[1.0, 2.0], &[false, false], &mut out));
    }

    #[test]
    fn log_sum_exp_handles_large_values() {
        let v = log_sum_exp(&[1000.0f64, 1000.0]);
        assert!((v - (1000.0 + 2.0f64.ln())).abs() < 1e-9);
    }
}
