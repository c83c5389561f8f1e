//! Finite-difference gradient oracle. Test support, not part of the API.
//!
//! The numeric side evaluates the forward pass only, at double precision
//! with central differences, so it stays independent of the backward pass
//! it is checking. Each case packs its leaf tensors into one flat input
//! vector; probing an index perturbs exactly one scalar.
#![doc(hidden)]

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{ConvMask, Mask, Tape, Tensor, Var};

type Builder = Box<dyn Fn(&mut Tape<f64>, &[f64]) -> (Var, Vec<Var>) + Send + Sync>;

pub struct Case {
    pub name: &'static str,
    /// Segment lengths of the flat input, one per leaf tensor.
    pub segments: Vec<usize>,
    /// Draw one randomized input vector.
    pub sample: Box<dyn Fn(&mut ChaCha8Rng) -> Vec<f64> + Send + Sync>,
    pub build: Builder,
}

impl Case {
    pub fn input_len(&self) -> usize {
        self.segments.iter().sum()
    }
}

#[derive(Clone, Debug, Default)]
pub struct Report {
    pub probes: usize,
    pub max_rel_err: f64,
    pub worst_case: String,
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn loss_at(case: &Case, x: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let (loss, _) = (case.build)(&mut tape, x);
    tape.value(loss).item()
}

fn analytic_grad(case: &Case, x: &[f64]) -> Vec<f64> {
    let mut tape = Tape::new();
    let (loss, leaves) = (case.build)(&mut tape, x);
    tape.backward(loss).expect("backward failed");
    let mut out = Vec::with_capacity(x.len());
    for v in leaves {
        out.extend_from_slice(tape.grad(v).expect("leaf missing grad"));
    }
    assert_eq!(out.len(), x.len());
    out
}

/// Probe every input index of one randomized draw. Returns (probes, max err).
pub fn check_case(case: &Case, seed: u64, eps: f64) -> (usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = (case.sample)(&mut rng);
    assert_eq!(x0.len(), case.input_len(), "{}: bad sample length", case.name);
    let grad = analytic_grad(case, &x0);
    let mut worst = 0.0f64;
    for i in 0..x0.len() {
        let mut xp = x0.clone();
        xp[i] += eps;
        let mut xm = x0.clone();
        xm[i] -= eps;
        let numeric = (loss_at(case, &xp) - loss_at(case, &xm)) / (2.0 * eps);
        let e = rel_err(grad[i], numeric);
        if e > worst {
            worst = e;
        }
    }
    (x0.len(), worst)
}

/// Run every case for `rounds` randomized draws.
pub fn run_all(rounds: u64, base_seed: u64, eps: f64) -> Report {
    let mut report = Report::default();
    for case in standard_cases() {
        for r in 0..rounds {
            let (probes, err) = check_case(&case, base_seed.wrapping_add(r * 7919), eps);
            report.probes += probes;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_case = case.name.to_string();
            }
        }
    }
    report
}

fn uniform(n: usize, lo: f64, hi: f64) -> Box<dyn Fn(&mut ChaCha8Rng) -> Vec<f64> + Send + Sync> {
    Box::new(move |rng| (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Sample away from zero so relu and max kinks sit farther than any probe.
fn uniform_off_zero(n: usize) -> Box<dyn Fn(&mut ChaCha8Rng) -> Vec<f64> + Send + Sync> {
    Box::new(move |rng| {
        (0..n)
            .map(|_| {
                let mag = rng.random_range(0.05..1.0);
                if rng.random::<bool>() {
                    mag
                } else {
                    -mag
                }
            })
            .collect()
    })
}

fn leaf(tape: &mut Tape<f64>, dims: &[usize], x: &[f64]) -> Var {
    tape.param(Tensor::new(dims.to_vec(), x.to_vec()).unwrap())
}

fn sum_of_squares(tape: &mut Tape<f64>, v: Var) -> Var {
    let sq = tape.mul(v, v).unwrap();
    tape.sum(sq)
}

/// Fixed weights turn a vector output into a non-degenerate scalar loss.
fn weighted_sum(tape: &mut Tape<f64>, v: Var) -> Var {
    let n = tape.value(v).numel();
    let dims = tape.value(v).dims().to_vec();
    let w = tape.leaf(Tensor::from_fn(dims, |i| 0.1 + 0.37 * ((i * 13 % 7) as f64)));
    let _ = n;
    let prod = tape.mul(v, w).unwrap();
    tape.sum(prod)
}

pub fn standard_cases() -> Vec<Case> {
    let mut cases: Vec<Case> = Vec::new();

    cases.push(Case {
        name: "matmul",
        segments: vec![12, 8],
        sample: uniform(20, -1.0, 1.0),
        build: Box::new(|tape, x| {
            let a = leaf(tape, &[3, 4], &x[..12]);
            let b = leaf(tape, &[4, 2], &x[12..]);
            let c = tape.matmul(a, b).unwrap();
            (sum_of_squares(tape, c), vec![a, b])
        }),
    });

    cases.push(Case {
        name: "bmm",
        segments: vec![24, 16],
        sample: uniform(40, -1.0, 1.0),
        build: Box::new(|tape, x| {
            let a = leaf(tape, &[2, 3, 4], &x[..24]);
            let b = leaf(tape, &[2, 4, 2], &x[24..]);
            let c = tape.bmm(a, b).unwrap();
            (sum_of_squares(tape, c), vec![a, b])
        }),
    });

    cases.push(Case {
        name: "bmm_nt",
        segments: vec![24, 24],
        sample: uniform(48, -1.0, 1.0),
        build: Box::new(|tape, x| {
            let a = leaf(tape, &[2, 3, 4], &x[..24]);
            let b = leaf(tape, &[2, 3, 4], &x[24..]);
            let c = tape.bmm_nt(a, b).unwrap();
            (sum_of_squares(tape, c), vec![a, b])
        }),
    });

    cases.push(Case {
        name: "elementwise_add_scale_relu",
        segments: vec![12, 3],
        sample: uniform_off_zero(15),
        build: Box::new(|tape, x| {
            let a = leaf(tape, &[4, 3], &x[..12]);
            let b = leaf(tape, &[3], &x[12..]);
            let pos = Tensor::from_fn(vec![2, 3], |i| 0.01 * i as f64);
            let with_bias = tape.add_bias(a, b).unwrap();
            let cycled = tape.add_cycle(with_bias, &pos).unwrap();
            let scaled = tape.scale(cycled, 1.7);
            let r = tape.relu(scaled);
            (sum_of_squares(tape, r), vec![a, b])
        }),
    });

    cases.push(Case {
        name: "permute_reshape",
        segments: vec![24],
        sample: uniform(24, -1.0, 1.0),
        build: Box::new(|tape, x| {
            let a = leaf(tape, &[2, 3, 4], x);
            let p = tape.permute(a, &[2, 0, 1]).unwrap();
            let r = tape.reshape(p, &[4, 6]).unwrap();
            (sum_of_squares(tape, r), vec![a])
        }),
    });

    cases.push(Case {
        name: "gather_rows",
        segments: vec![15],
        sample: uniform(15, -1.0, 1.0),
        build: Box::new(|tape, x| {
            let t = leaf(tape, &[5, 3], x);
            let g = tape.gather_rows(t, &[0, 4, 2, 2]).unwrap();
            (sum_of_squares(tape, g), vec![t])
        }),
    });

    cases.push(Case {
        name: "masked_softmax",
        segments: vec![20],
        sample: uniform(20, -2.0, 2.0),
        build: Box::new(|tape, x| {
            let logits = leaf(tape, &[2, 2, 5], x);
            let mask = Arc::new(
                Mask::new(
                    vec![1, 2, 5],
                    vec![true, false, true, true, false, true, true, true, false, true],
                )
                .unwrap(),
            );
            let sm = tape.masked_softmax(logits, &mask, 2).unwrap();
            (weighted_sum(tape, sm), vec![logits])
        }),
    });

    cases.push(Case {
        name: "layer_norm",
        segments: vec![18, 6, 6],
        sample: uniform(30, -1.5, 1.5),
        build: Box::new(|tape, x| {
            let a = leaf(tape, &[3, 6], &x[..18]);
            let g = leaf(tape, &[6], &x[18..24]);
            let b = leaf(tape, &[6], &x[24..]);
            let ln = tape.layer_norm(a, g, b).unwrap();
            (sum_of_squares(tape, ln), vec![a, g, b])
        }),
    });

    cases.push(Case {
        name: "conv2d_target_causal",
        segments: vec![24, 36],
        sample: uniform(60, -1.0, 1.0),
        build: Box::new(|tape, x| {
            let grid = leaf(tape, &[1, 3, 4, 2], &x[..24]);
            let kern = leaf(tape, &[3, 3, 2, 2], &x[24..]);
            let out = tape.causal_conv2d(grid, kern, ConvMask::TargetCausal).unwrap();
            (sum_of_squares(tape, out), vec![grid, kern])
        }),
    });

    cases.push(Case {
        name: "conv2d_source_and_target_causal",
        segments: vec![24, 36],
        sample: uniform(60, -1.0, 1.0),
        build: Box::new(|tape, x| {
            let grid = leaf(tape, &[1, 3, 4, 2], &x[..24]);
            let kern = leaf(tape, &[3, 3, 2, 2], &x[24..]);
            let out = tape
                .causal_conv2d(grid, kern, ConvMask::SourceAndTargetCausal)
                .unwrap();
            (sum_of_squares(tape, out), vec![grid, kern])
        }),
    });

    cases.push(Case {
        name: "cummax_cols",
        segments: vec![30],
        sample: uniform(30, -1.0, 1.0),
        build: Box::new(|tape, x| {
            let grid = leaf(tape, &[1, 2, 5, 3], x);
            let cm = tape.cummax_cols(grid).unwrap();
            (weighted_sum(tape, cm), vec![grid])
        }),
    });

    cases.push(Case {
        name: "grid_embed",
        segments: vec![12, 8],
        sample: uniform(20, -1.0, 1.0),
        build: Box::new(|tape, x| {
            let tgt = leaf(tape, &[1, 3, 4], &x[..12]);
            let src = leaf(tape, &[1, 2, 4], &x[12..]);
            let g = tape.grid_embed(tgt, src).unwrap();
            (sum_of_squares(tape, g), vec![tgt, src])
        }),
    });

    cases.push(Case {
        name: "cross_entropy",
        segments: vec![24],
        sample: uniform(24, -2.0, 2.0),
        build: Box::new(|tape, x| {
            let logits = leaf(tape, &[4, 6], x);
            let loss = tape.cross_entropy(logits, &[1, 0, 5, 0], Some(0)).unwrap();
            (loss, vec![logits])
        }),
    });

    cases.push(Case {
        name: "dropout",
        segments: vec![12],
        sample: uniform(12, -1.0, 1.0),
        build: Box::new(|tape, x| {
            let a = leaf(tape, &[3, 4], x);
            // Fixed seed: every forward under finite differencing must see
            // the same mask.
            let mut rng = ChaCha8Rng::seed_from_u64(1234);
            let d = tape.dropout(a, 0.4, &mut rng);
            (sum_of_squares(tape, d), vec![a])
        }),
    });

    cases.push(Case {
        name: "composed_graph",
        segments: vec![10, 20, 12],
        sample: uniform_off_zero(42),
        build: Box::new(|tape, x| {
            let inp = leaf(tape, &[2, 5], &x[..10]);
            let w1 = leaf(tape, &[5, 4], &x[10..30]);
            let w2 = leaf(tape, &[4, 3], &x[30..]);
            let h = tape.matmul(inp, w1).unwrap();
            let r = tape.relu(h);
            let h3 = tape.reshape(r, &[1, 2, 4]).unwrap();
            let mask = Arc::new(Mask::new(vec![1, 2, 4], vec![true, true, false, true, true, true, true, false]).unwrap());
            let sm = tape.masked_softmax(h3, &mask, 1).unwrap();
            let flat = tape.reshape(sm, &[2, 4]).unwrap();
            let logits = tape.matmul(flat, w2).unwrap();
            let loss = tape.cross_entropy(logits, &[2, 0], None).unwrap();
            (loss, vec![inp, w1, w2])
        }),
    });

    cases
}
