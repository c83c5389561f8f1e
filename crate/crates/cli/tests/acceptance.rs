//! Acceptance suite: one test per criterion, each printing a PASS line on
//! success (run with `--nocapture` to see them). Training-scale criteria
//! stay inside a desktop-CPU half-hour budget.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use simuk::data::{encode_pairs, generate, SentencePair, SynthKind, SynthSpec, Vocabulary, EOS};
use simuk::decoder::{simulate, simulate_bidirectional_baseline, simulate_counted, write_cap};
use simuk::metrics::{average_lagging, average_proportion, bleu, sweep};
use simuk::model::{OnlineSession, SeqModel};
use simuk::pervasive::{PaConfig, PaMode, PaModel, PaSession};
use simuk::policy::{Action, Lag, ReadWriteTrace, WaitKPath};
use simuk::tensor::Tape;
use simuk::training::{loss_grid_pa, loss_multipath_transformer, loss_single_path, train, Objective, TrainPlan};
use simuk::transformer::{EncoderMode, TransformerConfig, TransformerModel};

type F = f32;

fn pass(criterion: u32, detail: &str) {
    println!("criterion {criterion}: PASS - {detail}");
}

fn tf_small(mode: EncoderMode, vocab: usize, seed: u64) -> TransformerModel<F> {
    let cfg = TransformerConfig {
        layers: 2,
        model_dim: 32,
        heads: 2,
        ffn_dim: 64,
        dropout: 0.0,
        encoder_mode: mode,
        max_len: 64,
        src_vocab: vocab,
        tgt_vocab: vocab,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = TransformerModel::new(cfg, &mut rng).unwrap();
    scatter_head(m.params.get_mut("out.w").data_mut());
    m
}

fn pa_small(vocab: usize, seed: u64) -> PaModel<F> {
    let cfg = PaConfig {
        layers: 2,
        kernel: 3,
        channels: 16,
        emb_dim: 8,
        mode: PaMode::Online,
        max_len: 64,
        src_vocab: vocab,
        tgt_vocab: vocab,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = PaModel::new(cfg, &mut rng).unwrap();
    scatter_head(m.params.get_mut("out.w").data_mut());
    m
}

/// Output projections start at zero; random checkpoints need a structured
/// head to emit input-dependent distributions.
fn scatter_head(w: &mut [F]) {
    for (i, v) in w.iter_mut().enumerate() {
        *v = (((i * 2654435761) % 1000) as F / 1000.0 - 0.5) * 0.6;
    }
}

fn random_sentence(rng: &mut ChaCha8Rng, lo: usize, hi: usize, vocab: usize) -> Vec<usize> {
    let len = rng.random_range(lo..=hi);
    (0..len).map(|_| rng.random_range(4..vocab)).collect()
}

struct Corpus {
    train: Vec<SentencePair>,
    valid: Vec<SentencePair>,
    test: Vec<SentencePair>,
    test_tgt_lines: Vec<String>,
    vocab: Vocabulary,
}

fn synth_corpus(
    kind: SynthKind,
    n_train: usize,
    n_eval: usize,
    alphabet: usize,
    len: (usize, usize),
    seed: u64,
) -> Corpus {
    let base = SynthSpec {
        kind,
        n: n_train,
        len_min: len.0,
        len_max: len.1,
        alphabet,
        seed,
        task_seed: seed,
    };
    let train_lines = generate(&base).unwrap();
    let valid_lines = generate(&SynthSpec { n: n_eval, seed: seed + 1, ..base }).unwrap();
    let test_lines = generate(&SynthSpec { n: n_eval, seed: seed + 2, ..base }).unwrap();
    let joint: Vec<String> = train_lines
        .iter()
        .flat_map(|(s, t)| [s.clone(), t.clone()])
        .collect();
    let vocab = Vocabulary::build(&joint, 1).unwrap();
    let enc = |lines: &[(String, String)]| {
        let src: Vec<String> = lines.iter().map(|(s, _)| s.clone()).collect();
        let tgt: Vec<String> = lines.iter().map(|(_, t)| t.clone()).collect();
        encode_pairs(&src, &tgt, &vocab, &vocab, true).unwrap()
    };
    Corpus {
        train: enc(&train_lines),
        valid: enc(&valid_lines),
        test: enc(&test_lines),
        test_tgt_lines: test_lines.iter().map(|(_, t)| t.clone()).collect(),
        vocab,
    }
}

fn quiet_train(model: &mut SeqModel<F>, plan: &TrainPlan, corpus: &Corpus, dir: &Path) {
    train(
        model,
        plan,
        &corpus.train,
        &corpus.valid,
        &dir.join("metrics.csv"),
        |_, _| Ok(()),
    )
    .unwrap();
}

#[test]
fn criterion_01_gradient_correctness() {
    let start = Instant::now();
    let report = simuk::gradcheck::run_all(3, 20240601, 1e-4);
    let elapsed = start.elapsed();
    assert!(report.probes >= 1000, "only {} probes", report.probes);
    assert!(
        report.max_rel_err < 1e-4,
        "max rel err {} in {}",
        report.max_rel_err,
        report.worst_case
    );
    assert!(elapsed.as_secs() < 60, "gradcheck took {elapsed:?}");
    pass(
        1,
        &format!(
            "{} probes, max rel err {:.2e}, {:?}",
            report.probes, report.max_rel_err, elapsed
        ),
    );
}

#[test]
fn criterion_02_encoder_incrementality_and_cost() {
    let model = tf_small(EncoderMode::Unidirectional, 20, 101);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f32;
    for _ in 0..100 {
        let src = random_sentence(&mut rng, 1, 24, 20);
        let pairs = [SentencePair {
            source: src.clone(),
            target: vec![4, EOS],
        }];
        let (mut batches, _) = simuk::data::make_batches(&pairs, usize::MAX, 0);
        let batch = batches.remove(0);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let enc = model.encode_tape(&mut tape, &bound, &batch, None).unwrap();
        let mut cache = model.encoder_cache().unwrap();
        for &tok in &src {
            model.encoder_append(&mut cache, tok).unwrap();
        }
        for (a, b) in tape.value(enc).data().iter().zip(cache.states()) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst <= 1e-5, "incremental/batched divergence {worst}");

    let uni = SeqModel::Tf(tf_small(EncoderMode::Unidirectional, 20, 102));
    let bi = SeqModel::Tf(tf_small(EncoderMode::Bidirectional, 20, 102));
    let mut min_ratio = f64::INFINITY;
    for len in [8usize, 12, 16, 24] {
        let src: Vec<usize> = (0..len).map(|i| 4 + i % 14).collect();
        let (_, uni_macs) = simulate_counted(&uni, &src, Lag::Finite(1)).unwrap();
        let (_, bi_macs) = simulate_bidirectional_baseline(&bi, &src, Lag::Finite(1)).unwrap();
        min_ratio = min_ratio.min(bi_macs as f64 / uni_macs as f64);
    }
    assert!(min_ratio >= 2.0, "bidirectional/unidirectional MAC ratio {min_ratio}");
    pass(
        2,
        &format!("max state diff {worst:.1e}, min MAC ratio {min_ratio:.2} for |x| >= 8"),
    );
}

#[test]
fn criterion_03_wue_equals_offline_greedy() {
    let models: Vec<(&str, SeqModel<F>)> = vec![
        ("transformer", SeqModel::Tf(tf_small(EncoderMode::Unidirectional, 20, 103))),
        ("pa", SeqModel::Pa(pa_small(20, 104))),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (name, model) in &models {
        for i in 0..100 {
            let src = random_sentence(&mut rng, 2, 14, 20);
            let trace = simulate(model, &src, Lag::Infinite).unwrap();
            let offline = model.offline_greedy(&src, write_cap(src.len())).unwrap();
            assert_eq!(trace.hypothesis, offline, "{name} sentence {i}");
        }
    }
    pass(3, "100 held-out sentences token-exact for both architectures");
}

#[test]
fn criterion_04_causality_under_perturbation() {
    let tf = tf_small(EncoderMode::Unidirectional, 24, 105);
    let pa = pa_small(24, 106);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut checks = 0usize;

    // Unidirectional encoder states: perturb a future source token.
    for _ in 0..500 {
        let mut src = random_sentence(&mut rng, 3, 12, 24);
        let cut = rng.random_range(1..src.len());
        let pairs = [SentencePair { source: src.clone(), target: vec![4, EOS] }];
        let (mut b1, _) = simuk::data::make_batches(&pairs, usize::MAX, 0);
        let batch1 = b1.remove(0);
        let mut tape1 = Tape::new();
        let bound1 = tf.bind(&mut tape1, false);
        let e1 = tf.encode_tape(&mut tape1, &bound1, &batch1, None).unwrap();

        let poke = rng.random_range(cut..src.len());
        src[poke] = 4 + (src[poke] - 4 + 1 + rng.random_range(0..19)) % 20;
        let pairs2 = [SentencePair { source: src, target: vec![4, EOS] }];
        let (mut b2, _) = simuk::data::make_batches(&pairs2, usize::MAX, 0);
        let batch2 = b2.remove(0);
        let mut tape2 = Tape::new();
        let bound2 = tf.bind(&mut tape2, false);
        let e2 = tf.encode_tape(&mut tape2, &bound2, &batch2, None).unwrap();

        let d = tf.cfg.model_dim;
        assert_eq!(
            tape1.value(e1).data()[..cut * d],
            tape2.value(e2).data()[..cut * d],
            "encoder state changed before the perturbed position"
        );
        checks += 1;
    }

    // Online grid cells: perturb a future source column or target row.
    for _ in 0..500 {
        let src = random_sentence(&mut rng, 3, 9, 24);
        let tgt = {
            let mut t = random_sentence(&mut rng, 2, 8, 24);
            t.push(EOS);
            t
        };
        let grid = |s: &[usize], t: &[usize]| {
            let pairs = [SentencePair { source: s.to_vec(), target: t.to_vec() }];
            let (mut bs, _) = simuk::data::make_batches(&pairs, usize::MAX, 0);
            pa.grid_forward(&bs.remove(0)).unwrap()
        };
        let g1 = grid(&src, &tgt);
        if rng.random::<bool>() && src.len() > 1 {
            let col = rng.random_range(1..src.len());
            let mut poked = src.clone();
            poked[col] = 4 + (poked[col] - 4 + 3) % 20;
            let g2 = grid(&poked, &tgt);
            for r in 0..g1.rows() {
                for c in 0..col {
                    assert_eq!(g1.cell(0, r, c), g2.cell(0, r, c), "grid col leak");
                }
            }
        } else if tgt.len() > 2 {
            let row = rng.random_range(0..tgt.len() - 2);
            let mut poked = tgt.clone();
            poked[row + 1] = 4 + (poked[row + 1] - 4 + 3) % 20;
            let g2 = grid(&src, &poked);
            // Shifted rows: y_{row+1} first feeds grid row row+2.
            for r in 0..row + 2 {
                for c in 0..g1.cols() {
                    assert_eq!(g1.cell(0, r, c), g2.cell(0, r, c), "grid row leak");
                }
            }
        }
        checks += 1;
    }
    assert!(checks >= 1000);
    pass(4, &format!("{checks} random perturbations, zero leakage"));
}

#[test]
fn criterion_05_pa_path_independence() {
    let m = pa_small(20, 107);
    let src = vec![4usize, 6, 8, 10, 12, 14];
    let forced = vec![5usize, 7, 9, 11];
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut by_cell: std::collections::HashMap<(usize, usize), Vec<F>> = Default::default();
    let mut replays = 0;
    for _ in 0..10 {
        let mut session = PaSession::new(&m, src.clone()).unwrap();
        let mut z = 1 + rng.random_range(0..3);
        for (t, &tok) in forced.iter().enumerate() {
            let zt = z.min(src.len());
            while session.reads_done() < zt {
                session.read_next().unwrap();
            }
            let dist = session.next_dist().unwrap();
            match by_cell.get(&(t, zt)) {
                Some(prev) => assert_eq!(prev, &dist, "cell ({t},{zt}) differs across schedules"),
                None => {
                    by_cell.insert((t, zt), dist);
                }
            }
            session.commit(tok).unwrap();
            z += rng.random_range(0..=2);
        }
        replays += 1;
    }
    pass(5, &format!("{replays} schedules, identical outputs at shared cells"));
}

#[test]
fn criterion_06_objective_consistency() {
    // Pinned-k multi-path equals single-path exactly.
    let tf = SeqModel::Tf(tf_small(EncoderMode::Unidirectional, 16, 108));
    let pairs = [
        SentencePair { source: vec![4, 5, 6, 7], target: vec![8, 9, EOS] },
        SentencePair { source: vec![10, 11, 12], target: vec![13, 5, EOS] },
    ];
    let (mut bs, _) = simuk::data::make_batches(&pairs, usize::MAX, 0);
    let batch = bs.remove(0);
    let mut pin_seed = 0u64;
    for seed in 0..500u64 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        if simuk::policy::sample_k(&(1..=4).collect::<Vec<_>>(), &mut r).unwrap() == 2 {
            pin_seed = seed;
            break;
        }
    }
    let mut tape = Tape::new();
    let bound = tf.params().bind(&mut tape, false);
    let mut k_rng = ChaCha8Rng::seed_from_u64(pin_seed);
    let (multi, info) = loss_multipath_transformer(&mut tape, &tf, &bound, &batch, &mut k_rng, None).unwrap();
    assert_eq!(info.encoder_forwards, 1);
    let mut tape2 = Tape::new();
    let bound2 = tf.params().bind(&mut tape2, false);
    let (single, _) = loss_single_path(&mut tape2, &tf, &bound2, &batch, Lag::Finite(2), None).unwrap();
    assert_eq!(tape.value(multi).item(), tape2.value(single).item());

    // Grid loss equals the brute-force cell loop on a 5x5 grid.
    let pa = SeqModel::Pa(pa_small(16, 109));
    let SeqModel::Pa(pam) = &pa else { unreachable!() };
    let gp = [SentencePair {
        source: vec![4, 5, 6, 7, 8],
        target: vec![9, 10, 11, 6, EOS],
    }];
    let (mut gbs, _) = simuk::data::make_batches(&gp, usize::MAX, 0);
    let gbatch = gbs.remove(0);
    let mut gtape = Tape::new();
    let gbound = pa.params().bind(&mut gtape, false);
    let (gl, ginfo) = loss_grid_pa(&mut gtape, &pa, &gbound, &gbatch).unwrap();
    let grid = pam.grid_forward(&gbatch).unwrap();
    let mut total = 0.0f64;
    for t in 1..=5usize {
        for j in t..=5usize {
            let logits = pam.cell_logits(&grid, 0, t, j).unwrap();
            let logits64: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
            let lse = simuk::tensor::kernels::log_sum_exp(&logits64);
            total += lse - logits64[gbatch.target_row(0)[t - 1]];
        }
    }
    let brute = total / ginfo.loss_terms as f64;
    assert!(
        (gtape.value(gl).item() as f64 - brute).abs() <= 1e-6,
        "grid {} vs brute {brute}",
        gtape.value(gl).item()
    );

    // Wait-until-end equals the offline loss exactly, both architectures.
    for model in [&tf, &pa] {
        let run = |obj: Objective| {
            let mut t = Tape::new();
            let b = model.params().bind(&mut t, false);
            let mut kr = ChaCha8Rng::seed_from_u64(0);
            let (l, _) =
                simuk::training::objective_loss(&mut t, model, &b, &batch, obj, &mut kr, None)
                    .unwrap();
            t.value(l).item()
        };
        assert_eq!(
            run(Objective::SinglePath(Lag::Infinite)),
            run(Objective::Offline)
        );
    }
    pass(6, "pinned-k equality, grid-vs-brute within 1e-6, offline reduction exact");
}

#[test]
fn criterion_07_metric_oracles() {
    let schedule_trace = |z: &[usize], src_len: usize| {
        let mut actions = Vec::new();
        let mut reads = 0;
        for &zt in z {
            while reads < zt {
                actions.push(Action::Read);
                reads += 1;
            }
            actions.push(Action::Write);
        }
        ReadWriteTrace {
            actions,
            source_len: src_len,
            hypothesis: vec![7; z.len()],
        }
    };
    // AL = 3.0 for wait-3 at unit rate.
    let p3 = WaitKPath::new(Lag::Finite(3), 10, 10).unwrap();
    assert_eq!(average_lagging(&schedule_trace(p3.schedule(), 10)).unwrap(), 3.0);
    // AL(WUE) = |x|, the offline convention.
    for n in [5usize, 22, 27] {
        let p = WaitKPath::new(Lag::Infinite, n, n).unwrap();
        assert_eq!(average_lagging(&schedule_trace(p.schedule(), n)).unwrap(), n as f64);
        assert_eq!(average_proportion(&schedule_trace(p.schedule(), n)).unwrap(), 1.0);
    }
    // BLEU identity and the hand-clipping zero case.
    let refs = vec!["the cat sat on the mat".to_string(), "a b c d e".to_string()];
    let identity = bleu(&refs, &refs).unwrap();
    assert_eq!(format!("{:.2}", identity.bleu), "100.00");
    let clip = bleu(
        &vec!["the the the cat".to_string()],
        &vec!["the cat sat".to_string()],
    )
    .unwrap();
    assert_eq!(clip.bleu, 0.0);
    assert_eq!(clip.precisions[0], 0.5);
    pass(7, "AL(wait-3)=3, AL(WUE)=|x|, AP(WUE)=1, BLEU identity 100.00, clipping 0.0");
}

#[test]
fn criterion_08_quality_latency_tradeoff() {
    let start = Instant::now();
    // Reverse task exactly as pinned: alphabet 32, lengths 5..15, 10k pairs.
    let corpus = synth_corpus(SynthKind::Reverse, 10_000, 300, 32, (5, 15), 2024);
    let cfg = TransformerConfig {
        layers: 2,
        model_dim: 64,
        heads: 4,
        ffn_dim: 256,
        dropout: 0.1,
        encoder_mode: EncoderMode::Unidirectional,
        max_len: 64,
        src_vocab: corpus.vocab.len(),
        tgt_vocab: corpus.vocab.len(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut model: SeqModel<F> = SeqModel::Tf(TransformerModel::new(cfg, &mut rng).unwrap());
    let plan = TrainPlan {
        objective: Objective::MultiPath,
        epochs: 12,
        seed: 8,
        max_tokens: 700,
        lr: 1e-3,
        warmup: 200,
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    quiet_train(&mut model, &plan, &corpus, dir.path());

    let sources: Vec<Vec<usize>> = corpus.test.iter().map(|p| p.source.clone()).collect();
    let ks = [
        Lag::Finite(1),
        Lag::Finite(3),
        Lag::Finite(5),
        Lag::Finite(7),
        Lag::Finite(9),
        Lag::Infinite,
    ];
    let report = sweep(&model, &sources, &corpus.test_tgt_lines, &corpus.vocab, &ks).unwrap();
    let bleus: Vec<f64> = report.records.iter().map(|r| r.bleu).collect();
    println!(
        "criterion 8 sweep: {}",
        report
            .records
            .iter()
            .map(|r| format!("k={} BLEU={:.2}", r.k, r.bleu))
            .collect::<Vec<_>>()
            .join(", ")
    );
    let rho = spearman(&bleus);
    assert!(rho >= 0.8, "Spearman rho {rho} below 0.8: {bleus:?}");
    let gap = bleus[5] - bleus[0];
    assert!(gap >= 10.0, "BLEU(inf) - BLEU(1) = {gap} < 10");

    // Copy task: wait-1 training reaches near-perfect token accuracy.
    let copy = synth_corpus(SynthKind::Copy, 3000, 300, 32, (5, 15), 99);
    let ccfg = TransformerConfig {
        layers: 1,
        model_dim: 32,
        heads: 2,
        ffn_dim: 64,
        dropout: 0.0,
        encoder_mode: EncoderMode::Unidirectional,
        max_len: 64,
        src_vocab: copy.vocab.len(),
        tgt_vocab: copy.vocab.len(),
    };
    let mut crng = ChaCha8Rng::seed_from_u64(2);
    let mut cmodel: SeqModel<F> = SeqModel::Tf(TransformerModel::new(ccfg, &mut crng).unwrap());
    let cplan = TrainPlan {
        objective: Objective::SinglePath(Lag::Finite(1)),
        epochs: 14,
        seed: 3,
        max_tokens: 450,
        lr: 2e-3,
        warmup: 100,
        ..Default::default()
    };
    let cdir = tempfile::tempdir().unwrap();
    quiet_train(&mut cmodel, &cplan, &copy, cdir.path());
    let mut matched = 0usize;
    let mut total = 0usize;
    for (pair, ref_line) in copy.test.iter().zip(&copy.test_tgt_lines) {
        let trace = simulate(&cmodel, &pair.source, Lag::Finite(1)).unwrap();
        let hyp = copy.vocab.decode(&trace.hypothesis).unwrap();
        let h: Vec<&str> = hyp.split_whitespace().collect();
        let r: Vec<&str> = ref_line.split_whitespace().collect();
        total += h.len().max(r.len());
        matched += h.iter().zip(&r).filter(|(a, b)| a == b).count();
    }
    let accuracy = matched as f64 / total as f64;
    assert!(accuracy >= 0.99, "wait-1 copy accuracy {accuracy}");

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 1800, "criterion 8 took {elapsed:?}");
    pass(
        8,
        &format!(
            "rho={rho:.3}, BLEU gap {gap:.1}, copy accuracy {accuracy:.4}, {elapsed:?}"
        ),
    );
}

/// Spearman rank correlation of values against their index order, with
/// average ranks on ties.
fn spearman(values: &[f64]) -> f64 {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    let mean = (n as f64 + 1.0) / 2.0;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for (i, &r) in ranks.iter().enumerate() {
        let x = (i + 1) as f64 - mean;
        let y = r - mean;
        num += x * y;
        da += x * x;
        db += y * y;
    }
    num / (da.sqrt() * db.sqrt())
}

#[test]
fn criterion_09_multipath_generality() {
    let start = Instant::now();
    let corpus = synth_corpus(SynthKind::Substitute, 4000, 300, 16, (3, 10), 55);
    let make_model = |seed: u64| -> SeqModel<F> {
        let cfg = TransformerConfig {
            layers: 2,
            model_dim: 48,
            heads: 4,
            ffn_dim: 128,
            dropout: 0.1,
            encoder_mode: EncoderMode::Unidirectional,
            max_len: 64,
            src_vocab: corpus.vocab.len(),
            tgt_vocab: corpus.vocab.len(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SeqModel::Tf(TransformerModel::new(cfg, &mut rng).unwrap())
    };
    let train_one = |objective: Objective, seed: u64| -> SeqModel<F> {
        let mut model = make_model(seed);
        let plan = TrainPlan {
            objective,
            epochs: 10,
            seed,
            max_tokens: 500,
            lr: 2e-3,
            warmup: 100,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        quiet_train(&mut model, &plan, &corpus, dir.path());
        model
    };
    let multi = train_one(Objective::MultiPath, 11);
    let singles: Vec<(usize, SeqModel<F>)> = [1usize, 5, 9]
        .iter()
        .map(|&k| (k, train_one(Objective::SinglePath(Lag::Finite(k)), 20 + k as u64)))
        .collect();

    let sources: Vec<Vec<usize>> = corpus.test.iter().map(|p| p.source.clone()).collect();
    let eval = |model: &SeqModel<F>, k: usize| -> f64 {
        let report = sweep(
            model,
            &sources,
            &corpus.test_tgt_lines,
            &corpus.vocab,
            &[Lag::Finite(k)],
        )
        .unwrap();
        report.records[0].bleu
    };
    let mut detail = Vec::new();
    for (k, single) in &singles {
        let m = eval(&multi, *k);
        let s = eval(single, *k);
        detail.push(format!("k={k}: multi {m:.2} vs single {s:.2}"));
        assert!(
            m >= s - 2.0,
            "multi-path {m:.2} more than 2 BLEU below single-path {s:.2} at k={k}"
        );
    }
    let elapsed = start.elapsed();
    pass(9, &format!("{}; {elapsed:?}", detail.join(", ")));
}

#[test]
fn criterion_10_reproducibility() {
    let bin = env!("CARGO_BIN_EXE_simuk");
    let root = tempfile::tempdir().unwrap();
    let run = |tag: &str| -> Vec<(String, Vec<u8>)> {
        let dir = root.path().join(tag);
        std::fs::create_dir_all(&dir).unwrap();
        let data = dir.join("data");
        let out = dir.join("run");
        let ok = |st: std::process::ExitStatus| assert!(st.success());
        ok(Command::new(bin)
            .args(["synth", "--task", "copy", "--n", "500", "--n-valid", "80", "--n-test", "80"])
            .args(["--len-min", "2", "--len-max", "6", "--alphabet", "8", "--seed", "5"])
            .arg("--out")
            .arg(&data)
            .status()
            .unwrap());
        ok(Command::new(bin)
            .args(["train", "--arch", "transformer", "--objective", "waitk:1", "--seed", "7"])
            .args(["--epochs", "4", "--max-tokens", "200", "--lr", "2e-3", "--warmup", "40"])
            .args(["--model-dim", "32", "--ffn-dim", "64", "--layers", "1", "--heads", "2"])
            .arg("--data")
            .arg(&data)
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap());
        ok(Command::new(bin)
            .args(["translate", "--k", "2"])
            .arg("--ckpt")
            .arg(out.join("best.ckpt"))
            .arg("--input")
            .arg(data.join("test.src"))
            .arg("--output")
            .arg(dir.join("hyp.txt"))
            .arg("--trace")
            .arg(dir.join("trace.jsonl"))
            .status()
            .unwrap());
        ok(Command::new(bin)
            .args(["sweep", "--k-list", "1,3,inf"])
            .arg("--ckpt")
            .arg(out.join("best.ckpt"))
            .arg("--input")
            .arg(data.join("test.src"))
            .arg("--ref")
            .arg(data.join("test.tgt"))
            .arg("--out")
            .arg(dir.join("sweep.csv"))
            .status()
            .unwrap());
        let mut files = Vec::new();
        for rel in [
            "data/train.src",
            "data/train.tgt",
            "run/best.ckpt",
            "run/last.ckpt",
            "run/metrics.csv",
            "run/src.vocab",
            "run/tgt.vocab",
            "hyp.txt",
            "trace.jsonl",
            "sweep.csv",
        ] {
            files.push((rel.to_string(), std::fs::read(dir.join(rel)).unwrap()));
        }
        files
    };
    let a = run("a");
    let b = run("b");
    for ((name, bytes_a), (_, bytes_b)) in a.iter().zip(&b) {
        assert_eq!(bytes_a, bytes_b, "{name} differs between identical runs");
    }
    pass(10, "two full pipeline runs byte-identical across all artifacts");
}
