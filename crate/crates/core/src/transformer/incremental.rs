//! Cached single-position encoding and decoding.
//!
//! Every routine here re-uses the tape's kernels with the same summation
//! order, so cached prefix states equal the batched forward exactly. The
//! multiply-accumulate counters feed the unidirectional-vs-bidirectional
//! decoding cost comparison.

use crate::model::{ModelError, OnlineSession};
use crate::tensor::{kernels, Real, Tensor, TensorError};

use super::{dec_name, enc_name, EncoderMode, TransformerModel};
use crate::data::BOS;

/// Per-layer key/value rows, flat [rows x d].
#[derive(Clone, Debug)]
pub struct LayerKv<F> {
    pub k: Vec<F>,
    pub v: Vec<F>,
}

impl<F> Default for LayerKv<F> {
    fn default() -> Self {
        LayerKv {
            k: Vec::new(),
            v: Vec::new(),
        }
    }
}

/// Append-only encoder prefix: per-layer K/V plus final states.
pub struct EncoderStateCache<F> {
    kv: Vec<LayerKv<F>>,
    states: Vec<F>,
    len: usize,
    pub macs: u64,
}

impl<F: Real> EncoderStateCache<F> {
    pub fn prefix_len(&self) -> usize {
        self.len
    }

    /// Final encoder states for the prefix read so far, flat [len x d].
    pub fn states(&self) -> &[F] {
        &self.states
    }

    pub fn state(&self, pos: usize, d: usize) -> &[F] {
        &self.states[pos * d..][..d]
    }
}

/// Append-only decoder self-attention cache.
pub struct DecoderCache<F> {
    kv: Vec<LayerKv<F>>,
    steps: usize,
    pub macs: u64,
}

impl<F: Real> DecoderCache<F> {
    pub fn steps(&self) -> usize {
        self.steps
    }
}

fn vm_bias<F: Real>(x: &[F], w: &Tensor<F>, b: &Tensor<F>, macs: &mut u64) -> Vec<F> {
    let (k, n) = (w.dims()[0], w.dims()[1]);
    let mut out = vec![F::zero(); n];
    kernels::vec_mat_acc(x, w.data(), k, n, &mut out);
    for (o, &bv) in out.iter_mut().zip(b.data()) {
        *o = *o + bv;
    }
    *macs += (k * n) as u64;
    out
}

fn ln_row<F: Real>(x: &[F], g: &Tensor<F>, b: &Tensor<F>) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    kernels::layer_norm_row(x, g.data(), b.data(), F::of(1e-5), &mut out);
    out
}

/// Attention of one query over `rows` cached positions, every position
/// visible. Summation order matches the batched bmm path.
fn attend_one<F: Real>(
    q: &[F],
    kv: &LayerKv<F>,
    rows: usize,
    d: usize,
    heads: usize,
    macs: &mut u64,
) -> Vec<F> {
    let dh = d / heads;
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let all_true = vec![true; rows];
    let mut scores = vec![F::zero(); rows];
    let mut probs = vec![F::zero(); rows];
    let mut ctx = vec![F::zero(); d];
    for h in 0..heads {
        let qh = &q[h * dh..(h + 1) * dh];
        for j in 0..rows {
            scores[j] = kernels::dot(qh, &kv.k[j * d + h * dh..][..dh]) * scale;
        }
        kernels::masked_softmax_row(&scores, &all_true, &mut probs);
        let ctxh = &mut ctx[h * dh..(h + 1) * dh];
        for j in 0..rows {
            let pj = probs[j];
            let vh = &kv.v[j * d + h * dh..][..dh];
            for t in 0..dh {
                ctxh[t] = ctxh[t] + pj * vh[t];
            }
        }
        *macs += 2 * (rows * dh) as u64;
    }
    ctx
}

fn add_in_place<F: Real>(x: &mut [F], y: &[F]) {
    for (a, &b) in x.iter_mut().zip(y) {
        *a = *a + b;
    }
}

impl<F: Real> TransformerModel<F> {
    fn embed_one(&self, table: &str, token: usize, pos: usize) -> Result<Vec<F>, ModelError> {
        let d = self.cfg.model_dim;
        if pos >= self.cfg.max_len {
            return Err(ModelError::SequenceTooLong {
                len: pos + 1,
                max: self.cfg.max_len,
            });
        }
        let tab = self.params.get(table);
        if token >= tab.dims()[0] {
            return Err(ModelError::Tensor(TensorError::OutOfBounds {
                what: "token id",
                got: token,
                limit: tab.dims()[0],
            }));
        }
        let sqrt_d = F::of((d as f64).sqrt());
        let emb = &tab.data()[token * d..][..d];
        let posr = &self.pos.data()[pos * d..][..d];
        Ok(emb
            .iter()
            .zip(posr)
            .map(|(&e, &p)| e * sqrt_d + p)
            .collect())
    }

    fn p(&self, name: &str) -> &Tensor<F> {
        self.params.get(name)
    }

    /// Fresh cache for single-pass prefix encoding. Only meaningful for
    /// unidirectional encoders, whose prefix states are final on arrival.
    pub fn encoder_cache(&self) -> Result<EncoderStateCache<F>, ModelError> {
        if self.cfg.encoder_mode != EncoderMode::Unidirectional {
            return Err(ModelError::UnsupportedMode {
                op: "encode_incremental",
                expected: "unidirectional encoder",
            });
        }
        Ok(EncoderStateCache {
            kv: vec![LayerKv::default(); self.cfg.layers],
            states: Vec::new(),
            len: 0,
            macs: 0,
        })
    }

    /// Extend the encoded prefix by one token; O(prefix) attention per layer.
    pub fn encoder_append(
        &self,
        cache: &mut EncoderStateCache<F>,
        token: usize,
    ) -> Result<(), ModelError> {
        if self.cfg.encoder_mode != EncoderMode::Unidirectional {
            return Err(ModelError::UnsupportedMode {
                op: "encode_incremental",
                expected: "unidirectional encoder",
            });
        }
        let d = self.cfg.model_dim;
        let p = cache.len;
        let mut x = self.embed_one("src_embed", token, p)?;
        for l in 0..self.cfg.layers {
            let h = ln_row(&x, self.p(&enc_name(l, "ln1.g")), self.p(&enc_name(l, "ln1.b")));
            let a = &enc_name(l, "attn");
            let q = vm_bias(&h, self.p(&format!("{a}.wq")), self.p(&format!("{a}.bq")), &mut cache.macs);
            let k = vm_bias(&h, self.p(&format!("{a}.wk")), self.p(&format!("{a}.bk")), &mut cache.macs);
            let v = vm_bias(&h, self.p(&format!("{a}.wv")), self.p(&format!("{a}.bv")), &mut cache.macs);
            cache.kv[l].k.extend_from_slice(&k);
            cache.kv[l].v.extend_from_slice(&v);
            let ctx = attend_one(&q, &cache.kv[l], p + 1, d, self.cfg.heads, &mut cache.macs);
            let o = vm_bias(&ctx, self.p(&format!("{a}.wo")), self.p(&format!("{a}.bo")), &mut cache.macs);
            add_in_place(&mut x, &o);
            let h2 = ln_row(&x, self.p(&enc_name(l, "ln2.g")), self.p(&enc_name(l, "ln2.b")));
            let mut f1 = vm_bias(
                &h2,
                self.p(&enc_name(l, "ffn.w1")),
                self.p(&enc_name(l, "ffn.b1")),
                &mut cache.macs,
            );
            for vv in f1.iter_mut() {
                if *vv < F::zero() {
                    *vv = F::zero();
                }
            }
            let f2 = vm_bias(
                &f1,
                self.p(&enc_name(l, "ffn.w2")),
                self.p(&enc_name(l, "ffn.b2")),
                &mut cache.macs,
            );
            add_in_place(&mut x, &f2);
        }
        let state = ln_row(&x, self.p("enc_ln.g"), self.p("enc_ln.b"));
        cache.states.extend_from_slice(&state);
        cache.len += 1;
        Ok(())
    }

    /// Whole-prefix encode without caching, honoring the configured
    /// attention direction. Returns flat states and the MACs spent.
    pub fn full_encode(&self, tokens: &[usize]) -> Result<(Vec<F>, u64), ModelError> {
        let d = self.cfg.model_dim;
        let n = tokens.len();
        let uni = self.cfg.encoder_mode == EncoderMode::Unidirectional;
        let mut macs = 0u64;
        let mut xs: Vec<Vec<F>> = Vec::with_capacity(n);
        for (i, &t) in tokens.iter().enumerate() {
            xs.push(self.embed_one("src_embed", t, i)?);
        }
        for l in 0..self.cfg.layers {
            let a = enc_name(l, "attn");
            let mut kv = LayerKv::default();
            let mut qs = Vec::with_capacity(n);
            for x in &xs {
                let h = ln_row(x, self.p(&enc_name(l, "ln1.g")), self.p(&enc_name(l, "ln1.b")));
                qs.push(vm_bias(&h, self.p(&format!("{a}.wq")), self.p(&format!("{a}.bq")), &mut macs));
                kv.k.extend(vm_bias(&h, self.p(&format!("{a}.wk")), self.p(&format!("{a}.bk")), &mut macs));
                kv.v.extend(vm_bias(&h, self.p(&format!("{a}.wv")), self.p(&format!("{a}.bv")), &mut macs));
            }
            for (i, x) in xs.iter_mut().enumerate() {
                let rows = if uni { i + 1 } else { n };
                let ctx = attend_one(&qs[i], &kv, rows, d, self.cfg.heads, &mut macs);
                let o = vm_bias(&ctx, self.p(&format!("{a}.wo")), self.p(&format!("{a}.bo")), &mut macs);
                add_in_place(x, &o);
            }
            for x in xs.iter_mut() {
                let h2 = ln_row(x, self.p(&enc_name(l, "ln2.g")), self.p(&enc_name(l, "ln2.b")));
                let mut f1 = vm_bias(&h2, self.p(&enc_name(l, "ffn.w1")), self.p(&enc_name(l, "ffn.b1")), &mut macs);
                for vv in f1.iter_mut() {
                    if *vv < F::zero() {
                        *vv = F::zero();
                    }
                }
                let f2 = vm_bias(&f1, self.p(&enc_name(l, "ffn.w2")), self.p(&enc_name(l, "ffn.b2")), &mut macs);
                add_in_place(x, &f2);
            }
        }
        let mut states = Vec::with_capacity(n * d);
        for x in &xs {
            states.extend(ln_row(x, self.p("enc_ln.g"), self.p("enc_ln.b")));
        }
        Ok((states, macs))
    }

    pub fn decoder_cache(&self) -> DecoderCache<F> {
        DecoderCache {
            kv: vec![LayerKv::default(); self.cfg.layers],
            steps: 0,
            macs: 0,
        }
    }

    pub fn new_cross(&self) -> Vec<LayerKv<F>> {
        vec![LayerKv::default(); self.cfg.layers]
    }

    /// Project one encoder state into every decoder layer's cross K/V.
    pub fn cross_append(&self, cross: &mut [LayerKv<F>], state: &[F], macs: &mut u64) {
        for (l, slot) in cross.iter_mut().enumerate() {
            let c = dec_name(l, "cross");
            slot.k
                .extend(vm_bias(state, self.p(&format!("{c}.wk")), self.p(&format!("{c}.bk")), macs));
            slot.v
                .extend(vm_bias(state, self.p(&format!("{c}.wv")), self.p(&format!("{c}.bv")), macs));
        }
    }

    /// One decoder step: feed `token` at the next position and return the
    /// next-token distribution over the target vocabulary.
    pub fn decode_step(
        &self,
        dec: &mut DecoderCache<F>,
        cross: &[LayerKv<F>],
        cross_len: usize,
        token: usize,
    ) -> Result<Vec<F>, ModelError> {
        if cross_len == 0 {
            return Err(ModelError::EmptyEncoderPrefix);
        }
        let d = self.cfg.model_dim;
        let p = dec.steps;
        let mut x = self.embed_one("tgt_embed", token, p)?;
        let mut macs = dec.macs;
        for l in 0..self.cfg.layers {
            let h = ln_row(&x, self.p(&dec_name(l, "ln1.g")), self.p(&dec_name(l, "ln1.b")));
            let s = dec_name(l, "self");
            let q = vm_bias(&h, self.p(&format!("{s}.wq")), self.p(&format!("{s}.bq")), &mut macs);
            let k = vm_bias(&h, self.p(&format!("{s}.wk")), self.p(&format!("{s}.bk")), &mut macs);
            let v = vm_bias(&h, self.p(&format!("{s}.wv")), self.p(&format!("{s}.bv")), &mut macs);
            dec.kv[l].k.extend_from_slice(&k);
            dec.kv[l].v.extend_from_slice(&v);
            let ctx = attend_one(&q, &dec.kv[l], p + 1, d, self.cfg.heads, &mut macs);
            let o = vm_bias(&ctx, self.p(&format!("{s}.wo")), self.p(&format!("{s}.bo")), &mut macs);
            add_in_place(&mut x, &o);

            let h2 = ln_row(&x, self.p(&dec_name(l, "ln2.g")), self.p(&dec_name(l, "ln2.b")));
            let c = dec_name(l, "cross");
            let qc = vm_bias(&h2, self.p(&format!("{c}.wq")), self.p(&format!("{c}.bq")), &mut macs);
            let ctxc = attend_one(&qc, &cross[l], cross_len, d, self.cfg.heads, &mut macs);
            let oc = vm_bias(&ctxc, self.p(&format!("{c}.wo")), self.p(&format!("{c}.bo")), &mut macs);
            add_in_place(&mut x, &oc);

            let h3 = ln_row(&x, self.p(&dec_name(l, "ln3.g")), self.p(&dec_name(l, "ln3.b")));
            let mut f1 = vm_bias(&h3, self.p(&dec_name(l, "ffn.w1")), self.p(&dec_name(l, "ffn.b1")), &mut macs);
            for vv in f1.iter_mut() {
                if *vv < F::zero() {
                    *vv = F::zero();
                }
            }
            let f2 = vm_bias(&f1, self.p(&dec_name(l, "ffn.w2")), self.p(&dec_name(l, "ffn.b2")), &mut macs);
            add_in_place(&mut x, &f2);
        }
        let xf = ln_row(&x, self.p("dec_ln.g"), self.p("dec_ln.b"));
        let logits = vm_bias(&xf, self.p("out.w"), self.p("out.b"), &mut macs);
        let all_true = vec![true; logits.len()];
        let mut probs = vec![F::zero(); logits.len()];
        kernels::masked_softmax_row(&logits, &all_true, &mut probs);
        dec.steps += 1;
        dec.macs = macs;
        Ok(probs)
    }
}

/// Per-sentence online decoding state. Unidirectional models append encoder
/// states in place; bidirectional models re-encode the prefix on every read.
pub struct TfSession<'m, F: Real> {
    model: &'m TransformerModel<F>,
    src: Vec<usize>,
    reads: usize,
    enc: Option<EncoderStateCache<F>>,
    bidir_macs: u64,
    cross: Vec<LayerKv<F>>,
    cross_macs: u64,
    dec: DecoderCache<F>,
    pending: usize,
    awaiting_commit: bool,
}

impl<'m, F: Real> TfSession<'m, F> {
    pub fn new(model: &'m TransformerModel<F>, src: Vec<usize>) -> Result<Self, ModelError> {
        if src.is_empty() {
            return Err(ModelError::EmptySource);
        }
        let enc = match model.cfg.encoder_mode {
            EncoderMode::Unidirectional => Some(model.encoder_cache()?),
            EncoderMode::Bidirectional => None,
        };
        Ok(TfSession {
            model,
            src,
            reads: 0,
            enc,
            bidir_macs: 0,
            cross: model.new_cross(),
            cross_macs: 0,
            dec: model.decoder_cache(),
            pending: BOS,
            awaiting_commit: false,
        })
    }
}

impl<F: Real> OnlineSession<F> for TfSession<'_, F> {
    fn src_len(&self) -> usize {
        self.src.len()
    }

    fn reads_done(&self) -> usize {
        self.reads
    }

    fn read_next(&mut self) -> Result<(), ModelError> {
        if self.reads >= self.src.len() {
            return Err(ModelError::Protocol("read past the end of the source"));
        }
        let d = self.model.cfg.model_dim;
        match &mut self.enc {
            Some(cache) => {
                self.model.encoder_append(cache, self.src[self.reads])?;
                let state = cache.state(self.reads, d).to_vec();
                self.model
                    .cross_append(&mut self.cross, &state, &mut self.cross_macs);
            }
            None => {
                // Bidirectional: every prefix state may change, so encode
                // from scratch and rebuild the cross projections.
                let (states, macs) = self.model.full_encode(&self.src[..self.reads + 1])?;
                self.bidir_macs += macs;
                self.cross = self.model.new_cross();
                for pos in 0..=self.reads {
                    self.model.cross_append(
                        &mut self.cross,
                        &states[pos * d..][..d],
                        &mut self.cross_macs,
                    );
                }
            }
        }
        self.reads += 1;
        Ok(())
    }

    fn next_dist(&mut self) -> Result<Vec<F>, ModelError> {
        if self.awaiting_commit {
            return Err(ModelError::Protocol("next_dist called twice without commit"));
        }
        let probs = self
            .model
            .decode_step(&mut self.dec, &self.cross, self.reads, self.pending)?;
        self.awaiting_commit = true;
        Ok(probs)
    }

    fn commit(&mut self, token: usize) -> Result<(), ModelError> {
        if !self.awaiting_commit {
            return Err(ModelError::Protocol("commit without a pending distribution"));
        }
        self.pending = token;
        self.awaiting_commit = false;
        Ok(())
    }

    fn encoder_macs(&self) -> u64 {
        match &self.enc {
            Some(cache) => cache.macs,
            None => self.bidir_macs,
        }
    }
}
