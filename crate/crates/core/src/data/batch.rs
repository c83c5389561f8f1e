//! Length-bucketed batching with padding.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{SentencePair, PAD};

/// Padded id matrices for one batch. Entries past each length are pad.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
    pub src_width: usize,
    pub tgt_width: usize,
    pub src_lens: Vec<usize>,
    pub tgt_lens: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.src_lens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src_lens.is_empty()
    }

    pub fn source_row(&self, b: usize) -> &[usize] {
        &self.source[b * self.src_width..][..self.src_width]
    }

    pub fn target_row(&self, b: usize) -> &[usize] {
        &self.target[b * self.tgt_width..][..self.tgt_width]
    }

    pub fn max_src_len(&self) -> usize {
        self.src_lens.iter().copied().max().unwrap_or(0)
    }

    fn from_pairs(pairs: &[&SentencePair]) -> Batch {
        let src_width = pairs.iter().map(|p| p.source.len()).max().unwrap_or(0);
        let tgt_width = pairs.iter().map(|p| p.target.len()).max().unwrap_or(0);
        let mut source = vec![PAD; pairs.len() * src_width];
        let mut target = vec![PAD; pairs.len() * tgt_width];
        let mut src_lens = Vec::with_capacity(pairs.len());
        let mut tgt_lens = Vec::with_capacity(pairs.len());
        for (b, p) in pairs.iter().enumerate() {
            source[b * src_width..][..p.source.len()].copy_from_slice(&p.source);
            target[b * tgt_width..][..p.target.len()].copy_from_slice(&p.target);
            src_lens.push(p.source.len());
            tgt_lens.push(p.target.len());
        }
        Batch {
            source,
            target,
            src_width,
            tgt_width,
            src_lens,
            tgt_lens,
        }
    }

    /// Widen the pad region without touching any real token. Test hook for
    /// the pad-invariance property.
    pub fn with_extra_padding(&self, extra_src: usize, extra_tgt: usize) -> Batch {
        let rows = self.len();
        let sw = self.src_width + extra_src;
        let tw = self.tgt_width + extra_tgt;
        let mut source = vec![PAD; rows * sw];
        let mut target = vec![PAD; rows * tw];
        for b in 0..rows {
            source[b * sw..][..self.src_width].copy_from_slice(self.source_row(b));
            target[b * tw..][..self.tgt_width].copy_from_slice(self.target_row(b));
        }
        Batch {
            source,
            target,
            src_width: sw,
            tgt_width: tw,
            src_lens: self.src_lens.clone(),
            tgt_lens: self.tgt_lens.clone(),
        }
    }
}

/// Shuffle, bucket by source length, and pack under a padded-token budget.
///
/// Every pair appears in exactly one batch per epoch except pairs whose own
/// padded footprint exceeds `max_tokens`; those are counted in the returned
/// skip counter. Deterministic for a fixed seed.
pub fn make_batches(pairs: &[SentencePair], max_tokens: usize, seed: u64) -> (Vec<Batch>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    // Stable sort keeps the shuffled order inside each length bucket.
    order.sort_by_key(|&i| pairs[i].source.len());

    let mut batches: Vec<Vec<&SentencePair>> = Vec::new();
    let mut current: Vec<&SentencePair> = Vec::new();
    let mut skipped = 0usize;
    let footprint = |group: &[&SentencePair]| -> usize {
        let sw = group.iter().map(|p| p.source.len()).max().unwrap_or(0);
        let tw = group.iter().map(|p| p.target.len()).max().unwrap_or(0);
        group.len() * sw.max(tw)
    };
    for &i in &order {
        let p = &pairs[i];
        if p.source.len().max(p.target.len()) > max_tokens {
            skipped += 1;
            continue;
        }
        current.push(p);
        if footprint(&current) > max_tokens {
            let last = current.pop().unwrap();
            if !current.is_empty() {
                batches.push(std::mem::take(&mut current));
            }
            current.push(last);
        }
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches.shuffle(&mut rng);
    (batches.iter().map(|g| Batch::from_pairs(g)).collect(), skipped)
}
