use std::collections::{BTreeMap, HashSet};

use rand::seq::index;
use rand::Rng;

use super::ParallelCorpus;
use crate::error::{Error, Result};

/// Pair ids grouped by exact source length.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LengthBuckets {
    buckets: BTreeMap<usize, Vec<usize>>,
}

impl LengthBuckets {
    pub fn build(corpus: &ParallelCorpus) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::contract("cannot bucket an empty corpus"));
        }
        let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for p in &corpus.pairs {
            buckets.entry(p.src.len()).or_default().push(p.id);
        }
        Ok(LengthBuckets { buckets })
    }

    pub fn get(&self, len: usize) -> &[usize] {
        self.buckets.get(&len).map_or(&[], Vec::as_slice)
    }

    pub fn lengths(&self) -> impl Iterator<Item = usize> + '_ {
        self.buckets.keys().copied()
    }

    pub fn total(&self) -> usize {
        self.buckets.values().map(Vec::len).sum()
    }

    /// Candidate ids with source length in `[lo, hi]`, minus `exclude`, in
    /// ascending (length, id) order.
    pub fn pool(&self, lo: usize, hi: usize, exclude: &HashSet<usize>) -> Vec<usize> {
        if lo > hi {
            return Vec::new();
        }
        self.buckets
            .range(lo..=hi)
            .flat_map(|(_, ids)| ids.iter().copied())
            .filter(|id| !exclude.contains(id))
            .collect()
    }
}

/// Result of partner sampling.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartnerSample {
    pub ids: Vec<usize>,
    /// Fewer than `K` eligible pairs existed in the whole corpus.
    pub shortfall: bool,
    /// Window index used: `[I-w, I+w-1]`; 1 is the unwidened `[I-1, I]`.
    pub window: usize,
}

/// Length window `[I-w, I+w-1]` (lower end clamped at 0).
pub fn window_bounds(input_len: usize, w: usize) -> (usize, usize) {
    (input_len.saturating_sub(w), input_len + w - 1)
}

/// Draw `k` distinct partners uniformly from pairs whose source length lies in
/// `[I-1, I]`, widening the window symmetrically while the pool is too small.
pub fn sample_partners<R: Rng + ?Sized>(
    buckets: &LengthBuckets,
    input_len: usize,
    k: usize,
    rng: &mut R,
    exclude: &HashSet<usize>,
) -> Result<PartnerSample> {
    if k == 0 {
        return Err(Error::contract("partner count K must be at least 1"));
    }
    let max_len = buckets.lengths().last().unwrap_or(0);
    let mut w = 1;
    loop {
        let (lo, hi) = window_bounds(input_len, w);
        let pool = buckets.pool(lo, hi, exclude);
        let exhausted = lo == 0 && hi >= max_len;
        if pool.len() >= k || exhausted {
            let shortfall = pool.len() < k;
            let ids = if shortfall {
                pool
            } else {
                index::sample(rng, pool.len(), k)
                    .into_iter()
                    .map(|i| pool[i])
                    .collect()
            };
            return Ok(PartnerSample {
                ids,
                shortfall,
                window: w,
            });
        }
        w += 1;
    }
}

/// Draw `k` distinct partners uniformly from the whole corpus, ignoring length.
pub fn sample_uniform<R: Rng + ?Sized>(
    corpus: &ParallelCorpus,
    k: usize,
    rng: &mut R,
    exclude: &HashSet<usize>,
) -> Result<PartnerSample> {
    if k == 0 {
        return Err(Error::contract("partner count K must be at least 1"));
    }
    let pool: Vec<usize> = (0..corpus.len()).filter(|i| !exclude.contains(i)).collect();
    if pool.len() < k {
        return Ok(PartnerSample {
            ids: pool,
            shortfall: true,
            window: 0,
        });
    }
    Ok(PartnerSample {
        ids: index::sample(rng, pool.len(), k)
            .into_iter()
            .map(|i| pool[i])
            .collect(),
        shortfall: false,
        window: 0,
    })
}
