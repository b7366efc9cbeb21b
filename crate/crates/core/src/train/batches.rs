use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// How pairs are grouped into a batch of N.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    /// Random pairs without replacement, ignoring categories.
    Uniform,
    /// N pairs from N distinct categories.
    NoNoise,
    /// N/3 categories with one pair plus N/3 categories with two pairs.
    WithNoise,
    /// N/2 categories with two pairs each.
    MoreNoise,
    /// N/4 categories with four pairs each.
    MostNoise,
}

impl SamplerMode {
    pub const NOISE_MODES: [SamplerMode; 4] = [
        SamplerMode::NoNoise,
        SamplerMode::WithNoise,
        SamplerMode::MoreNoise,
        SamplerMode::MostNoise,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SamplerMode::Uniform => "uniform",
            SamplerMode::NoNoise => "no_noise",
            SamplerMode::WithNoise => "with_noise",
            SamplerMode::MoreNoise => "more_noise",
            SamplerMode::MostNoise => "most_noise",
        }
    }

    /// (pairs per category, number of categories) slots of a batch of `n`,
    /// largest groups first. `None` when `n` does not split evenly.
    fn slots(&self, n: usize) -> Option<Vec<(usize, usize)>> {
        let div = |d: usize| n.is_multiple_of(d).then_some(n / d);
        match self {
            SamplerMode::Uniform => None,
            SamplerMode::NoNoise => Some(vec![(1, n)]),
            SamplerMode::WithNoise => div(3).map(|k| vec![(2, k), (1, k)]),
            SamplerMode::MoreNoise => div(2).map(|k| vec![(2, k)]),
            SamplerMode::MostNoise => div(4).map(|k| vec![(4, k)]),
        }
    }
}

/// Batches of pair ids for one epoch. The order depends only on the dataset,
/// `mode`, `batch_n`, `seed` and `epoch`, so runs that differ only in loss
/// weights see identical batches.
///
/// Uniform batches drop the final partial batch. Category modes keep building
/// batches until some slot can no longer be filled; within a slot the
/// categories with the most unused records are preferred, ties broken at
/// random.
pub fn make_batches(ds: &Dataset, mode: SamplerMode, batch_n: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<u64>>> {
    if batch_n < 1 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let ids = |idx: &[usize]| idx.iter().map(|&i| ds.records()[i].pair_id).collect::<Vec<u64>>();

    if mode == SamplerMode::Uniform {
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut rng);
        let batches: Vec<Vec<u64>> = order.chunks_exact(batch_n).map(ids).collect();
        if batches.is_empty() {
            return Err(Error::InsufficientCategories(format!(
                "{} records cannot fill a batch of {batch_n}",
                ds.len()
            )));
        }
        return Ok(batches);
    }

    let slots = mode.slots(batch_n).ok_or_else(|| {
        Error::InvalidArgument(format!("batch size {batch_n} does not split evenly for {}", mode.name()))
    })?;
    let mut pools: BTreeMap<u32, Vec<usize>> = ds.by_category();
    for pool in pools.values_mut() {
        pool.shuffle(&mut rng);
    }

    let mut batches = Vec::new();
    'epoch: loop {
        let mut taken: Vec<u32> = Vec::new();
        let mut batch: Vec<usize> = Vec::with_capacity(batch_n);
        for &(per, count) in &slots {
            let mut candidates: Vec<(usize, u64, u32)> = pools
                .iter()
                .filter(|(c, pool)| pool.len() >= per && !taken.contains(c))
                .map(|(&c, pool)| (pool.len(), rng.random::<u64>(), c))
                .collect();
            if candidates.len() < count {
                break 'epoch;
            }
            candidates.sort_unstable_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
            for &(_, _, c) in &candidates[..count] {
                let pool = pools.get_mut(&c).unwrap();
                batch.extend(pool.drain(pool.len() - per..));
                taken.push(c);
            }
        }
        batch.shuffle(&mut rng);
        batches.push(ids(&batch));
    }
    if batches.is_empty() {
        return Err(Error::InsufficientCategories(format!(
            "{} needs {} categories for a batch of {batch_n}, dataset has {}",
            mode.name(),
            slots.iter().map(|s| s.1).sum::<usize>(),
            pools.len()
        )));
    }
    Ok(batches)
}
