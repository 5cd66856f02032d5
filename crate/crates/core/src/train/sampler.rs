//! Batch samplers: plain shuffled batches and P identities × K instances.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::DatasetIndex;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    /// Shuffled batches of a fixed size; an incomplete tail is dropped.
    Random { batch_size: usize },
    /// P distinct identities with K instances each.
    Identity { p: usize, k: usize },
}

impl BatchMode {
    pub fn batch_size(&self) -> usize {
        match *self {
            BatchMode::Random { batch_size } => batch_size,
            BatchMode::Identity { p, k } => p * k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            BatchMode::Random { batch_size: 0 } => Err(Error::invalid("batch size must be positive")),
            BatchMode::Identity { p, k } if p < 2 || k < 2 => {
                Err(Error::invalid(format!("identity sampler needs P ≥ 2 and K ≥ 2, got P={} K={}", p, k)))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SamplerStats {
    pub batches: usize,
    /// Identities with fewer than K images, filled by sampling with replacement.
    pub replaced_pids: Vec<usize>,
}

/// Index lists for one epoch.
pub fn epoch_batches<R: Rng + ?Sized>(
    index: &DatasetIndex,
    mode: BatchMode,
    rng: &mut R,
) -> Result<(Vec<Vec<usize>>, SamplerStats)> {
    mode.validate()?;
    if index.is_empty() {
        return Err(Error::invalid("cannot sample from an empty index"));
    }
    match mode {
        BatchMode::Random { batch_size } => {
            let mut order: Vec<usize> = (0..index.len()).collect();
            order.shuffle(rng);
            if index.len() < batch_size {
                return Err(Error::invalid(format!(
                    "batch size {} exceeds the {} available images",
                    batch_size,
                    index.len()
                )));
            }
            let batches: Vec<Vec<usize>> = order.chunks_exact(batch_size).map(<[usize]>::to_vec).collect();
            let stats = SamplerStats {
                batches: batches.len(),
                replaced_pids: Vec::new(),
            };
            Ok((batches, stats))
        }
        BatchMode::Identity { p, k } => identity_batches(index, p, k, rng),
    }
}

/// Splits each identity's shuffled images into chunks of K (dropping the
/// remainder), then repeatedly draws P identities without replacement
/// among those with chunks left, until fewer than P remain.
fn identity_batches<R: Rng + ?Sized>(
    index: &DatasetIndex,
    p: usize,
    k: usize,
    rng: &mut R,
) -> Result<(Vec<Vec<usize>>, SamplerStats)> {
    let groups = index.by_pid();
    if groups.len() < p {
        return Err(Error::invalid(format!(
            "identity sampler needs at least P={} identities, index has {}",
            p,
            groups.len()
        )));
    }
    let mut stats = SamplerStats::default();
    let mut chunks: BTreeMap<usize, Vec<Vec<usize>>> = BTreeMap::new();
    for (&pid, idx) in &groups {
        let mut idx = idx.clone();
        if idx.len() < k {
            stats.replaced_pids.push(pid);
            let picks = (0..k).map(|_| idx[rng.random_range(0..idx.len())]).collect();
            chunks.insert(pid, vec![picks]);
            continue;
        }
        idx.shuffle(rng);
        chunks.insert(pid, idx.chunks_exact(k).map(<[usize]>::to_vec).collect());
    }
    let mut batches = Vec::new();
    loop {
        let mut avail: Vec<usize> = chunks.iter().filter(|(_, c)| !c.is_empty()).map(|(&pid, _)| pid).collect();
        if avail.len() < p {
            break;
        }
        avail.shuffle(rng);
        let mut batch = Vec::with_capacity(p * k);
        for pid in &avail[..p] {
            if let Some(c) = chunks.get_mut(pid).and_then(Vec::pop) {
                batch.extend(c);
            }
        }
        batches.push(batch);
    }
    stats.batches = batches.len();
    Ok((batches, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Record, Split};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn index(per_id: &[usize]) -> DatasetIndex {
        let mut records = Vec::new();
        for (pid, &n) in per_id.iter().enumerate() {
            for j in 0..n {
                records.push(Record {
                    path: format!("{}_{}.ppm", pid, j),
                    pid,
                    camid: j % 2,
                });
            }
        }
        DatasetIndex::new(records, Split::Train, "").unwrap()
    }

    #[test]
    fn identity_batches_have_p_distinct_pids() {
        let idx = index(&[8; 6]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (batches, stats) = epoch_batches(&idx, BatchMode::Identity { p: 4, k: 4 }, &mut rng).unwrap();
        assert!(!batches.is_empty());
        assert!(stats.replaced_pids.is_empty());
        for b in &batches {
            assert_eq!(b.len(), 16);
            let pids: HashSet<usize> = b.iter().map(|&i| idx.records[i].pid).collect();
            assert_eq!(pids.len(), 4);
        }
    }

    #[test]
    fn small_identity_flagged() {
        let idx = index(&[2, 6, 6]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, stats) = epoch_batches(&idx, BatchMode::Identity { p: 2, k: 4 }, &mut rng).unwrap();
        assert_eq!(stats.replaced_pids, vec![0]);
    }

    #[test]
    fn random_batches_are_disjoint_and_full() {
        let idx = index(&[5, 5, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (batches, _) = epoch_batches(&idx, BatchMode::Random { batch_size: 4 }, &mut rng).unwrap();
        assert_eq!(batches.len(), 3);
        assert!(batches.iter().all(|b| b.len() == 4));
        let all: HashSet<usize> = batches.concat().into_iter().collect();
        assert_eq!(all.len(), 12);
    }

    #[test]
    fn seeded_reproducibility() {
        let idx = index(&[8; 5]);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            epoch_batches(&idx, BatchMode::Identity { p: 2, k: 4 }, &mut rng).unwrap().0
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn too_few_identities() {
        let idx = index(&[4]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(epoch_batches(&idx, BatchMode::Identity { p: 2, k: 2 }, &mut rng).is_err());
    }
}
