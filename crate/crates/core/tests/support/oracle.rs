//! Brute-force CMC/mAP reference shared by the evaluation tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Case {
    pub dist: Vec<f64>,
    pub qp: Vec<usize>,
    pub qc: Vec<usize>,
    pub gp: Vec<usize>,
    pub gc: Vec<usize>,
}

pub fn random_case(seed: u64, nq: usize, ng: usize) -> Case {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Case {
        // Coarse values so ties occur.
        dist: (0..nq * ng).map(|_| r.random_range(0..15) as f64 * 0.25).collect(),
        qp: (0..nq).map(|_| r.random_range(0..6)).collect(),
        qc: (0..nq).map(|_| r.random_range(0..3)).collect(),
        gp: (0..ng).map(|_| r.random_range(0..6)).collect(),
        gc: (0..ng).map(|_| r.random_range(0..3)).collect(),
    }
}

/// Position-by-counting reference: an item's rank is the number of valid
/// items ordered before it by (distance, gallery index).
pub fn brute_force(c: &Case, max_rank: usize) -> Option<(Vec<f64>, f64)> {
    let (nq, ng) = (c.qp.len(), c.gp.len());
    let mut cmc = vec![0.0; max_rank];
    let (mut ap_total, mut valid) = (0.0, 0);
    for q in 0..nq {
        let d = &c.dist[q * ng..(q + 1) * ng];
        let kept: Vec<usize> = (0..ng).filter(|&g| !(c.gp[g] == c.qp[q] && c.gc[g] == c.qc[q])).collect();
        let before = |a: usize, b: usize| d[a] < d[b] || (d[a] == d[b] && a < b);
        let rank = |g: usize| kept.iter().filter(|&&o| before(o, g)).count();
        let matches: Vec<usize> = kept.iter().copied().filter(|&g| c.gp[g] == c.qp[q]).collect();
        if matches.is_empty() {
            continue;
        }
        valid += 1;
        let best = matches.iter().map(|&g| rank(g)).min().unwrap();
        for (k, v) in cmc.iter_mut().enumerate() {
            if best <= k {
                *v += 1.0;
            }
        }
        let mut ap = 0.0;
        for &g in &matches {
            let hits_up_to = matches.iter().filter(|&&o| o == g || before(o, g)).count();
            ap += hits_up_to as f64 / (rank(g) + 1) as f64;
        }
        ap_total += ap / matches.len() as f64;
    }
    (valid > 0).then(|| (cmc.iter().map(|v| v / valid as f64).collect(), ap_total / valid as f64))
}
