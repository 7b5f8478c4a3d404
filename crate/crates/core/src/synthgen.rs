//! Low-rank binary rating matrices with population imbalance and observation
//! bias between two user groups and two item groups.
//!
//! Users and items are split into halves (group 0 first). Each user group owns
//! `r / 2` basis rows whose entries are +1 with the preference probability of
//! the (user group, item group) block and -1 otherwise; every user copies one
//! basis row of its group chosen uniformly at random. Observations are then
//! sampled independently per entry with the block's observation probability.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::types::{GroupAssignment, ObservationMask, RatingDataset, RatingMatrix, ValueDomain};

/// 2x2 probability table indexed `[user_group][item_group]`.
pub type BlockTable = [[f64; 2]; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n: usize,
    pub m: usize,
    pub r: usize,
    /// Probability that a rating is +1.
    pub p: BlockTable,
    /// Probability that a rating is observed.
    pub q: BlockTable,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig::symmetric(600, 400, 20, (0.4, 0.4), (0.2, 0.01), 1)
    }
}

impl SyntheticConfig {
    /// Same-group blocks get `p0`/`q0`, cross-group blocks `p1`/`q1`.
    pub fn symmetric(
        n: usize,
        m: usize,
        r: usize,
        (p0, p1): (f64, f64),
        (q0, q1): (f64, f64),
        seed: u64,
    ) -> Self {
        SyntheticConfig {
            n,
            m,
            r,
            p: [[p0, p1], [p1, p0]],
            q: [[q0, q1], [q1, q0]],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let SyntheticConfig { n, m, r, .. } = *self;
        if n == 0 || m == 0 || n % 2 != 0 || m % 2 != 0 {
            return Err(Error::invalid(format!("n and m must be positive and even, got {n}x{m}")));
        }
        if r == 0 || r % 2 != 0 {
            return Err(Error::invalid(format!("rank must be positive and even, got {r}")));
        }
        if r > n {
            return Err(Error::invalid(format!("cannot place {r} basis rows among {n} users")));
        }
        if r > m {
            return Err(Error::invalid(format!("rank {r} exceeds item count {m}")));
        }
        check_table("p", &self.p)?;
        check_table("q", &self.q)
    }
}

fn check_table(name: &str, t: &BlockTable) -> Result<()> {
    match t.iter().flatten().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(v) => Err(Error::invalid(format!("{name} entry {v} outside [0, 1]"))),
        None => Ok(()),
    }
}

/// Ground-truth matrix and the half/half group labels.
pub fn generate_ground_truth(cfg: &SyntheticConfig) -> Result<(RatingMatrix, GroupAssignment)> {
    cfg.validate()?;
    let groups = GroupAssignment::halves(cfg.n, cfg.m)?;
    let per_group = cfg.r / 2;
    let item_group: Vec<usize> = (0..cfg.m).map(|j| usize::from(j >= cfg.m / 2)).collect();

    let mut basis_rng = rng::stream(cfg.seed, Stream::BasisRows);
    let basis: Vec<Vec<Vec<f64>>> = (0..2)
        .map(|g| {
            (0..per_group)
                .map(|_| {
                    item_group
                        .iter()
                        .map(|&z| if basis_rng.random::<f64>() < cfg.p[g][z] { 1.0 } else { -1.0 })
                        .collect()
                })
                .collect()
        })
        .collect();

    let mut pick_rng = rng::stream(cfg.seed, Stream::BasisAssignment);
    let mut values = Array2::zeros((cfg.n, cfg.m));
    for (i, mut row) in values.rows_mut().into_iter().enumerate() {
        let g = usize::from(i >= cfg.n / 2);
        let b = &basis[g][pick_rng.random_range(0..per_group)];
        row.iter_mut().zip(b).for_each(|(v, &x)| *v = x);
    }
    Ok((RatingMatrix::new(values, ValueDomain::Binary)?, groups))
}

/// Observe each grouped entry independently with probability `q[z_user][z_item]`.
/// Ungrouped entries are never observed.
pub fn sample_observations(
    ratings: &RatingMatrix,
    groups: &GroupAssignment,
    q: &BlockTable,
    seed: u64,
) -> Result<ObservationMask> {
    check_table("q", q)?;
    let (n, m) = ratings.dim();
    groups.check_dims(n, m)?;
    if groups.user_alphabet() > 2 || groups.item_alphabet() > 2 {
        return Err(Error::invalid("observation table covers two user and two item groups"));
    }
    let mut rng = rng::stream(seed, Stream::Observation);
    let mut entries = Vec::new();
    for i in 0..n {
        for j in 0..m {
            // Draw for every entry so the stream does not depend on labels.
            let u: f64 = rng.random();
            if let (Some(a), Some(b)) = (groups.user(i), groups.item(j)) {
                if u < q[a as usize][b as usize] {
                    entries.push((i as u32, j as u32));
                }
            }
        }
    }
    Ok(ObservationMask::from_sorted(n, m, entries))
}

/// Ground truth plus observations, all from `cfg.seed`.
pub fn generate(cfg: &SyntheticConfig) -> Result<(RatingDataset, GroupAssignment)> {
    let (ratings, groups) = generate_ground_truth(cfg)?;
    let observed = sample_observations(&ratings, &groups, &cfg.q, cfg.seed)?;
    Ok((RatingDataset::new(ratings, observed)?, groups))
}

/// Algebraic rank of a matrix with few distinct rows.
///
/// Duplicate rows are removed first, then the remaining rows are reduced by
/// Gaussian elimination with partial pivoting.
pub fn realized_rank(values: &Array2<f64>) -> usize {
    let mut rows: Vec<Vec<f64>> = values.rows().into_iter().map(|r| r.to_vec()).collect();
    rows.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    rows.dedup();
    let m = values.ncols();
    let mut rank = 0;
    for col in 0..m {
        if rank == rows.len() {
            break;
        }
        let (pivot, best) = (rank..rows.len())
            .map(|k| (k, rows[k][col].abs()))
            .fold((rank, 0.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if best < 1e-9 {
            continue;
        }
        rows.swap(rank, pivot);
        let head = rows[rank].clone();
        for row in rows.iter_mut().skip(rank + 1) {
            let f = row[col] / head[col];
            if f != 0.0 {
                row.iter_mut().zip(&head).for_each(|(x, h)| *x -= f * h);
            }
        }
        rank += 1;
    }
    rank
}

/// Per-block statistics of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockStats {
    pub user_group: usize,
    pub item_group: usize,
    pub entries: usize,
    pub positive_fraction: f64,
    pub observed_fraction: f64,
}

pub fn block_stats(dataset: &RatingDataset, groups: &GroupAssignment) -> Vec<BlockStats> {
    let cells = groups.n_cells();
    let (mut total, mut pos, mut obs) = (vec![0usize; cells], vec![0usize; cells], vec![0usize; cells]);
    let values = dataset.ratings().values();
    for ((i, j), &v) in values.indexed_iter() {
        if let Some(c) = groups.cell(i, j) {
            total[c] += 1;
            pos[c] += usize::from(v > 0.0);
        }
    }
    for (i, j) in dataset.observed().iter() {
        if let Some(c) = groups.cell(i, j) {
            obs[c] += 1;
        }
    }
    (0..cells)
        .map(|c| {
            let (user_group, item_group) = groups.cell_coords(c);
            let denom = total[c].max(1) as f64;
            BlockStats {
                user_group,
                item_group,
                entries: total[c],
                positive_fraction: pos[c] as f64 / denom,
                observed_fraction: obs[c] as f64 / denom,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize, m: usize, r: usize, p: (f64, f64), q: (f64, f64), seed: u64) -> SyntheticConfig {
        SyntheticConfig::symmetric(n, m, r, p, q, seed)
    }

    #[test]
    fn all_ones_probability_gives_constant_matrix() {
        let (m, _) = generate_ground_truth(&cfg(20, 10, 4, (1.0, 1.0), (1.0, 1.0), 3)).unwrap();
        assert!(m.values().iter().all(|&v| v == 1.0));
        assert_eq!(realized_rank(m.values()), 1);
    }

    #[test]
    fn deterministic_blocks() {
        let (m, g) = generate_ground_truth(&cfg(12, 8, 4, (1.0, 0.0), (1.0, 1.0), 9)).unwrap();
        for ((i, j), &v) in m.values().indexed_iter() {
            let same = g.user(i) == g.item(j);
            assert_eq!(v, if same { 1.0 } else { -1.0 });
        }
        // The two distinct rows are negatives of each other.
        assert_eq!(realized_rank(m.values()), 1);
    }

    #[test]
    fn default_scale_rank_and_density() {
        let mut total = 0.0;
        for seed in 0..5 {
            let (m, _) = generate_ground_truth(&cfg(600, 400, 20, (0.4, 0.4), (0.2, 0.01), seed)).unwrap();
            assert!(realized_rank(m.values()) <= 20);
            total += m.values().iter().filter(|&&v| v > 0.0).count() as f64 / (600.0 * 400.0);
        }
        let frac = total / 5.0;
        assert!((frac - 0.4).abs() <= 0.02, "positive fraction {frac}");
    }

    #[test]
    fn rank_above_users_rejected() {
        let err = generate_ground_truth(&cfg(4, 40, 6, (0.5, 0.5), (0.5, 0.5), 0)).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
        assert!(cfg(6, 4, 2, (1.5, 0.5), (0.5, 0.5), 0).validate().is_err());
        assert!(cfg(5, 4, 2, (0.5, 0.5), (0.5, 0.5), 0).validate().is_err());
    }

    #[test]
    fn observation_extremes() {
        let c = cfg(10, 6, 2, (0.5, 0.5), (1.0, 1.0), 1);
        let (m, g) = generate_ground_truth(&c).unwrap();
        assert_eq!(sample_observations(&m, &g, &[[1.0; 2]; 2], 4).unwrap().len(), 60);
        assert!(sample_observations(&m, &g, &[[0.0; 2]; 2], 4).unwrap().is_empty());
    }

    #[test]
    fn observation_rates_match_blocks() {
        let c = cfg(600, 400, 20, (0.4, 0.4), (0.2, 0.01), 0);
        let (m, g) = generate_ground_truth(&c).unwrap();
        let mut frac = [0.0f64; 4];
        for seed in 0..100 {
            let mask = sample_observations(&m, &g, &c.q, seed).unwrap();
            let ds = RatingDataset::new(m.clone(), mask).unwrap();
            for s in block_stats(&ds, &g) {
                frac[s.user_group * 2 + s.item_group] += s.observed_fraction / 100.0;
            }
        }
        for (cell, f) in frac.iter().enumerate() {
            let q = c.q[cell / 2][cell % 2];
            assert!((f - q).abs() <= 0.1 * q, "cell {cell}: {f} vs {q}");
        }
    }

    #[test]
    fn block_frequencies_converge() {
        let c = SyntheticConfig {
            n: 2000,
            m: 2000,
            r: 2000,
            p: [[0.7, 0.2], [0.35, 0.55]],
            q: [[0.0; 2]; 2],
            seed: 5,
        };
        let (ds, g) = generate(&c).unwrap();
        for s in block_stats(&ds, &g) {
            let p = c.p[s.user_group][s.item_group];
            assert!((s.positive_fraction - p).abs() <= 0.01, "{s:?}");
        }
    }

    #[test]
    fn swapping_user_groups_mirrors_block_statistics() {
        // Swapping p's rows should swap the user-group block rates.
        let p = [[0.8, 0.3], [0.1, 0.6]];
        let swapped = [p[1], p[0]];
        let stats = |p: BlockTable, seed| {
            let c = SyntheticConfig { n: 400, m: 400, r: 400, p, q: [[0.0; 2]; 2], seed };
            let (ds, g) = generate(&c).unwrap();
            block_stats(&ds, &g)
        };
        let mut a = [0.0; 4];
        let mut b = [0.0; 4];
        for seed in 0..5 {
            for s in stats(p, seed) {
                a[s.user_group * 2 + s.item_group] += s.positive_fraction / 5.0;
            }
            for s in stats(swapped, seed + 100) {
                b[(1 - s.user_group) * 2 + s.item_group] += s.positive_fraction / 5.0;
            }
        }
        for k in 0..4 {
            assert!((a[k] - b[k]).abs() < 0.02, "block {k}: {} vs {}", a[k], b[k]);
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let c = SyntheticConfig::default();
        assert_eq!(generate(&c).unwrap(), generate(&c).unwrap());
    }
}
