//! k-means partitioning of the training inputs into disjoint local blocks and
//! nearest-centroid lookup for test inputs.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{ensure_dim, Error, Result};

/// One local block `(X_i, y_i)` together with the original row indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub xs: DMatrix<f64>,
    pub ys: DVector<f64>,
    pub indices: Vec<usize>,
}

impl Block {
    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }
}

/// Training data split into `p` disjoint blocks with their centroids (`p x d`).
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedDataset {
    blocks: Vec<Block>,
    centroids: DMatrix<f64>,
    total_n: usize,
}

impl PartitionedDataset {
    /// Assemble from explicit blocks and centroids. Block indices must cover
    /// `0..total_n` exactly once.
    pub fn from_parts(blocks: Vec<Block>, centroids: DMatrix<f64>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::contract("partition needs at least one block"));
        }
        ensure_dim("centroid rows", blocks.len(), centroids.nrows())?;
        let dim = centroids.ncols();
        let total_n: usize = blocks.iter().map(Block::len).sum();
        let mut seen = vec![false; total_n];
        for b in &blocks {
            ensure_dim("block targets", b.xs.nrows(), b.ys.len())?;
            ensure_dim("block indices", b.ys.len(), b.indices.len())?;
            if b.xs.nrows() > 0 {
                ensure_dim("block input columns", dim, b.xs.ncols())?;
            }
            for &i in &b.indices {
                if i >= total_n || seen[i] {
                    return Err(Error::contract("block indices are not a disjoint cover of the data"));
                }
                seen[i] = true;
            }
        }
        Ok(PartitionedDataset {
            blocks,
            centroids,
            total_n,
        })
    }

    /// Blocks from a per-row assignment; centroids are the block means
    /// (origin for an empty block).
    pub fn from_assignment(xs: &DMatrix<f64>, ys: &DVector<f64>, assignment: &[usize], p: usize) -> Result<Self> {
        ensure_dim("targets", xs.nrows(), ys.len())?;
        ensure_dim("assignment", xs.nrows(), assignment.len())?;
        if assignment.iter().any(|&a| a >= p) {
            return Err(Error::contract("assignment refers to a block >= p"));
        }
        let centroids = block_means(xs, assignment, p);
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); p];
        for (i, &a) in assignment.iter().enumerate() {
            members[a].push(i);
        }
        let d = xs.ncols();
        let blocks = members
            .into_iter()
            .map(|idx| Block {
                xs: DMatrix::from_fn(idx.len(), d, |r, c| xs[(idx[r], c)]),
                ys: DVector::from_fn(idx.len(), |r, _| ys[idx[r]]),
                indices: idx,
            })
            .collect();
        Self::from_parts(blocks, centroids)
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn block(&self, k: usize) -> &Block {
        &self.blocks[k]
    }

    pub fn centroids(&self) -> &DMatrix<f64> {
        &self.centroids
    }

    pub fn p(&self) -> usize {
        self.blocks.len()
    }

    pub fn total_n(&self) -> usize {
        self.total_n
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(Block::len).collect()
    }

    /// Per-row block index in original row order.
    pub fn assignment(&self) -> Vec<usize> {
        let mut out = vec![0; self.total_n];
        for (k, b) in self.blocks.iter().enumerate() {
            for &i in &b.indices {
                out[i] = k;
            }
        }
        out
    }
}

fn sq_dist_row(xs: &DMatrix<f64>, row: usize, centroids: &DMatrix<f64>, c: usize) -> f64 {
    (0..xs.ncols())
        .map(|l| {
            let d = xs[(row, l)] - centroids[(c, l)];
            d * d
        })
        .sum()
}

fn nearest(xs: &DMatrix<f64>, row: usize, centroids: &DMatrix<f64>) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for c in 0..centroids.nrows() {
        let d = sq_dist_row(xs, row, centroids, c);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

fn block_means(xs: &DMatrix<f64>, assignment: &[usize], p: usize) -> DMatrix<f64> {
    let d = xs.ncols();
    let mut sums = DMatrix::zeros(p, d);
    let mut counts = vec![0usize; p];
    for (i, &a) in assignment.iter().enumerate() {
        counts[a] += 1;
        for l in 0..d {
            sums[(a, l)] += xs[(i, l)];
        }
    }
    for (k, &c) in counts.iter().enumerate() {
        if c > 0 {
            for l in 0..d {
                sums[(k, l)] /= c as f64;
            }
        }
    }
    sums
}

fn wcss(xs: &DMatrix<f64>, assignment: &[usize], centroids: &DMatrix<f64>) -> f64 {
    assignment
        .iter()
        .enumerate()
        .map(|(i, &a)| sq_dist_row(xs, i, centroids, a))
        .sum()
}

/// Options for [`kmeans_partition_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansOptions {
    pub p: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Cap block sizes at `ceil(2n / p)` after clustering.
    pub balance: bool,
}

/// Diagnostics of a k-means run.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansReport {
    pub iterations: usize,
    pub converged: bool,
    /// Within-cluster sum of squares after each centroid update.
    pub wcss_history: Vec<f64>,
}

fn kmeans_pp_seeds(xs: &DMatrix<f64>, p: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let n = xs.nrows();
    let d = xs.ncols();
    let mut chosen = Vec::with_capacity(p);
    let mut is_chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen.push(first);
    is_chosen[first] = true;
    let mut min_d: Vec<f64> = (0..n)
        .map(|i| {
            (0..d)
                .map(|l| (xs[(i, l)] - xs[(first, l)]).powi(2))
                .sum()
        })
        .collect();
    while chosen.len() < p {
        let total: f64 = min_d.iter().sum();
        let next = if total > 0.0 && total.is_finite() {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in min_d.iter().enumerate() {
                if w > 0.0 {
                    if target < w {
                        pick = Some(i);
                        break;
                    }
                    target -= w;
                }
            }
            pick.unwrap_or_else(|| {
                // rounding left the target past the end: take the last positive weight
                (0..n).rev().find(|&i| min_d[i] > 0.0).unwrap()
            })
        } else {
            (0..n).find(|&i| !is_chosen[i]).unwrap()
        };
        chosen.push(next);
        is_chosen[next] = true;
        for i in 0..n {
            let dist: f64 = (0..d).map(|l| (xs[(i, l)] - xs[(next, l)]).powi(2)).sum();
            if dist < min_d[i] {
                min_d[i] = dist;
            }
        }
    }
    DMatrix::from_fn(p, d, |c, l| xs[(chosen[c], l)])
}

/// Move points into empty clusters: each empty cluster takes the point of the
/// largest cluster that lies farthest from that cluster's centroid.
fn repair_empty(xs: &DMatrix<f64>, assignment: &mut [usize], centroids: &DMatrix<f64>, p: usize) -> bool {
    let mut counts = vec![0usize; p];
    for &a in assignment.iter() {
        counts[a] += 1;
    }
    let mut repaired = false;
    for c in 0..p {
        if counts[c] > 0 {
            continue;
        }
        let largest = (0..p).max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a))).unwrap();
        if counts[largest] < 2 {
            break;
        }
        let mut far = None;
        let mut far_d = -1.0;
        for (i, &a) in assignment.iter().enumerate() {
            if a == largest {
                let dd = sq_dist_row(xs, i, centroids, largest);
                if dd > far_d {
                    far_d = dd;
                    far = Some(i);
                }
            }
        }
        let i = far.unwrap();
        assignment[i] = c;
        counts[largest] -= 1;
        counts[c] += 1;
        repaired = true;
    }
    repaired
}

fn balance(xs: &DMatrix<f64>, assignment: &mut [usize], centroids: &DMatrix<f64>, p: usize) {
    let n = assignment.len();
    let cap = (2 * n).div_ceil(p);
    let mut counts = vec![0usize; p];
    for &a in assignment.iter() {
        counts[a] += 1;
    }
    for c in 0..p {
        while counts[c] > cap {
            let (i, _) = assignment
                .iter()
                .enumerate()
                .filter(|(_, &a)| a == c)
                .map(|(i, _)| (i, sq_dist_row(xs, i, centroids, c)))
                .fold((usize::MAX, -1.0), |acc, (i, d)| if d > acc.1 { (i, d) } else { acc });
            let target = (0..p)
                .filter(|&k| k != c && counts[k] < cap)
                .min_by(|&a, &b| {
                    sq_dist_row(xs, i, centroids, a)
                        .total_cmp(&sq_dist_row(xs, i, centroids, b))
                        .then(a.cmp(&b))
                })
                .expect("total capacity exceeds n");
            assignment[i] = target;
            counts[c] -= 1;
            counts[target] += 1;
        }
    }
}

/// Lloyd's algorithm with k-means++ seeding.
pub fn kmeans_partition_with(
    xs: &DMatrix<f64>,
    ys: &DVector<f64>,
    opts: &KMeansOptions,
) -> Result<(PartitionedDataset, KMeansReport)> {
    let n = xs.nrows();
    let p = opts.p;
    ensure_dim("targets", n, ys.len())?;
    if p == 0 || p > n {
        return Err(Error::contract(format!("k-means needs 1 <= p <= n (p = {p}, n = {n})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut centroids = kmeans_pp_seeds(xs, p, &mut rng);
    let mut assignment = vec![usize::MAX; n];
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..opts.max_iters.max(1) {
        iterations += 1;
        let fresh: Vec<usize> = (0..n).into_par_iter().map(|i| nearest(xs, i, &centroids)).collect();
        let mut changed = fresh != assignment;
        assignment = fresh;
        changed |= repair_empty(xs, &mut assignment, &centroids, p);
        centroids = block_means(xs, &assignment, p);
        history.push(wcss(xs, &assignment, &centroids));
        if !changed {
            converged = true;
            break;
        }
    }
    if opts.balance {
        balance(xs, &mut assignment, &centroids, p);
        centroids = block_means(xs, &assignment, p);
    }
    let mut data = PartitionedDataset::from_assignment(xs, ys, &assignment, p)?;
    data.centroids = centroids;
    Ok((
        data,
        KMeansReport {
            iterations,
            converged,
            wcss_history: history,
        },
    ))
}

/// Partition `(xs, ys)` into `p` k-means blocks.
pub fn kmeans_partition(
    xs: &DMatrix<f64>,
    ys: &DVector<f64>,
    p: usize,
    seed: u64,
    max_iters: usize,
) -> Result<PartitionedDataset> {
    let opts = KMeansOptions {
        p,
        seed,
        max_iters,
        balance: false,
    };
    kmeans_partition_with(xs, ys, &opts).map(|(d, _)| d)
}

/// Index of the centroid nearest to `x_star` (ties go to the lowest index).
pub fn assign_block(x_star: &[f64], data: &PartitionedDataset) -> Result<usize> {
    ensure_dim("input", data.dim(), x_star.len())?;
    let c = data.centroids();
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for k in 0..c.nrows() {
        let d: f64 = x_star.iter().enumerate().map(|(l, v)| (v - c[(k, l)]).powi(2)).sum();
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    Ok(best)
}
