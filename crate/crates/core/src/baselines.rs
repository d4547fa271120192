//! Farthest point sampling and exact brute-force k-nearest-neighbor search.
//! Both serve as correctness references and as latency baselines.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::{dist2, Scalar};
use crate::types::PointBatch;

/// Point count above which the FPS distance update is split across threads.
const FPS_PAR_MIN_POINTS: usize = 1 << 15;
const FPS_CHUNK: usize = 1 << 13;

#[derive(Debug, Clone, PartialEq)]
pub struct FpsResult<T> {
    /// Selection order; starts with the seed index.
    pub selected_indices: Vec<usize>,
    /// Distance of each selected point to the previously selected set at the
    /// moment it was picked (infinite for the seed).
    pub selection_dists: Vec<T>,
    /// Distance of every point to its nearest selected point.
    pub min_dists: Vec<T>,
}

fn single_frame<T: Scalar>(batch: &PointBatch<T>, what: &str) -> Result<()> {
    if batch.batch_count() != 1 {
        return Err(Error::InvalidBatch(format!(
            "{what} expects a single frame, got {}",
            batch.batch_count()
        )));
    }
    Ok(())
}

/// Greedy max-min selection of `m` points starting at `seed_index`.
/// Ties go to the smallest index.
pub fn farthest_point_sample<T: Scalar>(
    batch: &PointBatch<T>,
    m: usize,
    seed_index: usize,
) -> Result<FpsResult<T>> {
    single_frame(batch, "farthest_point_sample")?;
    let pts = batch.coords();
    let n = pts.len();
    if m == 0 || m > n {
        return Err(Error::MOutOfRange { m, n });
    }
    if seed_index >= n {
        return Err(Error::InvalidConfig(format!(
            "seed index {seed_index} outside [0, {n})"
        )));
    }

    // Selected points hold -inf so they never win the argmax, even when
    // duplicates leave every remaining distance at zero.
    let mut min_d2 = vec![T::infinity(); n];
    let mut selected = Vec::with_capacity(m);
    let mut selection_dists = Vec::with_capacity(m);
    selected.push(seed_index);
    selection_dists.push(T::infinity());
    min_d2[seed_index] = T::neg_infinity();
    let parallel = n >= FPS_PAR_MIN_POINTS && rayon::current_num_threads() > 1;

    let mut last = seed_index;
    for _ in 1..m {
        let anchor = pts[last];
        let (best_d2, best) = if parallel {
            min_d2
                .par_chunks_mut(FPS_CHUNK)
                .zip(pts.par_chunks(FPS_CHUNK))
                .enumerate()
                .map(|(c, (md, p))| {
                    let (d, i) = update_and_argmax(md, p, &anchor);
                    (d, i.saturating_add(c * FPS_CHUNK))
                })
                .reduce(|| (T::neg_infinity(), usize::MAX), pick_farther)
        } else {
            update_and_argmax(&mut min_d2, pts, &anchor)
        };
        selected.push(best);
        selection_dists.push(best_d2.sqrt());
        min_d2[best] = T::neg_infinity();
        last = best;
    }

    let min_dists = pts
        .par_iter()
        .zip(min_d2.par_iter())
        .map(|(p, &d)| {
            if d == T::neg_infinity() {
                T::zero()
            } else {
                d.min(dist2(p, &pts[last])).sqrt()
            }
        })
        .collect();
    Ok(FpsResult {
        selected_indices: selected,
        selection_dists,
        min_dists,
    })
}

#[inline]
fn pick_farther<T: Scalar>(a: (T, usize), b: (T, usize)) -> (T, usize) {
    if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) {
        b
    } else {
        a
    }
}

#[inline]
fn update_and_argmax<T: Scalar>(min_d2: &mut [T], pts: &[[T; 3]], anchor: &[T; 3]) -> (T, usize) {
    let mut best = T::neg_infinity();
    let mut best_i = usize::MAX;
    for (i, (md, p)) in min_d2.iter_mut().zip(pts).enumerate() {
        let d = dist2(p, anchor);
        if d < *md {
            *md = d;
        }
        if *md > best {
            best = *md;
            best_i = i;
        }
    }
    (best, best_i)
}

/// `k` nearest references for every query, row-major `queries x k`.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnResult<T> {
    pub k: usize,
    pub indices: Vec<usize>,
    pub distances: Vec<T>,
}

impl<T: Scalar> KnnResult<T> {
    pub fn query_count(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn neighbors(&self, query: usize) -> &[usize] {
        &self.indices[query * self.k..(query + 1) * self.k]
    }

    pub fn distances_of(&self, query: usize) -> &[T] {
        &self.distances[query * self.k..(query + 1) * self.k]
    }
}

/// Exact Euclidean k-nearest neighbors by full scan. Results are sorted by
/// distance, ties by reference index.
pub fn knn_search<T: Scalar>(
    queries: &PointBatch<T>,
    references: &PointBatch<T>,
    k: usize,
) -> Result<KnnResult<T>> {
    single_frame(queries, "knn_search")?;
    single_frame(references, "knn_search")?;
    let refs = references.coords();
    if k == 0 || k > refs.len() {
        return Err(Error::KOutOfRange { k, n: refs.len() });
    }
    let q = queries.count();
    let mut indices = vec![0usize; q * k];
    let mut distances = vec![T::zero(); q * k];
    indices
        .par_chunks_mut(k)
        .zip(distances.par_chunks_mut(k))
        .zip(queries.coords().par_iter())
        .for_each_init(
            || Vec::with_capacity(k + 1),
            |best: &mut Vec<(T, usize)>, ((idx_out, dist_out), query)| {
                best.clear();
                for (j, r) in refs.iter().enumerate() {
                    let d = dist2(query, r);
                    if best.len() == k {
                        // Later references lose ties, so only strictly closer ones enter.
                        if !(d < best[k - 1].0) {
                            continue;
                        }
                        best.pop();
                    }
                    let pos = best.partition_point(|(bd, _)| *bd <= d);
                    best.insert(pos, (d, j));
                }
                for (slot, (d, j)) in best.iter().enumerate() {
                    idx_out[slot] = *j;
                    dist_out[slot] = d.sqrt();
                }
            },
        );
    Ok(KnnResult {
        k,
        indices,
        distances,
    })
}
