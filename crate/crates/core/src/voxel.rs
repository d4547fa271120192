//! Intra-voxel query (points to dense voxel group ids) and inter-voxel query
//! (constant-time voxel neighborhoods through a key hash table).

use rayon::prelude::*;
use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::types::{GroupAssignment, NeighborTable, PointBatch, VoxelCoord, VoxelGridSpec};

/// Neighborhood width used when callers do not pick one.
pub const DEFAULT_NBR_SIZE: usize = 3;

/// Integer voxel coordinates `(b, x, y, z)` of every point.
///
/// Cells are `floor((p - min_r) / voxel_size)`, clamped into the last voxel
/// for points lying on `max_r`.
pub fn voxel_coords_3d<T: Scalar>(
    batch: &PointBatch<T>,
    grid: &VoxelGridSpec<T>,
) -> Result<Vec<VoxelCoord>> {
    if batch.batch_count() as u64 > grid.batch_count() {
        return Err(Error::BatchOutOfRange {
            batch: batch.batch_count() as u64 - 1,
            batch_count: grid.batch_count(),
        });
    }
    batch
        .coords()
        .par_iter()
        .zip(batch.batch_ids().par_iter())
        .enumerate()
        .map(|(row, (p, &b))| {
            grid.voxel_of(b as u64, p)
                .ok_or(Error::PointOutOfBounds { row })
        })
        .collect()
}

/// Flattens voxel coordinates into 64-bit keys. Coordinates must lie inside
/// the grid.
pub fn flatten_3d_to_1d<T: Scalar>(coords: &[VoxelCoord], grid: &VoxelGridSpec<T>) -> Vec<u64> {
    let counts = grid.axis_counts();
    coords
        .par_iter()
        .map(|v| {
            assert!(
                v.batch < grid.batch_count() && (0..3).all(|a| v.cell[a] < counts[a]),
                "voxel coordinate {v:?} outside grid"
            );
            grid.flatten(v)
        })
        .collect()
}

pub fn unflatten_1d_to_3d<T: Scalar>(keys: &[u64], grid: &VoxelGridSpec<T>) -> Vec<VoxelCoord> {
    keys.par_iter().map(|&k| grid.unflatten(k)).collect()
}

/// Dense rank of every key among the sorted distinct keys: larger keys get
/// larger group ids, equal keys share one.
pub fn assign_groups(keys: Vec<u64>) -> GroupAssignment {
    let mut unique = keys.clone();
    unique.par_sort_unstable();
    unique.dedup();
    let group_id = keys
        .par_iter()
        .map(|k| unique.binary_search(k).expect("key present"))
        .collect();
    GroupAssignment {
        group_id,
        group_count: unique.len(),
        key: keys,
    }
}

/// Groups points by the voxel they fall in.
pub fn intra_voxel_query<T: Scalar>(
    batch: &PointBatch<T>,
    grid: &VoxelGridSpec<T>,
) -> Result<GroupAssignment> {
    let coords = voxel_coords_3d(batch, grid)?;
    Ok(assign_groups(flatten_3d_to_1d(&coords, grid)))
}

/// Number of distinct voxels occupied by the batch.
pub fn occupied_voxel_count<T: Scalar>(
    batch: &PointBatch<T>,
    grid: &VoxelGridSpec<T>,
) -> Result<usize> {
    let coords = voxel_coords_3d(batch, grid)?;
    let mut keys = flatten_3d_to_1d(&coords, grid);
    keys.par_sort_unstable();
    keys.dedup();
    Ok(keys.len())
}

/// Key to voxel-index lookup for non-empty voxels.
#[derive(Debug, Clone, Default)]
pub struct VoxelHashTable {
    entries: FxHashMap<u64, usize>,
}

impl VoxelHashTable {
    /// Maps `keys[i]` to `i`. Keys must be distinct.
    pub fn from_unique_keys(keys: &[u64]) -> Result<Self> {
        let mut entries = FxHashMap::with_capacity_and_hasher(keys.len(), Default::default());
        for (i, &k) in keys.iter().enumerate() {
            if let Some(first) = entries.insert(k, i) {
                return Err(Error::NonUniqueSampledVoxel {
                    key: k,
                    first,
                    second: i,
                });
            }
        }
        Ok(Self { entries })
    }

    #[inline]
    pub fn get(&self, key: u64) -> Option<usize> {
        self.entries.get(&key).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, usize)> + '_ {
        self.entries.iter().map(|(k, v)| (*k, *v))
    }
}

/// One entry per distinct key, valued with that key's group id.
pub fn build_hash_table(assignment: &GroupAssignment) -> VoxelHashTable {
    let keys = assignment.group_keys();
    VoxelHashTable::from_unique_keys(&keys).expect("group keys are distinct")
}

/// All offsets in `[-c, c]^3` with `c = nbr_size / 2`, x-major then y then z.
pub fn generate_local_offsets(nbr_size: usize) -> Result<Vec<[i64; 3]>> {
    if nbr_size.is_multiple_of(2) {
        return Err(Error::EvenNeighborSize(nbr_size));
    }
    let c = (nbr_size / 2) as i64;
    let n = nbr_size as i64;
    let mut out = Vec::with_capacity(nbr_size.pow(3));
    for x in 0..n {
        for y in 0..n {
            for z in 0..n {
                out.push([x - c, y - c, z - c]);
            }
        }
    }
    Ok(out)
}

/// Neighbor pairs between voxel-unique sampled points.
///
/// Rows of `sampled` must occupy distinct voxels. For each center row `g`
/// (in row order) and each local offset (in offset order) a pair
/// `(nbr_index, g)` is emitted when the offset cell is inside the grid and
/// holds a sampled point. Offsets never change the frame. `nbr_index` is the
/// row of the neighbor in `sampled`, which equals its voxel rank whenever
/// rows are ordered by key, as centroid outputs are.
pub fn inter_voxel_query<T: Scalar>(
    sampled: &PointBatch<T>,
    grid: &VoxelGridSpec<T>,
    nbr_size: usize,
) -> Result<NeighborTable> {
    let coords = voxel_coords_3d(sampled, grid)?;
    neighbors_of_voxels(&coords, grid, nbr_size)
}

/// [`inter_voxel_query`] on precomputed voxel coordinates.
pub fn neighbors_of_voxels<T: Scalar>(
    coords: &[VoxelCoord],
    grid: &VoxelGridSpec<T>,
    nbr_size: usize,
) -> Result<NeighborTable> {
    let offsets = generate_local_offsets(nbr_size)?;
    let keys = flatten_3d_to_1d(coords, grid);
    let table = VoxelHashTable::from_unique_keys(&keys)?;
    let counts = grid.axis_counts().map(|c| c as i64);

    let per_center: Vec<Vec<usize>> = coords
        .par_iter()
        .map(|center| {
            let mut found = Vec::with_capacity(offsets.len());
            for off in &offsets {
                let mut cell = [0u64; 3];
                let mut inside = true;
                for a in 0..3 {
                    let v = center.cell[a] as i64 + off[a];
                    if v < 0 || v >= counts[a] {
                        inside = false;
                        break;
                    }
                    cell[a] = v as u64;
                }
                if !inside {
                    continue;
                }
                let key = grid.flatten(&VoxelCoord {
                    batch: center.batch,
                    cell,
                });
                if let Some(j) = table.get(key) {
                    found.push(j);
                }
            }
            found
        })
        .collect();

    let total = per_center.iter().map(Vec::len).sum();
    let mut nbr_indices = Vec::with_capacity(total);
    let mut inter_gid = Vec::with_capacity(total);
    for (g, nbrs) in per_center.into_iter().enumerate() {
        inter_gid.extend(std::iter::repeat_n(g, nbrs.len()));
        nbr_indices.extend(nbrs);
    }
    Ok(NeighborTable {
        nbr_indices,
        inter_gid,
        center_count: coords.len(),
    })
}
