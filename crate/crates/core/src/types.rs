//! Shared data model: point batches, voxel grids, group assignments and
//! neighbor tables.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One unvalidated input point.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPoint<T> {
    /// Arbitrary frame label; remapped to a dense batch id on validation.
    pub frame: i64,
    pub coords: [T; 3],
    pub features: Option<Vec<T>>,
}

impl<T> RawPoint<T> {
    pub fn new(frame: i64, coords: [T; 3]) -> Self {
        Self {
            frame,
            coords,
            features: None,
        }
    }

    pub fn with_features(mut self, features: Vec<T>) -> Self {
        self.features = Some(features);
        self
    }
}

/// A batch of point clouds, possibly spanning several frames.
///
/// Batch ids are dense (`0..batch_count`, every id used), coordinates are
/// finite, and the optional feature matrix has one row per point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointBatch<T> {
    batch_id: Vec<u32>,
    coords: Vec<[T; 3]>,
    features: Option<Array2<T>>,
    batch_count: usize,
}

/// Validates raw points into a [`PointBatch`].
///
/// Frame labels are remapped to `0..B` in order of first occurrence.
pub fn validate_batch<T: Scalar>(
    raw: impl IntoIterator<Item = RawPoint<T>>,
) -> Result<PointBatch<T>> {
    let mut frame_ids: Vec<i64> = Vec::new();
    let mut batch_id = Vec::new();
    let mut coords = Vec::new();
    let mut feature_rows: Vec<T> = Vec::new();
    let mut width: Option<Option<usize>> = None;

    for (row, p) in raw.into_iter().enumerate() {
        if !p.coords.iter().all(|c| c.is_finite()) {
            return Err(Error::NonFiniteCoordinate { row });
        }
        let this_width = p.features.as_ref().map(Vec::len);
        match width {
            None => width = Some(this_width),
            Some(w) if w != this_width => return Err(Error::RaggedFeatures { row }),
            _ => {}
        }
        if let Some(f) = p.features {
            feature_rows.extend(f);
        }
        // Frame counts are small; a linear scan keeps first-occurrence order.
        let id = match frame_ids.iter().position(|&f| f == p.frame) {
            Some(i) => i,
            None => {
                frame_ids.push(p.frame);
                frame_ids.len() - 1
            }
        };
        batch_id.push(id as u32);
        coords.push(p.coords);
    }

    if coords.is_empty() {
        return Err(Error::EmptyInput);
    }
    let features = match width.flatten() {
        Some(w) => Some(
            Array2::from_shape_vec((coords.len(), w), feature_rows)
                .map_err(|e| Error::ShapeMismatch(e.to_string()))?,
        ),
        None => None,
    };
    Ok(PointBatch {
        batch_id,
        coords,
        features,
        batch_count: frame_ids.len(),
    })
}

impl<T: Scalar> PointBatch<T> {
    /// Builds a batch from already-dense parts, checking every invariant.
    pub fn from_parts(
        batch_id: Vec<u32>,
        coords: Vec<[T; 3]>,
        features: Option<Array2<T>>,
    ) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::EmptyInput);
        }
        if batch_id.len() != coords.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} batch ids for {} points",
                batch_id.len(),
                coords.len()
            )));
        }
        if let Some(row) = coords.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFiniteCoordinate { row });
        }
        if let Some(f) = &features {
            if f.nrows() != coords.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{} feature rows for {} points",
                    f.nrows(),
                    coords.len()
                )));
            }
        }
        let batch_count = batch_id.iter().copied().max().unwrap_or(0) as usize + 1;
        let mut seen = vec![false; batch_count];
        for &b in &batch_id {
            seen[b as usize] = true;
        }
        if let Some(gap) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidBatch(format!("batch id {gap} is unused")));
        }
        Ok(Self {
            batch_id,
            coords,
            features,
            batch_count,
        })
    }

    /// A single-frame batch without features.
    pub fn single_frame(coords: Vec<[T; 3]>) -> Result<Self> {
        let n = coords.len();
        Self::from_parts(vec![0; n], coords, None)
    }

    /// Stacks single- or multi-frame batches; frame `i` of the result comes
    /// from `frames[i]`. Feature widths must agree (or all be absent).
    pub fn concat_frames(frames: &[PointBatch<T>]) -> Result<Self> {
        let first = frames.first().ok_or(Error::EmptyInput)?;
        let width = first.feature_width();
        let mut batch_id = Vec::new();
        let mut coords = Vec::new();
        let mut feats = Vec::new();
        let mut offset = 0u32;
        for f in frames {
            if f.feature_width() != width {
                return Err(Error::RaggedFeatures { row: coords.len() });
            }
            batch_id.extend(f.batch_id.iter().map(|b| b + offset));
            coords.extend_from_slice(&f.coords);
            if let Some(m) = &f.features {
                feats.extend(m.iter().copied());
            }
            offset += f.batch_count as u32;
        }
        let features = match width {
            Some(w) => Some(
                Array2::from_shape_vec((coords.len(), w), feats)
                    .map_err(|e| Error::ShapeMismatch(e.to_string()))?,
            ),
            None => None,
        };
        Self::from_parts(batch_id, coords, features)
    }

    pub fn count(&self) -> usize {
        self.coords.len()
    }

    pub fn batch_count(&self) -> usize {
        self.batch_count
    }

    pub fn batch_ids(&self) -> &[u32] {
        &self.batch_id
    }

    pub fn coords(&self) -> &[[T; 3]] {
        &self.coords
    }

    pub fn features(&self) -> Option<&Array2<T>> {
        self.features.as_ref()
    }

    pub fn feature_width(&self) -> Option<usize> {
        self.features.as_ref().map(|f| f.ncols())
    }

    /// Replaces the feature matrix.
    pub fn with_features(self, features: Option<Array2<T>>) -> Result<Self> {
        Self::from_parts(self.batch_id, self.coords, features)
    }

    /// Coordinates as an `N x 3` matrix.
    pub fn coord_matrix(&self) -> Array2<T> {
        Array2::from_shape_fn((self.count(), 3), |(r, c)| self.coords[r][c])
    }

    /// Converts back to raw points whose frame label is the batch id.
    pub fn to_raw(&self) -> Vec<RawPoint<T>> {
        (0..self.count())
            .map(|i| RawPoint {
                frame: self.batch_id[i] as i64,
                coords: self.coords[i],
                features: self.features.as_ref().map(|f| f.row(i).to_vec()),
            })
            .collect()
    }

    /// Splits into one single-frame batch per batch id.
    pub fn split_frames(&self) -> Vec<PointBatch<T>> {
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); self.batch_count];
        for (i, &b) in self.batch_id.iter().enumerate() {
            rows[b as usize].push(i);
        }
        rows.into_iter()
            .map(|idx| {
                let coords = idx.iter().map(|&i| self.coords[i]).collect::<Vec<_>>();
                let features = self
                    .features
                    .as_ref()
                    .map(|f| f.select(ndarray::Axis(0), &idx));
                PointBatch {
                    batch_id: vec![0; idx.len()],
                    coords,
                    features,
                    batch_count: 1,
                }
            })
            .collect()
    }

    /// Componentwise extrema of all coordinates.
    pub fn bounds(&self) -> Bounds<T> {
        Bounds::enclosing(&self.coords).expect("batches are never empty")
    }
}

/// Axis-aligned box `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds<T> {
    pub min: [T; 3],
    pub max: [T; 3],
}

impl<T: Scalar> Bounds<T> {
    pub fn enclosing(points: &[[T; 3]]) -> Option<Self> {
        let first = *points.first()?;
        let mut b = Bounds {
            min: first,
            max: first,
        };
        for p in &points[1..] {
            for a in 0..3 {
                b.min[a] = b.min[a].min(p[a]);
                b.max[a] = b.max[a].max(p[a]);
            }
        }
        Some(b)
    }

    /// Expands every face outward by `padding`.
    pub fn padded(&self, padding: T) -> Self {
        Bounds {
            min: self.min.map(|v| v - padding),
            max: self.max.map(|v| v + padding),
        }
    }

    pub fn contains(&self, p: &[T; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn union(&self, other: &Self) -> Self {
        Bounds {
            min: [0, 1, 2].map(|a| self.min[a].min(other.min[a])),
            max: [0, 1, 2].map(|a| self.max[a].max(other.max[a])),
        }
    }
}

/// Integer voxel coordinate of a point: frame plus cell index per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelCoord {
    pub batch: u64,
    pub cell: [u64; 3],
}

/// A regular voxel grid over `[min_r, max_r]`, replicated per frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelGridSpec<T> {
    voxel_size: T,
    min_r: [T; 3],
    max_r: [T; 3],
    axis_counts: [u64; 3],
    batch_count: u64,
}

const KEY_SPACE_LIMIT: u128 = 1 << 63;

impl<T: Scalar> VoxelGridSpec<T> {
    /// Builds a grid over explicit bounds. Requires `max > min` on every axis.
    pub fn new(voxel_size: T, bounds: Bounds<T>, batch_count: usize) -> Result<Self> {
        if !(voxel_size > T::zero()) || !voxel_size.is_finite() {
            return Err(Error::InvalidVoxelSize(voxel_size.as_f64()));
        }
        if batch_count == 0 {
            return Err(Error::InvalidBounds(
                "batch_count must be at least 1".into(),
            ));
        }
        for a in 0..3 {
            let (lo, hi) = (bounds.min[a], bounds.max[a]);
            if !lo.is_finite() || !hi.is_finite() || !(hi > lo) {
                return Err(Error::InvalidBounds(format!(
                    "axis {a}: max {hi} must exceed min {lo}"
                )));
            }
        }
        let raw_counts = [0, 1, 2].map(|a| {
            ((bounds.max[a] - bounds.min[a]) / voxel_size)
                .ceil()
                .as_f64()
                .max(1.0)
        });
        let overflow = || Error::KeySpaceOverflow {
            batch_count: batch_count as u64,
            axis_counts: raw_counts,
        };
        let mut axis_counts = [0u64; 3];
        let mut total = batch_count as u128;
        for a in 0..3 {
            if !(raw_counts[a] < KEY_SPACE_LIMIT as f64) {
                return Err(overflow());
            }
            axis_counts[a] = raw_counts[a] as u64;
            total = total.saturating_mul(axis_counts[a] as u128);
        }
        if total > KEY_SPACE_LIMIT {
            return Err(overflow());
        }
        Ok(Self {
            voxel_size,
            min_r: bounds.min,
            max_r: bounds.max,
            axis_counts,
            batch_count: batch_count as u64,
        })
    }

    /// Same bounds and batch count, different voxel size.
    pub fn with_voxel_size(&self, voxel_size: T) -> Result<Self> {
        Self::new(voxel_size, self.bounds(), self.batch_count as usize)
    }

    pub fn voxel_size(&self) -> T {
        self.voxel_size
    }

    pub fn min_r(&self) -> [T; 3] {
        self.min_r
    }

    pub fn max_r(&self) -> [T; 3] {
        self.max_r
    }

    pub fn bounds(&self) -> Bounds<T> {
        Bounds {
            min: self.min_r,
            max: self.max_r,
        }
    }

    pub fn axis_counts(&self) -> [u64; 3] {
        self.axis_counts
    }

    pub fn batch_count(&self) -> u64 {
        self.batch_count
    }

    /// Number of voxels in one frame.
    pub fn voxels_per_frame(&self) -> u64 {
        self.axis_counts.iter().product()
    }

    /// Voxel of point `p` in frame `batch`. Points on `max_r` fall into the
    /// last voxel; points outside `[min_r, max_r]` yield `None`.
    #[inline]
    pub fn voxel_of(&self, batch: u64, p: &[T; 3]) -> Option<VoxelCoord> {
        let mut cell = [0u64; 3];
        for a in 0..3 {
            if !(p[a] >= self.min_r[a] && p[a] <= self.max_r[a]) {
                return None;
            }
            let v = ((p[a] - self.min_r[a]) / self.voxel_size).floor();
            let v = v.to_u64().unwrap_or(u64::MAX);
            cell[a] = v.min(self.axis_counts[a] - 1);
        }
        Some(VoxelCoord { batch, cell })
    }

    /// `b*Nx*Ny*Nz + x*Ny*Nz + y*Nz + z`.
    #[inline]
    pub fn flatten(&self, v: &VoxelCoord) -> u64 {
        let [nx, ny, nz] = self.axis_counts;
        debug_assert!(v.batch < self.batch_count);
        debug_assert!(v.cell[0] < nx && v.cell[1] < ny && v.cell[2] < nz);
        ((v.batch * nx + v.cell[0]) * ny + v.cell[1]) * nz + v.cell[2]
    }

    /// Inverse of [`flatten`](Self::flatten).
    #[inline]
    pub fn unflatten(&self, key: u64) -> VoxelCoord {
        let [nx, ny, nz] = self.axis_counts;
        let z = key % nz;
        let rest = key / nz;
        let y = rest % ny;
        let rest = rest / ny;
        let x = rest % nx;
        VoxelCoord {
            batch: rest / nx,
            cell: [x, y, z],
        }
    }

    /// Lower corner of a voxel.
    pub fn voxel_origin(&self, v: &VoxelCoord) -> [T; 3] {
        [0, 1, 2].map(|a| self.min_r[a] + T::of(v.cell[a] as f64) * self.voxel_size)
    }
}

/// Grid covering `batch` with the given voxel size.
///
/// Bounds are the batch extrema expanded by `padding`. An axis with zero
/// extent is widened to one voxel so the grid stays well-formed.
pub fn grid_from_batch<T: Scalar>(
    batch: &PointBatch<T>,
    voxel_size: T,
    padding: T,
) -> Result<VoxelGridSpec<T>> {
    if !(voxel_size > T::zero()) || !voxel_size.is_finite() {
        return Err(Error::InvalidVoxelSize(voxel_size.as_f64()));
    }
    if !(padding >= T::zero()) || !padding.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "padding must be >= 0, got {padding}"
        )));
    }
    let bounds = widen_degenerate(batch.bounds().padded(padding), voxel_size);
    VoxelGridSpec::new(voxel_size, bounds, batch.batch_count())
}

pub(crate) fn widen_degenerate<T: Scalar>(mut b: Bounds<T>, voxel_size: T) -> Bounds<T> {
    for a in 0..3 {
        if !(b.max[a] > b.min[a]) {
            b.max[a] = b.min[a] + voxel_size;
        }
    }
    b
}

/// Per-point dense group ids plus the flattened voxel keys they came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupAssignment {
    pub(crate) group_id: Vec<usize>,
    pub(crate) group_count: usize,
    pub(crate) key: Vec<u64>,
}

impl GroupAssignment {
    pub fn group_ids(&self) -> &[usize] {
        &self.group_id
    }

    pub fn group_count(&self) -> usize {
        self.group_count
    }

    pub fn keys(&self) -> &[u64] {
        &self.key
    }

    pub fn len(&self) -> usize {
        self.group_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.group_id.is_empty()
    }

    /// Key of each group, indexed by group id (ascending).
    pub fn group_keys(&self) -> Vec<u64> {
        let mut out = vec![0u64; self.group_count];
        for (g, k) in self.group_id.iter().zip(&self.key) {
            out[*g] = *k;
        }
        out
    }
}

/// Flat list of `(neighbor, center)` pairs produced by the inter-voxel query.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NeighborTable {
    pub(crate) nbr_indices: Vec<usize>,
    pub(crate) inter_gid: Vec<usize>,
    pub(crate) center_count: usize,
}

impl NeighborTable {
    pub fn nbr_indices(&self) -> &[usize] {
        &self.nbr_indices
    }

    pub fn inter_gid(&self) -> &[usize] {
        &self.inter_gid
    }

    pub fn entry_count(&self) -> usize {
        self.nbr_indices.len()
    }

    /// Number of center voxels `M`.
    pub fn center_count(&self) -> usize {
        self.center_count
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.inter_gid
            .iter()
            .copied()
            .zip(self.nbr_indices.iter().copied())
    }
}
