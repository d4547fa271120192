//! Voxel centroid sampling and the intra/inter-voxel feature aggregation
//! pipelines, composable into multi-layer cascades.

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::segment::{gather, segment_max, segment_mean, segment_sum, SegmentIndex};
use crate::types::{grid_from_batch, GroupAssignment, NeighborTable, PointBatch, VoxelGridSpec};
use crate::voxel::{intra_voxel_query, neighbors_of_voxels, unflatten_1d_to_3d};

/// Row-wise feature map applied before pooling.
///
/// Implementations must be pure and keep the row count; the output width is
/// free.
pub trait FeatureTransform<T>: Sync {
    fn apply(&self, input: ArrayView2<T>) -> Result<Array2<T>>;
}

/// Passes features through unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct Identity;

impl<T: Scalar> FeatureTransform<T> for Identity {
    fn apply(&self, input: ArrayView2<T>) -> Result<Array2<T>> {
        Ok(input.to_owned())
    }
}

/// `x W + b` with a fixed `D x D'` weight.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    weight: Array2<T>,
    bias: Option<Array1<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(weight: Array2<T>, bias: Option<Array1<T>>) -> Result<Self> {
        if let Some(b) = &bias {
            if b.len() != weight.ncols() {
                return Err(Error::ShapeMismatch(format!(
                    "bias of length {} for {} outputs",
                    b.len(),
                    weight.ncols()
                )));
            }
        }
        Ok(Self { weight, bias })
    }

    pub fn input_width(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_width(&self) -> usize {
        self.weight.ncols()
    }

    pub fn weight(&self) -> &Array2<T> {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Array1<T>> {
        self.bias.as_ref()
    }
}

impl<T: Scalar> FeatureTransform<T> for Linear<T> {
    fn apply(&self, input: ArrayView2<T>) -> Result<Array2<T>> {
        if input.ncols() != self.weight.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "linear transform expects width {}, got {}",
                self.weight.nrows(),
                input.ncols()
            )));
        }
        let (n, d_out) = (input.nrows(), self.weight.ncols());
        let mut out = Array2::from_elem((n, d_out), T::zero());
        for (i, row) in input.outer_iter().enumerate() {
            for j in 0..d_out {
                let mut acc = self.bias.as_ref().map_or(T::zero(), |b| b[j]);
                for (k, x) in row.iter().enumerate() {
                    acc = acc + *x * self.weight[[k, j]];
                }
                out[[i, j]] = acc;
            }
        }
        Ok(out)
    }
}

/// Wraps a closure as a transform.
pub struct FnTransform<F>(pub F);

impl<T, F> FeatureTransform<T> for FnTransform<F>
where
    F: Fn(ArrayView2<T>) -> Array2<T> + Sync,
{
    fn apply(&self, input: ArrayView2<T>) -> Result<Array2<T>> {
        Ok((self.0)(input))
    }
}

/// Features used for points that carry none.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum InitialFeatures {
    /// The xyz coordinates.
    #[default]
    Coordinates,
    /// A single constant-one column.
    Ones,
}

impl InitialFeatures {
    pub fn for_batch<T: Scalar>(self, batch: &PointBatch<T>) -> Array2<T> {
        match batch.features() {
            Some(f) => f.clone(),
            None => match self {
                InitialFeatures::Coordinates => batch.coord_matrix(),
                InitialFeatures::Ones => Array2::from_elem((batch.count(), 1), T::one()),
            },
        }
    }
}

fn apply_checked<T: Scalar>(
    transform: &dyn FeatureTransform<T>,
    input: ArrayView2<T>,
) -> Result<Array2<T>> {
    let expected = input.nrows();
    let out = transform.apply(input)?;
    if out.nrows() != expected {
        return Err(Error::TransformRowCountMismatch {
            expected,
            got: out.nrows(),
        });
    }
    Ok(out)
}

fn check_assignment<T: Scalar>(
    batch: &PointBatch<T>,
    assignment: &GroupAssignment,
) -> Result<SegmentIndex> {
    if assignment.len() != batch.count() {
        return Err(Error::ShapeMismatch(format!(
            "assignment covers {} points, batch has {}",
            assignment.len(),
            batch.count()
        )));
    }
    SegmentIndex::new(assignment.group_ids(), assignment.group_count())
}

/// Replaces the points of every group by their coordinate mean.
///
/// Output row `g` is group `g`, so centroids come out ordered by voxel key.
pub fn centroid_sample<T: Scalar>(
    batch: &PointBatch<T>,
    assignment: &GroupAssignment,
) -> Result<PointBatch<T>> {
    let index = check_assignment(batch, assignment)?;
    centroids_with_index(batch, &index)
}

fn centroids_with_index<T: Scalar>(
    batch: &PointBatch<T>,
    index: &SegmentIndex,
) -> Result<PointBatch<T>> {
    let means = segment_mean(batch.coord_matrix().view(), index);
    let coords = means.outer_iter().map(|r| [r[0], r[1], r[2]]).collect();
    let batch_id = (0..index.segment_count())
        .map(|g| batch.batch_ids()[index.rows_of(g)[0]])
        .collect();
    PointBatch::from_parts(batch_id, coords, None)
}

/// Offset of every point from its group centroid, concatenated after the
/// point features, mapped by `transform` and max-pooled per group.
///
/// Input features come from the batch, or from `init` when it has none.
pub fn intra_aggregate<T: Scalar>(
    batch: &PointBatch<T>,
    assignment: &GroupAssignment,
    centroids: &PointBatch<T>,
    transform: &dyn FeatureTransform<T>,
    init: InitialFeatures,
) -> Result<Array2<T>> {
    let index = check_assignment(batch, assignment)?;
    if centroids.count() != assignment.group_count() {
        return Err(Error::ShapeMismatch(format!(
            "{} centroids for {} groups",
            centroids.count(),
            assignment.group_count()
        )));
    }
    intra_with_index(
        batch,
        assignment.group_ids(),
        &index,
        centroids,
        transform,
        init,
    )
}

fn intra_with_index<T: Scalar>(
    batch: &PointBatch<T>,
    group_id: &[usize],
    index: &SegmentIndex,
    centroids: &PointBatch<T>,
    transform: &dyn FeatureTransform<T>,
    init: InitialFeatures,
) -> Result<Array2<T>> {
    let features = init.for_batch(batch);
    let center = gather(&centroids.coord_matrix(), group_id)?;
    let offsets = batch.coord_matrix() - center;
    let input = concatenate![Axis(1), features, offsets];
    let mapped = apply_checked(transform, input.view())?;
    Ok(segment_max(mapped.view(), index).0)
}

/// Sums `transform(F_nbr ++ (P_nbr - P_center))` over each center's
/// neighbor pairs.
pub fn inter_aggregate<T: Scalar>(
    points: &PointBatch<T>,
    features: ArrayView2<T>,
    table: &NeighborTable,
    transform: &dyn FeatureTransform<T>,
) -> Result<Array2<T>> {
    let m = points.count();
    if features.nrows() != m || table.center_count() != m {
        return Err(Error::ShapeMismatch(format!(
            "{m} points, {} feature rows, {} table centers",
            features.nrows(),
            table.center_count()
        )));
    }
    let coords = points.coord_matrix();
    let f_nbr = gather(&features.to_owned(), table.nbr_indices())?;
    let p_nbr = gather(&coords, table.nbr_indices())?;
    let p_center = gather(&coords, table.inter_gid())?;
    let input = concatenate![Axis(1), f_nbr, p_nbr - p_center];
    let mapped = apply_checked(transform, input.view())?;
    let index = SegmentIndex::new(table.inter_gid(), m)?;
    Ok(segment_sum(mapped.view(), &index))
}

/// One downsampling layer.
#[derive(Debug, Clone)]
pub struct SampledLayer<T> {
    /// Centroids, one per non-empty voxel, in key order.
    pub points: PointBatch<T>,
    /// Max-pooled intra-voxel features.
    pub intra_features: Array2<T>,
    /// Neighbor-aggregated features; the layer's output.
    pub features: Array2<T>,
    /// Parent points to centroid rows.
    pub assignment: GroupAssignment,
    pub neighbors: NeighborTable,
    pub grid: VoxelGridSpec<T>,
}

impl<T: Scalar> SampledLayer<T> {
    /// Runs intra query, centroid sampling, intra aggregation, the
    /// inter-voxel query and inter aggregation on one grid.
    ///
    /// Neighbor voxels come from the group keys rather than re-flooring the
    /// centroids, so a centroid rounding onto a voxel face cannot move it.
    pub fn build(
        batch: &PointBatch<T>,
        grid: VoxelGridSpec<T>,
        nbr_size: usize,
        transform: &dyn FeatureTransform<T>,
        init: InitialFeatures,
    ) -> Result<Self> {
        let assignment = intra_voxel_query(batch, &grid)?;
        let index = SegmentIndex::new(assignment.group_ids(), assignment.group_count())?;
        let points = centroids_with_index(batch, &index)?;
        let intra_features = intra_with_index(
            batch,
            assignment.group_ids(),
            &index,
            &points,
            transform,
            init,
        )?;
        let voxels = unflatten_1d_to_3d(&assignment.group_keys(), &grid);
        let neighbors = neighbors_of_voxels(&voxels, &grid, nbr_size)?;
        let features = inter_aggregate(&points, intra_features.view(), &neighbors, transform)?;
        Ok(Self {
            points,
            intra_features,
            features,
            assignment,
            neighbors,
            grid,
        })
    }
}

/// Samples `batch` through successive voxel sizes.
///
/// Every layer's grid shares the bounds of layer 0 (the input extrema) and
/// consumes the previous layer's centroids and output features.
pub fn run_cascade<T: Scalar>(
    batch: &PointBatch<T>,
    layer_sizes: &[T],
    nbr_size: usize,
    transform: &dyn FeatureTransform<T>,
    init: InitialFeatures,
) -> Result<Vec<SampledLayer<T>>> {
    let first = *layer_sizes
        .first()
        .ok_or_else(|| Error::InvalidConfig("cascade needs at least one layer".into()))?;
    if let Some(s) = layer_sizes
        .iter()
        .find(|s| !(**s > T::zero()) || !s.is_finite())
    {
        return Err(Error::InvalidVoxelSize(s.as_f64()));
    }
    let base = grid_from_batch(batch, first, T::zero())?;
    let mut layers: Vec<SampledLayer<T>> = Vec::with_capacity(layer_sizes.len());
    for (k, &size) in layer_sizes.iter().enumerate() {
        let grid = base.with_voxel_size(size)?;
        let layer = match layers.last() {
            None => SampledLayer::build(batch, grid, nbr_size, transform, init)?,
            Some(prev) => {
                let input = prev
                    .points
                    .clone()
                    .with_features(Some(prev.features.clone()))?;
                SampledLayer::build(&input, grid, nbr_size, transform, init)?
            }
        };
        if layer.points.count() == 0 {
            return Err(Error::EmptyLayer(k));
        }
        layers.push(layer);
    }
    Ok(layers)
}
