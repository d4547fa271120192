//! Voxel-based adaptive downsampling for batched point clouds.
//!
//! Points are grouped by the voxel they fall in (intra-voxel query), each
//! group is reduced to its centroid, and centroids find their neighbors by
//! hashing the surrounding voxels (inter-voxel query). Voxel sizes for a
//! target downsampling ratio are found by a PI controller over a dataset.
//!
//! Everything is generic over `f32`/`f64` through [`Scalar`]; the aliases
//! below fix the precision.

// `!(x > 0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod baselines;
pub mod bench;
pub mod dataset;
pub mod error;
pub mod io;
pub mod sampling;
pub mod scalar;
pub mod segment;
pub mod types;
pub mod vam;
pub mod voxel;

pub use baselines::{farthest_point_sample, knn_search, FpsResult, KnnResult};
pub use dataset::{synth_dataset, DatasetManifest, FrameSource, FrameSpec, SynthKind, SynthSpec};
pub use error::{Error, Result};
pub use io::{load_ply, load_points, load_xyz, save_xyz, write_ply, write_xyz};
pub use sampling::{
    centroid_sample, inter_aggregate, intra_aggregate, run_cascade, FeatureTransform, FnTransform,
    Identity, InitialFeatures, Linear, SampledLayer,
};
pub use scalar::Scalar;
pub use segment::{
    gather, scatter_reduce, segment_max, segment_mean, segment_sum, ReduceMode, Reduction,
    SegmentIndex,
};
pub use types::{
    grid_from_batch, validate_batch, Bounds, GroupAssignment, NeighborTable, PointBatch, RawPoint,
    VoxelCoord, VoxelGridSpec,
};
pub use vam::{
    calibrate_cascade, calibrate_layer, measure_ratio, vam_step, CalibrationResult,
    ConvergenceMode, LayerCalibration, Schedule, ScheduleEntry, VamConfig, VamState,
};
pub use voxel::{
    assign_groups, build_hash_table, flatten_3d_to_1d, generate_local_offsets, inter_voxel_query,
    intra_voxel_query, neighbors_of_voxels, unflatten_1d_to_3d, voxel_coords_3d, VoxelHashTable,
    DEFAULT_NBR_SIZE,
};

pub type PointBatchF32 = PointBatch<f32>;
pub type PointBatchF64 = PointBatch<f64>;
pub type BoundsF32 = Bounds<f32>;
pub type BoundsF64 = Bounds<f64>;
pub type VoxelGridSpecF32 = VoxelGridSpec<f32>;
pub type VoxelGridSpecF64 = VoxelGridSpec<f64>;
pub type VamConfigF32 = VamConfig<f32>;
pub type VamConfigF64 = VamConfig<f64>;
pub type SampledLayerF32 = SampledLayer<f32>;
pub type SampledLayerF64 = SampledLayer<f64>;
