//! Voxel size calibration by PI control on the dataset-wide downsampling
//! ratio.
//!
//! The voxel size is `v0 * exp(scale)`. Each iteration measures the ratio
//! `N_i / N_s` over the whole dataset (one epoch), forms
//! `err = ref_ratio - ratio`, accumulates it, and moves `scale` by
//! `i_r * (sigmoid(k_p * err + k_i * sum_err) - 0.5)`.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::dataset::FrameSource;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::types::{widen_degenerate, Bounds, PointBatch, VoxelGridSpec};
use crate::voxel::{intra_voxel_query, occupied_voxel_count};

/// How `epsilon` is compared against `err`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum ConvergenceMode {
    /// `|err| < epsilon`.
    #[default]
    Absolute,
    /// `|err| < epsilon * ref_ratio`.
    Relative,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VamConfig<T> {
    pub ref_ratio: T,
    /// Voxel size at `scale = 0`.
    pub v0: T,
    /// Step gain on the sigmoid output.
    pub i_r: T,
    pub k_p: T,
    pub k_i: T,
    pub epsilon: T,
    pub mode: ConvergenceMode,
    pub max_iterations: usize,
    /// Anti-windup bound on `|sum_err|`.
    pub integral_limit: T,
    /// Measure every `frame_stride`-th frame only. 1 uses the whole dataset.
    pub frame_stride: usize,
}

impl<T: Scalar> VamConfig<T> {
    pub const DEFAULT_K_P: f64 = 1.0;
    pub const DEFAULT_K_I: f64 = 0.1;
    /// Larger gains oscillate around ratios where the slope of ratio against
    /// scale spikes, which happens when the extent is close to a whole number
    /// of voxels.
    pub const DEFAULT_I_R: f64 = 0.1;
    pub const DEFAULT_EPSILON: f64 = 1e-3;
    pub const DEFAULT_MAX_ITERATIONS: usize = 500;
    pub const DEFAULT_INTEGRAL_LIMIT: f64 = 100.0;

    pub fn new(ref_ratio: T, v0: T) -> Self {
        Self {
            ref_ratio,
            v0,
            i_r: T::of(Self::DEFAULT_I_R),
            k_p: T::of(Self::DEFAULT_K_P),
            k_i: T::of(Self::DEFAULT_K_I),
            epsilon: T::of(Self::DEFAULT_EPSILON),
            mode: ConvergenceMode::Absolute,
            max_iterations: Self::DEFAULT_MAX_ITERATIONS,
            integral_limit: T::of(Self::DEFAULT_INTEGRAL_LIMIT),
            frame_stride: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.ref_ratio > T::one()) || !self.ref_ratio.is_finite() {
            return bad(format!("ref_ratio must exceed 1, got {}", self.ref_ratio));
        }
        if !(self.v0 > T::zero()) || !self.v0.is_finite() {
            return bad(format!("v0 must be positive, got {}", self.v0));
        }
        if !(self.i_r > T::zero()) || !self.i_r.is_finite() {
            return bad(format!("i_r must be positive, got {}", self.i_r));
        }
        if !(self.epsilon > T::zero()) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !self.k_p.is_finite() || !self.k_i.is_finite() {
            return bad("gains must be finite".into());
        }
        if !(self.integral_limit > T::zero()) {
            return bad("integral_limit must be positive".into());
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be at least 1".into());
        }
        if self.frame_stride == 0 {
            return bad("frame_stride must be at least 1".into());
        }
        Ok(())
    }

    pub fn is_converged(&self, err: T) -> bool {
        match self.mode {
            ConvergenceMode::Absolute => err.abs() < self.epsilon,
            ConvergenceMode::Relative => err.abs() < self.epsilon * self.ref_ratio,
        }
    }

    pub fn voxel_size(&self, scale: T) -> T {
        self.v0 * scale.exp()
    }
}

/// One calibration epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord<T> {
    /// Scale the ratio was measured at.
    pub scale: T,
    pub voxel_size: T,
    pub ratio: T,
    pub err: T,
    /// Scale after the update (equal to `scale` on the converged epoch).
    pub next_scale: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VamState<T> {
    pub scale: T,
    pub err_integral: T,
    pub iteration: usize,
    pub history: Vec<IterationRecord<T>>,
}

impl<T: Scalar> Default for VamState<T> {
    fn default() -> Self {
        Self {
            scale: T::zero(),
            err_integral: T::zero(),
            iteration: 0,
            history: Vec::new(),
        }
    }
}

impl<T: Scalar> VamState<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a measurement without moving the scale.
    fn observe(&mut self, config: &VamConfig<T>, ratio: T) {
        self.history.push(IterationRecord {
            scale: self.scale,
            voxel_size: config.voxel_size(self.scale),
            ratio,
            err: config.ref_ratio - ratio,
            next_scale: self.scale,
        });
        self.iteration += 1;
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// One PI update from a measured ratio.
pub fn vam_step<T: Scalar>(
    mut state: VamState<T>,
    config: &VamConfig<T>,
    achieved_ratio: T,
) -> VamState<T> {
    let err = config.ref_ratio - achieved_ratio;
    let limit = config.integral_limit;
    state.err_integral = (state.err_integral + err).max(-limit).min(limit);
    let diff = config.k_p * err + config.k_i * state.err_integral;
    let next = state.scale + config.i_r * (sigmoid(diff) - T::of(0.5));
    state.history.push(IterationRecord {
        scale: state.scale,
        voxel_size: config.voxel_size(state.scale),
        ratio: achieved_ratio,
        err,
        next_scale: next,
    });
    state.scale = next;
    state.iteration += 1;
    state
}

/// Dataset totals at one voxel size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioMeasurement<T> {
    pub input_points: u64,
    pub sampled_points: u64,
    pub ratio: T,
}

/// `N_i / N_s` over every frame of `dataset`, each frame voxelized on its
/// own bounds.
pub fn measure_ratio<T: Scalar>(
    dataset: &dyn FrameSource<T>,
    voxel_size: T,
) -> Result<RatioMeasurement<T>> {
    measure_frames(dataset, None, voxel_size, 1)
}

fn measure_frames<T: Scalar>(
    dataset: &dyn FrameSource<T>,
    bounds: Option<&[Bounds<T>]>,
    voxel_size: T,
    stride: usize,
) -> Result<RatioMeasurement<T>> {
    let n = dataset.frame_count();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let per_frame: Vec<Result<(u64, u64)>> = (0..n)
        .into_par_iter()
        .step_by(stride)
        .map(|i| {
            let frame = dataset.load_frame(i)?;
            let frame_bounds = bounds.map_or_else(|| frame.bounds(), |b| b[i]);
            let grid = VoxelGridSpec::new(
                voxel_size,
                widen_degenerate(frame_bounds, voxel_size),
                frame.batch_count(),
            )?;
            let occupied = occupied_voxel_count(&frame, &grid)?;
            Ok((frame.count() as u64, occupied as u64))
        })
        .collect();
    let (mut input_points, mut sampled_points) = (0u64, 0u64);
    for r in per_frame {
        let (ni, ns) = r?;
        input_points += ni;
        sampled_points += ns;
    }
    Ok(RatioMeasurement {
        input_points,
        sampled_points,
        ratio: T::of(input_points as f64) / T::of(sampled_points as f64),
    })
}

/// Result of calibrating one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCalibration<T> {
    /// Size of the last measured epoch.
    pub voxel_size: T,
    pub achieved_ratio: T,
    pub converged: bool,
    pub state: VamState<T>,
}

impl<T: Scalar> LayerCalibration<T> {
    pub fn final_err(&self) -> T {
        self.state.history.last().map_or(T::nan(), |r| r.err)
    }
}

/// Iterates measure + PI update until `|err|` passes the convergence test
/// or `max_iterations` epochs have run.
///
/// The returned size is the one whose measurement satisfied the test (or
/// the last one measured), never an untested post-update size.
pub fn calibrate_layer<T: Scalar>(
    dataset: &dyn FrameSource<T>,
    config: &VamConfig<T>,
) -> Result<LayerCalibration<T>> {
    calibrate_with_bounds(dataset, None, config)
}

fn calibrate_with_bounds<T: Scalar>(
    dataset: &dyn FrameSource<T>,
    bounds: Option<&[Bounds<T>]>,
    config: &VamConfig<T>,
) -> Result<LayerCalibration<T>> {
    config.validate()?;
    let mut state = VamState::new();
    loop {
        let size = config.voxel_size(state.scale);
        let ratio = measure_frames(dataset, bounds, size, config.frame_stride)?.ratio;
        let converged = config.is_converged(config.ref_ratio - ratio);
        let last = state.iteration + 1 >= config.max_iterations;
        if converged || last {
            state.observe(config, ratio);
            log::debug!(
                "calibration stopped at epoch {} size {size} ratio {ratio}",
                state.iteration
            );
            return Ok(LayerCalibration {
                voxel_size: size,
                achieved_ratio: ratio,
                converged,
                state,
            });
        }
        state = vam_step(state, config, ratio);
    }
}

/// Per-layer calibration results of a cascade.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult<T> {
    pub layers: Vec<LayerCalibration<T>>,
}

impl<T: Scalar> CalibrationResult<T> {
    pub fn voxel_sizes(&self) -> Vec<T> {
        self.layers.iter().map(|l| l.voxel_size).collect()
    }

    pub fn all_converged(&self) -> bool {
        self.layers.iter().all(|l| l.converged)
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            entries: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| ScheduleEntry {
                    layer: i,
                    voxel_size: l.voxel_size.as_f64(),
                    achieved_ratio: l.achieved_ratio.as_f64(),
                    converged: l.converged,
                })
                .collect(),
        }
    }
}

/// Calibrates layers in sequence: layer 0 on the raw frames, layer `k` on
/// the centroids produced by layer `k-1` at its calibrated size. Every
/// layer keeps the raw frame bounds as its grid bounds and starts from a
/// fresh state.
pub fn calibrate_cascade<T: Scalar>(
    dataset: &dyn FrameSource<T>,
    per_layer: &[VamConfig<T>],
) -> Result<CalibrationResult<T>> {
    if per_layer.is_empty() {
        return Err(Error::InvalidConfig(
            "cascade needs at least one layer".into(),
        ));
    }
    for c in per_layer {
        c.validate()?;
    }
    let mut layers = Vec::with_capacity(per_layer.len());
    let first = calibrate_layer(dataset, &per_layer[0])?;
    if per_layer.len() == 1 {
        layers.push(first);
        return Ok(CalibrationResult { layers });
    }

    let n = dataset.frame_count();
    let mut bounds = Vec::with_capacity(n);
    let mut frames = Vec::with_capacity(n);
    for i in 0..n {
        let frame = dataset.load_frame(i)?;
        let b = frame.bounds();
        frames.push(centroids_on(&frame, b, first.voxel_size)?);
        bounds.push(b);
    }
    layers.push(first);

    for (k, config) in per_layer.iter().enumerate().skip(1) {
        let layer = calibrate_with_bounds(&frames, Some(&bounds), config)?;
        if k + 1 < per_layer.len() {
            frames = frames
                .par_iter()
                .zip(bounds.par_iter())
                .map(|(f, b)| centroids_on(f, *b, layer.voxel_size))
                .collect::<Result<_>>()?;
        }
        layers.push(layer);
    }
    Ok(CalibrationResult { layers })
}

fn centroids_on<T: Scalar>(
    frame: &PointBatch<T>,
    bounds: Bounds<T>,
    size: T,
) -> Result<PointBatch<T>> {
    let grid = VoxelGridSpec::new(size, widen_degenerate(bounds, size), frame.batch_count())?;
    let assignment = intra_voxel_query(frame, &grid)?;
    crate::sampling::centroid_sample(frame, &assignment)
}

/// One line of a schedule file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleEntry {
    pub layer: usize,
    pub voxel_size: f64,
    pub achieved_ratio: f64,
    pub converged: bool,
}

/// Calibrated voxel sizes, stored as text:
/// `layer_index voxel_size achieved_ratio converged` per line, `#` comments.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Schedule {
    pub entries: Vec<ScheduleEntry>,
}

impl Schedule {
    pub const HEADER: &'static str = "# layer_index voxel_size achieved_ratio converged";

    pub fn voxel_sizes<T: Scalar>(&self) -> Vec<T> {
        self.entries.iter().map(|e| T::of(e.voxel_size)).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(Self::HEADER);
        out.push('\n');
        for e in &self.entries {
            writeln!(
                out,
                "{} {} {} {}",
                e.layer, e.voxel_size, e.achieved_ratio, e.converged
            )
            .unwrap();
        }
        out
    }

    /// Parses a schedule. Layers must be listed as `0, 1, 2, ...` with
    /// positive sizes.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Parse {
                line: line_no,
                message,
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(err(format!("expected 4 fields, found {}", fields.len())));
            }
            let layer: usize = fields[0]
                .parse()
                .map_err(|_| err(format!("bad layer index {:?}", fields[0])))?;
            let voxel_size: f64 = fields[1]
                .parse()
                .map_err(|_| err(format!("bad voxel size {:?}", fields[1])))?;
            let achieved_ratio: f64 = fields[2]
                .parse()
                .map_err(|_| err(format!("bad ratio {:?}", fields[2])))?;
            let converged: bool = fields[3]
                .parse()
                .map_err(|_| err(format!("bad converged flag {:?}", fields[3])))?;
            if layer != entries.len() {
                return Err(err(format!(
                    "expected layer {}, found {layer}",
                    entries.len()
                )));
            }
            if !(voxel_size > 0.0) || !voxel_size.is_finite() {
                return Err(err(format!(
                    "voxel size must be positive, got {voxel_size}"
                )));
            }
            entries.push(ScheduleEntry {
                layer,
                voxel_size,
                achieved_ratio,
                converged,
            });
        }
        if entries.is_empty() {
            return Err(Error::Parse {
                line: 0,
                message: "schedule has no layers".into(),
            });
        }
        Ok(Self { entries })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).at_path(path))?;
        Self::parse(&text).map_err(|e| e.at_path(path))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::from(e).at_path(path))
    }
}
