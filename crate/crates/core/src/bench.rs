//! Latency harness comparing voxel queries against FPS and brute-force KNN.
//!
//! Each size gets a uniform-cube cloud. FPS and the intra-voxel query both
//! downsample by the configured ratio (4 by default); KNN and the
//! inter-voxel query then search neighbors on the downsampled cloud.

use std::fmt;
use std::hint::black_box;
use std::str::FromStr;
use std::time::Instant;

use crate::baselines::{farthest_point_sample, knn_search};
use crate::dataset::{SynthKind, SynthSpec};
use crate::error::{Error, Result};
use crate::sampling::centroid_sample;
use crate::types::{grid_from_batch, PointBatch, VoxelCoord, VoxelGridSpec};
use crate::vam::{calibrate_layer, ConvergenceMode, VamConfig};
use crate::voxel::{intra_voxel_query, neighbors_of_voxels, unflatten_1d_to_3d};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Fps,
    Knn,
    Intra,
    Inter,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Fps, Method::Knn, Method::Intra, Method::Inter];

    pub fn name(self) -> &'static str {
        match self {
            Method::Fps => "fps",
            Method::Knn => "knn",
            Method::Intra => "intra",
            Method::Inter => "inter",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::InvalidConfig(format!("unknown method {s:?} (fps, knn, intra, inter)"))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyStats {
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
    pub runs: usize,
}

/// Linear-interpolated quantile of sorted samples.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of no samples");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Runs `f` `warmup` times untimed, then `repeats` timed runs on the
/// monotonic clock.
pub fn time_runs<F: FnMut()>(warmup: usize, repeats: usize, mut f: F) -> LatencyStats {
    assert!(repeats > 0, "at least one timed run");
    for _ in 0..warmup {
        f();
    }
    let mut samples: Vec<f64> = (0..repeats)
        .map(|_| {
            let start = Instant::now();
            f();
            start.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    samples.sort_by(f64::total_cmp);
    LatencyStats {
        median_ms: quantile(&samples, 0.5),
        p10_ms: quantile(&samples, 0.1),
        p90_ms: quantile(&samples, 0.9),
        runs: repeats,
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchConfig {
    pub warmup: usize,
    pub repeats: usize,
    pub seed: u64,
    /// Downsampling ratio for FPS and the intra-voxel query.
    pub ratio: f64,
    pub nbr_size: usize,
    /// Neighbors per query for KNN.
    pub knn_k: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            warmup: 10,
            repeats: 100,
            seed: 0,
            ratio: 4.0,
            nbr_size: 3,
            knn_k: 27,
        }
    }
}

/// Inputs shared by all methods at one point count.
#[derive(Debug, Clone)]
pub struct Workload {
    pub cloud: PointBatch<f64>,
    pub voxel_size: f64,
    pub grid: VoxelGridSpec<f64>,
    /// Centroids of the intra-voxel query at `voxel_size`.
    pub sampled: PointBatch<f64>,
    pub sampled_voxels: Vec<VoxelCoord>,
}

impl Workload {
    /// Uniform cube of `n` points; the voxel size is calibrated until the
    /// intra-voxel query downsamples by `config.ratio` within 0.5%.
    pub fn new(n: usize, config: &BenchConfig) -> Result<Self> {
        let spec = SynthSpec::new(SynthKind::UniformCube, 1, n, config.seed)?;
        let cloud: PointBatch<f64> = spec.frame(0);
        let frames = vec![cloud.clone()];
        let vam = VamConfig {
            epsilon: 5e-3,
            mode: ConvergenceMode::Relative,
            max_iterations: 200,
            ..VamConfig::new(config.ratio, (config.ratio / n as f64).cbrt())
        };
        let calibration = calibrate_layer(&frames, &vam)?;
        if !calibration.converged {
            log::warn!(
                "workload n={n}: ratio {} after calibration (target {})",
                calibration.achieved_ratio,
                config.ratio
            );
        }
        let voxel_size = calibration.voxel_size;
        let grid = grid_from_batch(&cloud, voxel_size, 0.0)?;
        let assignment = intra_voxel_query(&cloud, &grid)?;
        let sampled = centroid_sample(&cloud, &assignment)?;
        let sampled_voxels = unflatten_1d_to_3d(&assignment.group_keys(), &grid);
        Ok(Self {
            cloud,
            voxel_size,
            grid,
            sampled,
            sampled_voxels,
        })
    }

    pub fn fps_target(&self, config: &BenchConfig) -> usize {
        ((self.cloud.count() as f64 / config.ratio).round() as usize).clamp(1, self.cloud.count())
    }

    /// Runs one method once. Results are passed through `black_box`.
    pub fn run(&self, method: Method, config: &BenchConfig) -> Result<()> {
        match method {
            Method::Fps => {
                black_box(farthest_point_sample(
                    &self.cloud,
                    self.fps_target(config),
                    0,
                )?);
            }
            Method::Intra => {
                let grid = grid_from_batch(&self.cloud, self.voxel_size, 0.0)?;
                black_box(intra_voxel_query(&self.cloud, &grid)?);
            }
            Method::Knn => {
                let k = config.knn_k.min(self.sampled.count());
                black_box(knn_search(&self.sampled, &self.sampled, k)?);
            }
            Method::Inter => {
                black_box(neighbors_of_voxels(
                    &self.sampled_voxels,
                    &self.grid,
                    config.nbr_size,
                )?);
            }
        }
        Ok(())
    }

    pub fn time(&self, method: Method, config: &BenchConfig) -> Result<LatencyStats> {
        self.run(method, config)?;
        Ok(time_runs(config.warmup, config.repeats, || {
            self.run(method, config)
                .expect("validated by the first run")
        }))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub method: Method,
    pub n: usize,
    pub stats: LatencyStats,
}

/// Times every method at every size. Sizes must be strictly ascending.
pub fn run_benchmarks(
    sizes: &[usize],
    methods: &[Method],
    config: &BenchConfig,
) -> Result<Vec<BenchRow>> {
    if sizes.is_empty() || sizes.windows(2).any(|w| w[1] <= w[0]) || sizes[0] == 0 {
        return Err(Error::InvalidConfig(
            "sizes must be positive and strictly ascending".into(),
        ));
    }
    if config.repeats == 0 {
        return Err(Error::InvalidConfig("repeats must be at least 1".into()));
    }
    let mut rows = Vec::new();
    for &n in sizes {
        let workload = Workload::new(n, config)?;
        for &method in methods {
            let stats = workload.time(method, config)?;
            log::info!("{method} n={n} median={:.3}ms", stats.median_ms);
            rows.push(BenchRow { method, n, stats });
        }
    }
    Ok(rows)
}
