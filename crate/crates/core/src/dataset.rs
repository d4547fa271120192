//! Frame sources for calibration and benchmarks: in-memory frame lists,
//! line-oriented manifests, and deterministic synthetic generators.

use std::borrow::Cow;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::io::load_points;
use crate::scalar::Scalar;
use crate::types::PointBatch;

/// Random access to the frames of a dataset, in a fixed order.
pub trait FrameSource<T: Scalar>: Sync {
    fn frame_count(&self) -> usize;
    fn load_frame(&self, index: usize) -> Result<Cow<'_, PointBatch<T>>>;
}

impl<T: Scalar> FrameSource<T> for [PointBatch<T>] {
    fn frame_count(&self) -> usize {
        self.len()
    }

    fn load_frame(&self, index: usize) -> Result<Cow<'_, PointBatch<T>>> {
        Ok(Cow::Borrowed(&self[index]))
    }
}

impl<T: Scalar> FrameSource<T> for Vec<PointBatch<T>> {
    fn frame_count(&self) -> usize {
        self.len()
    }

    fn load_frame(&self, index: usize) -> Result<Cow<'_, PointBatch<T>>> {
        Ok(Cow::Borrowed(&self[index]))
    }
}

/// Shape of a synthetic point distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SynthKind {
    /// Uniform in `[0, 1)^3`.
    UniformCube,
    /// Isotropic Gaussian blobs with centers in `[0.15, 0.85]^3`.
    GaussianClusters { clusters: usize, sigma: f64 },
    /// Sensor at the origin; uniform range in `[r_min, r_max]` and uniform
    /// direction within +-15 degrees of elevation, so volume density falls
    /// off as `1/r^2`.
    RadialLidar { r_min: f64, r_max: f64 },
}

impl SynthKind {
    pub const DEFAULT_CLUSTERS: usize = 8;
    pub const DEFAULT_SIGMA: f64 = 0.05;
    pub const DEFAULT_R_MIN: f64 = 0.05;
    pub const DEFAULT_R_MAX: f64 = 1.0;
    const LIDAR_HALF_FOV: f64 = 15.0 * PI / 180.0;

    pub fn name(&self) -> &'static str {
        match self {
            SynthKind::UniformCube => "uniform_cube",
            SynthKind::GaussianClusters { .. } => "gaussian_clusters",
            SynthKind::RadialLidar { .. } => "radial_lidar",
        }
    }

    /// Kind with default parameters from its manifest name.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "uniform_cube" => Ok(SynthKind::UniformCube),
            "gaussian_clusters" => Ok(SynthKind::GaussianClusters {
                clusters: Self::DEFAULT_CLUSTERS,
                sigma: Self::DEFAULT_SIGMA,
            }),
            "radial_lidar" => Ok(SynthKind::RadialLidar {
                r_min: Self::DEFAULT_R_MIN,
                r_max: Self::DEFAULT_R_MAX,
            }),
            other => Err(Error::InvalidSpec(format!("unknown generator {other:?}"))),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            SynthKind::UniformCube => Ok(()),
            SynthKind::GaussianClusters { clusters, sigma } => {
                if clusters == 0 || !(sigma > 0.0) || !sigma.is_finite() {
                    return Err(Error::InvalidSpec(format!(
                        "gaussian_clusters needs clusters >= 1 and sigma > 0, got {clusters}, {sigma}"
                    )));
                }
                Ok(())
            }
            SynthKind::RadialLidar { r_min, r_max } => {
                if !(r_min > 0.0) || !(r_max > r_min) || !r_max.is_finite() {
                    return Err(Error::InvalidSpec(format!(
                        "radial_lidar needs 0 < r_min < r_max, got {r_min}, {r_max}"
                    )));
                }
                Ok(())
            }
        }
    }
}

/// A deterministic synthetic dataset: `frames` frames of `points_per_frame`
/// points, frame `i` drawn from ChaCha8 seeded with `seed` on stream `i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub frames: usize,
    pub points_per_frame: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(kind: SynthKind, frames: usize, points_per_frame: usize, seed: u64) -> Result<Self> {
        if frames == 0 || points_per_frame == 0 {
            return Err(Error::InvalidSpec(format!(
                "frames and points must be at least 1, got {frames} and {points_per_frame}"
            )));
        }
        kind.validate()?;
        Ok(Self {
            kind,
            frames,
            points_per_frame,
            seed,
        })
    }

    pub fn frame<T: Scalar>(&self, index: usize) -> PointBatch<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        let n = self.points_per_frame;
        let coords: Vec<[f64; 3]> = match self.kind {
            SynthKind::UniformCube => (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect(),
            SynthKind::GaussianClusters { clusters, sigma } => {
                let centers: Vec<[f64; 3]> = (0..clusters)
                    .map(|_| [0; 3].map(|_| rng.gen_range(0.15..=0.85)))
                    .collect();
                let noise = Normal::new(0.0, sigma).expect("sigma validated");
                (0..n)
                    .map(|_| {
                        let c = centers[rng.gen_range(0..clusters)];
                        c.map(|v| v + noise.sample(&mut rng))
                    })
                    .collect()
            }
            SynthKind::RadialLidar { r_min, r_max } => {
                let s = SynthKind::LIDAR_HALF_FOV.sin();
                (0..n)
                    .map(|_| {
                        let r = rng.gen_range(r_min..r_max);
                        let azimuth = rng.gen_range(0.0..2.0 * PI);
                        let sin_el: f64 = rng.gen_range(-s..s);
                        let cos_el = (1.0 - sin_el * sin_el).sqrt();
                        [
                            r * cos_el * azimuth.cos(),
                            r * cos_el * azimuth.sin(),
                            r * sin_el,
                        ]
                    })
                    .collect()
            }
        };
        let coords = coords.into_iter().map(|p| p.map(T::of)).collect();
        PointBatch::single_frame(coords).expect("generated points are finite and non-empty")
    }

    /// All frames, materialized.
    pub fn frames<T: Scalar>(&self) -> Vec<PointBatch<T>> {
        (0..self.frames).map(|i| self.frame(i)).collect()
    }

    fn to_line(self) -> String {
        let mut s = format!(
            "synth {} frames={} points={} seed={}",
            self.kind.name(),
            self.frames,
            self.points_per_frame,
            self.seed
        );
        match self.kind {
            SynthKind::UniformCube => {}
            SynthKind::GaussianClusters { clusters, sigma } => {
                write!(s, " clusters={clusters} sigma={sigma}").unwrap()
            }
            SynthKind::RadialLidar { r_min, r_max } => {
                write!(s, " r_min={r_min} r_max={r_max}").unwrap()
            }
        }
        s
    }

    fn parse_line(fields: &[&str]) -> Result<Self> {
        let kind_name = fields
            .first()
            .ok_or_else(|| Error::InvalidSpec("missing generator name".into()))?;
        let mut kind = SynthKind::from_name(kind_name)?;
        let (mut frames, mut points, mut seed) = (None, None, 0u64);
        for kv in &fields[1..] {
            let (key, value) = kv
                .split_once('=')
                .ok_or_else(|| Error::InvalidSpec(format!("expected key=value, got {kv:?}")))?;
            let bad = || Error::InvalidSpec(format!("bad value for {key}: {value:?}"));
            match (key, &mut kind) {
                ("frames", _) => frames = Some(value.parse().map_err(|_| bad())?),
                ("points", _) => points = Some(value.parse().map_err(|_| bad())?),
                ("seed", _) => seed = value.parse().map_err(|_| bad())?,
                ("clusters", SynthKind::GaussianClusters { clusters, .. }) => {
                    *clusters = value.parse().map_err(|_| bad())?
                }
                ("sigma", SynthKind::GaussianClusters { sigma, .. }) => {
                    *sigma = value.parse().map_err(|_| bad())?
                }
                ("r_min", SynthKind::RadialLidar { r_min, .. }) => {
                    *r_min = value.parse().map_err(|_| bad())?
                }
                ("r_max", SynthKind::RadialLidar { r_max, .. }) => {
                    *r_max = value.parse().map_err(|_| bad())?
                }
                _ => {
                    return Err(Error::InvalidSpec(format!(
                        "unknown parameter {key:?} for {kind_name}"
                    )))
                }
            }
        }
        let frames = frames.ok_or_else(|| Error::InvalidSpec("missing frames=".into()))?;
        let points = points.ok_or_else(|| Error::InvalidSpec("missing points=".into()))?;
        SynthSpec::new(kind, frames, points, seed)
    }
}

/// Builds a single-source manifest around a generator.
pub fn synth_dataset(
    kind: SynthKind,
    frames: usize,
    points_per_frame: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    let spec = SynthSpec::new(kind, frames, points_per_frame, seed)?;
    Ok(DatasetManifest::from_sources(vec![FrameSpec::Synth(spec)]))
}

/// Where frames come from.
#[derive(Debug, Clone, PartialEq)]
pub enum FrameSpec {
    /// One `.xyz` or `.ply` file, one frame.
    File(PathBuf),
    Synth(SynthSpec),
}

impl FrameSpec {
    fn frame_count(&self) -> usize {
        match self {
            FrameSpec::File(_) => 1,
            FrameSpec::Synth(s) => s.frames,
        }
    }
}

/// Ordered list of frame sources.
///
/// Text form: one source per line, `#` starts a comment. A line is either
/// a file path (relative paths resolve against the manifest's directory),
/// `synth <kind> frames=F points=N seed=S [params]`, or
/// `features <name>,<name>,...` naming the feature columns.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    sources: Vec<FrameSpec>,
    /// `starts[i]` is the first global frame index of `sources[i]`.
    starts: Vec<usize>,
    feature_names: Option<Vec<String>>,
}

impl DatasetManifest {
    pub fn from_sources(sources: Vec<FrameSpec>) -> Self {
        let mut starts = Vec::with_capacity(sources.len());
        let mut next = 0;
        for s in &sources {
            starts.push(next);
            next += s.frame_count();
        }
        Self {
            sources,
            starts,
            feature_names: None,
        }
    }

    pub fn with_feature_names(mut self, names: Vec<String>) -> Self {
        self.feature_names = Some(names);
        self
    }

    pub fn sources(&self) -> &[FrameSpec] {
        &self.sources
    }

    pub fn feature_names(&self) -> Option<&[String]> {
        self.feature_names.as_deref()
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut sources = Vec::new();
        let mut names = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let wrap = |e: Error| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            };
            match fields[0] {
                "synth" => sources.push(FrameSpec::Synth(
                    SynthSpec::parse_line(&fields[1..]).map_err(wrap)?,
                )),
                "features" => {
                    names = Some(
                        fields[1..]
                            .join(" ")
                            .split(',')
                            .map(|s| s.trim().to_string())
                            .filter(|s| !s.is_empty())
                            .collect(),
                    )
                }
                _ => {
                    let p = Path::new(line);
                    let path = if p.is_absolute() {
                        p.to_path_buf()
                    } else {
                        base_dir.join(p)
                    };
                    sources.push(FrameSpec::File(path));
                }
            }
        }
        let mut m = Self::from_sources(sources);
        m.feature_names = names;
        Ok(m)
    }

    /// Reads a manifest and checks every file source exists.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).at_path(path))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let m = Self::parse(&text, base).map_err(|e| e.at_path(path))?;
        m.check()?;
        Ok(m)
    }

    /// At least one frame, and every file source present.
    pub fn check(&self) -> Result<()> {
        if self.frame_count_total() == 0 {
            return Err(Error::EmptyDataset);
        }
        for s in &self.sources {
            if let FrameSpec::File(p) = s {
                if !p.is_file() {
                    return Err(Error::from(std::io::Error::new(
                        std::io::ErrorKind::NotFound,
                        "frame source not found",
                    ))
                    .at_path(p));
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(names) = &self.feature_names {
            writeln!(out, "features {}", names.join(",")).unwrap();
        }
        for s in &self.sources {
            match s {
                FrameSpec::File(p) => writeln!(out, "{}", p.display()).unwrap(),
                FrameSpec::Synth(spec) => writeln!(out, "{}", spec.to_line()).unwrap(),
            }
        }
        out
    }

    fn frame_count_total(&self) -> usize {
        self.sources.iter().map(FrameSpec::frame_count).sum()
    }

    /// Frames in manifest order, one at a time.
    pub fn iter<T: Scalar>(&self) -> impl Iterator<Item = Result<PointBatch<T>>> + '_ {
        (0..self.frame_count_total()).map(move |i| self.load_frame(i).map(Cow::into_owned))
    }
}

impl<T: Scalar> FrameSource<T> for DatasetManifest {
    fn frame_count(&self) -> usize {
        self.frame_count_total()
    }

    fn load_frame(&self, index: usize) -> Result<Cow<'_, PointBatch<T>>> {
        let s = self.starts.partition_point(|&start| start <= index) - 1;
        let frame = match &self.sources[s] {
            FrameSpec::File(p) => load_points(p)?,
            FrameSpec::Synth(spec) => spec.frame(index - self.starts[s]),
        };
        Ok(Cow::Owned(frame))
    }
}
