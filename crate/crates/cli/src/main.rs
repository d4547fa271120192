use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use avs_core::bench::{run_benchmarks, BenchConfig, Method};
use avs_core::{
    calibrate_cascade, run_cascade, save_xyz, DatasetManifest, FrameSource, Identity,
    InitialFeatures, Schedule, VamConfig, DEFAULT_NBR_SIZE,
};
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "avs",
    version,
    about = "Voxel-based point cloud downsampling: calibrate, sample, benchmark"
)]
struct Cli {
    /// Worker threads. Falls back to AVS_THREADS, then to one per core.
    #[arg(long, global = true, env = "AVS_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Calibrate per-layer voxel sizes to reference downsampling ratios.
    Calibrate(CalibrateArgs),
    /// Run the sampling cascade of a schedule over every frame.
    Sample(SampleArgs),
    /// Time fps, knn, intra and inter at several point counts.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Target ratio of one layer; repeat once per layer.
    #[arg(long = "ref-ratio", required = true)]
    ref_ratios: Vec<f64>,
    /// Starting voxel size for every layer. Estimated from the first frame if omitted.
    #[arg(long)]
    v0: Option<f64>,
    #[arg(long, default_value_t = VamConfig::<f64>::DEFAULT_K_P)]
    kp: f64,
    #[arg(long, default_value_t = VamConfig::<f64>::DEFAULT_K_I)]
    ki: f64,
    #[arg(long, default_value_t = VamConfig::<f64>::DEFAULT_I_R)]
    ir: f64,
    #[arg(long, default_value_t = VamConfig::<f64>::DEFAULT_EPSILON)]
    epsilon: f64,
    #[arg(long = "max-iters", default_value_t = VamConfig::<f64>::DEFAULT_MAX_ITERATIONS)]
    max_iters: usize,
    /// Schedule file to write.
    #[arg(long)]
    schedule: PathBuf,
    /// Per-iteration trace CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    schedule: PathBuf,
    #[arg(long = "nbr-size", default_value_t = DEFAULT_NBR_SIZE)]
    nbr_size: usize,
    /// Output directory for the centroid clouds and summary.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Point counts, ascending.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "10000,20000,40000,80000,160000,320000"
    )]
    sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "fps,knn,intra,inter")]
    methods: Vec<Method>,
    #[arg(long, default_value_t = 100)]
    repeats: usize,
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "nbr-size", default_value_t = DEFAULT_NBR_SIZE)]
    nbr_size: usize,
    /// Results CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, thiserror::Error)]
enum Failure {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] avs_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Csv { path: PathBuf, source: csv::Error },
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Core(e) if e.is_io() => 3,
            Failure::Core(_) => 1,
            Failure::Io { .. } | Failure::Csv { .. } => 3,
        }
    }
}

enum Outcome {
    Done,
    NotConverged,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::NotConverged) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<Outcome, Failure> {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    match cli.command {
        Command::Calibrate(args) => calibrate(args),
        Command::Sample(args) => sample(args),
        Command::Bench(args) => bench(args),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| Failure::Io {
            path: path.to_path_buf(),
            source,
        })
}

fn csv_writer(path: &Path, header: &[&str]) -> Result<csv::Writer<BufWriter<File>>, Failure> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(create(path)?);
    w.write_record(header).map_err(|source| Failure::Csv {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(w)
}

fn write_row<W: Write>(w: &mut csv::Writer<W>, path: &Path, row: &[String]) -> Result<(), Failure> {
    w.write_record(row).map_err(|source| Failure::Csv {
        path: path.to_path_buf(),
        source,
    })
}

fn finish<W: Write>(mut w: csv::Writer<W>, path: &Path) -> Result<(), Failure> {
    w.flush().map_err(|source| Failure::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Size at which a uniform spread of the first frame's points would
/// downsample by `ratio`.
fn estimate_v0(manifest: &DatasetManifest, ratio: f64) -> Result<f64, Failure> {
    let frame = FrameSource::<f64>::load_frame(manifest, 0)?;
    let b = frame.bounds();
    let volume: f64 = (0..3)
        .map(|a| (b.max[a] - b.min[a]).max(f64::EPSILON))
        .product();
    Ok((ratio * volume / frame.count() as f64).cbrt())
}

fn calibrate(args: CalibrateArgs) -> Result<Outcome, Failure> {
    let manifest = DatasetManifest::open(&args.manifest)?;
    let mut configs = Vec::with_capacity(args.ref_ratios.len());
    let mut cumulative = 1.0;
    for &ref_ratio in &args.ref_ratios {
        cumulative *= ref_ratio;
        let v0 = match args.v0 {
            Some(v) => v,
            None => estimate_v0(&manifest, cumulative)?,
        };
        let config = VamConfig {
            k_p: args.kp,
            k_i: args.ki,
            i_r: args.ir,
            epsilon: args.epsilon,
            max_iterations: args.max_iters,
            ..VamConfig::new(ref_ratio, v0)
        };
        config
            .validate()
            .map_err(|e| Failure::Usage(e.to_string()))?;
        configs.push(config);
    }
    let result = calibrate_cascade(&manifest, &configs)?;
    result.schedule().write(&args.schedule)?;

    let mut trace = csv_writer(
        &args.out,
        &["layer", "iteration", "voxel_size", "ratio", "err"],
    )?;
    for (layer, cal) in result.layers.iter().enumerate() {
        for (i, h) in cal.state.history.iter().enumerate() {
            let row = [
                layer.to_string(),
                (i + 1).to_string(),
                h.voxel_size.to_string(),
                h.ratio.to_string(),
                h.err.to_string(),
            ];
            write_row(&mut trace, &args.out, &row)?;
        }
        if !cal.converged {
            log::warn!(
                "layer {layer}: not converged after {} iterations, ratio {} (target {})",
                cal.state.iteration,
                cal.achieved_ratio,
                configs[layer].ref_ratio
            );
        }
    }
    finish(trace, &args.out)?;
    Ok(if result.all_converged() {
        Outcome::Done
    } else {
        Outcome::NotConverged
    })
}

fn sample(args: SampleArgs) -> Result<Outcome, Failure> {
    let manifest = DatasetManifest::open(&args.manifest)?;
    let schedule = Schedule::read(&args.schedule)?;
    if schedule.entries.iter().any(|e| !e.converged) {
        log::warn!("schedule contains layers that did not converge");
    }
    let sizes: Vec<f64> = schedule.voxel_sizes();
    std::fs::create_dir_all(&args.out).map_err(|source| Failure::Io {
        path: args.out.clone(),
        source,
    })?;
    let summary_path = args.out.join("summary.csv");
    let mut summary = csv_writer(&summary_path, &["frame", "layer", "n_in", "n_out", "ratio"])?;
    for f in 0..FrameSource::<f64>::frame_count(&manifest) {
        let frame = FrameSource::<f64>::load_frame(&manifest, f)?;
        let layers = run_cascade(
            &frame,
            &sizes,
            args.nbr_size,
            &Identity,
            InitialFeatures::Coordinates,
        )?;
        let mut n_in = frame.count();
        for (k, layer) in layers.iter().enumerate() {
            let n_out = layer.points.count();
            let centroids = layer.points.clone().with_features(None)?;
            save_xyz(
                &centroids,
                args.out.join(format!("frame{f:05}_layer{k}.xyz")),
            )?;
            let row = [
                f.to_string(),
                k.to_string(),
                n_in.to_string(),
                n_out.to_string(),
                (n_in as f64 / n_out as f64).to_string(),
            ];
            write_row(&mut summary, &summary_path, &row)?;
            n_in = n_out;
        }
    }
    finish(summary, &summary_path)?;
    Ok(Outcome::Done)
}

fn bench(args: BenchArgs) -> Result<Outcome, Failure> {
    if args.repeats == 0 {
        return Err(Failure::Usage("--repeats must be at least 1".into()));
    }
    let config = BenchConfig {
        warmup: args.warmup,
        repeats: args.repeats,
        seed: args.seed,
        nbr_size: args.nbr_size,
        ..BenchConfig::default()
    };
    let rows = run_benchmarks(&args.sizes, &args.methods, &config).map_err(|e| match e {
        avs_core::Error::InvalidConfig(m) => Failure::Usage(m),
        e => e.into(),
    })?;
    let mut out = csv_writer(&args.out, &["method", "n", "median_ms", "p10_ms", "p90_ms"])?;
    for r in rows {
        let s = r.stats;
        let row = [
            r.method.to_string(),
            r.n.to_string(),
            s.median_ms.to_string(),
            s.p10_ms.to_string(),
            s.p90_ms.to_string(),
        ];
        write_row(&mut out, &args.out, &row)?;
    }
    finish(out, &args.out)?;
    Ok(Outcome::Done)
}
