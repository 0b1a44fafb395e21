use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use gef_core::bench::{measure_entropy_paths, model_report, BenchParams};
use gef_core::image_entropy::{
    build_pyramid, concentration_stats, level_stats, GrayImage, Raster, DEFAULT_CONCENTRATION_THRESHOLD,
    DEFAULT_LEVELS, DEFAULT_TEMPERATURE,
};
use gef_core::io::{
    parse_json_config, read_file, read_pgm, read_point_cloud, read_text, to_json_pretty, write_file,
    write_neighborhood_stats, write_pgm, Fer1Raster,
};
use gef_core::losses::{Term, TermSet};
use gef_core::neighborhood::DEFAULT_K;
use gef_core::optimizer::{gradcheck_seed, summarize_gradchecks, GradcheckSummary, GRADCHECK_SEEDS};
use gef_core::pipeline::{neighborhood_report, run_optimization, write_outputs, NeighborhoodConfig, RunConfig};
use gef_core::GefError;
use rayon::prelude::*;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "gef", version, about = "Entropy-field regularization of Gaussian primitive scenes")]
struct Cli {
    /// Upper bound on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Multi-scale local entropy of a grayscale image.
    EntropyMap {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = DEFAULT_LEVELS)]
        levels: usize,
        /// FER1 output; PGM previews are written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Competitive scale weights and their concentration.
    Weights {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
        beta: f64,
        #[arg(long, default_value_t = DEFAULT_LEVELS)]
        levels: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-primitive SNRI, neighborhood entropy and threshold as CSV.
    Snri {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
        /// JSON with neighborhood parameters (epsilon, decay, epsilon_stability, ...).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output file instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full optimization run from a JSON config.
    Optimize {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Progress lines on standard error.
        #[arg(long)]
        verbose: bool,
    },
    /// Cost model and measured wall clock of the two entropy paths.
    Bench {
        #[arg(long)]
        primitives: usize,
        #[arg(long)]
        rays: usize,
        #[arg(long)]
        samples: usize,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
        #[arg(long, default_value_t = 50)]
        gaussians_per_sample: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Print the cost model without generating a scene.
        #[arg(long)]
        model_only: bool,
    },
    /// Finite-difference check of the analytic loss gradients.
    Gradcheck {
        /// `all` or a comma-separated list of term names.
        #[arg(long, default_value = "all", value_parser = parse_terms)]
        terms: TermSet,
        #[arg(long, default_value_t = GRADCHECK_SEEDS)]
        seeds: u64,
        #[arg(long, hide = true)]
        corrupt: bool,
    },
}

fn parse_terms(s: &str) -> Result<TermSet, String> {
    if s == "all" {
        return Ok(TermSet::all());
    }
    let set = s
        .split(',')
        .map(|name| name.trim().parse::<Term>().map_err(|e| e.to_string()))
        .collect::<Result<TermSet, String>>()?;
    if set.is_empty() {
        return Err("no terms given".into());
    }
    Ok(set)
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Io(String),
    Numeric(String),
}

impl From<GefError> for Failure {
    fn from(e: GefError) -> Self {
        let msg = e.to_string();
        match e {
            _ if e.is_io() => Failure::Io(msg),
            GefError::Json(_) => Failure::Io(msg),
            GefError::NonFinite { .. }
            | GefError::EmptyRay { .. }
            | GefError::EmptyNeighborhood { .. }
            | GefError::NoDominantPrimitives { .. }
            | GefError::BehindCamera { .. } => Failure::Numeric(msg),
            _ => Failure::Usage(msg),
        }
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Io(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Io(m) | Failure::Numeric(m) => m,
        }
    }
}

type CliResult = Result<(), Failure>;

fn print_json<T: Serialize>(value: &T) -> CliResult {
    println!("{}", to_json_pretty(value)?);
    Ok(())
}

fn load_image(path: &Path) -> Result<GrayImage, Failure> {
    read_pgm(&read_file(path)?).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

/// `out.fer1` -> `out.<suffix>.pgm`
fn preview_path(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.{suffix}.pgm"))
}

fn write_raster_file(out: &Path, channels: &[&Raster]) -> CliResult {
    write_file(out, &Fer1Raster::from_channels(channels)?.to_bytes())?;
    Ok(())
}

#[derive(Serialize)]
struct EntropyMapReport<'a> {
    width: usize,
    height: usize,
    levels: Vec<gef_core::image_entropy::LevelStats>,
    raster: &'a Path,
}

fn entropy_map(image: &Path, levels: usize, out: &Path) -> CliResult {
    let img = load_image(image)?;
    let pyramid = build_pyramid(&img, levels, DEFAULT_TEMPERATURE)?;
    let raw: Vec<&Raster> = pyramid.levels.iter().map(|l| &l.raw).collect();
    write_raster_file(out, &raw)?;
    for l in &pyramid.levels {
        let p = preview_path(out, &format!("level{}", l.scale));
        write_file(&p, &write_pgm(&GrayImage::from_unit_raster(&l.normalized)))?;
    }
    print_json(&EntropyMapReport {
        width: pyramid.width(),
        height: pyramid.height(),
        levels: level_stats(&pyramid),
        raster: out,
    })
}

#[derive(Serialize)]
struct WeightsReport<'a> {
    width: usize,
    height: usize,
    beta: f64,
    /// Mean weight of each level, finest first.
    level_means: Vec<f64>,
    concentration_threshold: f64,
    fraction_above: f64,
    /// Channels: one weight map per level, then the concentration map.
    raster: &'a Path,
}

fn weights(image: &Path, beta: f64, levels: usize, out: &Path) -> CliResult {
    let img = load_image(image)?;
    let pyramid = build_pyramid(&img, levels, beta)?;
    let conc = concentration_stats(&pyramid, DEFAULT_CONCENTRATION_THRESHOLD);
    let mut channels: Vec<&Raster> = pyramid.weights.iter().collect();
    channels.push(&conc.map);
    write_raster_file(out, &channels)?;
    for (l, w) in pyramid.weights.iter().enumerate() {
        write_file(preview_path(out, &format!("weight{}", l + 1)), &write_pgm(&GrayImage::from_unit_raster(w)))?;
    }
    write_file(preview_path(out, "concentration"), &write_pgm(&GrayImage::from_unit_raster(&conc.map)))?;
    print_json(&WeightsReport {
        width: pyramid.width(),
        height: pyramid.height(),
        beta,
        level_means: pyramid.weights.iter().map(Raster::mean).collect(),
        concentration_threshold: conc.threshold,
        fraction_above: conc.fraction_above,
        raster: out,
    })
}

/// Parses a JSON document into `T`, rejecting keys `T` does not know.
fn strict_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let (value, unknown): (T, Vec<String>) = parse_json_config(&read_text(path)?)?;
    if let Some(key) = unknown.first() {
        return Err(Failure::Usage(format!("{}: unknown config key `{key}`", path.display())));
    }
    Ok(value)
}

fn snri(scene: &Path, k: usize, config: Option<&Path>, out: Option<&Path>) -> CliResult {
    let nb: NeighborhoodConfig = match config {
        Some(p) => strict_json(p)?,
        None => NeighborhoodConfig::default(),
    };
    let prims = read_point_cloud(&read_text(scene)?).map_err(|e| Failure::Io(format!("{}: {e}", scene.display())))?;
    let text = write_neighborhood_stats(&neighborhood_report(prims, k, &nb)?);
    match out {
        Some(p) => write_file(p, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}

fn optimize(config: &Path, out: Option<&Path>, verbose: bool) -> CliResult {
    let mut cfg: RunConfig = strict_json(config)?;
    if let Some(dir) = out {
        cfg.output_dir = dir.to_path_buf();
    }
    cfg.validate()?;
    let t = cfg.schedule.total_iterations;
    let every = (t / 20).max(1);
    let outcome = run_optimization(&cfg, |row| {
        if verbose && (row.iteration % every == 0 || row.iteration + 1 == t) {
            eprintln!(
                "iter {:>6}  total {:.6}  mean entropy {:.4}",
                row.iteration, row.losses.total, row.mean_entropy
            );
        }
    })?;
    write_outputs(&cfg.output_dir, &cfg, &outcome)?;
    print_json(&outcome.summary)
}

#[allow(clippy::too_many_arguments)]
fn bench(
    primitives: usize,
    rays: usize,
    samples: usize,
    k: usize,
    gaussians_per_sample: usize,
    seed: u64,
    model_only: bool,
) -> CliResult {
    let p = BenchParams {
        primitives,
        rays,
        samples,
        k,
        gaussians_per_sample,
        seed,
    };
    let report = if model_only { model_report(&p)? } else { measure_entropy_paths(&p)? };
    print_json(&report)
}

#[derive(Serialize)]
struct GradcheckReport {
    #[serde(flatten)]
    summary: GradcheckSummary,
    timing: GradcheckTiming,
}

#[derive(Serialize)]
struct GradcheckTiming {
    seconds: f64,
}

fn gradcheck(terms: TermSet, seeds: u64, corrupt: bool) -> CliResult {
    if seeds == 0 {
        return Err(Failure::Usage("--seeds must be at least 1".into()));
    }
    let started = Instant::now();
    let per_seed = (0..seeds)
        .into_par_iter()
        .map(|s| gradcheck_seed(s, terms, corrupt).map(|c| (s, c)))
        .collect::<Result<Vec<_>, _>>()?;
    let summary = summarize_gradchecks(&per_seed);
    let passed = summary.passed;
    print_json(&GradcheckReport {
        summary,
        timing: GradcheckTiming {
            seconds: started.elapsed().as_secs_f64(),
        },
    })?;
    if passed {
        Ok(())
    } else {
        Err(Failure::Numeric("gradient check failed".into()))
    }
}

fn run(cli: Cli) -> CliResult {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    match cli.command {
        Command::EntropyMap { image, levels, out } => entropy_map(&image, levels, &out),
        Command::Weights {
            image,
            beta,
            levels,
            out,
        } => weights(&image, beta, levels, &out),
        Command::Snri { scene, k, config, out } => snri(&scene, k, config.as_deref(), out.as_deref()),
        Command::Optimize { config, out, verbose } => optimize(&config, out.as_deref(), verbose),
        Command::Bench {
            primitives,
            rays,
            samples,
            k,
            gaussians_per_sample,
            seed,
            model_only,
        } => bench(primitives, rays, samples, k, gaussians_per_sample, seed, model_only),
        Command::Gradcheck { terms, seeds, corrupt } => gradcheck(terms, seeds, corrupt),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
