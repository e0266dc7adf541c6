use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use attnlimit_cli::experiment::{
    load_config, run_experiment_with_threads, ExperimentConfig, ExperimentKind, Observable,
    FULL_SAMPLES,
};
use attnlimit_cli::samplefile::{read_samples, write_samples};
use attnlimit_cli::selfcheck::run_selfcheck;
use attnlimit_cli::svg::{emit_svg, CurveStyle, Overlay};
use attnlimit_core::attention::{
    sample_output_batch, sample_score_batch, AttentionConfig, Coordinate, ScalingRule, ScoreIndex,
};
use attnlimit_core::limitlaw::{build_limit_spec, sample_limit, sample_limit_with};
use attnlimit_core::stats::{compare, kde, moments, SampleSet, DEFAULT_GRID_POINTS};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "attnlimit",
    version,
    about = "Finite-width attention versus its infinite-width limit"
)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw finite-width output coordinates or scores.
    SimulateFinite(SimulateArgs),
    /// Draw from the infinite-width limit law.
    SampleLimit(SimulateArgs),
    /// Compare two raw sample files (KL, KS, moments).
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value_t = DEFAULT_GRID_POINTS)]
        grid_points: usize,
    },
    /// Run a named experiment.
    Experiment(ExperimentArgs),
    /// Run the oracle suite and print a pass/fail table.
    Selfcheck,
    /// Overlay densities of raw sample files as SVG.
    Plot {
        /// Finite-width samples, drawn dashed: `path` or `path=label`.
        #[arg(long = "finite")]
        finite: Vec<String>,
        /// Limit samples, drawn solid: `path` or `path=label`.
        #[arg(long = "limit")]
        limit: Vec<String>,
        #[arg(long, default_value = "density overlay")]
        title: String,
        #[arg(long, default_value_t = DEFAULT_GRID_POINTS)]
        grid_points: usize,
        #[arg(long, short)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct LayerArgs {
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 4)]
    spatial_dim: usize,
    /// inv_sqrt_width, inv_width or inv_sqrt_head.
    #[arg(long, default_value = "inv_sqrt_width")]
    scaling: ScalingRule,
    #[arg(long)]
    head_dim: Option<usize>,
    #[arg(long, default_value_t = 100.0)]
    clip: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma_q_sq: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma_k_sq: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma_v_sq: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma_o_sq: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma_input_sq: f64,
}

impl LayerArgs {
    fn config(&self) -> AttentionConfig {
        AttentionConfig {
            width: self.width,
            spatial_dim: self.spatial_dim,
            heads: self.heads,
            scaling: self.scaling,
            head_dim: self.head_dim,
            sigma_q_sq: self.sigma_q_sq,
            sigma_k_sq: self.sigma_k_sq,
            sigma_v_sq: self.sigma_v_sq,
            sigma_o_sq: self.sigma_o_sq,
            sigma_input_sq: self.sigma_input_sq,
            clip_c: self.clip,
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    layer: LayerArgs,
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Zero-based position `i` of `y_α^i`.
    #[arg(long, default_value_t = 0)]
    position: usize,
    /// Zero-based coordinate `α` of `y_α^i` (finite width only).
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Draw the first score of the first head instead of an output coordinate.
    #[arg(long)]
    score: bool,
    /// Write raw samples here.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// fig1, fig2a, fig2b, lowrank or custom.
    kind: ExperimentKind,
    /// JSON config document; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    heads: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    scalings: Option<Vec<ScalingRule>>,
    #[arg(long)]
    samples: Option<usize>,
    /// Use 50,000 samples per run.
    #[arg(long)]
    full_scale: bool,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    head_dim: Option<usize>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    grid_points: Option<usize>,
    /// Compare scores instead of outputs.
    #[arg(long)]
    scores: bool,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    no_svg: bool,
    /// Also write every batch as a raw sample file.
    #[arg(long)]
    write_samples: bool,
}

impl ExperimentArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(path) => {
                let mut c = load_config(path)?;
                c.experiment = self.kind;
                c
            }
            None => ExperimentConfig::for_kind(self.kind),
        };
        if let Some(v) = &self.widths {
            c.widths = v.clone();
        }
        if let Some(v) = &self.heads {
            c.heads = v.clone();
        }
        if let Some(v) = &self.scalings {
            c.scalings = v.clone();
        }
        if self.full_scale {
            c.samples_per_run = FULL_SAMPLES;
        }
        if let Some(v) = self.samples {
            c.samples_per_run = v;
        }
        if let Some(v) = self.trials {
            c.trials = v;
        }
        if let Some(v) = self.seed {
            c.master_seed = v;
        }
        if self.head_dim.is_some() {
            c.head_dim = self.head_dim;
        }
        if let Some(v) = self.clip {
            c.clip_c = v;
        }
        if let Some(v) = self.grid_points {
            c.grid_points = v;
        }
        if self.scores {
            c.observable = Observable::Score;
        }
        if let Some(v) = &self.output_dir {
            c.output_dir = v.clone();
        }
        if self.no_svg {
            c.emit_svg = false;
        }
        if self.write_samples {
            c.write_samples = true;
        }
        Ok(c)
    }
}

fn finish(set: &SampleSet, out: Option<&Path>) -> Result<()> {
    if let Some(path) = out {
        write_samples(path, set.values())?;
    }
    let report = serde_json::json!({
        "source": set.provenance().source,
        "master_seed": set.provenance().master_seed,
        "count": set.len(),
        "config_digest": set.provenance().config_digest,
        "digest": set.digest(),
        "moments": moments(set)?,
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn parse_curve(spec: &str) -> (PathBuf, String) {
    match spec.split_once('=') {
        Some((path, label)) => (PathBuf::from(path), label.to_string()),
        None => {
            let path = PathBuf::from(spec);
            let label = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| spec.to_string());
            (path, label)
        }
    }
}

fn load_set(path: &Path) -> Result<SampleSet> {
    let values = read_samples(path)?;
    SampleSet::from_values(path.display().to_string(), values)
        .with_context(|| format!("reading {}", path.display()))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::SimulateFinite(args) => {
            let config = args.layer.config();
            let set = if args.score {
                sample_score_batch(&config, args.seed, args.samples, ScoreIndex::FIRST)?
            } else {
                let coord = Coordinate::new(args.position, args.index);
                sample_output_batch(&config, args.seed, args.samples, coord)?
            };
            finish(&set, args.out.as_deref())?;
        }
        Command::SampleLimit(args) => {
            let spec = build_limit_spec(&args.layer.config())?;
            let set = if args.score {
                sample_limit_with(&spec, args.seed, args.samples, "limit:p[0,0,0]", |d| {
                    d.score(0, 0, 0)
                })?
            } else {
                sample_limit(&spec, args.seed, args.samples, args.position)?
            };
            finish(&set, args.out.as_deref())?;
        }
        Command::Compare { a, b, grid_points } => {
            let report = compare(&load_set(&a)?, &load_set(&b)?, grid_points)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Experiment(args) => {
            let config = args.resolve()?;
            let record = run_experiment_with_threads(&config, cli.threads)?;
            println!(
                "{:<28} {:>6} {:>6} {:>12} {:>10} {:>10}",
                "experiment", "width", "heads", "mean log KL", "sd", "mean KS"
            );
            for a in &record.aggregates {
                println!(
                    "{:<28} {:>6} {:>6} {:>12.4} {:>10.4} {:>10.4}",
                    a.label, a.width, a.heads, a.mean_log_kl, a.sd_log_kl, a.mean_ks
                );
            }
            println!("wrote {}", record.files.csv.display());
            println!("wrote {}", record.files.summary.display());
            for svg in &record.files.svgs {
                println!("wrote {}", svg.display());
            }
        }
        Command::Selfcheck => {
            let report = match cli.threads {
                Some(t) => rayon::ThreadPoolBuilder::new()
                    .num_threads(t)
                    .build()?
                    .install(run_selfcheck),
                None => run_selfcheck(),
            };
            print!("{}", report.render());
            return Ok(report.all_passed());
        }
        Command::Plot {
            finite,
            limit,
            title,
            grid_points,
            out,
        } => {
            if finite.is_empty() && limit.is_empty() {
                bail!("nothing to plot: pass --finite and/or --limit");
            }
            let mut overlays = Vec::new();
            for (specs, style) in [(&finite, CurveStyle::Dashed), (&limit, CurveStyle::Solid)] {
                for spec in specs {
                    let (path, label) = parse_curve(spec);
                    overlays.push(Overlay {
                        label,
                        density: kde(&load_set(&path)?, grid_points)?,
                        style,
                    });
                }
            }
            emit_svg(&overlays, &title, &out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
