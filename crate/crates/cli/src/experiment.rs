//! Named experiments: sweeps over width, heads, scaling and trial that compare
//! finite-width draws with limit-law draws.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use attnlimit_core::attention::{
    sample_output_batch, sample_score_batch, AttentionConfig, AttentionError, Coordinate,
    ScalingRule, ScoreIndex,
};
use attnlimit_core::limitlaw::{build_limit_spec, sample_limit, sample_limit_with, LimitLawError};
use attnlimit_core::rng::derive_seed;
use attnlimit_core::stats::{
    compare_with_densities, kde, ComparisonReport, DensityEstimate, SampleSet, StatsError,
    DEFAULT_GRID_POINTS,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::samplefile::{self, SampleFileError};
use crate::svg::{self, CurveStyle, Overlay, SvgError};

/// Mixed into limit-law seeds so they never collide with finite-width cells.
const LIMIT_TAG: u64 = 0x4c49_4d54;
pub const DESK_SAMPLES: usize = 10_000;
pub const FULL_SAMPLES: usize = 50_000;
pub const CSV_HEADER: [&str; 12] = [
    "experiment",
    "width",
    "heads",
    "trial",
    "kl",
    "log_kl",
    "ks",
    "mean",
    "var",
    "skew",
    "ex_kurtosis",
    "seed",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Fig1,
    Fig2a,
    Fig2b,
    Lowrank,
    Custom,
}

impl ExperimentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentKind::Fig1 => "fig1",
            ExperimentKind::Fig2a => "fig2a",
            ExperimentKind::Fig2b => "fig2b",
            ExperimentKind::Lowrank => "lowrank",
            ExperimentKind::Custom => "custom",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fig1" => Ok(ExperimentKind::Fig1),
            "fig2a" => Ok(ExperimentKind::Fig2a),
            "fig2b" => Ok(ExperimentKind::Fig2b),
            "lowrank" | "low-rank" | "low_rank" => Ok(ExperimentKind::Lowrank),
            "custom" => Ok(ExperimentKind::Custom),
            other => Err(format!("unknown experiment `{other}`")),
        }
    }
}

/// Which scalar is compared between the finite network and the limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Observable {
    /// Output coordinate `y_1^1`.
    Output,
    /// Score `p_{1,1}^{(1)}`.
    Score,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub widths: Vec<usize>,
    /// Head counts; ignored by `lowrank`, where `heads = width / head_dim`.
    pub heads: Vec<usize>,
    pub scalings: Vec<ScalingRule>,
    pub observable: Observable,
    pub samples_per_run: usize,
    pub trials: usize,
    pub master_seed: u64,
    pub spatial_dim: usize,
    pub head_dim: Option<usize>,
    pub clip_c: f64,
    pub sigma_q_sq: f64,
    pub sigma_k_sq: f64,
    pub sigma_v_sq: f64,
    pub sigma_o_sq: f64,
    pub sigma_input_sq: f64,
    pub grid_points: usize,
    pub output_dir: PathBuf,
    pub emit_svg: bool,
    pub write_samples: bool,
}

impl ExperimentConfig {
    /// Defaults for each named experiment.
    pub fn for_kind(kind: ExperimentKind) -> Self {
        let base = AttentionConfig::default();
        let mut c = ExperimentConfig {
            experiment: kind,
            widths: vec![16, 64, 256, 1024],
            heads: vec![2],
            scalings: vec![ScalingRule::InvSqrtWidth],
            observable: Observable::Output,
            samples_per_run: DESK_SAMPLES,
            trials: 10,
            master_seed: 0,
            spatial_dim: base.spatial_dim,
            head_dim: None,
            clip_c: base.clip_c,
            sigma_q_sq: base.sigma_q_sq,
            sigma_k_sq: base.sigma_k_sq,
            sigma_v_sq: base.sigma_v_sq,
            sigma_o_sq: base.sigma_o_sq,
            sigma_input_sq: base.sigma_input_sq,
            grid_points: DEFAULT_GRID_POINTS,
            output_dir: PathBuf::from(format!("runs/{kind}")),
            emit_svg: true,
            write_samples: false,
        };
        match kind {
            ExperimentKind::Fig1 | ExperimentKind::Custom => {}
            ExperimentKind::Fig2a => {
                c.widths = vec![256];
                c.heads = vec![1];
                c.scalings = vec![ScalingRule::InvSqrtWidth, ScalingRule::InvWidth];
                c.observable = Observable::Score;
                c.trials = 1;
            }
            ExperimentKind::Fig2b => {
                c.widths = vec![256];
                c.heads = vec![1, 256];
                c.trials = 1;
            }
            ExperimentKind::Lowrank => {
                c.widths = vec![64, 256, 1024];
                c.heads = vec![];
                c.scalings = vec![ScalingRule::InvSqrtHead];
                c.head_dim = Some(64);
                c.trials = 3;
            }
        }
        c
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |msg: &str| Err(ExperimentError::InvalidConfig(msg.to_string()));
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad("widths must be a nonempty list of positive integers");
        }
        if self.scalings.is_empty() {
            return bad("at least one scaling rule is required");
        }
        if self.trials == 0 || self.samples_per_run == 0 {
            return bad("trials and samples_per_run must be positive");
        }
        if self.experiment == ExperimentKind::Lowrank {
            let Some(head_dim) = self.head_dim else {
                return bad("lowrank needs head_dim");
            };
            if self.widths.iter().any(|w| w % head_dim != 0) {
                return bad("lowrank widths must be multiples of head_dim");
            }
        } else if self.heads.is_empty() || self.heads.contains(&0) {
            return bad("heads must be a nonempty list of positive integers");
        }
        for cell in self.cells() {
            self.attention(cell.scaling, cell.width, cell.heads)
                .validate()?;
        }
        Ok(())
    }

    fn attention(&self, scaling: ScalingRule, width: usize, heads: usize) -> AttentionConfig {
        AttentionConfig {
            width,
            spatial_dim: self.spatial_dim,
            heads,
            scaling,
            head_dim: self.head_dim,
            sigma_q_sq: self.sigma_q_sq,
            sigma_k_sq: self.sigma_k_sq,
            sigma_v_sq: self.sigma_v_sq,
            sigma_o_sq: self.sigma_o_sq,
            sigma_input_sq: self.sigma_input_sq,
            clip_c: self.clip_c,
        }
    }

    /// Every `(scaling, width, heads, trial)` cell in output order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &scaling in &self.scalings {
            for &width in &self.widths {
                let heads: Vec<usize> = match (self.experiment, self.head_dim) {
                    (ExperimentKind::Lowrank, Some(d)) if d > 0 => vec![width / d],
                    _ => self.heads.clone(),
                };
                for h in heads {
                    for trial in 0..self.trials {
                        out.push(Cell {
                            scaling,
                            width,
                            heads: h,
                            trial,
                        });
                    }
                }
            }
        }
        out
    }

    /// CSV `experiment` label of a cell. Sweeps over several scaling rules
    /// append the rule to keep rows distinguishable.
    pub fn label(&self, scaling: ScalingRule) -> String {
        if self.scalings.len() > 1 {
            format!("{}/{}", self.experiment, scaling)
        } else {
            self.experiment.to_string()
        }
    }

    /// Seed of the finite-width batch of a cell.
    pub fn finite_seed(&self, cell: &Cell) -> u64 {
        derive_seed(&[
            self.master_seed,
            cell.trial as u64,
            cell.width as u64,
            cell.heads as u64,
        ])
    }

    /// Seed of the limit batch shared by every width of a trial.
    /// Scaling whose limit law a cell is compared against.
    ///
    /// Scores under 1/n collapse to zero, so they are measured against the
    /// spread-out 1/√n limit instead. Outputs always use their own law.
    pub fn limit_scaling(&self, scaling: ScalingRule) -> ScalingRule {
        match (self.observable, scaling) {
            (Observable::Score, ScalingRule::InvWidth) => ScalingRule::InvSqrtWidth,
            _ => scaling,
        }
    }

    pub fn limit_seed(&self, trial: usize, heads: usize) -> u64 {
        derive_seed(&[self.master_seed, trial as u64, LIMIT_TAG, heads as u64])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub scaling: ScalingRule,
    pub width: usize,
    pub heads: usize,
    pub trial: usize,
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment configuration: {0}")]
    InvalidConfig(String),
    #[error("I/O failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("CSV output failed: {0}")]
    Csv(#[from] csv::Error),
    #[error("JSON output failed: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Limit(#[from] LimitLawError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Samples(#[from] SampleFileError),
    #[error(transparent)]
    Svg(#[from] SvgError),
    #[error("could not build worker pool: {0}")]
    ThreadPool(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::IoFailure {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub label: String,
    pub scaling: ScalingRule,
    pub width: usize,
    pub heads: usize,
    pub trial: usize,
    pub seed: u64,
    pub limit_seed: u64,
    pub finite_digest: String,
    pub limit_digest: String,
    pub finite_samples: Option<PathBuf>,
    pub limit_samples: Option<PathBuf>,
    pub report: ComparisonReport,
}

/// Across-trial summary of one `(label, width, heads)` group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub label: String,
    pub width: usize,
    pub heads: usize,
    pub trials: usize,
    pub mean_log_kl: f64,
    /// Sample standard deviation across trials (0 for a single trial).
    pub sd_log_kl: f64,
    pub mean_kl: f64,
    pub mean_ks: f64,
    pub mean_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFiles {
    pub csv: PathBuf,
    pub summary: PathBuf,
    pub timings: PathBuf,
    pub svgs: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellTiming {
    pub label: String,
    pub width: usize,
    pub heads: usize,
    pub trial: usize,
    pub seconds: f64,
}

/// Everything a run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub experiment: ExperimentKind,
    pub version: String,
    pub config: ExperimentConfig,
    pub cells: Vec<CellRecord>,
    pub aggregates: Vec<Aggregate>,
    pub timings: Vec<CellTiming>,
    pub total_seconds: f64,
    pub files: OutputFiles,
}

impl RunRecord {
    pub fn aggregate(&self, label: &str, width: usize, heads: usize) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.label == label && a.width == width && a.heads == heads)
    }
}

#[derive(Serialize)]
struct Summary<'a> {
    software: &'static str,
    version: &'a str,
    experiment: ExperimentKind,
    config: &'a ExperimentConfig,
    cells: &'a [CellRecord],
    aggregates: &'a [Aggregate],
}

#[derive(Serialize)]
struct Timings<'a> {
    threads: usize,
    total_seconds: f64,
    cells: &'a [CellTiming],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct LimitKey {
    trial: usize,
    heads: usize,
    scaling: ScalingRule,
}

struct LimitBatch {
    seed: u64,
    samples: SampleSet,
    density: DensityEstimate,
    file: Option<PathBuf>,
}

/// Runs `config` on `threads` workers (all available cores when `None`).
pub fn run_experiment_with_threads(
    config: &ExperimentConfig,
    threads: Option<usize>,
) -> Result<RunRecord, ExperimentError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        builder = builder.num_threads(t);
    }
    let pool = builder
        .build()
        .map_err(|e| ExperimentError::ThreadPool(e.to_string()))?;
    pool.install(|| run_experiment(config))
}

/// Runs every cell of `config` and writes CSV, JSON, timings and plots into
/// `config.output_dir`. Runs on the current rayon pool.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunRecord, ExperimentError> {
    config.validate()?;
    let started = Instant::now();
    let dir = &config.output_dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let sample_dir = dir.join("samples");
    if config.write_samples {
        fs::create_dir_all(&sample_dir).map_err(io_err(&sample_dir))?;
    }
    let cells = config.cells();

    // Limit draws depend on the trial and head count only.
    let mut limits: BTreeMap<LimitKey, LimitBatch> = BTreeMap::new();
    for cell in &cells {
        let reference = config.limit_scaling(cell.scaling);
        let key = LimitKey {
            trial: cell.trial,
            heads: cell.heads,
            scaling: reference,
        };
        if limits.contains_key(&key) {
            continue;
        }
        let spec = build_limit_spec(&config.attention(reference, cell.width, cell.heads))?;
        let seed = config.limit_seed(cell.trial, cell.heads);
        let samples = match config.observable {
            Observable::Output => sample_limit(&spec, seed, config.samples_per_run, 0)?,
            Observable::Score => {
                sample_limit_with(&spec, seed, config.samples_per_run, "limit:p[0,0,0]", |d| {
                    d.score(0, 0, 0)
                })?
            }
        };
        let density = kde(&samples, config.grid_points)?;
        let file = if config.write_samples {
            let path = sample_dir.join(format!("limit_h{}_t{}.awls", cell.heads, cell.trial));
            samplefile::write_samples(&path, samples.values())?;
            Some(path)
        } else {
            None
        };
        limits.insert(
            key,
            LimitBatch {
                seed,
                samples,
                density,
                file,
            },
        );
    }

    let mut records = Vec::with_capacity(cells.len());
    let mut timings = Vec::with_capacity(cells.len());
    let mut svg_groups: BTreeMap<(String, usize, ScalingRule), Vec<(usize, DensityEstimate)>> =
        BTreeMap::new();
    for cell in &cells {
        let t0 = Instant::now();
        let attention = config.attention(cell.scaling, cell.width, cell.heads);
        let seed = config.finite_seed(cell);
        let n = config.samples_per_run;
        let finite = match config.observable {
            Observable::Output => sample_output_batch(&attention, seed, n, Coordinate::FIRST)?,
            Observable::Score => sample_score_batch(&attention, seed, n, ScoreIndex::FIRST)?,
        };
        let limit = &limits[&LimitKey {
            trial: cell.trial,
            heads: cell.heads,
            scaling: config.limit_scaling(cell.scaling),
        }];
        let density = kde(&finite, config.grid_points)?;
        let report = compare_with_densities(&finite, &limit.samples, &density, &limit.density)?;
        let label = config.label(cell.scaling);
        let finite_file = if config.write_samples {
            let path = sample_dir.join(format!(
                "{}_n{}_h{}_t{}.awls",
                label.replace('/', "_"),
                cell.width,
                cell.heads,
                cell.trial
            ));
            samplefile::write_samples(&path, finite.values())?;
            Some(path)
        } else {
            None
        };
        if cell.trial == 0 && config.emit_svg {
            svg_groups
                .entry((label.clone(), cell.heads, cell.scaling))
                .or_default()
                .push((cell.width, density));
        }
        records.push(CellRecord {
            label: label.clone(),
            scaling: cell.scaling,
            width: cell.width,
            heads: cell.heads,
            trial: cell.trial,
            seed,
            limit_seed: limit.seed,
            finite_digest: finite.digest(),
            limit_digest: limit.samples.digest(),
            finite_samples: finite_file,
            limit_samples: limit.file.clone(),
            report,
        });
        timings.push(CellTiming {
            label,
            width: cell.width,
            heads: cell.heads,
            trial: cell.trial,
            seconds: t0.elapsed().as_secs_f64(),
        });
    }

    let aggregates = aggregate(&records);
    let csv_path = dir.join("results.csv");
    write_csv(&csv_path, &records)?;

    let version = env!("CARGO_PKG_VERSION").to_string();
    let summary_path = dir.join("summary.json");
    let summary = Summary {
        software: env!("CARGO_PKG_NAME"),
        version: &version,
        experiment: config.experiment,
        config,
        cells: &records,
        aggregates: &aggregates,
    };
    write_json(&summary_path, &summary)?;

    let mut svgs = Vec::new();
    for ((label, heads, scaling), curves) in &svg_groups {
        let mut overlays: Vec<Overlay> = curves
            .iter()
            .map(|(width, d)| Overlay {
                label: format!("n = {width}"),
                density: d.clone(),
                style: CurveStyle::Dashed,
            })
            .collect();
        let limit = &limits[&LimitKey {
            trial: 0,
            heads: *heads,
            scaling: config.limit_scaling(*scaling),
        }];
        overlays.push(Overlay {
            label: "limit".to_string(),
            density: limit.density.clone(),
            style: CurveStyle::Solid,
        });
        let path = dir.join(format!("{}_h{heads}.svg", label.replace('/', "_")));
        let title = format!("{label}, H = {heads}");
        svg::emit_svg(&overlays, &title, &path)?;
        svgs.push(path);
    }

    let total_seconds = started.elapsed().as_secs_f64();
    let timings_path = dir.join("timings.json");
    write_json(
        &timings_path,
        &Timings {
            threads: rayon::current_num_threads(),
            total_seconds,
            cells: &timings,
        },
    )?;

    Ok(RunRecord {
        experiment: config.experiment,
        version,
        config: config.clone(),
        cells: records,
        aggregates,
        timings,
        total_seconds,
        files: OutputFiles {
            csv: csv_path,
            summary: summary_path,
            timings: timings_path,
            svgs,
        },
    })
}

/// `(label, width, heads)`, in first-seen order.
type GroupKey = (String, usize, usize);

fn aggregate(records: &[CellRecord]) -> Vec<Aggregate> {
    let mut groups: Vec<(GroupKey, Vec<&CellRecord>)> = Vec::new();
    for r in records {
        let key = (r.label.clone(), r.width, r.heads);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    groups
        .into_iter()
        .map(|((label, width, heads), rs)| {
            let t = rs.len() as f64;
            let mean = |f: &dyn Fn(&CellRecord) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / t;
            let mean_log_kl = mean(&|r| r.report.log_kl);
            let sd_log_kl = if rs.len() > 1 {
                (rs.iter()
                    .map(|r| (r.report.log_kl - mean_log_kl).powi(2))
                    .sum::<f64>()
                    / (t - 1.0))
                    .sqrt()
            } else {
                0.0
            };
            Aggregate {
                label,
                width,
                heads,
                trials: rs.len(),
                mean_log_kl,
                sd_log_kl,
                mean_kl: mean(&|r| r.report.kl),
                mean_ks: mean(&|r| r.report.ks_statistic),
                mean_variance: mean(&|r| r.report.moments_a.variance),
            }
        })
        .collect()
}

fn write_csv(path: &Path, records: &[CellRecord]) -> Result<(), ExperimentError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    w.write_record(CSV_HEADER)?;
    for r in records {
        let m = &r.report.moments_a;
        w.write_record([
            r.label.clone(),
            r.width.to_string(),
            r.heads.to_string(),
            r.trial.to_string(),
            r.report.kl.to_string(),
            r.report.log_kl.to_string(),
            r.report.ks_statistic.to_string(),
            m.mean.to_string(),
            m.variance.to_string(),
            m.skewness.to_string(),
            m.excess_kurtosis.to_string(),
            r.seed.to_string(),
        ])?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Reads back a config document; missing fields take the experiment defaults.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, ExperimentError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    let kind = raw
        .get("experiment")
        .and_then(|v| v.as_str())
        .unwrap_or("custom")
        .parse::<ExperimentKind>()
        .map_err(ExperimentError::InvalidConfig)?;
    let mut merged = serde_json::to_value(ExperimentConfig::for_kind(kind))?;
    if let (Some(base), Some(over)) = (merged.as_object_mut(), raw.as_object()) {
        for (k, v) in over {
            base.insert(k.clone(), v.clone());
        }
    }
    Ok(serde_json::from_value(merged)?)
}
