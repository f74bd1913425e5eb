mod config;
mod output;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use farms::allocators::{
    assign_learning_rates, assign_sparsities, AllocationResult, LrMapping, LsConfig, Metric,
};
use farms::analysis::{analyze_model, LayerFailure, LayerOverrides, ModelSummary};
use farms::bench::toy::{teacher_student_run, Activation};
use farms::bench::{bias_sweep, mp_check, stats::CorrelationMethod};
use farms::sampler::{ConvAggregation, StepMode, WindowMode};
use farms::spectral::{mp_density, KMode};
use farms::tensor_io::{load_manifest, manifest_dir, LoadOptions};
use farms::{LayerReport, SubsampleConfig};
use log::{info, warn};
use serde::Serialize;

use config::{parse_pair, FileConfig};
use output::{cell, opt_cell, Format, Table, Writer};

#[derive(Parser)]
#[command(
    name = "farms",
    version,
    about = "Heavy-tail spectral analysis of weight matrices with fixed-aspect-ratio subsampling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-layer baseline and FARMS alphas for a checkpoint.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Manifest file or directory containing manifest.json.
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        sub: SubsampleArgs,
    },
    /// Layer-wise learning rates from alphas.
    AllocateLr {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: SourceArgs,
        #[command(flatten)]
        sub: SubsampleArgs,
        /// Global learning rate eta_t. [config: lr.eta_t]
        #[arg(long)]
        eta: Option<f64>,
        /// Lower scaling ratio s1. [config: lr.s1]
        #[arg(long)]
        s1: Option<f64>,
        /// Upper scaling ratio s2. [config: lr.s2]
        #[arg(long)]
        s2: Option<f64>,
        /// Alpha to ratio mapping. [config: lr.mapping]
        #[arg(long, value_enum)]
        mapping: Option<MappingArg>,
        /// Sigmoid temperature (implies --mapping sigmoid). [config: lr.mapping.sigmoid.temperature]
        #[arg(long)]
        temperature: Option<f64>,
        /// Disable layer selection. [config: lr.layer_selection]
        #[arg(long)]
        no_ls: bool,
    },
    /// Layer-wise sparsity ratios from alphas.
    AllocateSparsity {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: SourceArgs,
        #[command(flatten)]
        sub: SubsampleArgs,
        /// Global target sparsity S. [config: sparsity.target]
        #[arg(long)]
        target: Option<f64>,
        /// Half-width of the per-layer range. [config: sparsity.tau]
        #[arg(long)]
        tau: Option<f64>,
        /// Count layers equally instead of by parameter count. [config: sparsity.weight_by_params = false]
        #[arg(long)]
        unweighted: bool,
        /// Accepted for symmetry with allocate-lr; sparsity has no layer selection.
        #[arg(long)]
        no_ls: bool,
    },
    /// Gaussian spectrum against the Marchenko-Pastur law.
    MpCheck {
        #[command(flatten)]
        common: Common,
        /// Rows of X. [config: mp_check.m]
        #[arg(long)]
        m: Option<usize>,
        /// Columns of X. [config: mp_check.n]
        #[arg(long)]
        n: Option<usize>,
        /// Number of seeded trials. [config: mp_check.trials]
        #[arg(long)]
        trials: Option<usize>,
        /// Histogram bins. [config: mp_check.bins]
        #[arg(long)]
        bins: Option<usize>,
    },
    /// Baseline vs FARMS alphas of He-initialized matrices across shapes.
    BiasBench {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sub: SubsampleArgs,
        /// Comma-separated shapes, e.g. 100x100,512x100. [config: bias_bench.shapes]
        #[arg(long, value_delimiter = ',', value_parser = parse_pair)]
        shapes: Option<Vec<(usize, usize)>>,
        /// Trials per shape. [config: bias_bench.trials]
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Teacher-student width sweep correlating alphas with feature alignment.
    ToyAlign {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sub: SubsampleArgs,
        /// Comma-separated hidden widths. [config: toy.widths]
        #[arg(long, value_delimiter = ',')]
        widths: Option<Vec<usize>>,
        /// Input dimension d. [config: toy.input_dim]
        #[arg(long)]
        input_dim: Option<usize>,
        /// Runs per width. [config: toy.seeds]
        #[arg(long)]
        runs: Option<usize>,
        /// SGD steps. [config: toy.steps]
        #[arg(long)]
        steps: Option<usize>,
        /// Batch size. [config: toy.batch_size]
        #[arg(long)]
        batch_size: Option<usize>,
        /// Learning rate. [config: toy.learning_rate]
        #[arg(long)]
        lr: Option<f64>,
        /// Steps between checkpoints. [config: toy.eval_stride]
        #[arg(long)]
        eval_stride: Option<usize>,
        /// Scale of the first-layer init. [config: toy.init_scale]
        #[arg(long)]
        init_scale: Option<f64>,
        /// Student activation. [config: toy.student_activation]
        #[arg(long, value_enum)]
        activation: Option<ActivationArg>,
        /// Teacher link function. [config: toy.teacher_activation]
        #[arg(long, value_enum)]
        teacher_activation: Option<ActivationArg>,
        /// Correlation coefficient. [config: toy.correlation]
        #[arg(long, value_enum)]
        correlation: Option<CorrelationArg>,
    },
}

#[derive(Args)]
struct Common {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if absent. [config: out]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output files to write. [config: format]
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Base seed for random streams. [config: seed]
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; never changes results. [config: threads]
    #[arg(long, env = "FARMS_THREADS")]
    threads: Option<usize>,
    /// Log verbosity on stderr.
    #[arg(long, default_value = "warn")]
    log_level: log::LevelFilter,
}

#[derive(Args)]
struct SubsampleArgs {
    /// Window aspect ratio Q. [config: subsample.q_ratio]
    #[arg(long)]
    q_ratio: Option<f64>,
    /// Explicit window ROWSxCOLS. [config: subsample.window]
    #[arg(long, value_parser = parse_pair)]
    window: Option<(usize, usize)>,
    /// Window grid ROWSxCOLS instead of automatic steps. [config: subsample.steps]
    #[arg(long, value_parser = parse_pair)]
    grid: Option<(usize, usize)>,
    /// Conv alpha aggregation. [config: subsample.conv_aggregation]
    #[arg(long, value_enum)]
    conv_aggregation: Option<AggregationArg>,
    /// Fail instead of clamping oversized windows. [config: subsample.clamp_window = false]
    #[arg(long)]
    no_clamp: bool,
    /// Hill k as a fraction of usable eigenvalues. [config: subsample.hill.k_mode.fraction]
    #[arg(long, conflicts_with = "k_fixed")]
    k_fraction: Option<f64>,
    /// Fixed Hill k. [config: subsample.hill.k_mode.fixed]
    #[arg(long)]
    k_fixed: Option<usize>,
    /// JSON map of layer-name glob to partial subsample config; merged over
    /// the config file's entries. [config: layer_overrides]
    #[arg(long)]
    overrides: Option<PathBuf>,
}

#[derive(Args)]
struct SourceArgs {
    /// Checkpoint manifest to analyze.
    #[arg(long, required_unless_present = "report", conflicts_with = "report")]
    manifest: Option<PathBuf>,
    /// report.json written by `analyze`.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Alpha column driving the allocation. [config: metric]
    #[arg(long, value_enum)]
    metric: Option<MetricArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Baseline,
    Farms,
}

#[derive(Clone, Copy, ValueEnum)]
enum MappingArg {
    Linear,
    Sigmoid,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggregationArg {
    Average,
    Concatenate,
}

#[derive(Clone, Copy, ValueEnum)]
enum ActivationArg {
    Relu,
    Tanh,
}

#[derive(Clone, Copy, ValueEnum)]
enum CorrelationArg {
    Pearson,
    Spearman,
}

impl From<ActivationArg> for Activation {
    fn from(a: ActivationArg) -> Self {
        match a {
            ActivationArg::Relu => Activation::Relu,
            ActivationArg::Tanh => Activation::Tanh,
        }
    }
}

enum Outcome {
    Complete,
    Partial,
}

struct Context_ {
    file: FileConfig,
    writer: Writer,
    seed: u64,
}

fn setup(common: &Common) -> Result<(Context_, Option<usize>)> {
    let file = FileConfig::load(common.config.as_deref())?;
    let out = common
        .out
        .clone()
        .or_else(|| file.out.clone().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("farms-out"));
    let format = common.format.or(file.format).unwrap_or_default();
    let seed = common.seed.or(file.seed).unwrap_or(0);
    let threads = common.threads.or(file.threads);
    let writer = Writer::new(&out, format)?;
    Ok((Context_ { file, writer, seed }, threads))
}

impl SubsampleArgs {
    fn apply(&self, mut cfg: SubsampleConfig) -> SubsampleConfig {
        if let Some(q) = self.q_ratio {
            cfg.q_ratio = q;
        }
        if let Some((rows, cols)) = self.window {
            cfg.window = WindowMode::Explicit { rows, cols };
        }
        if let Some((rows, cols)) = self.grid {
            cfg.steps = StepMode::Grid { rows, cols };
        }
        if let Some(a) = self.conv_aggregation {
            cfg.conv_aggregation = match a {
                AggregationArg::Average => ConvAggregation::AveragePerBlock,
                AggregationArg::Concatenate => ConvAggregation::ConcatenateAll,
            };
        }
        if self.no_clamp {
            cfg.clamp_window = false;
        }
        if let Some(f) = self.k_fraction {
            cfg.hill.k_mode = KMode::Fraction(f);
        }
        if let Some(k) = self.k_fixed {
            cfg.hill.k_mode = KMode::Fixed(k);
        }
        cfg
    }

    /// Final subsample config and layer overrides.
    fn resolve(
        &self,
        file: &FileConfig,
    ) -> Result<(SubsampleConfig, BTreeMap<String, farms::analysis::SubsampleOverride>)> {
        let cfg = self.apply(file.subsample);
        cfg.validate().context("subsample config")?;
        let mut map = file.layer_overrides.clone();
        if let Some(path) = &self.overrides {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading overrides {}", path.display()))?;
            let extra: BTreeMap<String, farms::analysis::SubsampleOverride> =
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing overrides {}", path.display()))?;
            map.extend(extra);
        }
        Ok((cfg, map))
    }
}

#[derive(Serialize)]
struct AnalyzeReport<'a> {
    command: &'static str,
    model_name: &'a str,
    config: &'a SubsampleConfig,
    layer_overrides: &'a BTreeMap<String, farms::analysis::SubsampleOverride>,
    layers: &'a [LayerReport],
    failures: &'a [LayerFailure],
    summary: &'a ModelSummary,
}

fn layer_table(reports: &[LayerReport]) -> Table {
    Table {
        file: "report.csv",
        header: vec![
            "layer",
            "kind",
            "shape",
            "alpha_baseline",
            "alpha_farms",
            "esd_size_baseline",
            "esd_size_farms",
            "submatrices",
            "excluded",
            "reason",
        ],
        rows: reports
            .iter()
            .map(|r| {
                vec![
                    r.name.clone(),
                    format!("{:?}", r.kind).to_lowercase(),
                    r.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x"),
                    cell(r.baseline_alpha),
                    cell(r.farms_alpha),
                    r.esd_size_baseline.to_string(),
                    r.esd_size_farms.to_string(),
                    r.submatrix_count.to_string(),
                    r.excluded.to_string(),
                    r.reason.clone().unwrap_or_default(),
                ]
            })
            .collect(),
    }
}

struct Analyzed {
    model_name: String,
    reports: Vec<LayerReport>,
    failures: Vec<LayerFailure>,
    summary: ModelSummary,
}

fn analyze_manifest(
    path: &Path,
    cfg: &SubsampleConfig,
    overrides: &BTreeMap<String, farms::analysis::SubsampleOverride>,
) -> Result<Analyzed> {
    let manifest = load_manifest(path).context("loading manifest")?;
    let rules = LayerOverrides::from_map(overrides.clone()).map_err(anyhow::Error::msg)?;
    let a = analyze_model(
        &manifest_dir(path),
        &manifest,
        cfg,
        &rules,
        LoadOptions::default(),
    );
    for f in &a.failures {
        warn!("layer {} ({}): {}", f.index, f.name, f.error);
    }
    Ok(Analyzed {
        model_name: a.model_name,
        reports: a.reports,
        failures: a.failures,
        summary: a.summary,
    })
}

fn cmd_analyze(common: &Common, manifest: &Path, sub: &SubsampleArgs) -> Result<Outcome> {
    let (ctx, threads) = setup(common)?;
    with_threads(threads, || {
        let (cfg, overrides) = sub.resolve(&ctx.file)?;
        let a = analyze_manifest(manifest, &cfg, &overrides)?;
        let report = AnalyzeReport {
            command: "analyze",
            model_name: &a.model_name,
            config: &cfg,
            layer_overrides: &overrides,
            layers: &a.reports,
            failures: &a.failures,
            summary: &a.summary,
        };
        finish(&ctx.writer, &report, &[layer_table(&a.reports)], !a.failures.is_empty())
    })
}

/// Layer reports from either a manifest or a previous `analyze` report.
fn load_source(
    source: &SourceArgs,
    sub: &SubsampleArgs,
    file: &FileConfig,
) -> Result<(Vec<LayerReport>, Vec<LayerFailure>)> {
    if let Some(path) = &source.report {
        #[derive(serde::Deserialize)]
        struct Saved {
            layers: Vec<LayerReport>,
            #[serde(default)]
            failures: Vec<LayerFailure>,
        }
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading report {}", path.display()))?;
        let saved: Saved = serde_json::from_str(&text)
            .with_context(|| format!("parsing report {}", path.display()))?;
        return Ok((saved.layers, saved.failures));
    }
    let manifest = source.manifest.as_deref().expect("clap requires a source");
    let (cfg, overrides) = sub.resolve(file)?;
    let a = analyze_manifest(manifest, &cfg, &overrides)?;
    Ok((a.reports, a.failures))
}

fn metric_of(source: &SourceArgs, file: &FileConfig) -> Metric {
    match source.metric {
        Some(MetricArg::Baseline) => Metric::Baseline,
        Some(MetricArg::Farms) => Metric::Farms,
        None => file.metric.unwrap_or(Metric::Farms),
    }
}

#[derive(Serialize)]
struct AllocationReport<'a, C: Serialize> {
    command: &'static str,
    config: &'a C,
    allocation: &'a AllocationResult,
    analysis_failures: &'a [LayerFailure],
}

fn allocation_table(result: &AllocationResult) -> Table {
    Table {
        file: "report.csv",
        header: vec!["layer", "alpha_baseline", "alpha_farms", "value", "excluded", "reason"],
        rows: result
            .per_layer
            .iter()
            .map(|e| {
                vec![
                    e.layer.clone(),
                    cell(e.alpha_baseline),
                    cell(e.alpha_farms),
                    cell(e.value),
                    e.excluded.to_string(),
                    e.reason.clone().unwrap_or_default(),
                ]
            })
            .collect(),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_allocate_lr(
    common: &Common,
    source: &SourceArgs,
    sub: &SubsampleArgs,
    eta: Option<f64>,
    s1: Option<f64>,
    s2: Option<f64>,
    mapping: Option<MappingArg>,
    temperature: Option<f64>,
    no_ls: bool,
) -> Result<Outcome> {
    let (ctx, threads) = setup(common)?;
    with_threads(threads, || {
        let mut cfg = ctx.file.lr;
        if let Some(v) = eta {
            cfg.eta_t = v;
        }
        if let Some(v) = s1 {
            cfg.s1 = v;
        }
        if let Some(v) = s2 {
            cfg.s2 = v;
        }
        let current_t = match cfg.mapping {
            LrMapping::Sigmoid { temperature } => temperature,
            LrMapping::LinearMinmax => 1.0,
        };
        match (mapping, temperature) {
            (Some(MappingArg::Linear), _) => cfg.mapping = LrMapping::LinearMinmax,
            (Some(MappingArg::Sigmoid), t) | (None, t @ Some(_)) => {
                cfg.mapping = LrMapping::Sigmoid {
                    temperature: t.unwrap_or(current_t),
                }
            }
            (None, None) => {}
        }
        if no_ls {
            cfg.layer_selection = LsConfig::disabled();
        }
        let metric = metric_of(source, &ctx.file);
        let (reports, failures) = load_source(source, sub, &ctx.file)?;
        let result = assign_learning_rates(&reports, &cfg, metric)?;
        let report = AllocationReport {
            command: "allocate-lr",
            config: &cfg,
            allocation: &result,
            analysis_failures: &failures,
        };
        finish(&ctx.writer, &report, &[allocation_table(&result)], !failures.is_empty())
    })
}

#[allow(clippy::too_many_arguments)]
fn cmd_allocate_sparsity(
    common: &Common,
    source: &SourceArgs,
    sub: &SubsampleArgs,
    target: Option<f64>,
    tau: Option<f64>,
    unweighted: bool,
) -> Result<Outcome> {
    let (ctx, threads) = setup(common)?;
    with_threads(threads, || {
        let mut cfg = ctx.file.sparsity;
        if let Some(v) = target {
            cfg.target = v;
        }
        if let Some(v) = tau {
            cfg.tau = v;
        }
        if unweighted {
            cfg.weight_by_params = false;
        }
        let metric = metric_of(source, &ctx.file);
        let (reports, failures) = load_source(source, sub, &ctx.file)?;
        let result = assign_sparsities(&reports, &cfg, metric)?;
        let report = AllocationReport {
            command: "allocate-sparsity",
            config: &cfg,
            allocation: &result,
            analysis_failures: &failures,
        };
        finish(&ctx.writer, &report, &[allocation_table(&result)], !failures.is_empty())
    })
}

#[derive(Serialize)]
struct CurvePoint {
    x: f64,
    density: f64,
}

#[derive(Serialize)]
struct MpReport<'a> {
    command: &'static str,
    seed: u64,
    trials: usize,
    bins: usize,
    result: &'a farms::bench::MpCheckResult,
    /// Continuous MP density on a uniform grid over the histogram range.
    curve: Vec<CurvePoint>,
}

const CURVE_POINTS: usize = 200;

fn cmd_mp_check(
    common: &Common,
    m: Option<usize>,
    n: Option<usize>,
    trials: Option<usize>,
    bins: Option<usize>,
) -> Result<Outcome> {
    let (ctx, threads) = setup(common)?;
    with_threads(threads, || {
        let sec = &ctx.file.mp_check;
        let (m, n) = (m.unwrap_or(sec.m), n.unwrap_or(sec.n));
        let trials = trials.unwrap_or(sec.trials);
        let bins = bins.unwrap_or(sec.bins);
        let r = mp_check(m, n, trials, ctx.seed, bins)?;
        let hi = r.histogram.last().map_or(1.0, |b| b.upper);
        let curve = (0..=CURVE_POINTS)
            .map(|i| {
                let x = hi * i as f64 / CURVE_POINTS as f64;
                CurvePoint {
                    x,
                    density: mp_density(x, r.y).0,
                }
            })
            .collect::<Vec<_>>();
        let tables = [
            Table {
                file: "report.csv",
                header: vec!["trial", "ks"],
                rows: r
                    .ks_per_trial
                    .iter()
                    .enumerate()
                    .map(|(i, d)| vec![i.to_string(), cell(*d)])
                    .collect(),
            },
            Table {
                file: "histogram.csv",
                header: vec!["lower", "upper", "density", "mp_density"],
                rows: r
                    .histogram
                    .iter()
                    .map(|b| vec![cell(b.lower), cell(b.upper), cell(b.density), cell(b.mp_density)])
                    .collect(),
            },
            Table {
                file: "curve.csv",
                header: vec!["x", "density"],
                rows: curve.iter().map(|p| vec![cell(p.x), cell(p.density)]).collect(),
            },
        ];
        let report = MpReport {
            command: "mp-check",
            seed: ctx.seed,
            trials,
            bins,
            result: &r,
            curve,
        };
        finish(&ctx.writer, &report, &tables, false)
    })
}

#[derive(Serialize)]
struct BiasReport<'a> {
    command: &'static str,
    seed: u64,
    config: &'a SubsampleConfig,
    result: &'a farms::bench::BiasSweepResult,
}

fn cmd_bias_bench(
    common: &Common,
    sub: &SubsampleArgs,
    shapes: Option<&[(usize, usize)]>,
    trials: Option<usize>,
) -> Result<Outcome> {
    let (ctx, threads) = setup(common)?;
    with_threads(threads, || {
        let (cfg, _) = sub.resolve(&ctx.file)?;
        let shapes = shapes.unwrap_or(&ctx.file.bias_bench.shapes);
        let trials = trials.unwrap_or(ctx.file.bias_bench.trials);
        let r = bias_sweep(shapes, trials, &cfg, ctx.seed)?;
        for f in &r.failures {
            warn!("{}x{} trial {}: {}", f.m, f.n, f.trial, f.error);
        }
        let table = Table {
            file: "report.csv",
            header: vec![
                "m",
                "n",
                "trials",
                "completed",
                "baseline_mean",
                "baseline_std",
                "farms_mean",
                "farms_std",
            ],
            rows: r
                .rows
                .iter()
                .map(|row| {
                    vec![
                        row.m.to_string(),
                        row.n.to_string(),
                        row.trials.to_string(),
                        row.completed.to_string(),
                        opt_cell(row.baseline.map(|s| s.mean)),
                        opt_cell(row.baseline.map(|s| s.std)),
                        opt_cell(row.farms.map(|s| s.mean)),
                        opt_cell(row.farms.map(|s| s.std)),
                    ]
                })
                .collect(),
        };
        let report = BiasReport {
            command: "bias-bench",
            seed: ctx.seed,
            config: &cfg,
            result: &r,
        };
        finish(&ctx.writer, &report, &[table], !r.failures.is_empty())
    })
}

#[derive(Serialize)]
struct ToyReport<'a> {
    command: &'static str,
    result: &'a farms::bench::toy::AlignmentSeries,
}

#[allow(clippy::too_many_arguments)]
fn cmd_toy_align(
    common: &Common,
    sub: &SubsampleArgs,
    widths: Option<&[usize]>,
    input_dim: Option<usize>,
    runs: Option<usize>,
    steps: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    eval_stride: Option<usize>,
    init_scale: Option<f64>,
    activation: Option<ActivationArg>,
    teacher_activation: Option<ActivationArg>,
    correlation: Option<CorrelationArg>,
) -> Result<Outcome> {
    let (ctx, threads) = setup(common)?;
    with_threads(threads, || {
        let mut cfg = ctx.file.toy.clone();
        let (sub_cfg, _) = sub.resolve(&ctx.file)?;
        cfg.subsample = sub_cfg;
        cfg.seed = common.seed.or(ctx.file.seed).unwrap_or(cfg.seed);
        if let Some(w) = widths {
            cfg.widths = w.to_vec();
        }
        macro_rules! set {
            ($field:ident, $v:expr) => {
                if let Some(v) = $v {
                    cfg.$field = v;
                }
            };
        }
        set!(input_dim, input_dim);
        set!(seeds, runs);
        set!(steps, steps);
        set!(batch_size, batch_size);
        set!(learning_rate, lr);
        set!(eval_stride, eval_stride);
        set!(init_scale, init_scale);
        set!(student_activation, activation.map(Activation::from));
        set!(teacher_activation, teacher_activation.map(Activation::from));
        set!(
            correlation,
            correlation.map(|c| match c {
                CorrelationArg::Pearson => CorrelationMethod::Pearson,
                CorrelationArg::Spearman => CorrelationMethod::Spearman,
            })
        );

        let r = teacher_student_run(&cfg)?;
        info!(
            "correlation baseline {:?} farms {:?}",
            r.correlation.baseline, r.correlation.farms
        );
        let summary = Table {
            file: "report.csv",
            header: vec![
                "width",
                "aspect_ratio",
                "alignment_mean",
                "alignment_std",
                "alpha_baseline_mean",
                "alpha_baseline_std",
                "alpha_farms_mean",
                "alpha_farms_std",
            ],
            rows: r
                .summary
                .iter()
                .map(|s| {
                    vec![
                        s.width.to_string(),
                        cell(s.aspect_ratio),
                        cell(s.alignment.mean),
                        cell(s.alignment.std),
                        cell(s.baseline_alpha.mean),
                        cell(s.baseline_alpha.std),
                        cell(s.farms_alpha.mean),
                        cell(s.farms_alpha.std),
                    ]
                })
                .collect(),
        };
        let checkpoints = Table {
            file: "checkpoints.csv",
            header: vec![
                "width",
                "run",
                "step",
                "loss",
                "alignment",
                "alpha_baseline",
                "alpha_farms",
                "best",
            ],
            rows: r
                .runs
                .iter()
                .flat_map(|run| {
                    run.checkpoints.iter().map(move |c| {
                        vec![
                            run.width.to_string(),
                            run.seed_index.to_string(),
                            c.step.to_string(),
                            opt_cell(c.loss),
                            cell(c.alignment),
                            cell(c.baseline_alpha),
                            cell(c.farms_alpha),
                            (c.step == run.best.step).to_string(),
                        ]
                    })
                })
                .collect(),
        };
        let report = ToyReport {
            command: "toy-align",
            result: &r,
        };
        finish(&ctx.writer, &report, &[summary, checkpoints], false)
    })
}

fn finish(writer: &Writer, report: &impl Serialize, tables: &[Table], partial: bool) -> Result<Outcome> {
    for path in writer.write(report, tables)? {
        info!("wrote {}", path.display());
    }
    Ok(if partial {
        Outcome::Partial
    } else {
        Outcome::Complete
    })
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        if t == 0 {
            bail!("--threads must be >= 1");
        }
        builder = builder.num_threads(t);
    }
    builder.build().context("building thread pool")?.install(f)
}

fn common(cmd: &Command) -> &Common {
    match cmd {
        Command::Analyze { common, .. }
        | Command::AllocateLr { common, .. }
        | Command::AllocateSparsity { common, .. }
        | Command::MpCheck { common, .. }
        | Command::BiasBench { common, .. }
        | Command::ToyAlign { common, .. } => common,
    }
}

fn run(cli: &Cli) -> Result<Outcome> {
    match &cli.command {
        Command::Analyze {
            common,
            manifest,
            sub,
        } => cmd_analyze(common, manifest, sub),
        Command::AllocateLr {
            common,
            source,
            sub,
            eta,
            s1,
            s2,
            mapping,
            temperature,
            no_ls,
        } => cmd_allocate_lr(common, source, sub, *eta, *s1, *s2, *mapping, *temperature, *no_ls),
        Command::AllocateSparsity {
            common,
            source,
            sub,
            target,
            tau,
            unweighted,
            no_ls,
        } => {
            if *no_ls {
                info!("--no-ls has no effect on sparsity allocation");
            }
            cmd_allocate_sparsity(common, source, sub, *target, *tau, *unweighted)
        }
        Command::MpCheck {
            common,
            m,
            n,
            trials,
            bins,
        } => cmd_mp_check(common, *m, *n, *trials, *bins),
        Command::BiasBench {
            common,
            sub,
            shapes,
            trials,
        } => cmd_bias_bench(common, sub, shapes.as_deref(), *trials),
        Command::ToyAlign {
            common,
            sub,
            widths,
            input_dim,
            runs,
            steps,
            batch_size,
            lr,
            eval_stride,
            init_scale,
            activation,
            teacher_activation,
            correlation,
        } => cmd_toy_align(
            common,
            sub,
            widths.as_deref(),
            *input_dim,
            *runs,
            *steps,
            *batch_size,
            *lr,
            *eval_stride,
            *init_scale,
            *activation,
            *teacher_activation,
            *correlation,
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(common(&cli.command).log_level)
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(Outcome::Complete) => ExitCode::SUCCESS,
        Ok(Outcome::Partial) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
