use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng;
use serde::Serialize;

use regal::diversity::{
    find_triangle_violation, DistanceSpec, PNorm, Site, SpatialForm, TriangleViolation,
};
use regal::features::{fit_pca, pca_project, pool_region_features, FeatureMatrix};
use regal::io::{self, RunConfig};
use regal::region::{ImageDims, PoolSnapshot, PoolState, RegionGrid, RegionId};
use regal::rng::{stream_rng, Stream, GENERATOR};
use regal::scoring::{score_image, ScoreTable};
use regal::selection::{greedy_select, preset, select_batch, Method, Objective, SelectionConfig};
use regal::sim::{
    generate_synthetic_dataset, run_al_loop, ClassLayout, LoopConfig, SyntheticDatasetSpec,
};
use regal::{Error, Result};

#[derive(Parser)]
#[command(
    name = "regal",
    version,
    about = "Region selection for active learning in semantic segmentation"
)]
struct Cli {
    /// Log informational messages to stderr (RUST_LOG overrides)
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Select one batch of regions from a pool
    Select(SelectArgs),
    /// Run the active learning loop on a synthetic dataset
    Simulate(SimulateArgs),
    /// Check the metric conditions of a piece-wise distance
    ValidateMetric(MetricArgs),
    /// Time batch selection on random scores and features
    Bench(BenchArgs),
}

/// Selection method and distance settings shared by `select` and `simulate`.
#[derive(Args)]
struct SelectionArgs {
    /// Named method; the weight flags below override its weights
    #[arg(long, value_parser = parse_method)]
    method: Option<Method>,
    #[arg(long)]
    lambda_u: Option<f64>,
    #[arg(long)]
    lambda_f: Option<f64>,
    #[arg(long)]
    lambda_s: Option<f64>,
    /// Spatial distance form
    #[arg(long, value_enum)]
    dist: Option<DistArg>,
    #[arg(long)]
    a: Option<f64>,
    #[arg(long)]
    b: Option<f64>,
    #[arg(long)]
    c: Option<f64>,
    /// Neighborhood radius in pixels [default: region size]
    #[arg(long)]
    tau: Option<f64>,
    /// Norm of center offsets: 1, 2 or inf
    #[arg(long, value_parser = parse_pnorm)]
    p_norm: Option<PNorm>,
    #[arg(long, value_enum)]
    objective: Option<ObjectiveArg>,
    #[arg(long)]
    seed: Option<u64>,
    /// Region side length in pixels
    #[arg(long)]
    region_size: Option<u32>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DistArg {
    Piecewise,
    Linear,
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    MaxMin,
    MaxSum,
}

#[derive(Clone, Copy, ValueEnum)]
enum LayoutArg {
    ImbalancedScenes,
    DominantObjects,
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_pnorm(s: &str) -> std::result::Result<PNorm, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl SelectionArgs {
    fn config(&self, default_method: Method, region_size: u32) -> SelectionConfig {
        let method = self.method.unwrap_or(default_method);
        let mut cfg = preset(method, region_size);
        let named = cfg;
        if let Some(v) = self.lambda_u {
            cfg.lambda_u = v;
        }
        let d = &mut cfg.distance;
        if let Some(v) = self.lambda_f {
            d.lambda_f = v;
        }
        if let Some(v) = self.lambda_s {
            d.lambda_s = v;
        }
        if let Some(form) = self.dist {
            d.spatial_form = match form {
                DistArg::Piecewise => SpatialForm::Piecewise,
                DistArg::Linear => SpatialForm::Linear,
            };
        }
        d.a = self.a.unwrap_or(d.a);
        d.b = self.b.unwrap_or(d.b);
        d.c = self.c.unwrap_or(d.c);
        d.tau = self.tau.unwrap_or(d.tau);
        d.p_norm = self.p_norm.unwrap_or(d.p_norm);
        if let Some(o) = self.objective {
            cfg.objective = match o {
                ObjectiveArg::MaxMin => Objective::MaxMin,
                ObjectiveArg::MaxSum => Objective::MaxSum,
            };
        }
        cfg.seed = self.seed.unwrap_or(0);
        let reweighted = (cfg.lambda_u, cfg.distance.lambda_f, cfg.distance.lambda_s)
            != (
                named.lambda_u,
                named.distance.lambda_f,
                named.distance.lambda_s,
            );
        if reweighted {
            cfg.method = None;
        }
        cfg
    }
}

#[derive(Args)]
struct SelectArgs {
    /// Pool snapshot JSON (image sizes, region size, labeled regions)
    #[arg(long, required_unless_present = "config")]
    pool: Option<PathBuf>,
    /// Posterior index JSON listing one RALP file per image
    #[arg(long, required_unless_present = "config")]
    posteriors: Option<PathBuf>,
    /// Region features (RALF)
    #[arg(long, conflicts_with = "feature_maps")]
    features: Option<PathBuf>,
    /// Feature map index JSON listing one RALM file per image; maps are average-pooled per region
    #[arg(long)]
    feature_maps: Option<PathBuf>,
    /// Project region features onto this many principal components
    #[arg(long)]
    pca_dim: Option<usize>,
    /// Output selection manifest (JSON Lines)
    #[arg(short, long, required_unless_present = "config")]
    out: Option<PathBuf>,
    #[arg(long, required_unless_present = "config")]
    batch_size: Option<usize>,
    /// Write the pool snapshot with the batch labeled here
    #[arg(long)]
    commit_pool: Option<PathBuf>,
    /// Batch index written to the manifest [default: pool iteration]
    #[arg(long)]
    batch_index: Option<u32>,
    /// Run configuration JSON holding the inputs and selection settings
    #[arg(
        long,
        conflicts_with_all = ["pool", "posteriors", "features", "feature_maps", "pca_dim", "out", "batch_size", "SelectionArgs"]
    )]
    config: Option<PathBuf>,
    #[command(flatten)]
    selection: SelectionArgs,
}

#[derive(Args)]
struct SimulateArgs {
    /// Training (pool) images
    #[arg(long, default_value_t = 40)]
    images: u32,
    #[arg(long, default_value_t = 40)]
    eval_images: u32,
    #[arg(long, default_value_t = 128)]
    height: u32,
    #[arg(long, default_value_t = 128)]
    width: u32,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, value_enum, default_value = "imbalanced-scenes")]
    layout: LayoutArg,
    #[arg(long, default_value_t = 16)]
    feature_dim: usize,
    /// Feature noise standard deviation
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    /// Selection rounds after the initial random batch
    #[arg(long, default_value_t = 4)]
    iterations: u32,
    /// Size of the initial batch; batch t labels 2^(t-1) times this
    #[arg(long, default_value_t = 50)]
    base: u64,
    /// Softmax temperature of the toy model
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long)]
    pca_dim: Option<usize>,
    /// Per-iteration history as JSON [default: stdout]
    #[arg(long)]
    out_json: Option<PathBuf>,
    /// Per-iteration history as CSV
    #[arg(long)]
    out_csv: Option<PathBuf>,
    #[command(flatten)]
    selection: SelectionArgs,
}

#[derive(Args)]
struct MetricArgs {
    a: f64,
    b: f64,
    c: f64,
    #[arg(long, default_value_t = 8)]
    region_size: u32,
    /// Neighborhood radius [default: region size]
    #[arg(long)]
    tau: Option<f64>,
    /// Regions per side of each of the two test images
    #[arg(long, default_value_t = 4)]
    grid: u32,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 100)]
    images: u32,
    #[arg(long, default_value_t = 250)]
    height: u32,
    #[arg(long, default_value_t = 400)]
    width: u32,
    #[arg(long, default_value_t = 10)]
    region_size: u32,
    /// Feature dimension
    #[arg(long, default_value_t = 128)]
    dim: usize,
    /// Regions labeled before selection
    #[arg(long, default_value_t = 1000)]
    labeled: usize,
    /// Batch sizes to time
    #[arg(long, value_delimiter = ',', default_value = "100,1000")]
    budgets: Vec<usize>,
    #[arg(long, value_delimiter = ',', value_parser = parse_method, default_value = "entropy-spatial,entropy-feature")]
    methods: Vec<Method>,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV output [default: stdout]
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: &'a str,
    message: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Select(args) => select(args),
        Command::Simulate(args) => simulate(args),
        Command::ValidateMetric(args) => validate_metric(args),
        Command::Bench(args) => bench(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = ErrorReport {
                error: e.code(),
                message: e.to_string(),
            };
            eprintln!(
                "{}",
                serde_json::to_string(&report).expect("error report serializes")
            );
            ExitCode::FAILURE
        }
    }
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => io::write_atomic(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

struct SelectPlan {
    posteriors: PathBuf,
    features: Option<PathBuf>,
    feature_maps: Option<PathBuf>,
    pca_dim: Option<usize>,
    out: PathBuf,
    selection: SelectionConfig,
}

fn plan(
    args: &SelectArgs,
    config: Option<RunConfig>,
    snapshot: &PoolSnapshot,
) -> Result<SelectPlan> {
    if let Some(cfg) = config {
        if cfg.region_size != snapshot.region_size {
            return Err(Error::Config(format!(
                "config region size {} does not match pool region size {}",
                cfg.region_size, snapshot.region_size
            )));
        }
        return Ok(SelectPlan {
            posteriors: cfg.posterior_index,
            features: cfg.features,
            feature_maps: None,
            pca_dim: cfg.pca_dim,
            out: cfg.output_manifest,
            selection: cfg.selection,
        });
    }
    let region_size = snapshot.region_size;
    if let Some(n) = args.selection.region_size {
        if n != region_size {
            return Err(Error::Config(format!(
                "--region-size {n} does not match pool region size {region_size}"
            )));
        }
    }
    let mut selection = args.selection.config(Method::EntropySpatial, region_size);
    selection.batch_size = args.batch_size.expect("required by clap");
    Ok(SelectPlan {
        posteriors: args.posteriors.clone().expect("required by clap"),
        features: args.features.clone(),
        feature_maps: args.feature_maps.clone(),
        pca_dim: args.pca_dim,
        out: args.out.clone().expect("required by clap"),
        selection,
    })
}

fn select(args: SelectArgs) -> Result<()> {
    let config = args.config.as_ref().map(RunConfig::load).transpose()?;
    let pool_path = match &config {
        Some(cfg) => cfg.pool_state.clone(),
        None => args.pool.clone().expect("required by clap"),
    };
    let snapshot = PoolSnapshot::from_json(&fs::read_to_string(&pool_path)?)?;
    let plan = plan(&args, config, &snapshot)?;
    plan.selection.validate()?;
    let mut pool = snapshot.restore()?;
    let grid = pool.grid().clone();

    let posteriors = io::load_posteriors(&plan.posteriors)?;
    let mut partials = Vec::with_capacity(grid.len());
    for p in &posteriors {
        partials.extend(score_image(p, &grid)?);
    }
    let scores = ScoreTable::assemble(&grid, partials)?;

    let features = if plan.selection.distance.lambda_f > 0.0 {
        Some(load_features(&plan, &grid)?)
    } else {
        None
    };
    let result = select_batch(&pool, &scores, features.as_ref(), &plan.selection)?;
    let batch_index = args.batch_index.unwrap_or(pool.iteration());
    io::write_selection_manifest(&plan.out, &result, batch_index)?;
    log::info!(
        "{}: {} regions in {:.3?}, {} distance evaluations",
        result.label,
        result.batch.len(),
        result.wall_time,
        result.stats.init_distance_evals + result.stats.update_distance_evals
    );

    if let Some(path) = &args.commit_pool {
        pool.stage_batch(&result.batch)?;
        pool.commit_batch();
        io::write_atomic(path, pool.snapshot().to_json()?.as_bytes())?;
    }
    Ok(())
}

fn load_features(plan: &SelectPlan, grid: &RegionGrid) -> Result<FeatureMatrix> {
    let matrix = match (&plan.features, &plan.feature_maps) {
        (Some(path), _) => io::read_region_features(path)?,
        (None, Some(index)) => {
            let mut maps = io::load_feature_maps(index)?;
            maps.sort_by_key(|m| m.image_index);
            let parts = maps
                .iter()
                .map(|m| pool_region_features(m, grid))
                .collect::<Result<Vec<_>>>()?;
            FeatureMatrix::stack(parts)?
        }
        (None, None) => return Err(Error::Config(
            "the feature weight is positive but neither --features nor --feature-maps was given"
                .into(),
        )),
    };
    if !matrix.is_aligned_with(grid) {
        return Err(Error::InvalidInput(
            "region features do not cover the pool grid in grid order".into(),
        ));
    }
    match plan.pca_dim {
        Some(k) if k < matrix.dim() => {
            let (model, status) = fit_pca(&matrix, k)?;
            log::info!("pca to {k} dimensions: {status:?}");
            pca_project(&model, &matrix)
        }
        _ => Ok(matrix),
    }
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let seed = args.selection.seed.unwrap_or(0);
    let spec = SyntheticDatasetSpec {
        num_train_images: args.images,
        num_eval_images: args.eval_images,
        height: args.height,
        width: args.width,
        num_classes: args.classes,
        layout: match args.layout {
            LayoutArg::ImbalancedScenes => ClassLayout::ImbalancedScenes,
            LayoutArg::DominantObjects => ClassLayout::DominantObjects,
        },
        feature_dim: args.feature_dim,
        noise_sigma: args.noise,
        seed,
    };
    let region_size = args.selection.region_size.unwrap_or(8);
    let method = args.selection.config(Method::EntropySpatial, region_size);
    let mut loop_cfg = LoopConfig::new(args.iterations, args.base, region_size, seed);
    loop_cfg.temperature = args.temperature;
    loop_cfg.pca_dim = args.pca_dim;

    let dataset = generate_synthetic_dataset(&spec)?;
    let history = run_al_loop(&dataset, &method, &loop_cfg)?;
    if let Some(path) = &args.out_csv {
        io::write_atomic(path, history.to_csv().as_bytes())?;
    }
    if args.out_json.is_some() || args.out_csv.is_none() {
        let mut json = history.to_json()?;
        json.push('\n');
        emit(args.out_json.as_deref(), &json)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct MetricOutput {
    a: f64,
    b: f64,
    c: f64,
    tau: f64,
    is_metric: bool,
    violations: Vec<&'static str>,
    counterexample: Option<TriangleViolation>,
}

fn validate_metric(args: MetricArgs) -> Result<()> {
    if args.grid == 0 {
        return Err(Error::Config("--grid must be at least 1".into()));
    }
    let mut spec = DistanceSpec::piecewise_defaults(args.region_size);
    spec.a = args.a;
    spec.b = args.b;
    spec.c = args.c;
    if let Some(tau) = args.tau {
        spec.tau = tau;
    }
    spec.lambda_s = 1.0;
    spec.validate()?;
    let report = spec.metric_report();

    let side = args.grid * args.region_size;
    let catalog = [ImageDims::new(0, side, side), ImageDims::new(1, side, side)];
    let grid = RegionGrid::build(&catalog, args.region_size)?;
    let sites: Vec<Site> = grid.regions().iter().map(Site::from).collect();
    let out = MetricOutput {
        a: spec.a,
        b: spec.b,
        c: spec.c,
        tau: spec.tau,
        is_metric: report.is_metric(),
        violations: report.violations.iter().map(|v| v.inequality()).collect(),
        counterexample: find_triangle_violation(&sites, &spec),
    };
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn bench(args: BenchArgs) -> Result<()> {
    if args.repeats == 0 {
        return Err(Error::Config("--repeats must be at least 1".into()));
    }
    let catalog: Vec<ImageDims> = (0..args.images)
        .map(|i| ImageDims::new(i, args.height, args.width))
        .collect();
    let grid = Arc::new(RegionGrid::build(&catalog, args.region_size)?);
    let mut rng = stream_rng(args.seed, Stream::Bench);
    log::info!(
        "{} regions, D={}, generator {GENERATOR}",
        grid.len(),
        args.dim
    );

    let data: Vec<f64> = (0..grid.len() * args.dim)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let ids: Vec<RegionId> = grid.regions().iter().map(|r| r.id).collect();
    let features = FeatureMatrix::from_parts(ids.clone(), args.dim, data)?;
    let u: Vec<f64> = (0..grid.len())
        .map(|_| rng.random_range(0.0..1.0))
        .collect();
    let scores = ScoreTable::from_normalized(&grid, &u)?;
    let labeled = rand::seq::index::sample(&mut rng, ids.len(), args.labeled.min(ids.len()));
    let pool = PoolState::from_labeled(grid.clone(), labeled.into_iter().map(|i| ids[i]), 0)?;

    let mut csv = String::from("method,budget,seconds_mean,seconds_std\n");
    for &method in &args.methods {
        for &budget in &args.budgets {
            let cfg = preset(method, args.region_size)
                .with_batch_size(budget)
                .with_seed(args.seed);
            let mut secs = Vec::with_capacity(args.repeats);
            for _ in 0..args.repeats {
                let start = Instant::now();
                match method {
                    Method::Random | Method::EntropyRandom => {
                        select_batch(&pool, &scores, Some(&features), &cfg)?
                    }
                    _ => greedy_select(&pool, &scores, Some(&features), &cfg)?,
                };
                secs.push(start.elapsed().as_secs_f64());
            }
            let (mean, std) = mean_std(&secs);
            log::info!("{method} K={budget}: {mean:.4}s");
            csv.push_str(&format!("{method},{budget},{mean:.6},{std:.6}\n"));
        }
    }
    emit(args.out.as_deref(), &csv)
}

// sample standard deviation; zero for a single run
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
