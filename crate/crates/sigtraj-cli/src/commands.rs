//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use sigtraj::analysis::{
    export_personalized_trajectories, inflection_density, mean_latent_curves, risk_factor_report,
    sample_inflections,
};
use sigtraj::benchmarks::{fit_global_linear, fit_global_sigmoid, fit_lme, Strata};
use sigtraj::cohort::Cohort;
use sigtraj::evaluation::{
    kfold_split, run_scenario, EvalReport, EvaluatedFold, LinearBenchmarkPredictor,
    LmeBenchmarkPredictor, ProposedPredictor, ScenarioSpec, SigmoidBenchmarkPredictor,
    SubjectLinearPredictor, TrajectoryPredictor, DEFAULT_N_PERM,
};
use sigtraj::inference::{train, train_validated, TrainConfig};
use sigtraj::prediction::{forecast, History};
use sigtraj::synthesis::{generate_cohort, SynthConfig};

use crate::formats::{
    canonical_config_text, curves_csv, density_csv, fnv1a_hex, forecast_csv, load_cohort,
    load_model, report_csv, risk_factors_csv, save_cohort, save_ground_truth, save_model,
    trace_csv, trajectories_csv, atomic_write, CohortPaths, Manifest, ModelEnvelope, ModelKind,
    PvalueFile, FORMAT_VERSION,
};
use crate::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "sigtraj",
    version,
    about = "Latent-sigmoid disease progression modeling: synthesis, training, forecasting, benchmarks, evaluation, analysis"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Seed override; takes precedence over any seed in --config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// JSON configuration file for the subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Directory receiving the run's outputs and manifest.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic longitudinal cohort.
    Synth(SynthArgs),
    /// Train the progression model on a cohort.
    Train(TrainArgs),
    /// Forecast future scores for subjects of a cohort.
    Forecast(ForecastArgs),
    /// Cross-validated scenario evaluation against the benchmarks.
    Evaluate(EvaluateArgs),
    /// Interrogate a trained model (densities, curves, risk factors, exports).
    Analyze(AnalyzeArgs),
    /// Fit a benchmark model on a cohort.
    BenchFit(BenchFitArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Subjects generated when no --config is given.
    #[arg(long, default_value_t = 200)]
    pub n_subjects: usize,
    /// Add the two imaging-style training targets to the default cohort.
    #[arg(long, default_value_t = false)]
    pub with_imaging: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory holding visits.csv, attributes.csv, and meta.json.
    #[arg(long)]
    pub data_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ForecastArgs {
    /// Trained model envelope (model.json from `train`).
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Comma-separated subject ids (defaults to every subject).
    #[arg(long, value_delimiter = ',')]
    pub subjects: Vec<String>,
    /// Visits handed to the model as history (defaults to all available).
    #[arg(long)]
    pub past_visits: Option<usize>,
    /// Query ages: either "start:end:step" or a comma-separated list.
    #[arg(long)]
    pub times: String,
    #[arg(long, default_value_t = 1024)]
    pub n_samples: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Cohort for the personalized trajectory export (optional).
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BenchKind {
    Global,
    Sex,
    Apoe,
    SexApoe,
    Lme,
    GlobalLinear,
    SexLinear,
    ApoeLinear,
    SexApoeLinear,
}

#[derive(Debug, Args)]
pub struct BenchFitArgs {
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long, value_enum)]
    pub kind: BenchKind,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::Synth(args) => run_synth(&cli, args),
        Command::Train(args) => run_train(&cli, args),
        Command::Forecast(args) => run_forecast(&cli, args),
        Command::Evaluate(args) => run_evaluate(&cli, args),
        Command::Analyze(args) => run_analyze(&cli, args),
        Command::BenchFit(args) => run_bench_fit(&cli, args),
    }
}

fn out_dir(cli: &Cli) -> CliResult<&Path> {
    cli.out_dir
        .as_deref()
        .ok_or_else(|| CliError::Input("--out-dir is required".into()))
}

fn load_config<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn config_hash(cli: &Cli) -> CliResult<String> {
    Ok(fnv1a_hex(
        canonical_config_text(cli.config.as_deref())?.as_bytes(),
    ))
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

fn run_synth(cli: &Cli, args: &SynthArgs) -> CliResult<()> {
    let dir = out_dir(cli)?;
    let mut config: SynthConfig = match &cli.config {
        Some(path) => load_config(path)?,
        None if args.with_imaging => SynthConfig::default_with_imaging(args.n_subjects, 0),
        None => SynthConfig::default_clinical(args.n_subjects, 0),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let (cohort, truths) = generate_cohort(&config)?;
    let paths = CohortPaths::in_dir(dir);
    save_cohort(&cohort, &paths)?;
    let truth_path = dir.join("ground_truth.json");
    save_ground_truth(&cohort, &truths, &truth_path)?;

    let mut manifest = Manifest::new("synth", config.seed, config_hash(cli)?);
    for path in paths.all() {
        manifest = manifest.output(path);
    }
    manifest.output(&truth_path).write(dir)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn run_train(cli: &Cli, args: &TrainArgs) -> CliResult<()> {
    let dir = out_dir(cli)?;
    let paths = CohortPaths::in_dir(&args.data_dir);
    let cohort = load_cohort(&paths)?;
    let mut config: TrainConfig = match &cli.config {
        Some(path) => load_config(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let fit = train(&cohort, &config)?;

    let model_path = dir.join("model.json");
    let envelope = ModelEnvelope {
        format_version: FORMAT_VERSION.to_string(),
        dims: (cohort.n_attributes(), cohort.n_targets()),
        model: ModelKind::Progression {
            targets: cohort.meta.targets.clone(),
            attributes: cohort.meta.attributes.clone(),
            age_range: fit.age_range,
            params: fit.params,
            proxies: fit.proxies,
            subject_ids: cohort.subjects.iter().map(|s| s.id.clone()).collect(),
            summary: fit.summary,
        },
    };
    save_model(&envelope, &model_path)?;
    let trace_path = dir.join("trace.csv");
    atomic_write(&trace_path, &trace_csv(&fit.trace)?)?;

    let mut manifest = Manifest::new("train", config.seed, config_hash(cli)?);
    for path in paths.all() {
        manifest = manifest.input(path);
    }
    manifest.output(&model_path).output(&trace_path).write(dir)
}

// ---------------------------------------------------------------------------
// forecast
// ---------------------------------------------------------------------------

fn parse_times(spec: &str) -> CliResult<Vec<f64>> {
    let parse = |s: &str| -> CliResult<f64> {
        s.trim()
            .parse::<f64>()
            .map_err(|e| CliError::Input(format!("bad time {s:?}: {e}")))
    };
    if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        if parts.len() != 3 {
            return Err(CliError::Input(format!(
                "time grid {spec:?} must be start:end:step"
            )));
        }
        let (start, end, step) = (parse(parts[0])?, parse(parts[1])?, parse(parts[2])?);
        if !(step > 0.0 && end >= start) {
            return Err(CliError::Input(format!("empty time grid {spec:?}")));
        }
        let mut times = Vec::new();
        let mut t = start;
        while t <= end + 1e-9 {
            times.push(t);
            t += step;
        }
        Ok(times)
    } else {
        spec.split(',').map(parse).collect()
    }
}

fn run_forecast(cli: &Cli, args: &ForecastArgs) -> CliResult<()> {
    let dir = out_dir(cli)?;
    let envelope = load_model(&args.model)?;
    let ModelKind::Progression {
        targets,
        age_range,
        params,
        ..
    } = envelope.model
    else {
        return Err(CliError::Input(format!(
            "{}: not a trained progression model",
            args.model.display()
        )));
    };
    let paths = CohortPaths::in_dir(&args.data_dir);
    let cohort = load_cohort(&paths)?;
    if cohort.n_targets() != targets.len() || cohort.n_attributes() != envelope.dims.0 {
        return Err(CliError::Input(
            "cohort dimensions do not match the trained model".into(),
        ));
    }
    let times = parse_times(&args.times)?;
    let seed = cli.seed.unwrap_or(0);

    let subject_indices: Vec<usize> = if args.subjects.is_empty() {
        (0..cohort.subjects.len()).collect()
    } else {
        args.subjects
            .iter()
            .map(|id| {
                cohort
                    .subjects
                    .iter()
                    .position(|s| &s.id == id)
                    .ok_or_else(|| CliError::Input(format!("unknown subject id {id:?}")))
            })
            .collect::<CliResult<Vec<usize>>>()?
    };

    let mut forecasts = Vec::with_capacity(subject_indices.len());
    for (order, &idx) in subject_indices.iter().enumerate() {
        let subject = &cohort.subjects[idx];
        let visits = match args.past_visits {
            Some(n) => &subject.visits[..n.min(subject.visits.len())],
            None => &subject.visits[..],
        };
        let history = History::from_visits(visits);
        let mut rng = rng_for(seed, order as u64);
        let mut fc = forecast(
            &subject.attributes,
            &history,
            &params,
            &times,
            args.n_samples,
            &mut rng,
        )?;
        if let Some(range) = age_range {
            fc.mark_extrapolation(range);
        }
        forecasts.push((subject.id.clone(), fc));
    }
    let rows: Vec<(String, &sigtraj::prediction::PosteriorForecast)> = forecasts
        .iter()
        .map(|(id, fc)| (id.clone(), fc))
        .collect();
    let csv_path = dir.join("forecast.csv");
    atomic_write(&csv_path, &forecast_csv(&rows, &targets)?)?;

    let mut manifest = Manifest::new("forecast", seed, config_hash(cli)?);
    manifest = manifest.input(&args.model);
    for path in paths.all() {
        manifest = manifest.input(path);
    }
    manifest.output(&csv_path).write(dir)
}

fn rng_for(seed: u64, stream: u64) -> rand_chacha::ChaCha12Rng {
    use rand::SeedableRng;
    // splitmix64 finalizer over (seed, stream)
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    rand_chacha::ChaCha12Rng::seed_from_u64(z ^ (z >> 31))
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Cross-validation folds.
    pub k: usize,
    pub train: TrainConfig,
    pub scenarios: Vec<ScenarioSpec>,
    pub n_perm: usize,
    /// Also run the straight-line versions of the population benchmarks
    /// (excluded from default reports).
    pub include_linear_benchmarks: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 20,
            train: TrainConfig::default(),
            scenarios: vec![
                ScenarioSpec::past_visit_sweep(0),
                ScenarioSpec::past_visit_sweep(1),
                ScenarioSpec::past_visit_sweep(2),
                ScenarioSpec::past_visit_sweep(3),
                ScenarioSpec::past_visit_sweep(4),
                ScenarioSpec::horizon_sweep(2, vec![12, 24, 36]),
            ],
            n_perm: DEFAULT_N_PERM,
            include_linear_benchmarks: false,
        }
    }
}

fn fold_models(
    cohort: &Cohort,
    train_idx: &[usize],
    validation_idx: &[usize],
    config: &EvalConfig,
    fold_seed: u64,
) -> CliResult<Vec<Box<dyn TrajectoryPredictor>>> {
    let train_cohort = cohort.subset(train_idx);
    let validation_cohort = cohort.subset(validation_idx);
    let train_config = TrainConfig {
        seed: fold_seed,
        ..config.train.clone()
    };
    let fit = train_validated(&train_cohort, &validation_cohort, &train_config)?;

    let mut models: Vec<Box<dyn TrajectoryPredictor>> =
        vec![Box::new(ProposedPredictor::new(fit.params))];
    let has_sex = cohort.meta.attribute_index("sex").is_some();
    let has_apoe = cohort.meta.attribute_index("apoe").is_some();
    let mut strata_list = vec![Strata::None];
    if has_sex {
        strata_list.push(Strata::Sex);
    }
    if has_apoe {
        strata_list.push(Strata::Apoe);
    }
    if has_sex && has_apoe {
        strata_list.push(Strata::SexApoe);
    }
    for &strata in &strata_list {
        models.push(Box::new(SigmoidBenchmarkPredictor::new(fit_global_sigmoid(
            &train_cohort,
            strata,
        )?)));
    }
    models.push(Box::new(LmeBenchmarkPredictor {
        fits: fit_lme(&train_cohort)?,
    }));
    models.push(Box::new(SubjectLinearPredictor {
        n_targets: cohort.n_targets(),
    }));
    if config.include_linear_benchmarks {
        for &strata in &strata_list {
            models.push(Box::new(LinearBenchmarkPredictor::new(fit_global_linear(
                &train_cohort,
                strata,
            )?)));
        }
    }
    Ok(models)
}

fn run_evaluate(cli: &Cli, args: &EvaluateArgs) -> CliResult<()> {
    let dir = out_dir(cli)?;
    let paths = CohortPaths::in_dir(&args.data_dir);
    let cohort = load_cohort(&paths)?;
    let config: EvalConfig = match &cli.config {
        Some(path) => load_config(path)?,
        None => EvalConfig::default(),
    };
    let seed = cli.seed.unwrap_or(config.train.seed);

    let splits = kfold_split(&cohort, config.k, seed)?;
    let mut folds = Vec::with_capacity(splits.len());
    for (fold_idx, split) in splits.iter().enumerate() {
        let models = fold_models(
            &cohort,
            &split.train,
            &split.validation,
            &config,
            mix(seed, 0x0f01d + fold_idx as u64),
        )?;
        folds.push(EvaluatedFold {
            test_subjects: split.test.clone(),
            models,
        });
    }

    let mut report = EvalReport::default();
    for (si, scenario) in config.scenarios.iter().enumerate() {
        report.merge(run_scenario(
            &cohort,
            &folds,
            scenario,
            config.n_perm,
            mix(seed, 0x5ce0 + si as u64),
        )?);
    }

    let report_csv_path = dir.join("report.csv");
    atomic_write(&report_csv_path, &report_csv(&report)?)?;
    let report_json_path = dir.join("report.json");
    atomic_write(
        &report_json_path,
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    let pvalues_path = dir.join("pvalues.json");
    let pvalues = PvalueFile {
        format_version: FORMAT_VERSION.to_string(),
        reference: "proposed".to_string(),
        entries: report.pvalues.clone(),
    };
    atomic_write(&pvalues_path, serde_json::to_string_pretty(&pvalues)?.as_bytes())?;

    let mut manifest = Manifest::new("evaluate", seed, config_hash(cli)?);
    for path in paths.all() {
        manifest = manifest.input(path);
    }
    manifest
        .output(&report_csv_path)
        .output(&report_json_path)
        .output(&pvalues_path)
        .write(dir)
}

fn mix(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyzeConfig {
    /// Age grid; defaults to the training age range padded by five years.
    pub grid_min: Option<f64>,
    pub grid_max: Option<f64>,
    pub grid_step: f64,
    /// Proxy draws per subject when pooling inflection samples.
    pub draws_per_subject: usize,
    /// Subjects for the trajectory export; defaults to the subjects with the
    /// most visits.
    pub export_subjects: Vec<String>,
    pub n_export_subjects: usize,
    pub n_samples: usize,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self {
            grid_min: None,
            grid_max: None,
            grid_step: 0.25,
            draws_per_subject: 10,
            export_subjects: Vec::new(),
            n_export_subjects: 6,
            n_samples: 1024,
        }
    }
}

fn run_analyze(cli: &Cli, args: &AnalyzeArgs) -> CliResult<()> {
    let dir = out_dir(cli)?;
    let envelope = load_model(&args.model)?;
    let ModelKind::Progression {
        targets,
        attributes,
        age_range,
        params,
        proxies,
        ..
    } = envelope.model
    else {
        return Err(CliError::Input(format!(
            "{}: not a trained progression model",
            args.model.display()
        )));
    };
    let config: AnalyzeConfig = match &cli.config {
        Some(path) => load_config(path)?,
        None => AnalyzeConfig::default(),
    };
    let seed = cli.seed.unwrap_or(0);

    let (lo, hi) = age_range.unwrap_or((55.0, 95.0));
    let lo = config.grid_min.unwrap_or(lo - 5.0);
    let hi = config.grid_max.unwrap_or(hi + 5.0);
    if !(hi > lo && config.grid_step > 0.0) {
        return Err(CliError::Input("empty analysis grid".into()));
    }
    let n_steps = ((hi - lo) / config.grid_step).ceil() as usize;
    let grid: Vec<f64> = (0..=n_steps).map(|i| lo + config.grid_step * i as f64).collect();

    // inflection densities from pooled proxy samples
    let mut rng = rng_for(seed, 0xd0_5e);
    let samples = sample_inflections(&proxies, config.draws_per_subject, &mut rng);
    let densities = inflection_density(&samples, &grid)?;
    let density_path = dir.join("inflection_density.csv");
    atomic_write(&density_path, &density_csv(&grid, &densities, &targets)?)?;

    // mean latent curves at the empirical proxy means
    let n = proxies.len().max(1) as f64;
    let mean_slope = proxies.iter().map(|g| g.mu_s).sum::<f64>() / n;
    let mean_inflections: Vec<f64> = (0..targets.len())
        .map(|k| proxies.iter().map(|g| g.mu_p[k]).sum::<f64>() / n)
        .collect();
    let curves = mean_latent_curves(mean_slope, &mean_inflections, &grid);
    let curves_path = dir.join("latent_curves.csv");
    atomic_write(&curves_path, &curves_csv(&grid, &curves, &targets)?)?;

    // risk-factor table
    let names: Vec<String> = attributes.iter().map(|a| a.name.clone()).collect();
    let risk = risk_factor_report(&[&params], &names)?;
    let risk_path = dir.join("risk_factors.csv");
    atomic_write(&risk_path, &risk_factors_csv(&risk)?)?;

    let mut manifest = Manifest::new("analyze", seed, config_hash(cli)?);
    manifest = manifest
        .input(&args.model)
        .output(&density_path)
        .output(&curves_path)
        .output(&risk_path);

    // personalized trajectory export needs subject data
    if let Some(data_dir) = &args.data_dir {
        let paths = CohortPaths::in_dir(data_dir);
        let cohort = load_cohort(&paths)?;
        let indices: Vec<usize> = if config.export_subjects.is_empty() {
            let mut order: Vec<usize> = (0..cohort.subjects.len()).collect();
            order.sort_by_key(|&i| {
                (
                    std::cmp::Reverse(cohort.subjects[i].visits.len()),
                    cohort.subjects[i].id.clone(),
                )
            });
            order.truncate(config.n_export_subjects);
            order
        } else {
            config
                .export_subjects
                .iter()
                .map(|id| {
                    cohort
                        .subjects
                        .iter()
                        .position(|s| &s.id == id)
                        .ok_or_else(|| CliError::Input(format!("unknown subject id {id:?}")))
                })
                .collect::<CliResult<Vec<usize>>>()?
        };
        let export = export_personalized_trajectories(
            &cohort,
            &indices,
            &params,
            &grid,
            config.n_samples,
            mix(seed, 0x7a17),
        )?;
        let traj_path = dir.join("personalized_trajectories.csv");
        atomic_write(&traj_path, &trajectories_csv(&export)?)?;
        for path in paths.all() {
            manifest = manifest.input(path);
        }
        manifest = manifest.output(&traj_path);
    }
    manifest.write(dir)
}

// ---------------------------------------------------------------------------
// bench-fit
// ---------------------------------------------------------------------------

fn run_bench_fit(cli: &Cli, args: &BenchFitArgs) -> CliResult<()> {
    let dir = out_dir(cli)?;
    let paths = CohortPaths::in_dir(&args.data_dir);
    let cohort = load_cohort(&paths)?;
    let dims = (cohort.n_attributes(), cohort.n_targets());
    let targets = cohort.meta.targets.clone();

    let model = match args.kind {
        BenchKind::Global | BenchKind::Sex | BenchKind::Apoe | BenchKind::SexApoe => {
            let strata = match args.kind {
                BenchKind::Global => Strata::None,
                BenchKind::Sex => Strata::Sex,
                BenchKind::Apoe => Strata::Apoe,
                _ => Strata::SexApoe,
            };
            ModelKind::BenchmarkSigmoid {
                targets,
                fit: fit_global_sigmoid(&cohort, strata)?,
            }
        }
        BenchKind::GlobalLinear
        | BenchKind::SexLinear
        | BenchKind::ApoeLinear
        | BenchKind::SexApoeLinear => {
            let strata = match args.kind {
                BenchKind::GlobalLinear => Strata::None,
                BenchKind::SexLinear => Strata::Sex,
                BenchKind::ApoeLinear => Strata::Apoe,
                _ => Strata::SexApoe,
            };
            ModelKind::BenchmarkLinear {
                targets,
                fit: fit_global_linear(&cohort, strata)?,
            }
        }
        BenchKind::Lme => ModelKind::BenchmarkLme {
            targets,
            attributes: cohort.meta.attributes.clone(),
            fits: fit_lme(&cohort)?,
        },
    };

    let model_path = dir.join("model.json");
    save_model(
        &ModelEnvelope {
            format_version: FORMAT_VERSION.to_string(),
            dims,
            model,
        },
        &model_path,
    )?;

    let mut manifest = Manifest::new("bench-fit", cli.seed.unwrap_or(0), config_hash(cli)?);
    for path in paths.all() {
        manifest = manifest.input(path);
    }
    manifest.output(&model_path).write(dir)
}
