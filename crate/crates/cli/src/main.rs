//! `sparse-moe`: simulate, fit, select, evaluate and predict with sparse
//! mixtures of experts.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use sparse_moe::em::{canonicalize_labels, e_step};
use sparse_moe::io::{
    read_covariates_csv, read_data_csv_path, read_json_path, standardize, write_bic_table,
    write_coefficients_csv, write_data_csv, write_json_path, write_predictions_csv, DataFile, FitReport, MetricsReport, ParamsJson,
    Standardization, TruthFile, SCHEMA_VERSION,
};
use sparse_moe::metrics::{
    adjusted_rand_index, correct_classification_rate, hard_assignment, parameter_mse, support_metrics,
    support_metrics_with_tolerance,
};
use sparse_moe::model::{expert_mode, predict_response, softmax_gating};
use sparse_moe::selection::{build_default_grid, modified_bic};
use sparse_moe::{
    fit_em, preset_design, select_model, Dataset, Family, FitConfig, FitResult, GatingVariant, GridSpec, InitStrategy,
    MoEParameters, MoeError,
};

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "sparse-moe", version, about = "Sparse mixtures of generalized linear experts")]
struct Cli {
    /// Worker threads for multi-start and grid fits (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a dataset from a preset design; writes data.csv and truth.json.
    Simulate(SimulateArgs),
    /// Fit one (K, lambda, gamma); writes fit.json and fit_coeffs.csv.
    Fit(FitArgs),
    /// Grid search by modified BIC; writes bic_table.csv, fit.json and fit_coeffs.csv.
    Select(SelectArgs),
    /// Compare a fit with the truth; writes metrics.json.
    Evaluate(EvaluateArgs),
    /// Predict responses for new covariates; writes predictions.csv.
    Predict(PredictArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    /// n = 300, p = 6, two components, AR(1) correlation 0.5.
    Paper,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Variant {
    Bounded,
    Exact,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Init {
    /// Intercept-only experts on a random balanced partition.
    Partition,
    /// Full experts on blocks cut along a random projection.
    Projection,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Assign {
    /// Most probable component under the gating network.
    Gate,
    /// Most responsible component given the observed response.
    Posterior,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, value_parser = parse_family)]
    family: Family,
    #[arg(long, value_enum, default_value = "paper")]
    preset: Preset,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Replicate index; the data seed is derived from --seed and this index.
    #[arg(long)]
    replicate: Option<u64>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// CSV with covariate columns, a response column `y` and optionally `z_true`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = parse_family)]
    family: Family,
    /// Center and scale every covariate before fitting.
    #[arg(long)]
    standardize: bool,
}

#[derive(Args, Debug)]
struct SolverArgs {
    #[arg(long, value_enum, default_value = "bounded")]
    variant: Variant,
    #[arg(long, default_value_t = 1e-6)]
    em_tol: f64,
    #[arg(long, default_value_t = 1000)]
    max_iter: usize,
    #[arg(long, default_value_t = 1)]
    n_starts: usize,
    #[arg(long, value_enum, default_value = "partition")]
    init: Init,
    /// Share one sigma across Gaussian components.
    #[arg(long)]
    tied_sigma: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(short = 'k', long = "k")]
    k: usize,
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    #[arg(long, default_value_t = 0.0)]
    gamma: f64,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SelectArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Candidate K values (default 1..=5).
    #[arg(long = "k", value_delimiter = ',')]
    k: Vec<usize>,
    /// Lambda grid (default: 7 log-spaced values from 0.01·√n to 2·√n).
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Vec<f64>,
    /// Gamma grid (same default as the lambda grid).
    #[arg(long, value_delimiter = ',')]
    gamma_grid: Vec<f64>,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    fit: PathBuf,
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Data file with a `z_true` column, for classification rate and ARI.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Treat |coefficient| <= this as zero in the support report.
    #[arg(long, default_value_t = 0.0)]
    zero_tol: f64,
    #[arg(long, default_value = "metrics.json")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    fit: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "gate")]
    assign: Assign,
    #[arg(long, default_value = "predictions.csv")]
    out: PathBuf,
}

fn parse_family(s: &str) -> Result<Family, String> {
    s.parse::<Family>().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    if let Err(e) = configure_threads(cli.threads) {
        eprintln!("error: {e:#}");
        return ExitCode::from(EXIT_USAGE);
    }
    let outcome = match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Select(a) => cmd_select(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Predict(a) => cmd_predict(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<MoeError>()) {
        Some(MoeError::InvalidConfig(_)) => EXIT_USAGE,
        Some(m) if m.is_data_error() => EXIT_DATA,
        Some(_) => EXIT_NUMERICAL,
        None if e.chain().any(|c| c.is::<std::io::Error>()) => EXIT_DATA,
        None => EXIT_USAGE,
    }
}

#[cfg(feature = "parallel")]
fn configure_threads(threads: usize) -> anyhow::Result<()> {
    if threads > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    }
    Ok(())
}

#[cfg(not(feature = "parallel"))]
fn configure_threads(_threads: usize) -> anyhow::Result<()> {
    Ok(())
}

fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).map_err(MoeError::from).with_context(|| format!("cannot create {}", dir.display()))
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let f = File::create(path).map_err(MoeError::from).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn cmd_simulate(a: SimulateArgs) -> anyhow::Result<()> {
    let Preset::Paper = a.preset;
    let mut design = preset_design(a.family).with_seed(a.seed);
    if a.n.is_some() || a.p.is_some() {
        let (n, p) = (a.n.unwrap_or(design.n), a.p.unwrap_or(design.p));
        if n == 0 || p == 0 {
            return Err(MoeError::InvalidConfig("--n and --p must be positive".into()).into());
        }
        design = design.with_shape(n, p);
    }
    if let Some(rho) = a.rho {
        design = design.with_rho(rho);
    }
    let sim = match a.replicate {
        Some(r) => design.replicate(r)?,
        None => design.simulate()?,
    };
    ensure_dir(&a.out)?;
    write_data_csv(create(&a.out.join("data.csv"))?, &sim.data, Some(&sim.z))?;
    let truth = TruthFile {
        schema_version: SCHEMA_VERSION,
        n: design.n,
        rho: design.rho,
        seed: a.seed,
        params: ParamsJson::from(&design.truth),
    };
    write_json_path(&a.out.join("truth.json"), &truth)?;
    Ok(())
}

/// The dataset to fit, and the transform applied to it.
fn load_data(a: &DataArgs) -> anyhow::Result<(DataFile, Option<Standardization>)> {
    let mut file =
        read_data_csv_path(&a.data, a.family).with_context(|| format!("reading {}", a.data.display()))?;
    if !a.standardize {
        return Ok((file, None));
    }
    let (data, s) = standardize(&file.data)?;
    file.data = data;
    Ok((file, Some(s)))
}

fn fit_config(k: usize, lambda: f64, gamma: f64, s: &SolverArgs) -> FitConfig {
    let variant = match s.variant {
        Variant::Bounded => GatingVariant::Bounded,
        Variant::Exact => GatingVariant::Exact,
    };
    let mut cfg = FitConfig::new(k).with_penalty(lambda, gamma).with_seed(s.seed).with_variant(variant);
    cfg.em_tol = s.em_tol;
    cfg.max_em_iters = s.max_iter;
    cfg.n_starts = s.n_starts;
    cfg.tied_sigma = s.tied_sigma;
    cfg.init = match s.init {
        Init::Partition => InitStrategy::RandomPartition,
        Init::Projection => InitStrategy::RandomProjection,
    };
    cfg
}

fn fit_report(data: &Dataset, cfg: &FitConfig, fit: &FitResult, s: Option<Standardization>) -> FitReport {
    let labels = fit.hard_labels();
    let mut sizes = vec![0; cfg.k];
    for &l in &labels {
        sizes[l] += 1;
    }
    FitReport {
        schema_version: SCHEMA_VERSION,
        family: data.family(),
        n: data.n(),
        p: data.p(),
        k: cfg.k,
        feature_names: data.feature_names().map(<[String]>::to_vec),
        penalty: cfg.penalty.clone(),
        seed: cfg.seed,
        params: ParamsJson::from(&fit.params),
        original_scale: s.as_ref().map(|s| ParamsJson::from(&s.to_original_scale(&fit.params))),
        standardization: s,
        pl_trace: fit.pl_trace.clone(),
        loglik: fit.loglik,
        penalized_loglik: fit.penalized_loglik,
        df: fit.df,
        bic: modified_bic(fit.loglik, fit.df, data.n()),
        n_iters: fit.n_iters,
        converged: fit.converged,
        degenerate_components: fit.degenerate_components.iter().map(|c| c + 1).collect(),
        component_mass: fit.responsibilities.column_iter().map(|c| c.sum()).collect(),
        cluster_sizes: sizes,
    }
}

fn write_fit_outputs(out: &Path, report: &FitReport, params: &MoEParameters) -> anyhow::Result<()> {
    write_json_path(&out.join("fit.json"), report)?;
    write_coefficients_csv(create(&out.join("fit_coeffs.csv"))?, params)?;
    if let Some(orig) = &report.original_scale {
        write_coefficients_csv(create(&out.join("fit_coeffs_original.csv"))?, &orig.to_params()?)?;
    }
    Ok(())
}

fn cmd_fit(a: FitArgs) -> anyhow::Result<()> {
    let (file, s) = load_data(&a.data)?;
    let cfg = fit_config(a.k, a.lambda, a.gamma, &a.solver);
    let fit = fit_em(&file.data, &cfg)?;
    ensure_dir(&a.out)?;
    let report = fit_report(&file.data, &cfg, &fit, s);
    write_fit_outputs(&a.out, &report, &fit.params)
}

fn cmd_select(a: SelectArgs) -> anyhow::Result<()> {
    let (file, s) = load_data(&a.data)?;
    let default = build_default_grid(&file.data)?;
    let grid = GridSpec::new(
        if a.k.is_empty() { default.k_candidates } else { a.k },
        if a.lambda_grid.is_empty() { default.lambda_grid } else { a.lambda_grid },
        if a.gamma_grid.is_empty() { default.gamma_grid } else { a.gamma_grid },
    )?;
    let template = fit_config(1, 0.0, 0.0, &a.solver);
    let selection = select_model(&file.data, &grid, &template)?;
    ensure_dir(&a.out)?;
    write_bic_table(create(&a.out.join("bic_table.csv"))?, &selection.table)?;
    let row = &selection.table[selection.best_row];
    let cfg = fit_config(row.k, row.lambda, row.gamma, &a.solver);
    let report = fit_report(&file.data, &cfg, &selection.best, s);
    write_fit_outputs(&a.out, &report, &selection.best.params)
}

fn cmd_evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    if a.truth.is_none() && a.data.is_none() {
        return Err(MoeError::InvalidConfig("evaluate needs --truth, --data or both".into()).into());
    }
    let fit: FitReport = read_json_path(&a.fit).with_context(|| format!("reading {}", a.fit.display()))?;
    let mut params = fit.params.to_params()?;
    let mut report = MetricsReport {
        schema_version: SCHEMA_VERSION,
        support: None,
        mse: None,
        classification_rate: None,
        ari: None,
        notes: Vec::new(),
    };
    if let Some(path) = &a.truth {
        let truth: TruthFile = read_json_path(path).with_context(|| format!("reading {}", path.display()))?;
        let truth = truth.params.to_params()?;
        // Coefficients are compared on the truth's (original) scale.
        if let Some(orig) = &fit.original_scale {
            params = orig.to_params()?;
        }
        params = canonicalize_labels(&params, Some(&truth)).0;
        report.support = Some(if a.zero_tol > 0.0 {
            support_metrics_with_tolerance(&params, &truth, a.zero_tol)?
        } else {
            support_metrics(&params, &truth)?
        });
        report.mse = Some(parameter_mse(&params, &truth)?);
        if params.k() > 2 {
            report.notes.push(
                "K > 2: components are matched to the truth by expert coefficients; sparsity metrics depend on \
                 that matching"
                    .into(),
            );
        }
    }
    if let Some(path) = &a.data {
        let file = read_data_csv_path(path, fit.family).with_context(|| format!("reading {}", path.display()))?;
        let z = file.z_true.as_ref().ok_or_else(|| MoeError::InvalidData(format!("{} has no z_true column", path.display())))?;
        let data = match (&fit.standardization, &fit.original_scale) {
            (Some(s), _) if a.truth.is_none() => Dataset::new(s.apply(file.data.x())?, file.data.y().clone())?,
            _ => file.data.clone(),
        };
        let tau = e_step(&data, &params)?;
        let labels = hard_assignment(&tau);
        report.classification_rate = Some(correct_classification_rate(&labels, z)?);
        report.ari = Some(adjusted_rand_index(&labels, z)?);
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    write_json_path(&a.out, &report)?;
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> anyhow::Result<()> {
    let fit: FitReport = read_json_path(&a.fit).with_context(|| format!("reading {}", a.fit.display()))?;
    let params = fit.params.to_params()?;
    let scale = |x: &DMatrix<f64>| -> anyhow::Result<DMatrix<f64>> {
        Ok(match &fit.standardization {
            Some(s) => s.apply(x)?,
            None => x.clone(),
        })
    };
    let components: Vec<usize>;
    let x = match a.assign {
        Assign::Gate => {
            let (x, _) = read_covariates_csv(File::open(&a.data).map_err(MoeError::from)?)
                .with_context(|| format!("reading {}", a.data.display()))?;
            let x = scale(&x)?;
            components = Vec::new();
            x
        }
        Assign::Posterior => {
            let file = read_data_csv_path(&a.data, fit.family).with_context(|| format!("reading {}", a.data.display()))?;
            let data = Dataset::new(scale(file.data.x())?, file.data.y().clone())?;
            components = hard_assignment(&e_step(&data, &params)?);
            data.x().clone()
        }
    };
    if x.ncols() != params.p() {
        return Err(MoeError::Dimension(format!("data has {} covariates, fit has {}", x.ncols(), params.p())).into());
    }
    let mut rows = Vec::with_capacity(x.nrows());
    for i in 0..x.nrows() {
        let row: Vec<f64> = x.row(i).iter().copied().collect();
        rows.push(if components.is_empty() {
            let pi = softmax_gating(&row, &params.gating)?;
            let k = (0..pi.len()).fold(0, |b, c| if pi[c] > pi[b] { c } else { b });
            (k, predict_response(&row, &params)?)
        } else {
            (components[i], expert_mode(&row, &params, components[i])?)
        });
    }
    write_predictions_csv(create(&a.out)?, &rows)?;
    Ok(())
}

