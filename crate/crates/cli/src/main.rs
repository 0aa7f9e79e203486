//! `metaselect` command line front end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use metaselect::data::spec_from_names;
use metaselect::ensemble::{fit_ensemble, heatmap_svg, selection_matrix, threshold_select, EnsembleOptions, DEFAULT_LAMBDA_SCALE};
use metaselect::estimation::{fit, FitOptions, FitResult, Tau2Method};
use metaselect::linear_select::{forward_ic_select, forward_test_select, univariate_select, Criterion, SelectOptions};
use metaselect::metacart::{grow_tree, prune_tree, tree_to_spec, PruneRule, TreeControls, TreeMode};
use metaselect::report::{comparison_markdown, grid_markdown, MethodSelection};
use metaselect::sim::{prepare_base, run_grid, sim_schema, surrogate_base, ErrorReport, GridConfig, PlasmodeBase};
use metaselect::{load_dataset, standardize, Error, ErrorClass, MetaDataset, ModelSpec, Schema};

#[derive(Parser)]
#[command(name = "metaselect", version, about = "Interaction selection for random effects meta-regression")]
struct Cli {
    /// Worker threads (overridden by METASELECT_JOBS).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one random effects meta-regression model.
    Fit(FitArgs),
    /// Linear selection (univariate / forward testing, forward AICc / BIC).
    Select(SelectArgs),
    /// Single meta-CART tree.
    Tree(TreeArgs),
    /// Stability-selected ensemble of meta-CART trees.
    Ensemble(EnsembleArgs),
    /// Run a plasmode simulation grid.
    Simulate(SimulateArgs),
    /// Markdown comparison of selection results.
    Report(ReportArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Study table (CSV with `y`, `v`, optional `n`, covariates).
    #[arg(long)]
    data: PathBuf,
    /// Covariate schema (JSON).
    #[arg(long)]
    schema: PathBuf,
    /// Keep metric covariates on their original scale.
    #[arg(long)]
    no_standardize: bool,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Tau2Arg {
    Reml,
    Dl,
    Fixed,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Comma separated effects, e.g. `Time,Age,Time:Age`.
    #[arg(long, default_value = "")]
    effects: String,
    #[arg(long, value_enum, default_value = "reml")]
    tau2_method: Tau2Arg,
    /// Value used with `--tau2-method fixed`.
    #[arg(long)]
    tau2: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LinearMethod {
    UniTest,
    MultiTest,
    Aicc,
    Bic,
}

#[derive(Args)]
struct SelectArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum)]
    method: LinearMethod,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Forward selection stops once a standard error exceeds this cap.
    #[arg(long, default_value_t = 100.0)]
    se_cap: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Fe,
    Re,
}

impl From<ModeArg> for TreeMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Fe => TreeMode::Fe,
            ModeArg::Re => TreeMode::Re,
        }
    }
}

#[derive(Args)]
struct ControlArgs {
    #[arg(long, default_value_t = 20)]
    minsplit: usize,
    #[arg(long, default_value_t = 7)]
    minbucket: usize,
    #[arg(long, default_value_t = 30)]
    maxdepth: usize,
    #[arg(long, default_value_t = 10)]
    cv_folds: usize,
    #[arg(long, default_value_t = 0.0)]
    min_qb_gain: f64,
    #[arg(long, default_value_t = 0.01)]
    cp: f64,
}

impl ControlArgs {
    fn controls(&self) -> TreeControls {
        TreeControls {
            minsplit: self.minsplit,
            minbucket: self.minbucket,
            maxdepth: self.maxdepth,
            cv_folds: self.cv_folds,
            min_qb_gain: self.min_qb_gain,
            cp: self.cp,
        }
    }
}

#[derive(Args)]
struct TreeArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// Pruning constant of the c*SE rule (default depends on mode and k).
    #[arg(long)]
    c: Option<f64>,
    /// Seed of the cross-validation folds (required when pruning).
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    controls: ControlArgs,
}

#[derive(Args)]
struct EnsembleArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// Number of bootstrap trees.
    #[arg(long = "B", short = 'B', default_value_t = 100)]
    b: usize,
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    #[arg(long)]
    seed: u64,
    #[command(flatten)]
    controls: ControlArgs,
}

#[derive(Args)]
struct SimulateArgs {
    /// Grid configuration (JSON).
    #[arg(long)]
    grid: PathBuf,
    /// Base table (CSV with `n` and the simulation covariates); a synthetic
    /// base seeded by the grid's master seed is used when absent.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Schema of the base table (default: the seven simulation covariates, 0/1 coded).
    #[arg(long)]
    base_schema: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// `selection.json` files to compare.
    #[arg(long, num_args = 1..)]
    inputs: Vec<PathBuf>,
    /// Grid report (`grid_report.json`) to tabulate.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e.class() {
                ErrorClass::Usage => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numerical => 4,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::Core(Error::Io(format!("{}: {e}", path.display()))))
}

fn write(dir: &Path, name: &str, contents: &str) -> CliResult {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), contents)?;
    Ok(())
}

fn load(args: &DataArgs) -> CliResult<MetaDataset> {
    let schema = Schema::from_json(&read(&args.schema)?)?;
    let ds = load_dataset(read(&args.data)?.as_bytes(), &schema)?;
    Ok(if args.no_standardize { ds } else { standardize(&ds)? })
}

fn parse_effects(ds: &MetaDataset, effects: &str) -> CliResult<ModelSpec> {
    let items: Vec<&str> = effects.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    let (ies, mains): (Vec<&str>, Vec<&str>) = items.into_iter().partition(|s| s.contains(':'));
    Ok(spec_from_names(ds, &mains, &ies)?)
}

fn json<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable output");
    s.push('\n');
    s
}

// Linear model refitted on a selected spec; `None` if it cannot be fitted.
fn refit(ds: &MetaDataset, spec: &ModelSpec) -> Option<FitResult> {
    fit(ds, spec, &FitOptions::default()).ok()
}

fn selection(method: &str, spec: &ModelSpec, ds: &MetaDataset) -> MethodSelection {
    MethodSelection {
        method: method.to_string(),
        spec: spec.named(&ds.names()),
        fit: refit(ds, spec).as_ref().map(FitResult::summary),
    }
}

fn cmd_fit(a: FitArgs) -> CliResult {
    let ds = load(&a.data)?;
    let spec = parse_effects(&ds, &a.effects)?;
    let tau2_method = match (a.tau2_method, a.tau2) {
        (Tau2Arg::Reml, _) => Tau2Method::Reml,
        (Tau2Arg::Dl, _) => Tau2Method::Dl,
        (Tau2Arg::Fixed, Some(t)) => Tau2Method::Fixed(t),
        (Tau2Arg::Fixed, None) => return Err(CliError::Usage("--tau2-method fixed needs --tau2".into())),
    };
    let opts = FitOptions {
        tau2_method,
        ..FitOptions::default()
    };
    let f = fit(&ds, &spec, &opts)?;
    write(&a.data.out, "fit.json", &(f.to_json() + "\n"))
}

fn cmd_select(a: SelectArgs) -> CliResult {
    let ds = load(&a.data)?;
    let opts = SelectOptions {
        alpha: a.alpha,
        se_cap: a.se_cap,
        ..SelectOptions::default()
    };
    let (label, result) = match a.method {
        LinearMethod::UniTest => ("uni_test", univariate_select(&ds, &opts)?),
        LinearMethod::MultiTest => ("multi_test", forward_test_select(&ds, &opts)?),
        LinearMethod::Aicc => (
            "aicc",
            forward_ic_select(&ds, &SelectOptions { criterion: Criterion::Aicc, ..opts })?,
        ),
        LinearMethod::Bic => (
            "bic",
            forward_ic_select(&ds, &SelectOptions { criterion: Criterion::Bic, ..opts })?,
        ),
    };
    let names = ds.names();
    write(&a.data.out, "selection.json", &json(&result.summary(label, &names)))?;
    write(&a.data.out, "trace.csv", &result.trace_csv(&names))
}

fn cmd_tree(a: TreeArgs) -> CliResult {
    let ds = load(&a.data)?;
    let mode: TreeMode = a.mode.into();
    let controls = a.controls.controls();
    controls.validate()?;
    let rule = match a.c {
        Some(c) => PruneRule { c },
        None => PruneRule::default_for(mode, ds.k()),
    };
    let tree = grow_tree(&ds, mode, &controls);
    let tree = if rule.c > 0.0 {
        let seed = a
            .seed
            .ok_or_else(|| CliError::Usage("pruning uses cross-validation: pass --seed (or --c 0)".into()))?;
        prune_tree(&ds, &tree, rule, seed)?
    } else {
        tree
    };
    let spec = tree_to_spec(&tree);
    let label = match mode {
        TreeMode::Fe => "femrt",
        TreeMode::Re => "remrt",
    };
    write(&a.data.out, "tree.json", &json(&tree.to_json_value()))?;
    write(&a.data.out, "tree.txt", &tree.render_text())?;
    write(&a.data.out, "selection.json", &json(&selection(label, &spec, &ds)))
}

fn cmd_ensemble(a: EnsembleArgs) -> CliResult {
    let ds = load(&a.data)?;
    let mode: TreeMode = a.mode.into();
    let opts = EnsembleOptions {
        b: a.b,
        lambda: a.lambda,
        seed: a.seed,
        controls: a.controls.controls(),
    };
    let trees = fit_ensemble(&ds, mode, &opts)?;
    let matrix = selection_matrix(&trees, ds.p());
    let spec = threshold_select(&matrix, a.lambda)?;
    let label = match mode {
        TreeMode::Fe => "sfemrt",
        TreeMode::Re => "sremrt",
    };
    write(&a.data.out, "amatrix.csv", &matrix.to_csv())?;
    write(&a.data.out, "amatrix.json", &(matrix.to_json() + "\n"))?;
    write(&a.data.out, "amatrix.svg", &heatmap_svg(&matrix, &DEFAULT_LAMBDA_SCALE))?;
    write(&a.data.out, "selection.json", &json(&selection(label, &spec, &ds)))
}

fn cmd_simulate(a: SimulateArgs) -> CliResult {
    let config = GridConfig::from_json(&read(&a.grid)?)?;
    let base = match &a.base {
        Some(path) => {
            let schema = match &a.base_schema {
                Some(s) => Schema::from_json(&read(s)?)?,
                None => sim_schema(),
            };
            PlasmodeBase::load(read(path)?.as_bytes(), &schema)?
        }
        None => surrogate_base(config.master_seed),
    };
    let prepared = prepare_base(&base, metaselect::seed::derive(config.master_seed, &[0xba5e]))?;
    let report = run_grid(&prepared, &config)?;
    write(&a.out, "grid_report.csv", &report.to_csv())?;
    write(&a.out, "grid_report.json", &(report.to_json() + "\n"))
}

fn cmd_report(a: ReportArgs) -> CliResult {
    if a.inputs.is_empty() && a.grid.is_none() {
        return Err(CliError::Usage("report needs --inputs and/or --grid".into()));
    }
    let mut md = String::new();
    if !a.inputs.is_empty() {
        let selections = a
            .inputs
            .iter()
            .map(|p| serde_json::from_str::<MethodSelection>(&read(p)?).map_err(|e| CliError::Core(e.into())))
            .collect::<CliResult<Vec<_>>>()?;
        md.push_str("## Selected effects\n\n");
        md.push_str(&comparison_markdown(&selections));
    }
    if let Some(grid) = &a.grid {
        let report: ErrorReport = serde_json::from_str(&read(grid)?).map_err(|e| CliError::Core(e.into()))?;
        if !md.is_empty() {
            md.push('\n');
        }
        md.push_str("## Type I / Type II errors\n\n");
        md.push_str(&grid_markdown(&report));
    }
    write(&a.out, "report.md", &md)
}

fn jobs(flag: Option<usize>) -> CliResult<Option<usize>> {
    match std::env::var("METASELECT_JOBS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| CliError::Usage(format!("METASELECT_JOBS must be a positive integer, got `{v}`"))),
        Err(_) => match flag {
            Some(0) => Err(CliError::Usage("--jobs must be >= 1".into())),
            other => Ok(other),
        },
    }
}

fn run(cli: Cli) -> CliResult {
    if let Some(n) = jobs(cli.jobs)? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Select(a) => cmd_select(a),
        Command::Tree(a) => cmd_tree(a),
        Command::Ensemble(a) => cmd_ensemble(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
