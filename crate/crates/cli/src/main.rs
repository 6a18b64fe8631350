use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ecaml::config::RunConfigFile;
use ecaml::eval::{evaluate_clustering, recall_at_k};
use ecaml::experiments::{
    ablate_lambda, ablation_csv, embed_for_eval, embedding_size_sweep, evaluate, median_csv, median_table,
    parse_weights_csv, train, write_run_dir, AblationRun, RunSummary, DEFAULT_LAMBDAS,
};
use ecaml::report::{aggregate_csv, discover_runs, recall_chart_svg};
use ecaml::sampling::{Dataset, SplitFilter};
use ecaml::synth::{generate, load_csv, save_csv};
use ecaml::verify::{run_suite, VerifyConfig};
use ecaml::EcamlError;
use serde_json::json;

#[derive(Parser)]
#[command(name = "ecaml", version, about = "Energy-confusion metric learning lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark as CSV.
    GenData(GenDataArgs),
    /// Train one model and write a run directory.
    Train(TrainArgs),
    /// Evaluate a trained run directory on a dataset.
    Eval(EvalArgs),
    /// λ grid, or an embedding-size sweep with --dims.
    Ablate(AblateArgs),
    /// Run the randomized divergence and gradient property suite.
    Verify(VerifyArgs),
    /// Aggregate run directories into a CSV table and an SVG chart.
    Report(ReportArgs),
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; every field is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
    /// Overrides data.seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset CSV; generated from the config when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory to create.
    #[arg(long)]
    out: PathBuf,
    /// Overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Run directory written by `train`.
    run: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// JSON report path; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// First training seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds per setting.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Comma-separated λ grid; must include 0.
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<f64>>,
    /// Comma-separated embedding sizes; switches to the paired size sweep.
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    /// Worker threads; each run stays single-threaded.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    force: bool,
    /// Instances per divergence property.
    #[arg(long, default_value_t = 1000)]
    fuzz: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON report path; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    force: bool,
    /// Run directories, or directories containing them.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Output directory for `runs.csv` and `recall_curves.svg`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Lib(EcamlError),
    Failed(String),
}

impl From<EcamlError> for CliError {
    fn from(e: EcamlError) -> Self {
        CliError::Lib(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Lib(EcamlError::Config(_)) => 2,
            _ => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failed(m) => f.write_str(m),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

type CliResult = Result<(), CliError>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfigFile, CliError> {
    match path {
        Some(p) => RunConfigFile::load(p).map_err(|e| match e {
            EcamlError::Config(m) => CliError::Usage(format!("{}: {m}", p.display())),
            other => other.into(),
        }),
        None => Ok(RunConfigFile::default()),
    }
}

fn load_dataset(data: Option<&Path>, cfg: &RunConfigFile) -> Result<Dataset, CliError> {
    match data {
        Some(p) => Ok(load_csv(p)?),
        None => Ok(generate(&cfg.data)?),
    }
}

/// Refuse to touch an existing file or non-empty directory unless forced.
fn ensure_fresh(path: &Path, force: bool) -> CliResult {
    let occupied = if path.is_dir() {
        fs::read_dir(path).map(|mut d| d.next().is_some()).unwrap_or(true)
    } else {
        path.exists()
    };
    if occupied && !force {
        return Err(CliError::Usage(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> CliResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::Failed(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, text).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
}

fn emit_json(out: Option<&Path>, value: &serde_json::Value) -> CliResult {
    let text = serde_json::to_string_pretty(value).expect("json value serializes") + "\n";
    match out {
        Some(p) => write_text(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_gen_data(a: GenDataArgs) -> CliResult {
    let mut cfg = load_config(a.common.config.as_deref())?;
    ensure_fresh(&a.out, a.common.force)?;
    if let Some(s) = a.seed {
        cfg.data.seed = s;
    }
    let d = generate(&cfg.data)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::Failed(format!("{}: {e}", parent.display())))?;
    }
    save_csv(&d, &a.out)?;
    log::info!("wrote {} rows to {}", d.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let mut cfg = load_config(a.common.config.as_deref())?;
    ensure_fresh(&a.out, a.common.force)?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    let data = load_dataset(a.data.as_deref(), &cfg)?;
    let mlp = cfg.mlp_config(data.input_dim());
    let train_cfg = cfg.train_config();
    let (params, history) = match train(&data, &mlp, &train_cfg) {
        Ok(r) => r,
        Err(EcamlError::Aborted(abort)) => {
            let msg = format!("training aborted at iteration {}: {}", abort.iteration, abort.message);
            let dir = a.out.join("aborted");
            fs::create_dir_all(&dir).map_err(|e| CliError::Failed(format!("{}: {e}", dir.display())))?;
            write_text(&dir.join("history.csv"), &abort.history.to_csv())?;
            write_text(&dir.join("weights.csv"), &ecaml::experiments::weights_csv(&abort.last_good))?;
            return Err(CliError::Failed(format!("{msg}; last good state in {}", dir.display())));
        }
        Err(e) => return Err(e.into()),
    };
    let metrics = evaluate(&params, &data, train_cfg.seed)?;
    println!(
        "unseen R@1 {:.4}  seen R@1 {:.4}  NMI {:.4}  F1 {:.4}",
        metrics.unseen_r1(),
        metrics.seen_r1,
        metrics.nmi,
        metrics.f1
    );
    let summary = RunSummary { seed: train_cfg.seed, mlp, train: train_cfg, metrics };
    write_run_dir(&a.out, &params, &history, &summary)?;
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CliResult {
    let cfg = load_config(a.common.config.as_deref())?;
    if let Some(out) = &a.out {
        ensure_fresh(out, a.common.force)?;
    }
    let summary_path = a.run.join("summary.json");
    let text = fs::read_to_string(&summary_path)
        .map_err(|e| CliError::Failed(format!("{}: {e}", summary_path.display())))?;
    let summary: RunSummary = serde_json::from_str(&text)
        .map_err(|e| CliError::Failed(format!("{}: {e}", summary_path.display())))?;
    let weights_path = a.run.join("weights.csv");
    let weights = fs::read_to_string(&weights_path)
        .map_err(|e| CliError::Failed(format!("{}: {e}", weights_path.display())))?;
    let params = parse_weights_csv(&weights, &summary.mlp)?;
    let data = load_dataset(a.data.as_deref(), &cfg)?;
    if data.input_dim() != summary.mlp.input_dim {
        return Err(CliError::Failed(format!(
            "dataset has {} features but the model expects {}",
            data.input_dim(),
            summary.mlp.input_dim
        )));
    }
    let (unseen_x, unseen_y) = data.subset(SplitFilter::Unseen);
    let (seen_x, seen_y) = data.subset(SplitFilter::Seen);
    let unseen_emb = embed_for_eval(&params, unseen_x.view())?;
    let seen_emb = embed_for_eval(&params, seen_x.view())?;
    let report = json!({
        "run": a.run.display().to_string(),
        "unseen": {
            "retrieval": recall_at_k(unseen_emb.view(), &unseen_y, &cfg.eval.recall_ks)?,
            "clustering": evaluate_clustering(unseen_emb.view(), &unseen_y, summary.seed)?,
        },
        "seen": {
            "retrieval": recall_at_k(seen_emb.view(), &seen_y, &cfg.eval.recall_ks)?,
        },
    });
    emit_json(a.out.as_deref(), &report)
}

fn cmd_ablate(a: AblateArgs) -> CliResult {
    let cfg = load_config(a.common.config.as_deref())?;
    if a.jobs == 0 {
        return Err(CliError::Usage("--jobs must be >= 1".into()));
    }
    if a.seeds == 0 {
        return Err(CliError::Usage("--seeds must be >= 1".into()));
    }
    ensure_fresh(&a.out, a.common.force)?;
    let data = load_dataset(a.data.as_deref(), &cfg)?;
    let mlp = cfg.mlp_config(data.input_dim());
    let mut train_cfg = cfg.train_config();
    let seeds: Vec<u64> = (a.seed..a.seed + a.seeds).collect();

    let runs: Vec<AblationRun> = match &a.dims {
        Some(dims) => {
            if let Some(l) = &a.lambdas {
                let positive: Vec<f64> = l.iter().copied().filter(|v| *v > 0.0).collect();
                if positive.len() != 1 {
                    return Err(CliError::Usage("with --dims, --lambdas must name exactly one λ > 0".into()));
                }
                train_cfg = train_cfg.with_lambda(positive[0]);
            }
            embedding_size_sweep(&data, &mlp, &train_cfg, dims, &seeds, a.jobs)?
        }
        None => {
            let lambdas = a.lambdas.clone().unwrap_or_else(|| DEFAULT_LAMBDAS.to_vec());
            ablate_lambda(&data, &mlp, &train_cfg, &lambdas, &seeds, a.jobs)?
        }
    };

    let runs_dir = a.out.join("runs");
    for run in &runs {
        write_run_dir(&runs_dir.join(run.dir_name()), &run.params, &run.history, &run.summary())?;
    }
    let rows: Vec<_> = runs.iter().map(|r| r.row.clone()).collect();
    let medians = median_table(&rows);
    write_text(&a.out.join("ablation.csv"), &ablation_csv(&rows))?;
    write_text(&a.out.join("medians.csv"), &median_csv(&medians))?;
    let summary = json!({ "seeds": seeds, "rows": rows, "medians": medians });
    write_text(
        &a.out.join("ablation.json"),
        &(serde_json::to_string_pretty(&summary).expect("serializes") + "\n"),
    )?;
    for m in &medians {
        println!(
            "dim {:3}  lambda {:<6}  unseen R@1 {:.4}  seen R@1 {:.4}  gap {:.4}  NMI {:.4}  F1 {:.4}",
            m.embedding_dim, m.lambda, m.unseen_r1, m.seen_r1, m.gap, m.nmi, m.f1
        );
    }
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> CliResult {
    if let Some(out) = &a.out {
        ensure_fresh(out, a.force)?;
    }
    let report = run_suite(&VerifyConfig { fuzz: a.fuzz, seed: a.seed, ..VerifyConfig::default() })?;
    for c in &report.checks {
        eprintln!(
            "{:<28} {:>5} instances  {:>3} violations  worst {:.3e}",
            c.name, c.instances, c.violations, c.worst
        );
    }
    emit_json(a.out.as_deref(), &serde_json::to_value(&report).expect("report serializes"))?;
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Failed(format!("{} property violations", report.total_violations)))
    }
}

fn cmd_report(a: ReportArgs) -> CliResult {
    ensure_fresh(&a.out, a.force)?;
    let mut runs = Vec::new();
    for path in &a.runs {
        let found = discover_runs(path)?;
        if found.is_empty() {
            return Err(CliError::Failed(format!("no run directories under {}", path.display())));
        }
        runs.extend(found);
    }
    write_text(&a.out.join("runs.csv"), &aggregate_csv(&runs))?;
    write_text(&a.out.join("recall_curves.svg"), &recall_chart_svg(&runs))?;
    println!("aggregated {} runs into {}", runs.len(), a.out.display());
    Ok(())
}
