use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use dbmd::datagen::{self, CoefficientPrior, SyntheticConfig};
use dbmd::eval::{self, ConvergenceExperiment, MatrixFormat};
use dbmd::h_solver;
use dbmd::noise::{self, VarianceExperiment};
use dbmd::runtime::{self, FitReport, PartitionScheme, RunConfig};
use dbmd::{DataShard, Hyperparams, Matrix, Result, Strategy};

#[derive(Parser)]
#[command(name = "dbmd", version, about = "Distributed Bayesian matrix decomposition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate block-basis synthetic data with ground-truth labels.
    Synth(SynthArgs),
    /// Fit a decomposition to a data matrix.
    Fit(FitArgs),
    /// Hungarian-matched accuracy of predicted labels against true labels.
    Eval(EvalArgs),
    /// Empirical vs theoretical variance ratio of weighted aggregation.
    Varratio(VarratioArgs),
    /// Per-round basis objective of the distributed solvers.
    Convergence(ConvergenceArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Bin,
}

impl From<Format> for MatrixFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => MatrixFormat::Csv,
            Format::Bin => MatrixFormat::Bin,
        }
    }
}

fn extension(f: Format) -> &'static str {
    match f {
        Format::Csv => "csv",
        Format::Bin => "bin",
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Prior {
    Bernoulli,
    Dirichlet,
}

#[derive(Clone, Copy, ValueEnum)]
enum Partition {
    Contiguous,
    Strided,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    rank: usize,
    /// Number of shards.
    #[arg(long, default_value_t = 3)]
    shards: usize,
    /// Samples per shard.
    #[arg(long, default_value_t = 1000)]
    n_c: usize,
    #[arg(long, value_enum, default_value_t = Prior::Dirichlet)]
    prior: Prior,
    /// Dirichlet parameter, one value or one per component.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    alpha0: Vec<f64>,
    /// Bernoulli inclusion probability.
    #[arg(long, default_value_t = 0.05)]
    p: f64,
    /// Noise standard deviation, one value or one per shard.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    sigma: Vec<f64>,
    /// Peak height of each basis column.
    #[arg(long, default_value_t = 1.5)]
    a: f64,
    /// Nonzeros per basis column.
    #[arg(long, default_value_t = 20)]
    l: usize,
    /// Overlap between consecutive basis columns.
    #[arg(long, default_value_t = 2)]
    coh: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Args)]
struct FitArgs {
    /// Data matrix (one sample per CSV row). Several files are taken as
    /// one shard each.
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
    #[arg(long, default_value = "admm", value_parser = parse_strategy)]
    solver: Strategy,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    rank: usize,
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    /// Dirichlet parameter, one value or one per component.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    alpha0: Vec<f64>,
    #[arg(long, default_value_t = 300.0)]
    rho: f64,
    #[arg(long, default_value_t = 1e-3)]
    gamma: f64,
    /// Aggregate with inverse-variance weights.
    #[arg(long)]
    weighted: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-2)]
    w_tol: f64,
    #[arg(long, default_value_t = 5000)]
    max_w_iters: usize,
    #[arg(long, default_value_t = 200)]
    max_outer: usize,
    #[arg(long, default_value_t = 1e-6)]
    outer_tol: f64,
    #[arg(long, value_enum, default_value_t = Partition::Contiguous)]
    partition: Partition,
    /// Runs with seeds seed, seed+1, …
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    /// True labels, one per line, in sample order.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    metrics_out: Option<PathBuf>,
    /// Predicted labels of the first run.
    #[arg(long)]
    predictions_out: Option<PathBuf>,
    /// Basis of the first run.
    #[arg(long)]
    basis_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
}

#[derive(Args)]
struct VarratioArgs {
    #[arg(long, default_value = "admm", value_parser = parse_strategy)]
    solver: Strategy,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    /// Largest noise level of the last worker; rows for s = 1..=s_max.
    #[arg(long, default_value_t = 10)]
    s_max: usize,
    #[arg(long, default_value_t = 2020)]
    seed: u64,
    #[arg(long, default_value_t = 50.0)]
    rho: f64,
    #[arg(long, default_value_t = 1e-3)]
    gamma: f64,
    #[arg(long, default_value_t = 1e-8)]
    w_tol: f64,
    /// CSV output; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConvergenceArgs {
    #[arg(long, value_delimiter = ',', default_value = "agd,admm,cease", value_parser = parse_strategy)]
    solver: Vec<Strategy>,
    #[arg(long, value_enum, default_value_t = Prior::Bernoulli)]
    prior: Prior,
    #[arg(long, value_delimiter = ',', default_value = "100,500,5000")]
    n_c: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 300.0)]
    rho: f64,
    #[arg(long, default_value_t = 1e-3)]
    gamma: f64,
    #[arg(long, default_value_t = 1e-2)]
    w_tol: f64,
    #[arg(long, default_value_t = 20_000)]
    max_w_iters: usize,
    /// CSV output; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    s.parse::<Strategy>().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Fit(a) => fit(a),
        Command::Eval(a) => evaluate(a),
        Command::Varratio(a) => varratio(a),
        Command::Convergence(a) => convergence(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn broadcast_list(values: &[f64], len: usize, flag: &str) -> Result<Vec<f64>> {
    match values.len() {
        1 => Ok(vec![values[0]; len]),
        n if n == len => Ok(values.to_vec()),
        n => Err(dbmd::DbmdError::invalid(format!("--{flag} takes 1 or {len} values, got {n}"))),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let coefficients = match a.prior {
        Prior::Bernoulli => CoefficientPrior::Bernoulli { p: a.p },
        Prior::Dirichlet => CoefficientPrior::Dirichlet { alpha0: broadcast_list(&a.alpha0, a.rank, "alpha0")? },
    };
    let cfg = SyntheticConfig {
        a: a.a,
        l: a.l,
        coh: a.coh,
        rank: a.rank,
        shard_sizes: vec![a.n_c; a.shards],
        sigmas: broadcast_list(&a.sigma, a.shards, "sigma")?,
        coefficients,
        seed: a.seed,
    };
    let data = datagen::generate(&cfg)?;
    fs::create_dir_all(&a.out)?;
    let ext = extension(a.format);
    let format = MatrixFormat::from(a.format);
    let mut files = Vec::new();
    for (c, shard) in data.shards.iter().enumerate() {
        let path = a.out.join(format!("shard_{c}.{ext}"));
        eval::save_matrix(&path, shard.x(), format)?;
        files.push(path.display().to_string());
    }
    let blocks: Vec<&Matrix> = data.shards.iter().map(DataShard::x).collect();
    let all = Matrix::from_columns(&blocks.iter().flat_map(|x| x.column_iter()).collect::<Vec<_>>());
    eval::save_matrix(&a.out.join(format!("data.{ext}")), &all, format)?;
    eval::save_matrix(&a.out.join(format!("basis.{ext}")), &data.w, format)?;
    eval::save_labels(&a.out.join("labels.txt"), &data.labels())?;
    let manifest = json!({ "schema": FitReport::SCHEMA, "config": cfg, "shards": files });
    write_json(&a.out.join("synth.json"), &manifest)?;
    eprintln!(
        "wrote {} shards of {}x{} to {}",
        data.shards.len(),
        all.nrows(),
        a.n_c,
        a.out.display()
    );
    Ok(())
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| dbmd::DbmdError::invalid(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn load(path: &Path, format: Option<Format>) -> Result<Matrix> {
    let format = format.map_or_else(|| MatrixFormat::from_path(path), MatrixFormat::from);
    eval::load_matrix(path, format)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn fit(a: FitArgs) -> Result<()> {
    if a.repeats == 0 {
        return Err(dbmd::DbmdError::invalid("--repeats must be >= 1"));
    }
    let mut hp = Hyperparams::new(a.rank).with_alpha0(&broadcast_list(&a.alpha0, a.rank, "alpha0")?)?;
    hp.lambda = a.lambda;
    hp.rho = a.rho;
    hp.gamma = a.gamma;
    hp.weighted = a.weighted;
    hp.w_tol = a.w_tol;
    hp.max_w_iters = a.max_w_iters;
    hp.max_outer = a.max_outer;
    hp.outer_tol = a.outer_tol;

    let (shards, order) = if a.data.len() == 1 {
        let x = load(&a.data[0], a.format)?;
        let scheme = match a.partition {
            Partition::Contiguous => PartitionScheme::Contiguous,
            Partition::Strided => PartitionScheme::Strided,
        };
        let shards = runtime::partition(&x, a.workers, scheme)?;
        let order: Vec<usize> = runtime::partition_indices(x.ncols(), a.workers, scheme).concat();
        (shards, order)
    } else {
        if a.data.len() != a.workers {
            return Err(dbmd::DbmdError::invalid(format!(
                "{} data files given for {} workers",
                a.data.len(),
                a.workers
            )));
        }
        let shards = a
            .data
            .iter()
            .map(|p| load(p, a.format).map(DataShard::new))
            .collect::<Result<Vec<_>>>()?;
        let n = shards.iter().map(DataShard::n).sum();
        (shards, (0..n).collect())
    };
    let n = order.len();
    let truth = a.labels.as_deref().map(eval::load_labels).transpose()?;
    if let Some(t) = &truth {
        if t.len() != n {
            return Err(dbmd::DbmdError::invalid(format!("{} labels for {n} samples", t.len())));
        }
    }

    let mut runs = Vec::new();
    let mut accuracies = Vec::new();
    for rep in 0..a.repeats {
        let mut hp = hp.clone();
        hp.seed = a.seed.wrapping_add(rep as u64);
        let cfg = RunConfig::new(a.solver, a.workers, hp);
        let (state, report) = runtime::fit(shards.clone(), &cfg)?;
        // predictions in the original sample order
        let assigned: Vec<usize> = state.shards.iter().flat_map(|s| h_solver::assign_clusters(&s.h)).collect();
        let mut pred = vec![0; n];
        for (&idx, &label) in order.iter().zip(&assigned) {
            pred[idx] = label;
        }
        let accuracy = match &truth {
            Some(t) => {
                let k_true = t.iter().max().map_or(1, |m| m + 1);
                Some(eval::hungarian_accuracy(&pred, t, a.rank, k_true)?)
            }
            None => None,
        };
        eprintln!(
            "run {rep}: seed {} objective {:.6e} after {} outer rounds ({} basis rounds, {} entries){}",
            cfg.hp.seed,
            report.final_objective(),
            report.rounds.len(),
            report.total_w_rounds(),
            report.ledger.w_entries(),
            accuracy.map_or(String::new(), |acc| format!(", accuracy {acc:.4}"))
        );
        if rep == 0 {
            if let Some(p) = &a.predictions_out {
                eval::save_labels(p, &pred)?;
            }
            if let Some(p) = &a.basis_out {
                eval::save_matrix(p, &state.w, MatrixFormat::from_path(p))?;
            }
        }
        if let Some(acc) = accuracy {
            accuracies.push(acc);
        }
        runs.push(json!({
            "seed": cfg.hp.seed,
            "objectives": report.objectives(),
            "final_objective": report.final_objective(),
            "outer_rounds": report.rounds.len(),
            "w_rounds": report.total_w_rounds(),
            "w_entries": report.ledger.w_entries(),
            "accuracy": accuracy,
            "report": report,
        }));
    }

    let mut metrics = json!({
        "schema": FitReport::SCHEMA,
        "command": "fit",
        "solver": a.solver,
        "workers": a.workers,
        "rank": a.rank,
        "weighted": a.weighted,
        "hyperparams": hp,
        "runs": runs,
    });
    if !accuracies.is_empty() {
        let (mean, std) = mean_std(&accuracies);
        metrics["accuracy_mean"] = json!(mean);
        metrics["accuracy_std"] = json!(std);
        eprintln!("accuracy {mean:.4} ± {std:.4} over {} runs", accuracies.len());
    }
    match &a.metrics_out {
        Some(p) => write_json(p, &metrics)?,
        None => println!("{}", serde_json::to_string_pretty(&metrics).map_err(|e| dbmd::DbmdError::invalid(e.to_string()))?),
    }
    Ok(())
}

fn evaluate(a: EvalArgs) -> Result<()> {
    let pred = eval::load_labels(&a.pred)?;
    let truth = eval::load_labels(&a.truth)?;
    let k = |v: &[usize]| v.iter().max().map_or(1, |m| m + 1);
    let acc = eval::hungarian_accuracy(&pred, &truth, k(&pred), k(&truth))?;
    eprintln!("{} samples, {} clusters, {} classes", pred.len(), k(&pred), k(&truth));
    println!("{acc:?}");
    Ok(())
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(fs::File::create(p)?),
        None => Box::new(io::stdout()),
    })
}

fn varratio(a: VarratioArgs) -> Result<()> {
    let mut base = VarianceExperiment::standard(1.0, a.solver);
    base.reps = a.reps;
    base.seed = a.seed;
    base.rho = a.rho;
    base.gamma = a.gamma;
    base.w_tol = a.w_tol;
    let s_values: Vec<f64> = (1..=a.s_max).map(|s| s as f64).collect();
    let rows = noise::variance_curve(&base, &s_values)?;
    for row in &rows {
        eprintln!(
            "s = {:>4}: theoretical {:.4}, empirical {:.4} ({} reps)",
            row.s, row.theoretical, row.empirical, row.used_reps
        );
    }
    noise::write_variance_csv(output(&a.out)?, &rows)
}

fn convergence(a: ConvergenceArgs) -> Result<()> {
    let mut traces = Vec::new();
    for &strategy in &a.solver {
        for &n_c in &a.n_c {
            let mut exp = match a.prior {
                Prior::Bernoulli => ConvergenceExperiment::bernoulli(strategy, n_c, a.seed),
                Prior::Dirichlet => ConvergenceExperiment::dirichlet(strategy, n_c, a.seed),
            };
            exp.hp.rho = a.rho;
            exp.hp.gamma = a.gamma;
            exp.hp.w_tol = a.w_tol;
            exp.hp.max_w_iters = a.max_w_iters;
            let trace = eval::run_convergence(&exp)?;
            eprintln!(
                "{strategy} n_c = {n_c}: {} rounds{}, final objective {:.6e}",
                trace.rounds,
                if trace.converged { "" } else { " (not converged)" },
                trace.objectives.last().copied().unwrap_or(f64::NAN)
            );
            traces.push(trace);
        }
    }
    eval::write_convergence_csv(output(&a.out)?, &traces)
}
