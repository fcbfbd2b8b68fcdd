use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use zoomlr::experiments::{
    divergence_table, load_report, regenerate_report, run_study, write_divergence_csv, Algorithm,
    DivergenceTableConfig, ObjectiveSpec, StudyConfig, StudyReport,
};
use zoomlr::objective::DIVERGED_SENTINEL;
use zoomlr::{compare, Activation, ExternalCommand, LrMap, LrScale, NetConfig};

#[derive(Parser)]
#[command(
    name = "zoomlr",
    version,
    about = "Learning-rate search with the Zooming bandit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one study and persist its histories and summary.
    Tune(TuneArgs),
    /// Compare the best traces of several stored studies.
    Compare(CompareArgs),
    /// Divergence fractions of ReLU teacher-student runs per architecture.
    TeacherStudent(TableArgs),
    /// Recompute summary.json from the stored run histories.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgoArg {
    Zooming,
    Random,
    Grid,
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    TeacherStudent,
    Synthetic,
    External,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Linear,
    Log,
}

#[derive(Clone, Copy, ValueEnum)]
enum ActivationArg {
    Relu,
    Sigmoid,
}

#[derive(Args)]
struct LrArgs {
    #[arg(long, default_value_t = 1e-4)]
    lr_min: f64,
    #[arg(long, default_value_t = 0.2)]
    lr_max: f64,
    #[arg(long, value_enum, default_value_t = ScaleArg::Linear)]
    lr_scale: ScaleArg,
}

impl LrArgs {
    fn map(&self) -> Result<LrMap> {
        let scale = match self.lr_scale {
            ScaleArg::Linear => LrScale::Linear,
            ScaleArg::Log => LrScale::Logarithmic,
        };
        LrMap::new(self.lr_min, self.lr_max, scale).context("invalid learning-rate range")
    }
}

#[derive(Args)]
struct TuneArgs {
    #[arg(long, value_enum, default_value_t = AlgoArg::Zooming)]
    algo: AlgoArg,
    /// Radius scale of the Zooming algorithm, in (0, 1].
    #[arg(long, default_value_t = zoomlr::bandit::DEFAULT_RADIUS_SCALE)]
    gamma: f64,
    /// Grid size for `--algo grid`; defaults to half the budget.
    #[arg(long)]
    grid_arms: Option<usize>,
    #[command(flatten)]
    lr: LrArgs,
    #[arg(long, default_value_t = 5)]
    evals: usize,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 50)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = ObjectiveArg::TeacherStudent)]
    objective: ObjectiveArg,
    /// Worker command line for `--objective external`.
    #[arg(long)]
    external_cmd: Option<String>,
    /// Wall-clock limit per external evaluation, in seconds.
    #[arg(long, default_value_t = 3600)]
    timeout_secs: u64,
    #[arg(long, default_value_t = 10)]
    d: usize,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, value_enum, default_value_t = ActivationArg::Relu)]
    activation: ActivationArg,
    /// Optimum of the synthetic landscape.
    #[arg(long, default_value_t = 0.7)]
    optimum: f64,
    /// Noise level of the synthetic landscape.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// Study directories written by `tune`.
    #[arg(required = true, num_args = 2..)]
    studies: Vec<PathBuf>,
    /// Also write the table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct TableArgs {
    #[arg(long, value_delimiter = ',', default_value = "5,10")]
    evals: Vec<usize>,
    /// Architectures as `DxK`, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "10x10,20x5,5x20")]
    archs: Vec<String>,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 50)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    lr_min: f64,
    #[arg(long, default_value_t = 1.0)]
    lr_max: f64,
    #[arg(long, value_enum, default_value_t = ScaleArg::Linear)]
    lr_scale: ScaleArg,
    /// Radius scales of the Zooming rows; random search is always included.
    #[arg(long, value_delimiter = ',', default_value = "1,0.1")]
    gamma: Vec<f64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    study: PathBuf,
}

fn parse_arch(s: &str) -> Result<(usize, usize)> {
    let (d, k) = s
        .split_once(['x', 'X'])
        .with_context(|| format!("architecture {s:?} is not of the form DxK"))?;
    Ok((d.trim().parse()?, k.trim().parse()?))
}

fn tune(args: TuneArgs) -> Result<()> {
    let algorithm = match args.algo {
        AlgoArg::Zooming => Algorithm::zooming(args.gamma),
        AlgoArg::Random => Algorithm::Random,
        AlgoArg::Grid => Algorithm::Grid { arms: args.grid_arms },
    };
    let objective = match args.objective {
        ObjectiveArg::TeacherStudent => {
            let activation = match args.activation {
                ActivationArg::Relu => Activation::Relu,
                ActivationArg::Sigmoid => Activation::Sigmoid,
            };
            ObjectiveSpec::TeacherStudent {
                net: NetConfig::new(args.d, args.k, activation, args.n),
            }
        }
        ObjectiveArg::Synthetic => ObjectiveSpec::Synthetic {
            optimum: args.optimum,
            noise_sd: args.noise,
        },
        ObjectiveArg::External => {
            let Some(line) = args.external_cmd.as_deref() else {
                bail!("--objective external needs --external-cmd");
            };
            let command = ExternalCommand::parse(line)
                .with_context(|| format!("cannot parse worker command {line:?}"))?
                .with_timeout(Duration::from_secs(args.timeout_secs));
            ObjectiveSpec::External { command }
        }
    };
    let config = StudyConfig {
        algorithm,
        lr_map: args.lr.map()?,
        budget_evals: args.evals,
        epochs_per_eval: args.epochs,
        objective,
        runs: args.runs,
        base_seed: args.seed,
        reward: None,
    };
    let output = run_study(&config)?;
    output.write(&args.out_dir)?;
    print_report(&output.report);
    let failures: usize = output.records.iter().map(|r| r.failures.len()).sum();
    if failures > 0 {
        eprintln!("warning: {failures} evaluations failed and were recorded as diverged");
        for f in output.records.iter().flat_map(|r| &r.failures).take(3) {
            eprintln!("  round {}: {}", f.round, f.message);
        }
    }
    println!("wrote {}", args.out_dir.display());
    Ok(())
}

fn print_report(r: &StudyReport) {
    println!("{} on {}", r.algorithm, r.objective);
    println!(
        "runs {}  evals/run {}  epochs/eval {}  total evaluations {}",
        r.runs, r.budget_evals, r.epochs_per_eval, r.total_evaluations
    );
    match &r.best_trace {
        Some(b) if b.auc < DIVERGED_SENTINEL => println!(
            "best trace: run {} round {}  lr {:.6}  AUC {:.4}  samples {}",
            b.run, b.round, b.lr, b.auc, b.samples_to_best
        ),
        Some(_) => println!("best trace: every evaluation diverged"),
        None => println!("best trace: none"),
    }
    if let Some(b) = &r.best_found {
        println!(
            "best found: run {} round {}  lr {:.6}  final loss {:.6}",
            b.run, b.round, b.lr, b.final_loss
        );
    }
    println!(
        "divergence fraction {:.3}  mean samples to best {:.2}",
        r.divergence_fraction, r.mean_samples_to_best
    );
}

fn compare_studies(args: CompareArgs) -> Result<()> {
    let reports = args
        .studies
        .iter()
        .map(|dir| load_report(dir).with_context(|| format!("loading {}", dir.display())))
        .collect::<Result<Vec<_>>>()?;
    let table = compare(&reports)?;
    print!("{table}");
    if let Some(path) = &args.csv {
        table.write_csv(create(path)?)?;
    }
    Ok(())
}

fn create(path: &Path) -> Result<fs::File> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::File::create(path).with_context(|| format!("creating {}", path.display()))
}

fn teacher_student(args: TableArgs) -> Result<()> {
    let scale = match args.lr_scale {
        ScaleArg::Linear => LrScale::Linear,
        ScaleArg::Log => LrScale::Logarithmic,
    };
    let mut algorithms = vec![Algorithm::Random];
    for &g in &args.gamma {
        if !(g > 0.0 && g <= 1.0) {
            bail!("radius scale {g} is outside (0, 1]");
        }
        algorithms.push(Algorithm::zooming(g));
    }
    if args.evals.contains(&0) || args.runs == 0 || args.epochs == 0 || args.n == 0 {
        bail!("evals, runs, epochs and n must be positive");
    }
    let config = DivergenceTableConfig {
        architectures: args.archs.iter().map(|s| parse_arch(s)).collect::<Result<_>>()?,
        budgets: args.evals,
        algorithms,
        n: args.n,
        epochs: args.epochs,
        runs: args.runs,
        base_seed: args.seed,
        lr_map: LrMap::new(args.lr_min, args.lr_max, scale)?,
    };
    let rows = divergence_table(&config)?;
    println!(
        "{:<22} {:>4} {:>4} {:>6} {:>10}",
        "algorithm", "d", "k", "evals", "diverged"
    );
    for r in &rows {
        println!(
            "{:<22} {:>4} {:>4} {:>6} {:>10.2}",
            r.algorithm, r.d, r.k, r.evals, r.fraction
        );
    }
    if let Some(dir) = &args.out_dir {
        let path = dir.join("divergence.csv");
        write_divergence_csv(&rows, create(&path)?)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let report = regenerate_report(&args.study)?;
    print_report(&report);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Tune(a) => tune(a),
        Command::Compare(a) => compare_studies(a),
        Command::TeacherStudent(a) => teacher_student(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
