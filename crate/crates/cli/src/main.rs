use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::{debug, info};

use gpsphs::bench::{evaluate, generate_dataset};
use gpsphs::io::{
    load_dataset, load_model, save_dataset, save_model, save_rollout, MetricsSummary, RunConfig,
};
use gpsphs::simulate::{passivity_audit, rollout_ensemble};
use gpsphs::{train, Error, StructureDef};

#[derive(Parser)]
#[command(
    name = "gpsphs",
    version,
    about = "Learn and simulate switching port-Hamiltonian systems with GPs"
)]
struct Cli {
    /// Run configuration (TOML). Missing sections use defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the hopper and write a noisy dataset CSV.
    Generate,
    /// Train a model from a dataset CSV.
    Train(TrainArgs),
    /// Draw sample rollouts from a trained model.
    Simulate(ModelArgs),
    /// Score a trained model against the hopper ground truth.
    Evaluate(EvaluateArgs),
    /// Print the effective configuration.
    Config,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset CSV [default: <out>/dataset.csv].
    #[arg(long)]
    data: Option<PathBuf>,
    /// Structure definition (TOML) [default: built-in hopper].
    #[arg(long)]
    model_def: Option<PathBuf>,
    /// Skip the Hamiltonian fit and keep the GP prior.
    #[arg(long)]
    prior_only: bool,
}

#[derive(Args)]
struct ModelArgs {
    /// Model archive [default: <out>/model.json].
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Exit with status 1 unless every threshold is met.
    #[arg(long)]
    strict: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SPHS_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> gpsphs::Result<ExitCode> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(at(path))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.set_seed(seed);
    }
    fs::create_dir_all(&cli.out).map_err(|e| at(&cli.out)(e.into()))?;
    let out = cli.out.as_path();
    match cli.command {
        Command::Generate => generate(&config, out),
        Command::Train(args) => train_cmd(&config, out, args),
        Command::Simulate(args) => simulate(&config, out, args),
        Command::Evaluate(args) => evaluate_cmd(&config, out, args),
        Command::Config => {
            print!("{}", config.to_toml()?);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn generate(config: &RunConfig, out: &Path) -> gpsphs::Result<ExitCode> {
    let generated = generate_dataset(&config.dataset)?;
    let path = out.join("dataset.csv");
    save_dataset(&generated.dataset, &path).map_err(at(&path))?;
    println!(
        "wrote {} rows to {}",
        generated.dataset.len(),
        path.display()
    );
    println!("realized SNR [dB]: {:?}", generated.realized_snr_db);
    Ok(ExitCode::SUCCESS)
}

fn train_cmd(config: &RunConfig, out: &Path, args: TrainArgs) -> gpsphs::Result<ExitCode> {
    let data_path = args.data.unwrap_or_else(|| out.join("dataset.csv"));
    let dataset = load_dataset(&data_path).map_err(at(&data_path))?;
    let def = match &args.model_def {
        Some(path) => fs::read_to_string(path)
            .map_err(Error::from)
            .and_then(|text| StructureDef::parse(&text))
            .map_err(at(path))?,
        None => StructureDef::hopper(config.dataset.hopper.damping),
    };
    let mut train_cfg = config.train.config.clone();
    train_cfg.prior_only |= args.prior_only;

    let start = Instant::now();
    let model = train(&dataset, &def, &train_cfg, config.train.seed)?;
    let secs = start.elapsed().as_secs_f64();

    for g in &model.diagnostics.gradient {
        println!(
            "dim {}: N = {}, NLML = {:.6}, converged = {}",
            g.dim, g.n_points, g.nlml, g.converged
        );
    }
    for (k, ev) in model.diagnostics.classifier_log_evidence.iter().enumerate() {
        debug!("classifier mode {}: log evidence {ev:.6}", k + 1);
    }
    println!(
        "classifier accuracy: {:.4}",
        model.diagnostics.classifier_accuracy
    );
    println!("training time: {secs:.1} s");

    let path = out.join("model.json");
    save_model(&model, &path).map_err(at(&path))?;
    info!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn at(path: &Path) -> impl FnOnce(Error) -> Error + '_ {
    move |e| e.in_stage(path.display().to_string())
}

fn model_path(args: &ModelArgs, out: &Path) -> PathBuf {
    args.model.clone().unwrap_or_else(|| out.join("model.json"))
}

fn simulate(config: &RunConfig, out: &Path, args: ModelArgs) -> gpsphs::Result<ExitCode> {
    let path = model_path(&args, out);
    let model = load_model(&path).map_err(at(&path))?;
    let structure = model.build_structure()?;
    let sim = &config.simulate;
    let results = rollout_ensemble(&model, structure.as_ref(), &sim.x0, None, sim)?;
    let mut failed = false;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(rollout) => {
                let path = out.join(format!("rollout_{i}.csv"));
                save_rollout(&rollout, &path).map_err(at(&path))?;
                let audit = passivity_audit(&rollout, sim.budget_constant);
                println!(
                    "sample {i}: {} rows, {} switches, passivity {} (worst margin {:.3e}, c = {:.3e})",
                    rollout.len(),
                    audit.switches,
                    if audit.passed() { "ok" } else { "VIOLATED" },
                    audit.worst_margin,
                    audit.budget_constant
                );
            }
            Err(e) => {
                failed = true;
                println!("sample {i}: failed: {e}");
            }
        }
    }
    Ok(if failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    })
}

fn evaluate_cmd(config: &RunConfig, out: &Path, args: EvaluateArgs) -> gpsphs::Result<ExitCode> {
    let path = model_path(&args.model, out);
    let model = load_model(&path).map_err(at(&path))?;
    let (metrics, _, secs) = evaluate(&model, &config.evaluate)?;
    let summary = MetricsSummary::from(&metrics);
    fs::write(out.join("metrics.txt"), summary.to_text())?;
    fs::write(out.join("metrics.json"), summary.to_json()?)?;
    print!("{}", summary.to_text());
    for f in &metrics.failed_samples {
        println!("failed: {f}");
    }
    println!("evaluation time: {secs:.1} s");
    if args.strict && !summary.all_ok {
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}
