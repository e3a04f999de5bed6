use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use miirl::envs::{
    parse_intentions, read_demos, read_env, sample_mixture_demonstrations, write_demos, write_env,
    BenchmarkEnv, EnvKind, EnvParams,
};
use miirl::eval::{clustering_accuracy, EnvScorer, RunEvaluator};
use miirl::experiment::{run_experiment, ExperimentConfig};
use miirl::output::{format_float, write_outputs};
use miirl::reward_model::RewardNet;
use miirl::trainers::{train, TrainProblem};
use miirl::{Error, Result};

/// Adaptive multi-intention inverse reinforcement learning.
#[derive(Parser)]
#[command(name = "miirl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a benchmark environment file.
    GenEnv(GenEnvArgs),
    /// Sample expert demonstrations from an environment file.
    Demo(DemoArgs),
    /// Train on an environment and demonstration file.
    Train(TrainArgs),
    /// Score a trained model against the demonstrators' true rewards.
    Evaluate(EvaluateArgs),
    /// Multi-seed experiment over a list of concentration parameters.
    Sweep(ExperimentArgs),
    /// Per-iteration timing of SEM against MCEM.
    Bench(ExperimentArgs),
}

#[derive(Args)]
struct EnvArgs {
    /// gridworld, objectworld or binaryworld.
    #[arg(long, default_value = "gridworld")]
    env: EnvKind,
    /// Use the full-size 32×32 M-worlds.
    #[arg(long)]
    paper_scale: bool,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    n_objects: Option<usize>,
    #[arg(long)]
    n_colors: Option<usize>,
}

impl EnvArgs {
    fn params(&self) -> EnvParams {
        let mut p = if self.paper_scale {
            EnvParams::paper_scale(self.env)
        } else {
            EnvParams::desk_scale(self.env)
        };
        if let Some(s) = self.size {
            p.size = s;
        }
        if let Some(n) = self.n_objects {
            p.n_objects = n;
        }
        if let Some(n) = self.n_colors {
            p.n_colors = n;
        }
        p
    }
}

#[derive(Args)]
struct GenEnvArgs {
    #[command(flatten)]
    env: EnvArgs,
    #[arg(long)]
    seed: u64,
    /// Output file (stdout when absent).
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct DemoArgs {
    /// Environment file written by `gen-env`.
    #[arg(long)]
    env_file: PathBuf,
    /// Comma-separated intentions, letters A-F for the M-worlds.
    #[arg(long, default_value = "A")]
    intentions: String,
    /// Demonstrations per intention.
    #[arg(long, default_value_t = 16)]
    count: usize,
    /// Steps per demonstration (environment default when absent).
    #[arg(long)]
    length: Option<usize>,
    #[arg(long)]
    seed: u64,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

/// Configuration file plus `key=value` overrides, as accepted by
/// `ExperimentConfig`.
#[derive(Args)]
struct ConfigArgs {
    /// Plain-text `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    algorithm: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    fixed_k: Option<String>,
    #[arg(long)]
    k_init: Option<usize>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

impl ConfigArgs {
    fn apply(&self, config: &mut ExperimentConfig) -> Result<()> {
        let flags = [
            ("algorithms", self.algorithm.clone()),
            ("alphas", self.alpha.clone()),
            ("fixed_k", self.fixed_k.clone()),
            ("k_init", self.k_init.map(|v| v.to_string())),
            ("max_iter", self.max_iter.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                config.set(key, &v)?;
            }
        }
        for o in &self.overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("override '{o}' is not KEY=VALUE")))?;
            config.set(key, value)?;
        }
        Ok(())
    }

    fn load(&self, kind: Option<EnvKind>) -> Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::from_text(&read_text(path)?)?,
            None => ExperimentConfig::new(kind.unwrap_or(EnvKind::GridWorld)),
        };
        if let (Some(kind), Some(_)) = (kind, &self.config) {
            if kind != config.env.kind {
                config.set("env", kind.name())?;
            }
        }
        self.apply(&mut config)?;
        Ok(config)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    env_file: PathBuf,
    #[arg(long)]
    demos: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    seed: u64,
    /// Directory for `model.bin`, `assignments.txt` and `history.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    env_file: PathBuf,
    #[arg(long)]
    demos: PathBuf,
    /// Directory written by `train`.
    #[arg(long)]
    model_dir: PathBuf,
    /// Also score on a transferred environment generated from this seed.
    #[arg(long)]
    transfer_seed: Option<u64>,
    #[arg(long, default_value_t = miirl::eval::EVAL_TOLERANCE)]
    tolerance: f64,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Environment kind when no configuration file sets one.
    #[arg(long)]
    env: Option<EnvKind>,
    #[arg(long)]
    paper_scale: bool,
    #[arg(long)]
    intentions: Option<String>,
    #[arg(long)]
    demos_per_intention: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    seed: u64,
    /// Write PPM reward maps.
    #[arg(long)]
    images: bool,
    #[arg(long)]
    out: PathBuf,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn open_read(path: &Path) -> Result<BufReader<fs::File>> {
    Ok(BufReader::new(
        fs::File::open(path).map_err(|e| Error::io(path, e))?,
    ))
}

fn write_to(
    path: Option<&Path>,
    f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>,
) -> Result<()> {
    match path {
        Some(p) => {
            let mut w = BufWriter::new(fs::File::create(p).map_err(|e| Error::io(p, e))?);
            f(&mut w)
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(p, e))
        }
        None => f(&mut std::io::stdout().lock()).map_err(|e| Error::io("<stdout>", e)),
    }
}

fn gen_env(args: GenEnvArgs) -> Result<bool> {
    let env = BenchmarkEnv::generate(args.env.params(), args.seed)?;
    write_to(args.output.as_deref(), |w| write_env(&env, w))?;
    Ok(true)
}

fn demo(args: DemoArgs) -> Result<bool> {
    let env = read_env(open_read(&args.env_file)?)?;
    let intentions = parse_intentions(&args.intentions)?;
    let length = args.length.unwrap_or(env.kind().default_demo_length());
    let demos = sample_mixture_demonstrations(&env, &intentions, args.count, length, args.seed)?;
    write_to(args.output.as_deref(), |w| write_demos(&demos, w))?;
    Ok(true)
}

fn train_cmd(args: TrainArgs) -> Result<bool> {
    let env = read_env(open_read(&args.env_file)?)?;
    let demos = read_demos(open_read(&args.demos)?)?;
    let mut config = args.config.load(Some(env.kind()))?;
    config.train.seed = args.seed;
    let train_config = config.points()[0];
    train_config.validate()?;

    let labelled = demos.iter().all(|d| d.true_intention.is_some());
    let mut evaluator = if labelled {
        Some(RunEvaluator::new(
            &env,
            None,
            &demos,
            config.eval_tolerance,
        )?)
    } else {
        None
    };
    let mut callback = |net: &RewardNet, crp: &miirl::crp::CrpState| {
        evaluator
            .as_mut()
            .expect("only passed when labelled")
            .evaluate(net, crp)
    };
    let problem = TrainProblem::new(&env.mdp, &env.features, &demos);
    let result = if labelled {
        train(problem, &train_config, Some(&mut callback))?
    } else {
        train(problem, &train_config, None)?
    };

    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let out = &args.out;
    write_to(Some(&out.join("model.bin")), |w| result.net.save(w))?;
    let labels = result.crp.labels()?;
    write_to(Some(&out.join("assignments.txt")), |w| {
        labels.iter().try_for_each(|l| writeln!(w, "{l}"))
    })?;
    write_to(Some(&out.join("history.csv")), |w| {
        writeln!(w, "iteration,k,log_likelihood,avg_evd,wall_ms")?;
        for h in &result.history {
            writeln!(
                w,
                "{},{},{},{},{}",
                h.iteration,
                h.k,
                format_float(h.log_likelihood),
                h.evaluation
                    .map(|e| format_float(e.avg_evd))
                    .unwrap_or_default(),
                format_float(h.wall_ms)
            )?;
        }
        Ok(())
    })?;
    println!("intentions {}", result.crp.k());
    if let Some(e) = result.history.last().and_then(|h| h.evaluation) {
        println!("avg_evd {}", format_float(e.avg_evd));
    }
    if labelled {
        let truth: Vec<usize> = demos.iter().filter_map(|d| d.true_intention).collect();
        println!(
            "clustering_accuracy {}",
            format_float(clustering_accuracy(&labels, &truth)?)
        );
    }
    Ok(true)
}

fn evaluate_cmd(args: EvaluateArgs) -> Result<bool> {
    let env = read_env(open_read(&args.env_file)?)?;
    let demos = read_demos(open_read(&args.demos)?)?;
    let net = RewardNet::load(open_read(&args.model_dir.join("model.bin"))?)?;
    let labels_path = args.model_dir.join("assignments.txt");
    let labels = read_text(&labels_path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse::<usize>()
                .map_err(|_| Error::Parse(format!("{}: bad label '{l}'", labels_path.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    if labels.len() != demos.len() {
        return Err(Error::DimensionMismatch {
            context: "assignments",
            expected: demos.len(),
            actual: labels.len(),
        });
    }
    let truth = demos
        .iter()
        .map(|d| {
            d.true_intention
                .ok_or_else(|| Error::InvalidArgument("demonstrations lack true intentions".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    let avg = EnvScorer::new(&env, args.tolerance).avg_evd(&net, &labels, &truth)?;
    println!("avg_evd {}", format_float(avg));
    if let Some(seed) = args.transfer_seed {
        let transferred = BenchmarkEnv::generate(env.params, seed)?;
        let t = EnvScorer::new(&transferred, args.tolerance).avg_evd(&net, &labels, &truth)?;
        println!("transfer_avg_evd {}", format_float(t));
    }
    println!("k_predicted {}", net.n_heads());
    println!(
        "clustering_accuracy {}",
        format_float(clustering_accuracy(&labels, &truth)?)
    );
    Ok(true)
}

fn experiment_config(args: &ExperimentArgs) -> Result<ExperimentConfig> {
    let mut config = args.config.load(args.env)?;
    if args.paper_scale {
        config.set("paper_scale", "true")?;
    }
    if let Some(i) = &args.intentions {
        config.set("intentions", i)?;
    }
    if let Some(n) = args.demos_per_intention {
        config.demos_per_intention = n;
    }
    if let Some(r) = args.repeats {
        config.repeats = r;
    }
    config.seed = args.seed;
    config.images |= args.images;
    config.out_dir = Some(args.out.clone());
    Ok(config)
}

fn experiment(args: ExperimentArgs, bench: bool) -> Result<bool> {
    let mut config = experiment_config(&args)?;
    if bench {
        config.set("algorithms", "SEM,MCEM")?;
        config.record_wall_time = true;
    }
    info!(
        "event=experiment_start points={} repeats={}",
        config.points().len(),
        config.repeats
    );
    let output = run_experiment(&config)?;
    for path in write_outputs(&output, &args.out)? {
        info!("event=wrote path={}", path.display());
    }
    for row in &output.summaries {
        let mean =
            |s: Option<miirl::experiment::Stat>| s.map_or("-".into(), |s| format_float(s.mean));
        println!(
            "{} alpha={} ok={}/{} avg_evd={} k={} accuracy={} iteration_ms={}",
            row.algorithm,
            format_float(row.alpha),
            row.n_ok,
            row.n_ok + row.n_failed,
            mean(row.avg_evd),
            mean(row.k_predicted),
            mean(row.accuracy),
            mean(row.iteration_ms)
        );
    }
    Ok(output.all_succeeded())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::GenEnv(a) => gen_env(a),
        Command::Demo(a) => demo(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Sweep(a) => experiment(a, false),
        Command::Bench(a) => experiment(a, true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: at least one repeat failed; see manifest.txt");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
