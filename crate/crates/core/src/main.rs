//! Command line front end: single prediction runs, full sweeps, gridworld
//! control runs, and the closed-form fixed-point report.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use etamix::control::{run_control, ControlConfig, ControlMode, EpsilonSchedule};
use etamix::env::{parse_env_config, EnvSpec};
use etamix::harness::{
    aggregate, cell_seed, prediction_metrics, raw_rows, render_svg, run_sweep, write_aggregate_csv,
    write_raw_csv, PlotSpec, Reduce, RunRecord, SweepGrid, Task,
};
use etamix::oracle::{expected_update_check, tabular_setup};
use etamix::{Error, Result};

#[derive(Parser)]
#[command(name = "etamix", version, about = "Mixture-bootstrap prediction and control experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one prediction config and write per-episode error to CSV.
    Predict(PredictArgs),
    /// Run an (eta, alpha, seed) sweep; write raw and aggregate CSVs plus a chart.
    Sweep(SweepArgs),
    /// Train a gridworld controller and write per-episode returns to CSV.
    Control(ControlArgs),
    /// Print closed-form fixed points and the expected-update iteration.
    Oracle(OracleArgs),
}

/// Environment selection, either inline flags or a key=value config file.
#[derive(Args)]
struct EnvArgs {
    /// det-chain | random-walk | gridworld.
    #[arg(long, conflicts_with = "env_config")]
    env: Option<String>,
    /// State count for det-chain (default 16) / random-walk (default 19).
    #[arg(long)]
    n: Option<usize>,
    /// Gridworld width (default 5).
    #[arg(long)]
    width: Option<usize>,
    /// Gridworld height (default 5).
    #[arg(long)]
    height: Option<usize>,
    /// Gridworld goal column (default: rightmost).
    #[arg(long)]
    goal_x: Option<usize>,
    /// Gridworld goal row (default: bottom).
    #[arg(long)]
    goal_y: Option<usize>,
    /// Gridworld per-step reward (default 0).
    #[arg(long, allow_hyphen_values = true)]
    step_reward: Option<f64>,
    /// Gridworld terminal reward (default 1).
    #[arg(long, allow_hyphen_values = true)]
    goal_reward: Option<f64>,
    /// Path to a key=value environment config, alternative to the flags.
    #[arg(long)]
    env_config: Option<PathBuf>,
}

impl EnvArgs {
    /// Builds the environment and a short comma-free label for CSV rows.
    fn resolve(&self, default_env: &str) -> Result<(EnvSpec, String)> {
        if let Some(path) = &self.env_config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let spec = parse_env_config(&text)?;
            let label = path
                .file_stem()
                .map(|s| s.to_string_lossy().replace(',', "-"))
                .filter(|s| !s.is_empty())
                .unwrap_or_else(|| "env-config".into());
            return Ok((spec, label));
        }
        let env = self.env.as_deref().unwrap_or(default_env);
        let mut text = format!("env={env}\n");
        let mut push = |key: &str, value: Option<String>| {
            if let Some(v) = value {
                text.push_str(&format!("{key}={v}\n"));
            }
        };
        push("n", self.n.map(|v| v.to_string()));
        push("width", self.width.map(|v| v.to_string()));
        push("height", self.height.map(|v| v.to_string()));
        push("goal_x", self.goal_x.map(|v| v.to_string()));
        push("goal_y", self.goal_y.map(|v| v.to_string()));
        push("step_reward", self.step_reward.map(|v| v.to_string()));
        push("goal_reward", self.goal_reward.map(|v| v.to_string()));
        let spec = parse_env_config(&text)?;
        let label = match env {
            "gridworld" => {
                format!("gridworld-{}x{}", self.width.unwrap_or(5), self.height.unwrap_or(5))
            }
            "det-chain" => format!("det-chain-{}", self.n.unwrap_or(16)),
            other => format!("{other}-{}", self.n.unwrap_or(19)),
        };
        Ok((spec, label))
    }
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    env: EnvArgs,
    /// Mixture weight in [0,1].
    #[arg(long)]
    eta: f64,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    /// Value-head learning rate.
    #[arg(long)]
    alpha: f64,
    /// Successor-feature learning rate (defaults to --alpha).
    #[arg(long)]
    alpha_sf: Option<f64>,
    /// Reward-head learning rate (defaults to --alpha).
    #[arg(long)]
    alpha_r: Option<f64>,
    #[arg(long, default_value_t = 400)]
    episodes: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    env: EnvArgs,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    /// Comma-separated mixture weights.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.3, 0.5, 0.7, 0.9, 0.99, 1.0])]
    etas: Vec<f64>,
    /// Comma-separated learning rates (tied across all heads).
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.01, 0.1, 0.2, 0.3, 0.5])]
    alphas: Vec<f64>,
    /// Seed count; a sweep with k seeds uses seeds 1..=k.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    /// Episodes per cell (prediction) or environment steps (control).
    #[arg(long, default_value_t = 400)]
    episodes: usize,
    /// Output directory for raw.csv, aggregate.csv, sweep.svg.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ControlArgs {
    #[command(flatten)]
    env: EnvArgs,
    /// Mixture weight in [0,1].
    #[arg(long)]
    eta: f64,
    #[arg(long, default_value_t = 0.99)]
    gamma: f64,
    /// Learning rate for all three heads.
    #[arg(long, default_value_t = 0.3)]
    alpha: f64,
    /// Total environment steps.
    #[arg(long)]
    steps: usize,
    /// Episode step cap.
    #[arg(long, default_value_t = 100)]
    episode_cap: usize,
    #[arg(long, default_value_t = 1.0)]
    epsilon_initial: f64,
    #[arg(long, default_value_t = 0.1)]
    epsilon_final: f64,
    /// Steps to anneal epsilon over (default: steps / 5).
    #[arg(long)]
    epsilon_anneal: Option<usize>,
    /// Use replay-buffer minibatch updates instead of online updates.
    #[arg(long)]
    fitted_q: bool,
    /// Replay capacity (with --fitted-q).
    #[arg(long, default_value_t = 10_000, requires = "fitted_q")]
    buffer: usize,
    /// Minibatch size (with --fitted-q).
    #[arg(long, default_value_t = 32, requires = "fitted_q")]
    batch: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output CSV path for per-episode returns.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    env: EnvArgs,
    /// Mixture weight in [0,1].
    #[arg(long)]
    eta: f64,
    #[arg(long, default_value_t = 0.9)]
    gamma: f64,
    /// Expected-update iterations to trace.
    #[arg(long, default_value_t = 1_000)]
    iters: usize,
    /// Emit the iteration trace as CSV rows instead of the text report.
    #[arg(long)]
    csv: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let benign =
                matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return if benign { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    let result = match cli.command {
        Command::Predict(args) => run_predict(args),
        Command::Sweep(args) => run_sweep_cmd(args),
        Command::Control(args) => run_control_cmd(args),
        Command::Oracle(args) => run_oracle(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 1 invalid arguments or contracts, 2 numeric failure, 3 I/O failure.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidSpec(_) | Error::InvalidPolicy(_) | Error::Contract(_) => 1,
        Error::Singular { .. }
        | Error::NoSolution(_)
        | Error::Overflow(_)
        | Error::Divergence { .. }
        | Error::UndefinedRank => 2,
        Error::Io { .. } => 3,
    }
}

fn run_predict(args: PredictArgs) -> Result<()> {
    let (env, label) = args.env.resolve("random-walk")?;
    let EnvSpec::Mrp(spec) = env else {
        return Err(Error::InvalidSpec("predict needs a chain environment".into()));
    };
    let alphas = [args.alpha, args.alpha_sf.unwrap_or(args.alpha), args.alpha_r.unwrap_or(args.alpha)];
    let mut rng =
        ChaCha8Rng::seed_from_u64(cell_seed(args.seed, args.eta, args.alpha, Task::Predict));
    let metrics = prediction_metrics(&spec, args.gamma, args.eta, alphas, args.episodes, &mut rng)?;
    let record = RunRecord {
        task: Task::Predict,
        env: label,
        eta: args.eta,
        gamma: args.gamma,
        alpha: alphas[0],
        alpha_sf: alphas[1],
        alpha_r: alphas[2],
        seed: args.seed,
        metrics,
        failed: false,
        duration: std::time::Duration::ZERO,
    };
    write_raw_csv(&raw_rows(std::slice::from_ref(&record)), &args.out)?;
    let last = record.metrics.last().copied().unwrap_or(f64::NAN);
    println!(
        "wrote {} episodes to {} (final error {last:.6})",
        record.metrics.len(),
        args.out.display()
    );
    Ok(())
}

fn run_sweep_cmd(args: SweepArgs) -> Result<()> {
    let (env, env_label) = args.env.resolve("random-walk")?;
    let task = match &env {
        EnvSpec::Mrp(_) => Task::Predict,
        EnvSpec::Mdp(_) => Task::Control,
    };
    if args.seeds == 0 {
        return Err(Error::InvalidSpec("sweep needs at least one seed".into()));
    }
    let grid = SweepGrid {
        env_label,
        env,
        gamma: args.gamma,
        etas: args.etas,
        alphas: args.alphas,
        seeds: (1..=args.seeds).collect(),
        episodes: args.episodes,
    };
    let records = run_sweep(&grid, task)?;
    if records.iter().all(|r| r.failed) {
        return Err(Error::Overflow("every sweep cell failed".into()));
    }
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let raw_path = args.out.join("raw.csv");
    write_raw_csv(&raw_rows(&records), &raw_path)?;
    let agg = aggregate(&records, Reduce::MeanOverEpisodes)?;
    let agg_path = args.out.join("aggregate.csv");
    write_aggregate_csv(&agg.rows, &agg_path)?;
    let svg_path = args.out.join("sweep.svg");
    let plot = PlotSpec {
        title: format!("{} on {}", task.tag(), grid.env_label),
        x_label: "learning rate".into(),
        y_label: match task {
            Task::Predict => "mean error over episodes".into(),
            Task::Control => "mean return over episodes".into(),
        },
    };
    render_svg(&agg.rows, &svg_path, &plot)?;
    let n_failed = records.iter().filter(|r| r.failed).count();
    if n_failed > 0 {
        eprintln!("warning: {n_failed} cells diverged and were excluded from aggregates");
    }
    if agg.rows.iter().any(|r| r.single_seed) {
        eprintln!("warning: some configs aggregated a single seed; intervals read 0");
    }
    println!(
        "{} cells ({} failed) -> {}, {}, {}",
        records.len(),
        n_failed,
        raw_path.display(),
        agg_path.display(),
        svg_path.display()
    );
    Ok(())
}

fn run_control_cmd(args: ControlArgs) -> Result<()> {
    let (env, label) = args.env.resolve("gridworld")?;
    let EnvSpec::Mdp(spec) = env else {
        return Err(Error::InvalidSpec("control needs an action environment".into()));
    };
    let config = ControlConfig {
        eta: args.eta,
        gamma: args.gamma,
        alpha_q: args.alpha,
        alpha_xi: args.alpha,
        alpha_w: args.alpha,
        epsilon: EpsilonSchedule::new(
            args.epsilon_initial,
            args.epsilon_final,
            args.epsilon_anneal.unwrap_or((args.steps / 5).max(1)),
        )?,
        total_steps: args.steps,
        max_episode_steps: args.episode_cap,
        mode: if args.fitted_q {
            ControlMode::FittedQ { capacity: args.buffer, batch: args.batch }
        } else {
            ControlMode::Online
        },
    };
    let mut rng =
        ChaCha8Rng::seed_from_u64(cell_seed(args.seed, args.eta, args.alpha, Task::Control));
    let run = run_control(&spec, &config, &mut rng)?;
    let record = RunRecord {
        task: Task::Control,
        env: label,
        eta: args.eta,
        gamma: args.gamma,
        alpha: args.alpha,
        alpha_sf: args.alpha,
        alpha_r: args.alpha,
        seed: args.seed,
        metrics: run.episode_returns,
        failed: false,
        duration: std::time::Duration::ZERO,
    };
    write_raw_csv(&raw_rows(std::slice::from_ref(&record)), &args.out)?;
    let returns = &record.metrics;
    let tail = &returns[returns.len().saturating_sub(50)..];
    let tail_mean = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
    println!(
        "wrote {} episodes to {} (mean return over last {}: {tail_mean:.4})",
        returns.len(),
        args.out.display(),
        tail.len()
    );
    Ok(())
}

fn run_oracle(args: OracleArgs) -> Result<()> {
    let (env, label) = args.env.resolve("random-walk")?;
    let EnvSpec::Mrp(spec) = env else {
        return Err(Error::InvalidSpec(
            "the fixed-point report is defined for chain environments".into(),
        ));
    };
    let (phi, d, form) = tabular_setup(&spec)?;
    let theta0 = nalgebra::DVector::zeros(phi.d());
    let report = expected_update_check(
        &phi,
        &d,
        &form.p_pi,
        &form.r_bar,
        args.gamma,
        args.eta,
        &theta0,
        args.iters,
    )?;
    if args.csv {
        // Raw-schema rows: episode indexes the iteration, the metric is the
        // sup-norm distance to the one-step fixed point.
        println!("{}", etamix::harness::RAW_HEADER);
        for (k, dist) in report.iteration_trace.iter().enumerate() {
            println!(
                "oracle,{label},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},0,{k},{dist:.16e}",
                args.eta, args.gamma, 0.0, 0.0, 0.0
            );
        }
        return Ok(());
    }
    let fmt_vec = |v: &nalgebra::DVector<f64>| {
        let parts: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
        format!("[{}]", parts.join(", "))
    };
    println!("environment        {label}");
    println!("gamma              {}", args.gamma);
    println!("eta                {}", args.eta);
    println!("identity residual  {:.3e}", report.identity_residual);
    let (hit, dist) = report
        .iteration_trace
        .iter()
        .enumerate()
        .find(|(_, d)| **d < 1e-8)
        .map(|(k, d)| (format!("{}", k + 1), *d))
        .unwrap_or_else(|| {
            ( format!(">{}", report.iteration_trace.len()),
              *report.iteration_trace.last().unwrap_or(&f64::NAN) )
        });
    println!("iterations to 1e-8 {hit} (last distance {dist:.3e})");
    println!("one-step values    {}", fmt_vec(&report.theta_td));
    println!("model-rate values  {}", fmt_vec(&report.theta_td_eta));
    println!("reward weights     {}", fmt_vec(&report.w_hat));
    println!("feature model      {}x{} matrix", report.xi_eta.nrows(), report.xi_eta.ncols());
    Ok(())
}
