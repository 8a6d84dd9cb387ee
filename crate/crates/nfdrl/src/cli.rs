//! The `nfdrl` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{error, info};
use nfdrl_core::agent::{draw_base, greedy_policy, run_policy, train_with_progress, GroundTruth};
use nfdrl_core::oracles::{measure_bellman_scaling, run_all, BELLMAN_GAMMAS};
use nfdrl_core::seeded_rng;
use nfdrl_core::stats::flow_moments;
use serde_json::Value;

use crate::config::{self, ConfigError, EnvId, RunConfig};
use crate::formats::{self, float, write_atomic, Checkpoint, CheckpointError};

#[derive(Debug, Parser)]
#[command(name = "nfdrl", version, about = "Flow-based distributional RL on tabular MDPs")]
#[command(after_help = "Any config field can also be set with `--<field> <value>`, e.g. `--learning_rate 3e-4`.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train an agent and write metrics, a checkpoint and learned distributions.
    Train(TrainArgs),
    /// Run the property checks and write one JSON line per property.
    Props(PropsArgs),
    /// Write the learned distributions of a checkpoint.
    Export(ExportArgs),
    /// Evaluate a checkpoint against Monte-Carlo ground truth.
    Eval(EvalArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Props(_) => "props",
            Command::Export(_) => "export",
            Command::Eval(_) => "eval",
        }
    }
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Flat JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Environment: mdp1, mdp2, mdp3, bernoulli or frozenlake.
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Loss: exact or surrogate.
    #[arg(long)]
    loss: Option<String>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PropsArgs {
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; reports are also printed.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Environment the checkpoint is read against; defaults to the one it was trained on.
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    env: Option<String>,
    /// Seed of the evaluation streams; defaults to the training seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// How a command failed, and with which exit code.
#[derive(Debug, thiserror::Error)]
enum Failure {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<nfdrl_core::Error> for Failure {
    fn from(e: nfdrl_core::Error) -> Self {
        match e {
            nfdrl_core::Error::Config { field, reason } => ConfigError::new(field, reason).into(),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Runtime(format!("{}: {e}", path.display()))
}

/// Split `--field value` / `--field=value` config overrides out of `args`.
/// Flags the parser declares itself are left in place.
fn extract_overrides(args: Vec<OsString>) -> (Vec<OsString>, Vec<(String, Value)>) {
    let reserved = ["seed", "env"];
    let keys = config::known_keys();
    let is_override = |name: &str| keys.iter().any(|k| k == name) && !reserved.contains(&name);
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut iter = args.into_iter();
    while let Some(arg) = iter.next() {
        let text = arg.to_string_lossy().into_owned();
        if let Some(flag) = text.strip_prefix("--") {
            let (name, inline) = match flag.split_once('=') {
                Some((n, v)) => (n.replace('-', "_"), Some(v.to_owned())),
                None => (flag.replace('-', "_"), None),
            };
            if is_override(&name) {
                let value = inline.or_else(|| iter.next().map(|v| v.to_string_lossy().into_owned()));
                if let Some(v) = value {
                    overrides.push((name, config::parse_override(&v)));
                    continue;
                }
            }
        }
        rest.push(arg);
    }
    (rest, overrides)
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("NFDRL_LOG", "info");
    let _ = env_logger::Builder::from_env(env)
        .format_timestamp(None)
        .format_target(false)
        .try_init();
}

/// Run the command line `args` (including the program name) and return the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    init_logging();
    let (args, overrides) = extract_overrides(args.into_iter().map(Into::into).collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a, overrides),
        other if !overrides.is_empty() => {
            let names: Vec<&str> = overrides.iter().map(|(k, _)| k.as_str()).collect();
            Err(Failure::Usage(format!(
                "`{}` does not take config overrides (got {})",
                other.name(),
                names.join(", ")
            )))
        }
        Command::Props(a) => cmd_props(a),
        Command::Export(a) => cmd_export(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            error!("{f}");
            f.code()
        }
    }
}

fn cmd_train(args: TrainArgs, mut overrides: Vec<(String, Value)>) -> Result<i32, Failure> {
    let run = args.run;
    if let Some(env) = run.env {
        overrides.push(("env".into(), Value::from(env)));
    }
    if let Some(seed) = run.seed {
        overrides.push(("seed".into(), Value::from(seed)));
    }
    if let Some(loss) = run.loss {
        overrides.push(("loss_kind".into(), Value::from(loss)));
    }
    let cfg = config::load(run.config.as_deref(), &overrides)?;
    let mdp = cfg.build_mdp()?;
    info!(
        "training on {} for {} timesteps with the {:?} loss",
        cfg.env, cfg.train.total_timesteps, cfg.train.loss_kind
    );
    let out = train_with_progress(&mdp, &cfg.train, |row| {
        info!(
            "step {:>7}  loss {:.4e}  cramer {:.4}  return {:.4}  epsilon {:.3}",
            row.step, row.loss, row.eval_cramer_mean, row.greedy_return_mean, row.epsilon
        );
    })?;

    let dir = &args.out;
    let config_json = serde_json::to_string_pretty(&Value::Object(cfg.to_map())).expect("config serializes") + "\n";
    let mdp_json = serde_json::to_string_pretty(&mdp).expect("mdp serializes") + "\n";
    let checkpoint = Checkpoint::new(&cfg, cfg.train.total_timesteps as u64, &out.net, &out.optimizer);
    let files: [(&str, String); 5] = [
        ("config.json", config_json),
        ("mdp.json", mdp_json),
        ("metrics.csv", formats::metrics_csv(&out.metrics)),
        ("checkpoint.json", checkpoint.to_json()),
        ("distributions.csv", formats::distributions_csv(&out.net, &mdp)?),
    ];
    for (name, contents) in files {
        let path = dir.join(name);
        write_atomic(&path, contents.as_bytes()).map_err(io(&path))?;
    }
    info!("wrote {}", dir.display());
    Ok(0)
}

fn cmd_props(args: PropsArgs) -> Result<i32, Failure> {
    if args.trials == 0 {
        return Err(Failure::Usage("--trials must be at least 1".into()));
    }
    let reports = run_all(args.trials, &mut seeded_rng(args.seed, 0))?;
    let lines = formats::reports_jsonl(&reports);
    print!("{lines}");
    let scaling = measure_bellman_scaling(&BELLMAN_GAMMAS, args.trials, &mut seeded_rng(args.seed, 1))?;
    if let Some(dir) = &args.out {
        let path = dir.join("props.jsonl");
        write_atomic(&path, lines.as_bytes()).map_err(io(&path))?;
        let mut table = String::from("gamma,min_ratio,max_ratio,contracts\n");
        for r in &scaling {
            table.push_str(&format!(
                "{},{},{},{}\n",
                float(r.gamma),
                float(r.min_ratio),
                float(r.max_ratio),
                r.contracts
            ));
        }
        let path = dir.join("bellman_scaling.csv");
        write_atomic(&path, table.as_bytes()).map_err(io(&path))?;
    }
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.pass)
        .map(|r| r.property.as_str())
        .collect();
    if failed.is_empty() {
        Ok(0)
    } else {
        error!("failed properties: {}", failed.join(", "));
        Ok(1)
    }
}

fn checkpoint_config(ck: &Checkpoint, env: Option<String>) -> Result<RunConfig, Failure> {
    let mut cfg = ck.run_config()?;
    if let Some(env) = env {
        cfg.env = env.parse::<EnvId>()?;
    }
    Ok(cfg)
}

fn cmd_export(args: ExportArgs) -> Result<i32, Failure> {
    let ck = Checkpoint::read(&args.checkpoint)?;
    let cfg = checkpoint_config(&ck, args.env)?;
    let mdp = cfg.build_mdp()?;
    let net = ck.network(&cfg, &mdp)?;
    let path = args.out.join("distributions.csv");
    write_atomic(&path, formats::distributions_csv(&net, &mdp)?.as_bytes()).map_err(io(&path))?;
    info!("wrote {}", path.display());
    Ok(0)
}

fn cmd_eval(args: EvalArgs) -> Result<i32, Failure> {
    let ck = Checkpoint::read(&args.checkpoint)?;
    let cfg = checkpoint_config(&ck, args.env)?;
    let train = &cfg.train;
    let mdp = cfg.build_mdp()?;
    let gamma = train.gamma.unwrap_or(mdp.gamma());
    let mdp = mdp.with_gamma(gamma)?;
    let net = ck.network(&cfg, &mdp)?;
    let seed = args.seed.unwrap_or(train.seed);

    let truth = GroundTruth::new(&mdp, train.eval_rollouts, &mut seeded_rng(seed, 3))?;
    let distances = truth.distances(&net, train.cramer_p)?;
    let acting_z = draw_base(train.n_samples, &mut seeded_rng(seed, 1));
    let policy = greedy_policy(&net, &mdp, &acting_z)?;
    let stats = run_policy(
        &mdp,
        &policy,
        train.eval_episodes,
        train.max_episode_steps,
        &mut seeded_rng(seed, 2),
    )?;

    let mut table = String::from("state,action,mean,std,cramer\n");
    for ((s, a), d) in &distances {
        let (m, sd) = flow_moments(&net.flows_for_state(*s)?[*a]);
        table.push_str(&format!("{s},{a},{},{},{}\n", float(m), float(sd), float(*d)));
    }
    let cramer_mean = distances.iter().map(|d| d.1).sum::<f64>() / distances.len().max(1) as f64;
    let summary = serde_json::json!({
        "env": cfg.env.name(),
        "eval_cramer_mean": cramer_mean,
        "mean_discounted_return": stats.mean_discounted_return,
        "mean_total_reward": stats.mean_total_reward,
        "episodes": train.eval_episodes,
        "greedy_policy": policy,
    });
    println!("{summary}");
    if let Some(dir) = &args.out {
        let path = dir.join("eval.csv");
        write_atomic(&path, table.as_bytes()).map_err(io(&path))?;
        let path = dir.join("eval.json");
        let text = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
        write_atomic(&path, text.as_bytes()).map_err(io(&path))?;
    }
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(args: &[&str]) -> Vec<OsString> {
        args.iter().map(OsString::from).collect()
    }

    #[test]
    fn overrides_are_split_from_flags() {
        let (rest, ov) = extract_overrides(os(&[
            "nfdrl",
            "train",
            "--learning_rate",
            "0.01",
            "--out",
            "x",
            "--n-samples=50",
            "--seed",
            "3",
        ]));
        assert_eq!(rest, os(&["nfdrl", "train", "--out", "x", "--seed", "3"]));
        assert_eq!(
            ov,
            vec![
                ("learning_rate".into(), Value::from(0.01)),
                ("n_samples".into(), Value::from(50))
            ]
        );
    }
}
