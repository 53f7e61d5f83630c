use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use planforge::commands::{self, Workspace};
use planforge::config::parse_stage;
use planforge::error::{CliError, CliResult, Stage};
use planforge::io::to_json_bytes;
use planforge::RunConfig;

#[derive(Parser)]
#[command(name = "planforge", version, about = "Preference-conditioned structured pruning plans")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory that receives every artifact.
    #[arg(long, global = true, default_value = "planforge-out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create or load the model and measure calibration statistics.
    Calibrate {
        /// Number of calibration sequences.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train the plan policy.
    Train(TrainArgs),
    /// Query a trained policy with a preference vector.
    Query {
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Preference weights rob,util,comp; renormalized if needed.
        #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
        w: Vec<f64>,
        /// Sample from the policy with this seed instead of using its means.
        #[arg(long)]
        sample: Option<u64>,
        /// Plan file name under <out>/plans.
        #[arg(long, default_value = "query")]
        name: String,
    },
    /// Evaluate plans over a preference grid and export the Pareto cloud.
    Sweep {
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long)]
        samples_per_w: Option<usize>,
    },
    /// Apply a plan file: pruned checkpoint plus mask manifest.
    Apply {
        #[arg(long)]
        plan: PathBuf,
    },
    /// Recovery fine-tuning with the masks held fixed.
    Recover(RecoverArgs),
    /// Held-out metrics for the unpruned, pruned and recovered model.
    Eval {
        #[arg(long)]
        masks: Option<PathBuf>,
    },
    /// Run calibrate, train, query, sweep, apply, recover and eval.
    Pipeline {
        /// First stage to run; earlier artifacts must already exist.
        #[arg(long, default_value = "calibrate", value_parser = parse_stage_arg)]
        from: Stage,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long)]
    budget_min: Option<f64>,
    #[arg(long)]
    budget_max: Option<f64>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    lambda_h: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Episodes between periodic policy checkpoints; 0 disables them.
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args)]
struct RecoverArgs {
    #[arg(long)]
    masks: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Comma list of `lm_head`, `final_norm` and `blocks=N`.
    #[arg(long)]
    scope: Option<String>,
    #[arg(long)]
    mixture: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_stage_arg(s: &str) -> Result<Stage, String> {
    parse_stage(s).ok_or_else(|| format!("unknown stage `{}`", s))
}

fn apply_scope(cfg: &mut RunConfig, scope: &str) -> CliResult<()> {
    cfg.recovery.train_lm_head = false;
    cfg.recovery.train_final_norm = false;
    cfg.recovery.last_n_blocks = 0;
    for part in scope.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part {
            "lm_head" => cfg.recovery.train_lm_head = true,
            "final_norm" => cfg.recovery.train_final_norm = true,
            _ => {
                let n = part
                    .strip_prefix("blocks=")
                    .and_then(|n| n.parse().ok())
                    .ok_or_else(|| CliError::Config(format!("unknown scope entry `{}`", part)))?;
                cfg.recovery.last_n_blocks = n;
            }
        }
    }
    Ok(())
}

fn print_json<T: serde::Serialize>(value: &T) -> CliResult<()> {
    print!("{}", String::from_utf8_lossy(&to_json_bytes(value)?));
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.resolve_seeds()?;
    let ws = Workspace::new(&cli.out);
    match cli.command {
        Command::Calibrate { size } => {
            if let Some(n) = size {
                cfg.data.calibration_size = n;
            }
            cfg.validate()?;
            commands::calibrate(&cfg, &ws).map_err(tag(Stage::Calibrate))?;
        }
        Command::Train(a) => {
            let t = &mut cfg.trainer;
            t.episodes = a.episodes.unwrap_or(t.episodes);
            t.group_size = a.group_size.unwrap_or(t.group_size);
            t.mapper.c_min = a.budget_min.unwrap_or(t.mapper.c_min);
            t.mapper.c_max = a.budget_max.unwrap_or(t.mapper.c_max);
            t.mapper.kappa = a.kappa.unwrap_or(t.mapper.kappa);
            t.entropy_coef = a.lambda_h.unwrap_or(t.entropy_coef);
            t.learning_rate = a.lr.unwrap_or(t.learning_rate);
            t.seed = a.seed.unwrap_or(t.seed);
            let every = a.checkpoint_every.unwrap_or(cfg.pipeline.checkpoint_every);
            cfg.validate()?;
            let summary = commands::train(&cfg, &ws, every).map_err(tag(Stage::Train))?;
            print_json(&summary)?;
        }
        Command::Query { policy, w, sample, name } => {
            let w: [f64; 3] = w
                .try_into()
                .map_err(|_| CliError::Config("--w takes exactly three weights".into()))?;
            let policy = policy.unwrap_or_else(|| ws.policy());
            let plan = commands::query(&ws, &policy, w, sample, &ws.plan(&name)).map_err(tag(Stage::Query))?;
            print!("{}", String::from_utf8_lossy(&plan.to_bytes()?));
        }
        Command::Sweep { policy, grid, samples_per_w } => {
            let policy = policy.unwrap_or_else(|| ws.policy());
            let grid = grid.unwrap_or(cfg.sweep.grid);
            let k = samples_per_w.unwrap_or(cfg.sweep.samples_per_w);
            let points = commands::sweep(&cfg, &ws, &policy, grid, k).map_err(tag(Stage::Sweep))?;
            let front = points.iter().filter(|p| !p.dominated).count();
            println!("{} points, {} non-dominated", points.len(), front);
        }
        Command::Apply { plan } => {
            let masks = commands::apply(&ws, &plan).map_err(tag(Stage::Apply))?;
            let zeroed: usize = masks.zeroed.values().map(Vec::len).sum();
            println!("zeroed {} neurons, mask checksum {}", zeroed, masks.checksum);
        }
        Command::Recover(a) => {
            let r = &mut cfg.recovery;
            r.steps = a.steps.unwrap_or(r.steps);
            r.learning_rate = a.lr.unwrap_or(r.learning_rate);
            r.mixture = a.mixture.unwrap_or(r.mixture);
            r.seed = a.seed.unwrap_or(r.seed);
            if let Some(scope) = &a.scope {
                apply_scope(&mut cfg, scope)?;
            }
            cfg.validate()?;
            let masks = a.masks.unwrap_or_else(|| ws.masks());
            let report = commands::recover(&cfg, &ws, &masks).map_err(tag(Stage::Recover))?;
            print_json(&(report.pre, report.post))?;
        }
        Command::Eval { masks } => {
            let masks = masks.unwrap_or_else(|| ws.masks());
            let report = commands::eval(&cfg, &ws, &masks).map_err(tag(Stage::Eval))?;
            print_json(&report)?;
        }
        Command::Pipeline { from, episodes, steps } => {
            cfg.trainer.episodes = episodes.unwrap_or(cfg.trainer.episodes);
            cfg.recovery.steps = steps.unwrap_or(cfg.recovery.steps);
            let m = commands::pipeline(&cfg, &ws, from)?;
            println!("{} artifacts under {}", m.artifacts.len(), ws.root.display());
            return Ok(());
        }
    }
    ws.refresh_manifest()?;
    Ok(())
}

fn tag(stage: Stage) -> impl FnOnce(CliError) -> CliError {
    move |e| CliError::Stage {
        stage,
        source: Box::new(e),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::FAILURE
        }
    }
}
