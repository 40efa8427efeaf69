use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use trajadapt::runner::{self, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "trajadapt", version, about = "Trajectory prediction with online per-agent adaptation")]
struct Cli {
    /// JSON run config; missing keys take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Override one config key, e.g. `adapt.tau=2` or `sweep.layers=["fc3"]`.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Synthesize the trained and transfer scenarios.
    GenData,
    /// Train the predictor on the trained scenario.
    Train,
    /// Run online adaptation on every evaluation case.
    Eval,
    /// Evaluate every (scenario, layer, tau) cell.
    Sweep,
    /// Print the resolved config.
    Config,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Sweep => "sweep",
            Command::Config => "config",
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()?;
    }
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    match cli.command {
        Command::GenData => {
            let m = runner::cmd_gen_data(&cfg)?;
            for s in &m.scenarios {
                println!(
                    "{}: {} trajectories, {} samples -> {}",
                    s.tag.name(),
                    s.trajectories,
                    s.samples,
                    cfg.data_dir().join(&s.file).display()
                );
            }
        }
        Command::Train => {
            let t = runner::cmd_train(&cfg)?;
            let best = &t.curve[t.best_epoch - 1];
            println!(
                "trained on {} samples ({} validation); best epoch {} val loss {:.4} -> {}",
                t.n_train,
                t.n_val,
                t.best_epoch,
                best.val_loss,
                cfg.model_path().display()
            );
        }
        Command::Eval => {
            let s = runner::cmd_eval(&cfg)?;
            for row in &s.rows {
                let imp: Vec<String> = row
                    .metrics
                    .iter()
                    .map(|m| m.improvement_pct.map_or("n/a".into(), |v| format!("{v:+.2}%")))
                    .collect();
                println!(
                    "{} {} tau={} n={}: ADE1..4 improvement {}",
                    row.key.scenario.name(),
                    row.key.layer.name(),
                    row.key.tau,
                    row.n,
                    imp.join(" ")
                );
            }
        }
        Command::Sweep => {
            let r = runner::cmd_sweep(&cfg)?;
            let failed = r.cells.iter().filter(|c| c.error.is_some()).count();
            println!(
                "{} cells ({} failed) -> {}",
                r.cells.len(),
                failed,
                cfg.out_dir.join("sweep.csv").display()
            );
        }
        Command::Config => {
            cfg.validate()?;
            println!("{}", serde_json::to_string_pretty(&cfg)?)
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let diag = serde_json::json!({
                "status": "error",
                "command": cli.command.name(),
                "error": e.to_string(),
                "causes": e.chain().skip(1).map(|c| c.to_string()).collect::<Vec<_>>(),
            });
            eprintln!("{diag}");
            ExitCode::FAILURE
        }
    }
}
