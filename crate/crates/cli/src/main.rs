use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use metatuner::training::{Ablation, Schedule};
use metatuner_cli::checkpoint::write_scripted;
use metatuner_cli::commands::{self, Part};
use metatuner_cli::RunConfig;

/// Joint prompt and hypernetwork-adapter training on micro transformers.
#[derive(Parser)]
#[command(name = "metatuner", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML run config; omitted keys take their defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.alpha=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| anyhow::anyhow!("--set {o:?} is not KEY=VALUE"))?;
            cfg = cfg.with_override(k, v)?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the fully resolved config.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write every task suite as split directories.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (must not exist); default: a fresh one under runs_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Actor SFT, then rejection-sampled generator SFT.
    Warmup {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Joint training from a warm-up directory (or a fresh warm-up).
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Warm-up run directory or pipeline checkpoint.
        #[arg(long)]
        from: Option<PathBuf>,
        /// Overrides train.schedule.
        #[arg(long)]
        schedule: Option<Schedule>,
        /// Overrides train.ablation (none, wo_F, wo_P, wo_S).
        #[arg(long)]
        ablation: Option<Ablation>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Greedy evaluation of a checkpoint on a split directory.
    Eval {
        /// Pipeline, actor or scripted checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// train, dev or test.
        #[arg(long, default_value = "test")]
        split: Part,
        /// Also report the mean answer loss.
        #[arg(long)]
        loss: bool,
        /// Directory for report.txt and report.json.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the JSON report instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Sample prompts for queries and show answers, rewards and adapter norms.
    Rollout {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split file lines or bare cue-led inputs, one per line.
        #[arg(long)]
        queries: PathBuf,
        /// Sampling temperature.
        #[arg(long, default_value_t = 0.9)]
        t: f64,
        /// Samples per query.
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// One JSON record per query instead of text.
        #[arg(long)]
        json: bool,
    },
    /// The full model and its three ablations from one warm-up.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long, default_value = "J")]
        schedule: Schedule,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cartesian sweep over config keys.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// `key=v1,v2,...`; repeatable.
        #[arg(long, required = true)]
        grid: Vec<String>,
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a checkpoint that answers with the task oracle.
    Scripted {
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Config { cfg } => print!("{}", cfg.load()?.to_toml()),
        Command::GenData { cfg, out } => println!("{}", commands::gen_data(&cfg.load()?, out.as_deref())?.display()),
        Command::Warmup { cfg, out } => println!("{}", commands::warmup(&cfg.load()?, out.as_deref())?.display()),
        Command::Train {
            cfg,
            from,
            schedule,
            ablation,
            out,
        } => {
            let mut c = cfg.load()?;
            if let Some(s) = schedule {
                c.train.schedule = s;
            }
            if let Some(a) = ablation {
                c.train.ablation = a;
            }
            println!("{}", commands::train(&c, from.as_deref(), out.as_deref())?.display());
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            loss,
            out,
            json,
        } => {
            let r = commands::eval(&checkpoint, &data, split, loss, out.as_deref())?;
            if json {
                println!("{}", serde_json::to_string(&r)?);
            } else {
                print!("{}", r.to_text());
            }
        }
        Command::Rollout {
            checkpoint,
            queries,
            t,
            n,
            seed,
            json,
        } => {
            let dumps = commands::rollout(&checkpoint, &queries, t, n, seed)?;
            if json {
                for d in &dumps {
                    println!("{}", serde_json::to_string(d)?);
                }
            } else {
                print!("{}", commands::rollout_text(&dumps));
            }
        }
        Command::Ablate { cfg, from, schedule, out } => {
            let (dir, _) = commands::ablate(&cfg.load()?, schedule, from.as_deref(), out.as_deref())?;
            print!("{}", std::fs::read_to_string(dir.join("summary.tsv"))?);
            println!("{}", dir.display());
        }
        Command::Sweep { cfg, grid, from, out } => {
            let grids = grid.iter().map(|g| commands::parse_grid(g)).collect::<Result<Vec<_>>>()?;
            let (dir, _) = commands::sweep(&cfg.load()?, &grids, from.as_deref(), out.as_deref())?;
            print!("{}", std::fs::read_to_string(dir.join("summary.tsv"))?);
            println!("{}", dir.display());
        }
        Command::Scripted { out } => write_scripted(&out)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
