use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use cpt_cli::commands::{self, BUDGET_TASK_COUNTS};
use cpt_cli::manifest::{RunManifest, MANIFEST_FILE};
use cpt_cli::overrides::Override;
use cpt_core::budget::{CostTable, DEFAULT_TOTAL_BUDGET_GFLOPS};
use cpt_core::config::ScheduleSection;
use cpt_core::model::ParamSet;
use cpt_core::schedules::{MetaVariant, ScheduleKind};
use cpt_core::streams::OrderingKind;

#[derive(Parser)]
#[command(name = "cpt", version, about = "Continual-pretraining simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// How a run config is assembled.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML config; the toy preset when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset applied on top of the config (repeatable).
    #[arg(long = "preset")]
    presets: Vec<String>,
    /// `section.field=value` edit (repeatable).
    #[arg(long = "set", value_parser = Override::parse)]
    sets: Vec<Override>,
    #[arg(long)]
    seed: Option<u64>,
    /// Stream the ordering back to front.
    #[arg(long)]
    reverse: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<cpt_core::RunConfig> {
        commands::resolve_config(self.config.as_deref(), &self.presets, &self.sets, self.seed, self.reverse)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one stream and write trajectory, final weights and manifest.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Repeat the run recorded in a manifest instead of building a config.
        #[arg(long, conflicts_with_all = ["config", "presets", "sets", "seed", "reverse"])]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "cpt-run")]
        out: PathBuf,
    },
    /// Run a grid of configs in parallel and index the results.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Axis `section.field=v1,v2,...`; `preset=a,b` sweeps presets.
        #[arg(long = "grid")]
        axes: Vec<String>,
        /// Seeds run at every grid point; the config seed when omitted.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, default_value = "cpt-sweep")]
        out: PathBuf,
        #[arg(long, env = "CPT_WORKERS")]
        workers: Option<usize>,
    },
    /// Print multiplier, MAF and steps per task for a cost table.
    Budget {
        /// Cost table CSV; the bundled table when omitted.
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_TOTAL_BUDGET_GFLOPS)]
        total: f64,
        /// Task counts to report.
        #[arg(long, value_delimiter = ',')]
        tasks: Vec<u64>,
        #[arg(long)]
        csv: bool,
    },
    /// Dump the learning rate of every step of every task as CSV.
    Schedule {
        #[arg(long, default_value = "cosine")]
        kind: ScheduleKind,
        #[arg(long, default_value = "independent")]
        variant: MetaVariant,
        #[arg(long, default_value_t = 20)]
        tasks: usize,
        /// Steps in every task.
        #[arg(long, default_value_t = 1000)]
        steps: u64,
        /// Explicit per-task step counts, overriding --tasks and --steps.
        #[arg(long, value_delimiter = ',')]
        lengths: Vec<u64>,
        #[arg(long)]
        eta_max: Option<f64>,
        #[arg(long)]
        eta_min: Option<f64>,
        #[arg(long)]
        warmup: Option<f64>,
        #[arg(long)]
        cooldown: Option<f64>,
        /// Continuous rsqrt decay instead of the printed form.
        #[arg(long)]
        continuous: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build a stream plan and write it as a manifest.
    Stream {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Ordering; the config's when omitted.
        #[arg(long)]
        kind: Option<OrderingKind>,
        /// Inventory JSON; the config's world when omitted.
        #[arg(long)]
        inventory: Option<PathBuf>,
        /// Number of tasks; the config's when omitted.
        #[arg(long)]
        tasks: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on the world of a config or run manifest.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run manifest; its config and checkpoint are used.
        #[arg(long, conflicts_with_all = ["config", "presets", "sets", "seed", "reverse"])]
        manifest: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn emit(out: Option<&PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { cfg, manifest, out } => {
            let config = match &manifest {
                Some(p) => RunManifest::load(p)?.config,
                None => cfg.resolve()?,
            };
            let (traj, _) = commands::run_into(&config, &out)?;
            println!("{}", commands::summary(&traj));
            println!("wrote {}", out.join(MANIFEST_FILE).display());
        }
        Command::Sweep { cfg, axes, seeds, out, workers } => {
            let base = cfg.resolve()?;
            let seeds = if seeds.is_empty() { vec![base.seed] } else { seeds };
            let jobs = commands::sweep_jobs(&base, &axes, &seeds)?;
            let workers = workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            eprintln!("{} runs on {} workers", jobs.len(), workers);
            let failed = commands::run_sweep(&jobs, &out, workers)?;
            println!("wrote {}", out.join(commands::INDEX_FILE).display());
            if failed > 0 {
                bail!("{failed} of {} runs failed; see the index", jobs.len());
            }
        }
        Command::Budget { table, total, tasks, csv } => {
            let table = match &table {
                Some(p) => CostTable::load(p).with_context(|| format!("loading {}", p.display()))?,
                None => CostTable::bundled(),
            };
            let tasks = if tasks.is_empty() { BUDGET_TASK_COUNTS.to_vec() } else { tasks };
            print!("{}", commands::budget_table(&table, total, &tasks, csv)?);
        }
        Command::Schedule {
            kind,
            variant,
            tasks,
            steps,
            lengths,
            eta_max,
            eta_min,
            warmup,
            cooldown,
            continuous,
            out,
        } => {
            let d = ScheduleSection::default();
            let section = ScheduleSection {
                kind,
                variant,
                eta_min: eta_min.unwrap_or(d.eta_min),
                eta_max: eta_max.unwrap_or(d.eta_max),
                warmup_fraction: warmup.unwrap_or(d.warmup_fraction),
                cooldown_fraction: cooldown.unwrap_or(d.cooldown_fraction),
                continuous_rsqrt: continuous,
            };
            let lengths = commands::task_lengths(tasks, steps, &lengths)?;
            emit(out.as_ref(), &commands::schedule_csv(kind, variant, &section.schedule_config(), &lengths)?)?;
        }
        Command::Stream { cfg, kind, inventory, tasks, out } => {
            let config = cfg.resolve()?;
            let kind = kind.unwrap_or(config.stream.ordering);
            let tasks = tasks.unwrap_or(config.budget.num_tasks);
            let plan = commands::stream_manifest(&config, inventory.as_deref(), kind, tasks)?;
            emit(out.as_ref(), &(plan.to_manifest() + "\n"))?;
        }
        Command::Eval { cfg, manifest, checkpoint } => {
            let (config, default_ckpt) = match &manifest {
                Some(p) => {
                    let m = RunManifest::load(p)?;
                    let dir = p.parent().map(PathBuf::from).unwrap_or_default();
                    (m.config, Some(dir.join(m.outputs.checkpoint)))
                }
                None => (cfg.resolve()?, None),
            };
            let Some(ckpt) = checkpoint.or(default_ckpt) else {
                bail!("--checkpoint is required without --manifest");
            };
            let params = ParamSet::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let (a_ka, a_zs, geo) = commands::evaluate_checkpoint(&config, &params)?;
            println!("a_ka,a_zs,geo_mean");
            println!("{a_ka},{a_zs},{geo}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
