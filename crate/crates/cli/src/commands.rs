use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cpt_core::budget::{self, CostTable};
use cpt_core::engine::{self, EvalSet, Trajectory};
use cpt_core::methods::lowrank::Adapter;
use cpt_core::model::ParamSet;
use cpt_core::schedules::{self, MetaVariant, ScheduleConfig, ScheduleKind};
use cpt_core::streams::{self, Inventory, OrderingKind, StreamPlan};
use cpt_core::RunConfig;
use rayon::prelude::*;

use crate::manifest::{RunManifest, RunOutputs, MANIFEST_FILE};
use crate::overrides::{self, Override};

/// Task counts reported by `budget` unless others are asked for.
pub const BUDGET_TASK_COUNTS: [u64; 4] = [20, 50, 100, 200];

pub const CHECKPOINT_FILE: &str = "final.ckpt";
pub const INDEX_FILE: &str = "index.csv";

/// Base config, then presets, then `key=value` edits, then the seed and
/// reversal flags. Without a file the toy preset is the starting point.
pub fn resolve_config(
    path: Option<&Path>,
    presets: &[String],
    sets: &[Override],
    seed: Option<u64>,
    reverse: bool,
) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::toy(),
    };
    for p in presets {
        cfg.apply_preset(p)?;
    }
    let mut cfg = overrides::apply(&cfg, sets)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if reverse {
        cfg.stream.reversed = true;
    }
    cfg.validate_for_engine()?;
    Ok(cfg)
}

/// Runs the stream for `config` and writes trajectory, final weights and
/// manifest into `out`.
pub fn run_into(config: &RunConfig, out: &Path) -> Result<(Trajectory, RunManifest)> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let (traj, params) = engine::run_stream_with_params(config)?;
    let (csv, json) = traj.write(out, "trajectory")?;
    params.save(out.join(CHECKPOINT_FILE))?;
    let rel = |p: &Path| PathBuf::from(p.file_name().expect("written file has a name"));
    let manifest = RunManifest::new(
        config.clone(),
        RunOutputs {
            trajectory_csv: rel(&csv),
            trajectory_json: rel(&json),
            checkpoint: CHECKPOINT_FILE.into(),
        },
    );
    manifest.save(out.join(MANIFEST_FILE))?;
    Ok((traj, manifest))
}

pub fn summary(traj: &Trajectory) -> String {
    let last = traj.last();
    let first = &traj.records[0];
    format!(
        "tasks {}  steps/task {}  A_KA {:.4} -> {:.4}  A_ZS {:.4} -> {:.4}  geo {:.4}",
        last.t, last.steps, first.a_ka, last.a_ka, first.a_zs, last.a_zs, last.geo_mean
    )
}

/// Multiplier, MAF and steps per task for every row of `table`. An empty
/// table prints nothing.
pub fn budget_table(table: &CostTable, total_gflops: f64, task_counts: &[u64], csv: bool) -> Result<String> {
    let mut out = String::new();
    if table.rows.is_empty() {
        return Ok(out);
    }
    let mut header = vec!["method".to_string(), "multiplier".into(), "maf_per_step".into()];
    header.extend(task_counts.iter().map(|t| format!("steps_t{t}")));
    let mut rows = vec![header];
    for row in &table.rows {
        let cost = table.cost(&row.method)?;
        let maf = budget::maf_per_step(&cost)?;
        let mut cells = vec![
            row.method.clone(),
            format!("{:.4}", budget::reported_multiplier(&cost)?),
            format!("{maf:.2}"),
        ];
        for &t in task_counts {
            cells.push(budget::steps_per_task(total_gflops, t, maf)?.to_string());
        }
        rows.push(cells);
    }
    if csv {
        for r in rows {
            writeln!(out, "{}", r.join(","))?;
        }
    } else {
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|j| rows.iter().map(|r| r[j].len()).max().unwrap_or(0))
            .collect();
        for r in rows {
            let line: Vec<String> = r
                .iter()
                .enumerate()
                .map(|(j, c)| if j == 0 { format!("{c:<w$}", w = widths[j]) } else { format!("{c:>w$}", w = widths[j]) })
                .collect();
            writeln!(out, "{}", line.join("  ").trim_end())?;
        }
    }
    Ok(out)
}

/// `(step, lr)` curve over all tasks as CSV.
pub fn schedule_csv(
    kind: ScheduleKind,
    variant: MetaVariant,
    config: &ScheduleConfig,
    task_lengths: &[u64],
) -> Result<String> {
    let mut out = String::from("global_step,task,step,lr\n");
    for p in schedules::dump(kind, variant, config, task_lengths)? {
        writeln!(out, "{},{},{},{}", p.global_step, p.task, p.step, p.lr)?;
    }
    Ok(out)
}

/// Stream plan from a saved inventory, or from the inventory of `config`'s
/// world when no file is given.
pub fn stream_manifest(
    config: &RunConfig,
    inventory: Option<&Path>,
    kind: OrderingKind,
    num_tasks: usize,
) -> Result<StreamPlan> {
    let inv = match inventory {
        Some(p) => Inventory::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => {
            let base = engine::base_model(config)?;
            engine::inventory(&base.0, &base.1, config, kind == OrderingKind::Loss)?
        }
    };
    Ok(streams::plan(&inv, kind, config.stream.reversed, num_tasks, config.seed)?)
}

/// `(A_KA, A_ZS, geometric mean)` of `params` on the world of `config`.
pub fn evaluate_checkpoint(config: &RunConfig, params: &ParamSet) -> Result<(f64, f64, f64)> {
    let base = engine::base_model(config)?;
    let world = &base.0;
    base.1.check_layout(params).context("checkpoint does not match the model of this config")?;
    let adaptation = EvalSet::from_world(world, &world.adaptation_ids());
    let heldout = EvalSet::from_world(world, &world.heldout_ids());
    let (a_ka, a_zs) = engine::evaluate(params, Adapter::None, &adaptation, &heldout)?;
    Ok((a_ka, a_zs, (a_ka * a_zs).sqrt()))
}

/// One point of a sweep.
#[derive(Debug, Clone)]
pub struct SweepJob {
    pub id: usize,
    pub edits: Vec<Override>,
    pub config: RunConfig,
}

/// Expands `axes` (each `key=v1,v2,...`) over `seeds` into concrete configs.
pub fn sweep_jobs(base: &RunConfig, axes: &[String], seeds: &[u64]) -> Result<Vec<SweepJob>> {
    let mut jobs = Vec::new();
    for point in overrides::grid(axes)? {
        let cfg = overrides::apply(base, &point)?;
        for &seed in seeds {
            let mut config = cfg.clone();
            config.seed = seed;
            config.validate_for_engine()?;
            jobs.push(SweepJob {
                id: jobs.len(),
                edits: point.clone(),
                config,
            });
        }
    }
    Ok(jobs)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Runs `jobs` on `workers` threads, each into its own directory under
/// `out`, then writes the index. Returns the number of failed jobs.
pub fn run_sweep(jobs: &[SweepJob], out: &Path, workers: usize) -> Result<usize> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .context("starting worker pool")?;
    let results: Vec<Result<Trajectory>> = pool.install(|| {
        jobs.par_iter()
            .map(|job| run_into(&job.config, &out.join(job_dir(job.id))).map(|(t, _)| t))
            .collect()
    });
    let mut index = String::from("id,seed,settings,status,a_ka,a_zs,geo_mean,dir\n");
    let mut failed = 0;
    for (job, res) in jobs.iter().zip(results) {
        let settings = job.edits.iter().map(ToString::to_string).collect::<Vec<_>>().join(";");
        let (status, metrics) = match res {
            Ok(t) => {
                let l = t.last();
                ("ok".to_string(), format!("{},{},{}", l.a_ka, l.a_zs, l.geo_mean))
            }
            Err(e) => {
                failed += 1;
                (format!("error: {e:#}"), ",,".to_string())
            }
        };
        writeln!(
            index,
            "{},{},{},{},{},{}",
            job.id,
            job.config.seed,
            csv_field(&settings),
            csv_field(&status),
            metrics,
            job_dir(job.id)
        )?;
    }
    std::fs::write(out.join(INDEX_FILE), index)?;
    Ok(failed)
}

pub fn job_dir(id: usize) -> String {
    format!("run-{id:04}")
}

/// Lengths of `num_tasks` equal tasks, or the explicit list.
pub fn task_lengths(num_tasks: usize, steps: u64, explicit: &[u64]) -> Result<Vec<u64>> {
    if !explicit.is_empty() {
        return Ok(explicit.to_vec());
    }
    if num_tasks == 0 {
        bail!("--tasks must be at least 1");
    }
    Ok(vec![steps; num_tasks])
}
