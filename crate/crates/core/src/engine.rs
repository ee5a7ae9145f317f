//! The continual update loop: reveal a task pool, train within the step
//! budget, run end-of-task hooks, grow the buffer and evaluate.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::budget::{self, CostTable, REFERENCE_METHOD};
use crate::config::RunConfig;
use crate::data::{ConceptId, Sample, World, PRETRAIN_ID_OFFSET};
use crate::error::{Error, Result};
use crate::methods::lowrank::{self, Adapter};
use crate::methods::{self, Ewc, MethodKind, Si};
use crate::mixture::{self, MixtureRatios, Pools};
use crate::model::{self, AdamW, AdamWConfig, GradContext, ModelConfig, ParamSet, Penalty, Tower};
use crate::schedules::{self, MetaVariant, ScheduleConfig, ScheduleKind};
use crate::streams::{self, Inventory, OrderingKind, StreamPlan, DEFAULT_SCORE_CONTRAST};

/// Independent random streams of one run. Each is ChaCha8 seeded with the
/// run seed, on stream `(purpose << 40) | index`.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Pretrain = 2,
    Batches = 3,
    Adapter = 4,
    Fisher = 5,
    Scoring = 6,
    Joint = 7,
}

pub fn stream_rng(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 40) | index);
    rng
}

/// One evaluation point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    /// 0 for the base model, then 1..=T.
    pub t: usize,
    pub a_ka: f64,
    pub a_zs: f64,
    pub geo_mean: f64,
    pub steps: u64,
    /// Cumulative compute charged so far, in GFLOPs.
    pub mafs_spent: f64,
    /// Cumulative training pairs drawn so far.
    pub samples_seen: u64,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_end: f64,
}

impl TaskRecord {
    fn new(t: usize, (a_ka, a_zs): (f64, f64)) -> Self {
        Self {
            t,
            a_ka,
            a_zs,
            geo_mean: (a_ka * a_zs).sqrt(),
            steps: 0,
            mafs_spent: 0.0,
            samples_seen: 0,
            lr_start: 0.0,
            lr_peak: 0.0,
            lr_end: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub config: RunConfig,
    pub records: Vec<TaskRecord>,
}

pub const TRAJECTORY_HEADER: &str = "t,a_ka,a_zs,geo_mean,steps,mafs_spent,samples_seen,lr_start,lr_peak,lr_end";

impl Trajectory {
    pub fn last(&self) -> &TaskRecord {
        self.records.last().expect("trajectory has a baseline record")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRAJECTORY_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.t, r.a_ka, r.a_zs, r.geo_mean, r.steps, r.mafs_spent, r.samples_seen, r.lr_start, r.lr_peak, r.lr_end
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Vec<TaskRecord>> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        reader
            .deserialize()
            .map(|r| r.map_err(|e| Error::Parse(format!("trajectory: {e}"))))
            .collect()
    }

    /// Writes `<stem>.csv` and the config as `<stem>.config.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let csv_path = dir.join(format!("{stem}.csv"));
        let json_path = dir.join(format!("{stem}.config.json"));
        std::fs::write(&csv_path, self.to_csv())?;
        let json = serde_json::to_string_pretty(&self.config).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(&json_path, json)?;
        Ok((csv_path, json_path))
    }
}

/// Labelled evaluation images together with the text prototypes of the
/// candidate classes.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub prototypes: Vec<(ConceptId, Vec<f64>)>,
    pub samples: Vec<(ConceptId, Vec<f64>)>,
}

impl EvalSet {
    pub fn from_world(world: &World, ids: &[ConceptId]) -> Self {
        let prototypes = ids.iter().map(|id| (*id, world.prototypes[id].text.clone())).collect();
        let samples = ids
            .iter()
            .flat_map(|id| world.eval[id].iter().map(move |s| (*id, s.image.clone())))
            .collect();
        Self { prototypes, samples }
    }
}

/// Mean per-class accuracy of `set` under `params`.
pub fn class_balanced_accuracy(params: &ParamSet, adapter: Adapter, set: &EvalSet) -> Result<f64> {
    if set.samples.is_empty() || set.prototypes.is_empty() {
        return Err(Error::domain("empty evaluation set"));
    }
    let protos: Vec<(ConceptId, &[f64])> = set.prototypes.iter().map(|(c, v)| (*c, v.as_slice())).collect();
    let known: BTreeSet<ConceptId> = protos.iter().map(|(c, _)| *c).collect();
    if let Some((c, _)) = set.samples.iter().find(|(c, _)| !known.contains(c)) {
        return Err(Error::domain(format!("no prototype for concept {c}")));
    }
    let d = set.samples[0].1.len();
    let images = Array2::from_shape_fn((set.samples.len(), d), |(i, j)| set.samples[i].1[j]);
    let pred = model::classify(params, adapter, &protos, images.view())?;
    let mut per_class: BTreeMap<ConceptId, (usize, usize)> = BTreeMap::new();
    for (p, (c, _)) in pred.iter().zip(&set.samples) {
        let e = per_class.entry(*c).or_default();
        e.0 += usize::from(p == c);
        e.1 += 1;
    }
    Ok(per_class.values().map(|(ok, n)| *ok as f64 / *n as f64).sum::<f64>() / per_class.len() as f64)
}

/// `(A_KA, A_ZS)`: accuracy over all adaptation concepts and over held-out
/// concepts, each classified among its own set of prototypes.
pub fn evaluate(params: &ParamSet, adapter: Adapter, adaptation: &EvalSet, heldout: &EvalSet) -> Result<(f64, f64)> {
    Ok((
        class_balanced_accuracy(params, adapter, adaptation)?,
        class_balanced_accuracy(params, adapter, heldout)?,
    ))
}

fn ensure_finite(params: &ParamSet, context: &str) -> Result<()> {
    if params.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("parameters became non-finite ({context})")))
    }
}

/// Base model: contrastive training on the world's pretraining pool with
/// temperature clamping, cosine schedule with 10% warmup.
pub fn pretrain(world: &World, config: &RunConfig) -> Result<ParamSet> {
    let p = &config.pretrain;
    let mcfg = ModelConfig {
        d_in: world.config.d_in,
        d_emb: config.model.d_emb,
    };
    let mut params = model::init_params(&mcfg, p.tau_init, &mut stream_rng(config.seed, Purpose::Init, 0));
    if p.steps == 0 {
        return Ok(params);
    }
    let mut rng = stream_rng(config.seed, Purpose::Pretrain, 0);
    let ocfg = AdamWConfig {
        temperature_lr_scale: 1.0,
        ..config.model.optimizer()
    };
    let mut opt = AdamW::new(ocfg, &params);
    let sched = ScheduleConfig {
        eta_min: 0.0,
        eta_max: p.lr,
        warmup_fraction: 0.1,
        cooldown_fraction: 0.0,
        continuous_rsqrt: false,
    };
    let lrs = schedules::task_lrs(ScheduleKind::Cosine, MetaVariant::Independent, &sched, &[p.steps])?;
    let pool = &world.pretrain_pool;
    let ctx = GradContext::default();
    for lr in lrs {
        let batch: Vec<&Sample> = (0..p.batch_size).map(|_| &pool[rng.random_range(0..pool.len())]).collect();
        let mut g = model::grad(&params, &mixture::to_batch(&batch)?, &ctx)?.grads;
        opt.step(&mut params, &mut g, lr, None)?;
        model::clamp_temperature(&mut params, config.model.min_tau, true)?;
    }
    ensure_finite(&params, "pretraining")?;
    Ok(params)
}

type BaseCache = Mutex<HashMap<String, Arc<(World, ParamSet)>>>;

/// World and base model for `config`, memoized per (seed, world, pretraining,
/// model width) within the process.
pub fn base_model(config: &RunConfig) -> Result<Arc<(World, ParamSet)>> {
    static CACHE: OnceLock<BaseCache> = OnceLock::new();
    let key = serde_json::to_string(&(
        config.seed,
        &config.world,
        &config.pretrain,
        config.model.d_emb,
        AdamWConfig {
            temperature_lr_scale: 1.0,
            ..config.model.optimizer()
        },
        config.model.min_tau,
    ))
    .expect("key serializes");
    let cache = CACHE.get_or_init(Default::default);
    if let Some(hit) = cache.lock().expect("cache lock").get(&key) {
        return Ok(hit.clone());
    }
    let world = World::generate(&config.world, config.seed)?;
    let theta0 = pretrain(&world, config)?;
    let entry = Arc::new((world, theta0));
    cache.lock().expect("cache lock").insert(key, entry.clone());
    Ok(entry)
}

/// Concept inventory of `world` with difficulty scores under `params` and
/// text-prototype similarities.
pub fn inventory(world: &World, params: &ParamSet, config: &RunConfig, with_scores: bool) -> Result<Inventory> {
    let mut concepts = world.concepts.clone();
    if with_scores {
        let ids = world.adaptation_ids();
        let n = config.stream.score_samples.min(world.config.train_samples_per_concept);
        let scores = streams::score_concepts(
            params,
            Adapter::None,
            &ids,
            &world.train,
            n,
            &world.pretrain_pool,
            DEFAULT_SCORE_CONTRAST.min(world.pretrain_pool.len()),
            config.seed ^ (Purpose::Scoring as u64),
        )?;
        for c in &mut concepts {
            c.difficulty = scores.get(&c.id).copied();
        }
    }
    let d = world.config.d_in;
    let feats = Array2::from_shape_fn((concepts.len(), d), |(i, j)| world.prototypes[&concepts[i].id].text[j]);
    let sim = streams::cosine_similarity(&feats);
    Ok(Inventory {
        concepts,
        similarity: Some(sim.outer_iter().map(|r| r.to_vec()).collect()),
    })
}

/// Stream plan for `config`: the saved manifest when one is configured,
/// otherwise the configured ordering of the world's inventory.
pub fn stream_plan(world: &World, theta0: &ParamSet, config: &RunConfig) -> Result<StreamPlan> {
    if let Some(path) = &config.stream.manifest {
        let plan = StreamPlan::from_manifest(&std::fs::read_to_string(path)?)?;
        let known: BTreeSet<ConceptId> = world.adaptation_ids().into_iter().collect();
        if plan.ordering.iter().any(|c| !known.contains(c)) {
            return Err(Error::config("stream.manifest", "manifest names concepts outside the inventory"));
        }
        if plan.num_tasks() != config.budget.num_tasks {
            return Err(Error::config(
                "stream.manifest",
                format!("manifest has {} tasks, budget.num_tasks is {}", plan.num_tasks(), config.budget.num_tasks),
            ));
        }
        return Ok(plan);
    }
    let inv = inventory(world, theta0, config, config.stream.ordering == OrderingKind::Loss)?;
    streams::plan(&inv, config.stream.ordering, config.stream.reversed, config.budget.num_tasks, config.seed)
}

/// Step allocation for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepBudget {
    pub cost_row: String,
    pub maf_per_step: f64,
    /// Compute charged once per task besides gradient steps.
    pub overhead_per_task: f64,
    pub steps_per_task: u64,
}

fn cost_table(config: &RunConfig) -> Result<CostTable> {
    match &config.budget.cost_table {
        Some(p) => CostTable::load(p),
        None => Ok(CostTable::bundled()),
    }
}

fn eval_pairs(world: &World) -> usize {
    world.eval.values().map(Vec::len).sum()
}

/// Per-task steps after method-specific overheads: Fisher passes for EWC,
/// the interpolation for merges, and optionally evaluation.
pub fn step_budget(config: &RunConfig, world: &World, num_scalars: usize) -> Result<StepBudget> {
    let table = cost_table(config)?;
    let names: Vec<&str> = table.rows.iter().map(|r| r.method.as_str()).collect();
    let row = config.method.cost_row_name(&names)?;
    let cost = table.cost(&row)?;
    let maf = budget::maf_per_step(&cost)?;
    let mut overhead = 0.0;
    let m = &config.method;
    if m.kind == MethodKind::Ewc && m.lambda_ewc > 0.0 {
        let reference = budget::maf_per_step(&table.cost(REFERENCE_METHOD)?)?;
        overhead += m.fisher_batches as f64 * reference;
    }
    if m.kind.is_merge() {
        overhead += methods::merge_cost_gflops(num_scalars);
    }
    if config.budget.charge_eval {
        // A forward pass costs about a third of a training step.
        overhead += eval_pairs(world) as f64 / config.model.batch_size as f64 * cost.per_step_gflops / 3.0;
    }
    let steps = match config.budget.steps_per_task {
        Some(s) => s,
        None => budget::steps_per_task_with_overhead(config.budget.total_gflops, config.budget.num_tasks as u64, maf, overhead)?,
    };
    Ok(StepBudget {
        cost_row: row,
        maf_per_step: maf,
        overhead_per_task: overhead,
        steps_per_task: steps,
    })
}

fn check_batch(batch: &[&Sample], heldout: &BTreeSet<ConceptId>) -> Result<()> {
    match batch.iter().find(|s| s.concept.0 < PRETRAIN_ID_OFFSET && heldout.contains(&s.concept)) {
        Some(s) => Err(Error::domain(format!("held-out concept {} reached a training batch", s.concept))),
        None => Ok(()),
    }
}

struct Trainer<'a> {
    config: &'a RunConfig,
    adapter: Adapter,
    heldout: BTreeSet<ConceptId>,
    batch_rng: ChaCha8Rng,
}

impl Trainer<'_> {
    /// Runs `lrs.len()` optimizer steps on batches drawn from `pools`.
    fn train(
        &mut self,
        params: &mut ParamSet,
        trainable: &BTreeSet<String>,
        pools: &Pools,
        ratios: &MixtureRatios,
        lrs: &[f64],
        penalty: Option<&dyn Penalty>,
        mut si: Option<&mut Si>,
    ) -> Result<()> {
        let mut opt = AdamW::new(self.config.model.optimizer(), params);
        let ctx = GradContext {
            adapter: self.adapter,
            trainable: Some(trainable),
            penalty,
        };
        for (step, &lr) in lrs.iter().enumerate() {
            let batch = pools.sample_batch(ratios, self.config.model.batch_size, &mut self.batch_rng)?;
            check_batch(&batch, &self.heldout)?;
            let mut g = model::grad(params, &mixture::to_batch(&batch)?, &ctx)
                .map_err(|e| Error::NonFinite(format!("step {step}: {e}")))?
                .grads;
            match si.as_deref_mut() {
                Some(si) => {
                    let raw = g.clone();
                    let before = params.clone();
                    opt.step(params, &mut g, lr, Some(trainable))?;
                    let mut delta = params.clone();
                    delta.axpy(-1.0, &before)?;
                    si.accumulate(&raw, &delta)?;
                }
                None => {
                    opt.step(params, &mut g, lr, Some(trainable))?;
                }
            }
            model::clamp_temperature(params, self.config.model.min_tau, self.config.model.clamp_temperature)?;
        }
        ensure_finite(params, "training")
    }
}

fn init_run_params(theta0: &ParamSet, config: &RunConfig, adapter: Adapter) -> Result<ParamSet> {
    let mut params = theta0.clone();
    model::set_temperature(&mut params, config.model.tau_init)?;
    let mut rng = stream_rng(config.seed, Purpose::Adapter, 0);
    for tower in [Tower::Image, Tower::Text] {
        lowrank::init_adapter(adapter, tower.prefix(), &mut params, &mut rng)?;
    }
    Ok(params)
}

/// Executes the whole stream and returns one record per task plus the
/// base-model record.
pub fn run_stream(config: &RunConfig) -> Result<Trajectory> {
    config.validate_for_engine()?;
    let base = base_model(config)?;
    let (world, theta0) = (&base.0, &base.1);
    let plan = stream_plan(world, theta0, config)?;
    run_plan(config, world, theta0, &plan)
}

/// [`run_stream`] that also hands back the final weights.
pub fn run_stream_with_params(config: &RunConfig) -> Result<(Trajectory, ParamSet)> {
    config.validate_for_engine()?;
    let base = base_model(config)?;
    let (world, theta0) = (&base.0, &base.1);
    let plan = stream_plan(world, theta0, config)?;
    run_plan_with_params(config, world, theta0, &plan)
}

/// [`run_stream`] with an explicit world, base model and plan.
pub fn run_plan(config: &RunConfig, world: &World, theta0: &ParamSet, plan: &StreamPlan) -> Result<Trajectory> {
    run_plan_with_params(config, world, theta0, plan).map(|(t, _)| t)
}

/// [`run_plan`] that also hands back the final weights (adapters absorbed).
pub fn run_plan_with_params(
    config: &RunConfig,
    world: &World,
    theta0: &ParamSet,
    plan: &StreamPlan,
) -> Result<(Trajectory, ParamSet)> {
    plan.validate()?;
    let heldout: BTreeSet<ConceptId> = world.heldout_ids().into_iter().collect();
    if plan.ordering.iter().any(|c| heldout.contains(c)) {
        return Err(Error::domain("stream plan contains held-out concepts"));
    }
    let method = &config.method;
    let adapter = method.adapter();
    let ratios = config.mixture.ratios()?;
    let sched = config.schedule.schedule_config();
    let adapt_eval = EvalSet::from_world(world, &world.adaptation_ids());
    let heldout_eval = EvalSet::from_world(world, &world.heldout_ids());

    let mut params = init_run_params(theta0, config, adapter)?;
    // Merge-ZS restarts every task from the base model as the run sees it.
    let start0 = params.clone();
    let trainable = methods::trainable_set(method, &params);
    let sb = step_budget(config, world, params.num_scalars())?;

    let replay = if config.mixture.pretrain_pool == world.config.pretrain_pool {
        world.pretrain_pool.clone()
    } else {
        World::pretrain_samples(&world.config, &config.mixture.pretrain_pool, config.seed)?
    };
    let mut pools = Pools::new(replay);

    let mut ewc: Option<Ewc> = None;
    let mut si = match method.kind {
        MethodKind::Si => Some(Si::new(method.c_si, method.zeta_si, &params)?),
        _ => None,
    };
    let use_ewc = method.kind == MethodKind::Ewc && method.lambda_ewc > 0.0;
    let use_si_penalty = method.kind == MethodKind::Si && method.c_si > 0.0;

    let mut trainer = Trainer {
        config,
        adapter,
        heldout,
        batch_rng: stream_rng(config.seed, Purpose::Batches, 0),
    };

    let mut records = vec![TaskRecord::new(0, evaluate(&params, adapter, &adapt_eval, &heldout_eval)?)];
    let mut lengths = Vec::with_capacity(plan.num_tasks());
    let mut spent = 0.0;
    let mut seen = 0u64;
    for (i, task) in plan.tasks.iter().enumerate() {
        let t = i + 1;
        pools.reveal(world.update_pool(task));
        let steps = sb.steps_per_task;
        lengths.push(steps);
        let mut rec = TaskRecord::new(t, (0.0, 0.0));
        if steps > 0 {
            let lrs = schedules::task_lrs(config.schedule.kind, config.schedule.variant, &sched, &lengths)?;
            rec.lr_start = lrs[0];
            rec.lr_end = *lrs.last().expect("non-empty");
            rec.lr_peak = lrs.iter().copied().fold(f64::MIN, f64::max);

            let prev = params.clone();
            if method.kind.is_merge() {
                params = methods::merge_start(method.kind, &start0, &prev).clone();
            }
            // The SI penalty is fixed within a task; only its path integral
            // moves, so the penalty reads a snapshot.
            let si_frozen = if use_si_penalty { si.clone() } else { None };
            let penalty: Option<&dyn Penalty> = if use_ewc {
                ewc.as_ref().map(|e| e as &dyn Penalty)
            } else {
                si_frozen.as_ref().map(|s| s as &dyn Penalty)
            };
            trainer.train(&mut params, &trainable, &pools, &ratios, &lrs, penalty, si.as_mut())?;

            if adapter.is_low_rank() {
                let mut rng = stream_rng(config.seed, Purpose::Adapter, t as u64);
                for tower in [Tower::Image, Tower::Text] {
                    lowrank::absorb(adapter, tower.prefix(), &mut params, &mut rng)?;
                }
            }
            if method.kind.is_merge() {
                params = methods::merge_end_of_task(method.kind, &start0, &prev, &params, method.w_merge)?;
            }
            if use_ewc {
                let mut rng = stream_rng(config.seed, Purpose::Fisher, t as u64);
                let mut batches = Vec::with_capacity(method.fisher_batches);
                for _ in 0..method.fisher_batches {
                    let b: Vec<&Sample> = (0..config.model.batch_size)
                        .map(|_| &pools.update[rng.random_range(0..pools.update.len())])
                        .collect();
                    batches.push(mixture::to_batch(&b)?);
                }
                let fisher = methods::estimate_fisher(&params, &batches, adapter)?;
                match ewc.as_mut() {
                    Some(e) => e.roll(&params, &fisher)?,
                    None => ewc = Some(Ewc::new(method.lambda_ewc, params.clone(), fisher)?),
                }
            }
            if let Some(si) = si.as_mut() {
                si.end_task(&params)?;
            }
            spent += steps as f64 * sb.maf_per_step + sb.overhead_per_task;
            seen += steps * config.model.batch_size as u64;
        }
        pools.update_buffer();
        let (a_ka, a_zs) = evaluate(&params, adapter, &adapt_eval, &heldout_eval)?;
        rec.a_ka = a_ka;
        rec.a_zs = a_zs;
        rec.geo_mean = (a_ka * a_zs).sqrt();
        rec.steps = steps;
        rec.mafs_spent = spent;
        rec.samples_seen = seen;
        records.push(rec);
    }
    // Adapters were absorbed at the last task end; what is left is a fresh
    // zero-update adapter, so the plain model is equivalent.
    if adapter.is_low_rank() {
        for tower in [Tower::Image, Tower::Text] {
            let (trainable, frozen) = adapter.tensor_names(tower.prefix());
            for name in trainable.iter().chain(&frozen) {
                params.remove(name);
            }
        }
    }
    let trajectory = Trajectory {
        config: config.clone(),
        records,
    };
    Ok((trajectory, params))
}

/// Full finetuning from the base model on the shuffled union of all task
/// pools, for the whole `T x F` budget at the full-finetuning step cost.
pub fn joint_upper_bound(config: &RunConfig) -> Result<Trajectory> {
    config.validate_for_engine()?;
    let base = base_model(config)?;
    let (world, theta0) = (&base.0, &base.1);
    let plan = stream_plan(world, theta0, config)?;
    let mut joint_cfg = config.clone();
    joint_cfg.method = methods::MethodConfig::new(MethodKind::FullFt);
    let sb = step_budget(&joint_cfg, world, theta0.num_scalars())?;
    let total_steps = match config.budget.steps_per_task {
        Some(s) => s * config.budget.num_tasks as u64,
        None => budget::steps_per_task(config.budget.total_gflops, 1, sb.maf_per_step)?,
    };
    let adapt_eval = EvalSet::from_world(world, &world.adaptation_ids());
    let heldout_eval = EvalSet::from_world(world, &world.heldout_ids());
    let mut params = init_run_params(theta0, config, Adapter::None)?;
    let t = plan.num_tasks();
    let mut rec = TaskRecord::new(t, (0.0, 0.0));
    if total_steps > 0 {
        let mut pool = world.update_pool(&plan.ordering);
        let mut rng = stream_rng(config.seed, Purpose::Joint, 0);
        let lrs = schedules::task_lrs(config.schedule.kind, MetaVariant::Independent, &config.schedule.schedule_config(), &[total_steps])?;
        let trainable = methods::trainable_set(&joint_cfg.method, &params);
        let mut opt = AdamW::new(config.model.optimizer(), &params);
        let ctx = GradContext {
            trainable: Some(&trainable),
            ..Default::default()
        };
        let b = config.model.batch_size;
        let mut cursor = pool.len();
        for &lr in &lrs {
            let mut batch: Vec<Sample> = Vec::with_capacity(b);
            while batch.len() < b {
                if cursor == pool.len() {
                    pool.shuffle(&mut rng);
                    cursor = 0;
                }
                batch.push(pool[cursor].clone());
                cursor += 1;
            }
            let refs: Vec<&Sample> = batch.iter().collect();
            let mut g = model::grad(&params, &mixture::to_batch(&refs)?, &ctx)?.grads;
            opt.step(&mut params, &mut g, lr, Some(&trainable))?;
            model::clamp_temperature(&mut params, config.model.min_tau, config.model.clamp_temperature)?;
        }
        ensure_finite(&params, "joint training")?;
        rec.lr_start = lrs[0];
        rec.lr_end = *lrs.last().expect("non-empty");
        rec.lr_peak = lrs.iter().copied().fold(f64::MIN, f64::max);
    }
    let (a_ka, a_zs) = evaluate(&params, Adapter::None, &adapt_eval, &heldout_eval)?;
    rec.a_ka = a_ka;
    rec.a_zs = a_zs;
    rec.geo_mean = (a_ka * a_zs).sqrt();
    rec.steps = total_steps;
    rec.mafs_spent = total_steps as f64 * sb.maf_per_step;
    rec.samples_seen = total_steps * config.model.batch_size as u64;
    Ok(Trajectory {
        config: config.clone(),
        records: vec![rec],
    })
}

impl RunConfig {
    /// Like [`RunConfig::validate`], but admits the degenerate merge weights
    /// 0 and 1.
    pub fn validate_for_engine(&self) -> Result<()> {
        if self.method.kind.is_merge() && (self.method.w_merge == 0.0 || self.method.w_merge == 1.0) {
            let mut probe = self.clone();
            probe.method.w_merge = 0.5;
            return probe.validate();
        }
        self.validate()
    }
}
