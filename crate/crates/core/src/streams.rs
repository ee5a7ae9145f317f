//! Concept orderings and their split into disjoint task pools.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Concept, ConceptId, Sample};
use crate::error::{Error, Result};
use crate::methods::lowrank::Adapter;
use crate::model::{clip_loss, encode_batch, ParamSet, Tower};

/// Pairs per concept used to score difficulty.
pub const DEFAULT_SCORE_SAMPLES: usize = 50;
/// Pretraining pairs added to every scoring batch as contrast.
pub const DEFAULT_SCORE_CONTRAST: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderingKind {
    Random,
    Loss,
    Frequency,
    Similarity,
    DatasetIncremental,
    Time,
}

impl OrderingKind {
    pub const ALL: [OrderingKind; 6] = [
        OrderingKind::Random,
        OrderingKind::Loss,
        OrderingKind::Frequency,
        OrderingKind::Similarity,
        OrderingKind::DatasetIncremental,
        OrderingKind::Time,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OrderingKind::Random => "random",
            OrderingKind::Loss => "loss",
            OrderingKind::Frequency => "frequency",
            OrderingKind::Similarity => "similarity",
            OrderingKind::DatasetIncremental => "dataset-incremental",
            OrderingKind::Time => "time",
        }
    }
}

impl fmt::Display for OrderingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OrderingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OrderingKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config("stream.ordering", format!("unknown ordering `{s}`")))
    }
}

fn rng_for(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

pub fn order_random(ids: &[ConceptId], seed: u64) -> Result<Vec<ConceptId>> {
    if ids.is_empty() {
        return Err(Error::domain("cannot order an empty inventory"));
    }
    let mut out = ids.to_vec();
    out.shuffle(&mut rng_for(seed, 1));
    Ok(out)
}

fn ascending_by(scores: &BTreeMap<ConceptId, f64>) -> Vec<ConceptId> {
    let mut out: Vec<(ConceptId, f64)> = scores.iter().map(|(k, v)| (*k, *v)).collect();
    out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    out.into_iter().map(|(k, _)| k).collect()
}

fn require_scores(ids: &[ConceptId], scores: &BTreeMap<ConceptId, f64>, what: &str) -> Result<BTreeMap<ConceptId, f64>> {
    ids.iter()
        .map(|id| {
            scores
                .get(id)
                .map(|s| (*id, *s))
                .ok_or_else(|| Error::domain(format!("no {what} for concept {id}")))
        })
        .collect()
}

/// Easiest (lowest mean loss) concepts first, ties by id.
pub fn order_by_loss(ids: &[ConceptId], difficulty: &BTreeMap<ConceptId, f64>) -> Result<Vec<ConceptId>> {
    Ok(ascending_by(&require_scores(ids, difficulty, "difficulty score")?))
}

/// Rarest concepts first, ties by id.
pub fn order_by_frequency(ids: &[ConceptId], frequency: &BTreeMap<ConceptId, u64>) -> Result<Vec<ConceptId>> {
    let as_f64: BTreeMap<ConceptId, f64> = frequency.iter().map(|(k, v)| (*k, *v as f64)).collect();
    Ok(ascending_by(&require_scores(ids, &as_f64, "frequency")?))
}

fn check_similarity(sim: &Array2<f64>) -> Result<()> {
    let (n, m) = sim.dim();
    if n != m {
        return Err(Error::shape(format!("similarity matrix must be square, got {n}x{m}")));
    }
    for i in 0..n {
        for j in 0..n {
            let s = sim[[i, j]];
            if !s.is_finite() || !(-1.0 - 1e-9..=1.0 + 1e-9).contains(&s) {
                return Err(Error::domain(format!("similarity [{i},{j}] = {s} is outside [-1, 1]")));
            }
            if (s - sim[[j, i]]).abs() > 1e-9 {
                return Err(Error::domain(format!("similarity matrix is not symmetric at [{i},{j}]")));
            }
        }
    }
    Ok(())
}

/// Greedy nearest-neighbour path from `start`; ties go to the lower index.
pub fn greedy_path(sim: &Array2<f64>, start: usize) -> Vec<usize> {
    let n = sim.nrows();
    let mut visited = vec![false; n];
    let mut path = Vec::with_capacity(n);
    let mut cur = start;
    visited[cur] = true;
    path.push(cur);
    for _ in 1..n {
        let mut best: Option<usize> = None;
        for j in 0..n {
            if !visited[j] && best.is_none_or(|b| sim[[cur, j]] > sim[[cur, b]]) {
                best = Some(j);
            }
        }
        cur = best.expect("unvisited node remains");
        visited[cur] = true;
        path.push(cur);
    }
    path
}

/// Sum of `1 - sim` along consecutive nodes.
pub fn path_distance(sim: &Array2<f64>, path: &[usize]) -> f64 {
    path.windows(2).map(|w| 1.0 - sim[[w[0], w[1]]]).sum()
}

/// Shortest of the greedy paths started from every node, as node indices.
/// Ties go to the lower start node.
pub fn order_by_similarity(sim: &Array2<f64>) -> Result<Vec<usize>> {
    check_similarity(sim)?;
    let n = sim.nrows();
    if n == 0 {
        return Err(Error::domain("cannot order an empty inventory"));
    }
    let mut best = greedy_path(sim, 0);
    let mut best_d = path_distance(sim, &best);
    for s in 1..n {
        let p = greedy_path(sim, s);
        let d = path_distance(sim, &p);
        if d < best_d {
            best = p;
            best_d = d;
        }
    }
    Ok(best)
}

/// Cosine similarity between rows of `features`.
pub fn cosine_similarity(features: &Array2<f64>) -> Array2<f64> {
    let norms = features.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(1e-12));
    let unit = features / &norms.insert_axis(Axis(1));
    let mut sim = unit.dot(&unit.t());
    sim.mapv_inplace(|s| s.clamp(-1.0, 1.0));
    // Exact symmetry regardless of summation order.
    let n = sim.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let s = 0.5 * (sim[[i, j]] + sim[[j, i]]);
            sim[[i, j]] = s;
            sim[[j, i]] = s;
        }
    }
    sim
}

fn grouped_shuffle<K: Ord + Copy>(concepts: &[Concept], key: impl Fn(&Concept) -> K, keys_order: Vec<K>, rng: &mut ChaCha8Rng) -> Vec<ConceptId> {
    let mut groups: BTreeMap<K, Vec<ConceptId>> = BTreeMap::new();
    for c in concepts {
        groups.entry(key(c)).or_default().push(c.id);
    }
    let mut out = Vec::with_capacity(concepts.len());
    for k in keys_order {
        let mut g = groups.remove(&k).unwrap_or_default();
        g.sort();
        g.shuffle(rng);
        out.extend(g);
    }
    out
}

/// Datasets in seeded random order, concepts shuffled within each dataset.
pub fn order_dataset_incremental(concepts: &[Concept], seed: u64) -> Result<Vec<ConceptId>> {
    if concepts.is_empty() {
        return Err(Error::domain("cannot order an empty inventory"));
    }
    let mut rng = rng_for(seed, 2);
    let mut datasets: Vec<u32> = concepts.iter().map(|c| c.dataset_id).collect::<BTreeSet<_>>().into_iter().collect();
    datasets.shuffle(&mut rng);
    Ok(grouped_shuffle(concepts, |c| c.dataset_id, datasets, &mut rng))
}

/// Oldest year first, seeded random order within a year.
pub fn order_time(concepts: &[Concept], seed: u64) -> Result<Vec<ConceptId>> {
    if concepts.is_empty() {
        return Err(Error::domain("cannot order an empty inventory"));
    }
    let mut rng = rng_for(seed, 3);
    let years: Vec<i32> = concepts.iter().map(|c| c.year).collect::<BTreeSet<_>>().into_iter().collect();
    Ok(grouped_shuffle(concepts, |c| c.year, years, &mut rng))
}

/// Mean per-pair contrastive loss of each concept's pairs, scored in a batch
/// together with `contrast` pretraining pairs.
#[allow(clippy::too_many_arguments)]
pub fn score_concepts(
    params: &ParamSet,
    adapter: Adapter,
    concepts: &[ConceptId],
    samples: &BTreeMap<ConceptId, Vec<Sample>>,
    samples_per_concept: usize,
    pretrain_pool: &[Sample],
    contrast: usize,
    seed: u64,
) -> Result<BTreeMap<ConceptId, f64>> {
    if samples_per_concept == 0 {
        return Err(Error::domain("samples_per_concept must be >= 1"));
    }
    if pretrain_pool.len() < contrast {
        return Err(Error::domain(format!(
            "pretraining pool has {} pairs, scoring needs {contrast}",
            pretrain_pool.len()
        )));
    }
    let mut rng = rng_for(seed, 4);
    let mut out = BTreeMap::new();
    for id in concepts {
        let pool = samples.get(id).map(Vec::as_slice).unwrap_or(&[]);
        if pool.len() < samples_per_concept {
            return Err(Error::domain(format!(
                "concept {id} has {} pairs, scoring needs {samples_per_concept}",
                pool.len()
            )));
        }
        let own: Vec<&Sample> = pool.choose_multiple(&mut rng, samples_per_concept).collect();
        let extra: Vec<&Sample> = pretrain_pool.choose_multiple(&mut rng, contrast).collect();
        let rows: Vec<&Sample> = own.iter().chain(extra.iter()).copied().collect();
        let d = rows[0].image.len();
        let img = Array2::from_shape_fn((rows.len(), d), |(i, j)| rows[i].image[j]);
        let txt = Array2::from_shape_fn((rows.len(), d), |(i, j)| rows[i].text[j]);
        let tau = crate::model::temperature(params)?;
        let (_, per_sample) = clip_loss(
            &encode_batch(params, adapter, Tower::Image, img.view())?,
            &encode_batch(params, adapter, Tower::Text, txt.view())?,
            tau,
        )?;
        let mean = per_sample[..samples_per_concept].iter().sum::<f64>() / samples_per_concept as f64;
        out.insert(*id, mean);
    }
    Ok(out)
}

/// An ordering split into contiguous task pools.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamPlan {
    pub ordering_kind: OrderingKind,
    pub reversed: bool,
    pub seed: u64,
    pub ordering: Vec<ConceptId>,
    pub tasks: Vec<Vec<ConceptId>>,
}

/// Contiguous near-equal split; earlier tasks take the remainder.
pub fn chunk(ordering: &[ConceptId], num_tasks: usize) -> Result<Vec<Vec<ConceptId>>> {
    if num_tasks == 0 {
        return Err(Error::domain("num_tasks must be >= 1"));
    }
    if num_tasks > ordering.len() {
        return Err(Error::domain(format!(
            "cannot split {} concepts into {num_tasks} tasks",
            ordering.len()
        )));
    }
    let base = ordering.len() / num_tasks;
    let extra = ordering.len() % num_tasks;
    let mut out = Vec::with_capacity(num_tasks);
    let mut start = 0;
    for t in 0..num_tasks {
        let len = base + usize::from(t < extra);
        out.push(ordering[start..start + len].to_vec());
        start += len;
    }
    Ok(out)
}

/// Everything an ordering may need about the concept inventory.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Inventory {
    pub concepts: Vec<Concept>,
    /// Pairwise similarity in the order of `concepts`.
    #[serde(default)]
    pub similarity: Option<Vec<Vec<f64>>>,
}

impl Inventory {
    pub fn ids(&self) -> Vec<ConceptId> {
        self.concepts.iter().map(|c| c.id).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let ids: BTreeSet<ConceptId> = self.concepts.iter().map(|c| c.id).collect();
        if ids.len() != self.concepts.len() {
            return Err(Error::domain("concept ids must be unique"));
        }
        Ok(())
    }

    pub fn similarity_matrix(&self) -> Result<Array2<f64>> {
        let rows = self
            .similarity
            .as_ref()
            .ok_or_else(|| Error::domain("inventory has no similarity matrix"))?;
        let n = rows.len();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        if rows.iter().any(|r| r.len() != n) || n != self.concepts.len() {
            return Err(Error::shape("similarity matrix must be n x n for n concepts"));
        }
        Ok(Array2::from_shape_vec((n, n), flat).expect("checked shape"))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let inv: Self = serde_json::from_str(&text).map_err(|e| Error::Parse(format!("inventory: {e}")))?;
        inv.validate()?;
        Ok(inv)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Orders the inventory by `kind` and splits it into `num_tasks` pools.
pub fn plan(inventory: &Inventory, kind: OrderingKind, reversed: bool, num_tasks: usize, seed: u64) -> Result<StreamPlan> {
    inventory.validate()?;
    let ids = inventory.ids();
    if ids.is_empty() {
        return Err(Error::domain("cannot order an empty inventory"));
    }
    let mut ordering = match kind {
        OrderingKind::Random => order_random(&ids, seed)?,
        OrderingKind::Loss => {
            let scores = inventory
                .concepts
                .iter()
                .filter_map(|c| c.difficulty.map(|d| (c.id, d)))
                .collect();
            order_by_loss(&ids, &scores)?
        }
        OrderingKind::Frequency => {
            let freq = inventory.concepts.iter().map(|c| (c.id, c.frequency)).collect();
            order_by_frequency(&ids, &freq)?
        }
        OrderingKind::Similarity => {
            let path = order_by_similarity(&inventory.similarity_matrix()?)?;
            path.into_iter().map(|i| ids[i]).collect()
        }
        OrderingKind::DatasetIncremental => order_dataset_incremental(&inventory.concepts, seed)?,
        OrderingKind::Time => order_time(&inventory.concepts, seed)?,
    };
    if reversed {
        ordering.reverse();
    }
    let tasks = chunk(&ordering, num_tasks)?;
    Ok(StreamPlan {
        ordering_kind: kind,
        reversed,
        seed,
        ordering,
        tasks,
    })
}

impl StreamPlan {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Checks disjointness, coverage and that the tasks concatenate to the
    /// ordering.
    pub fn validate(&self) -> Result<()> {
        let flat: Vec<ConceptId> = self.tasks.iter().flatten().copied().collect();
        if flat != self.ordering {
            return Err(Error::domain("tasks do not concatenate to the ordering"));
        }
        let unique: BTreeSet<ConceptId> = flat.iter().copied().collect();
        if unique.len() != flat.len() {
            return Err(Error::domain("tasks are not disjoint"));
        }
        if self.tasks.iter().any(Vec::is_empty) {
            return Err(Error::domain("empty task"));
        }
        Ok(())
    }

    pub fn to_manifest(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(text).map_err(|e| Error::Parse(format!("stream manifest: {e}")))?;
        plan.validate()?;
        Ok(plan)
    }
}
