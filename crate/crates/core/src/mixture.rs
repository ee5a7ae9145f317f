//! Pretraining, update and replay-buffer pools, and per-step batch assembly.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ConceptId, PoolTag, Sample};
use crate::error::{Error, Result};
use crate::model::Batch;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureRatios {
    pub lambda_p: f64,
    pub lambda_d: f64,
    pub lambda_b: f64,
}

pub const PRESET_NAMES: [&str; 5] = ["reference", "no-buffer", "pretrain-heavy", "ibrahim", "iidify"];

impl MixtureRatios {
    pub fn new(lambda_p: f64, lambda_d: f64, lambda_b: f64) -> Result<Self> {
        let r = Self {
            lambda_p,
            lambda_d,
            lambda_b,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("mixture.lambda_p", self.lambda_p),
            ("mixture.lambda_d", self.lambda_d),
            ("mixture.lambda_b", self.lambda_b),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(field, format!("must be in [0, 1], got {v}")));
            }
        }
        let sum = self.lambda_p + self.lambda_d + self.lambda_b;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config("mixture", format!("lambda_p + lambda_d + lambda_b must be 1, got {sum}")));
        }
        Ok(())
    }

    pub fn preset(name: &str) -> Result<Self> {
        let (p, d, b) = match name {
            "reference" => (0.33, 0.34, 0.33),
            "no-buffer" => (0.5, 0.5, 0.0),
            "pretrain-heavy" => (0.8, 0.1, 0.1),
            "ibrahim" => (0.05, 0.48, 0.47),
            "iidify" => (0.0, 0.1, 0.9),
            _ => {
                return Err(Error::config(
                    "mixture.preset",
                    format!("unknown mixture preset `{name}` (known: {})", PRESET_NAMES.join(", ")),
                ))
            }
        };
        Self::new(p, d, b)
    }
}

impl Default for MixtureRatios {
    fn default() -> Self {
        Self::preset("reference").expect("reference preset is valid")
    }
}

/// Per-source sample counts of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceCounts {
    pub pretrain: usize,
    pub update: usize,
    pub buffer: usize,
}

impl SourceCounts {
    pub fn total(&self) -> usize {
        self.pretrain + self.update + self.buffer
    }
}

/// Largest-remainder split of `batch_size` over (P, D, B). Equal remainders
/// go to the earlier pool.
pub fn target_counts(ratios: &MixtureRatios, batch_size: usize) -> SourceCounts {
    let shares = [ratios.lambda_p, ratios.lambda_d, ratios.lambda_b].map(|l| l * batch_size as f64);
    let mut counts = shares.map(|s| s.floor() as usize);
    let assigned: usize = counts.iter().sum();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| (shares[b] - shares[b].floor()).total_cmp(&(shares[a] - shares[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().take(batch_size.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    SourceCounts {
        pretrain: counts[0],
        update: counts[1],
        buffer: counts[2],
    }
}

/// Target counts after the buffer shortfall rule: whatever the buffer cannot
/// supply is drawn from the update pool instead.
pub fn allocate(ratios: &MixtureRatios, batch_size: usize, buffer_len: usize) -> SourceCounts {
    let mut c = target_counts(ratios, batch_size);
    if buffer_len < c.buffer {
        c.update += c.buffer - buffer_len;
        c.buffer = buffer_len;
    }
    c
}

/// The three pools of a run. The buffer only ever grows.
#[derive(Debug, Clone, Default)]
pub struct Pools {
    pub pretrain: Vec<Sample>,
    pub update: Vec<Sample>,
    pub buffer: Vec<Sample>,
}

impl Pools {
    pub fn new(pretrain: Vec<Sample>) -> Self {
        Self {
            pretrain,
            update: Vec::new(),
            buffer: Vec::new(),
        }
    }

    /// Makes `samples` the current update pool.
    pub fn reveal(&mut self, samples: Vec<Sample>) {
        self.update = samples
            .into_iter()
            .map(|mut s| {
                s.pool = PoolTag::Update;
                s
            })
            .collect();
    }

    /// Appends the current update pool to the buffer.
    pub fn update_buffer(&mut self) {
        self.buffer.extend(self.update.iter().cloned().map(|mut s| {
            s.pool = PoolTag::Buffer;
            s
        }));
    }

    /// Draws one batch: counts from [`allocate`], then uniform draws with
    /// replacement inside each pool.
    pub fn sample_batch<'a>(&'a self, ratios: &MixtureRatios, batch_size: usize, rng: &mut impl Rng) -> Result<Vec<&'a Sample>> {
        if batch_size == 0 {
            return Err(Error::domain("batch_size must be >= 1"));
        }
        if self.update.is_empty() {
            return Err(Error::domain("update pool is empty"));
        }
        let c = allocate(ratios, batch_size, self.buffer.len());
        if c.pretrain > 0 && self.pretrain.is_empty() {
            return Err(Error::domain("pretraining pool is empty but lambda_p > 0"));
        }
        let mut out = Vec::with_capacity(batch_size);
        for (pool, n) in [(&self.pretrain, c.pretrain), (&self.update, c.update), (&self.buffer, c.buffer)] {
            for _ in 0..n {
                out.push(&pool[rng.random_range(0..pool.len())]);
            }
        }
        Ok(out)
    }

    pub fn snapshot(&self) -> PoolSnapshot {
        let hist = |pool: &[Sample]| {
            let mut h: BTreeMap<ConceptId, usize> = BTreeMap::new();
            for s in pool {
                *h.entry(s.concept).or_default() += 1;
            }
            h
        };
        PoolSnapshot {
            pretrain: self.pretrain.len(),
            update: self.update.len(),
            buffer: self.buffer.len(),
            update_concepts: hist(&self.update),
            buffer_concepts: hist(&self.buffer),
        }
    }
}

/// Sizes and concept histograms of the pools, for provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSnapshot {
    pub pretrain: usize,
    pub update: usize,
    pub buffer: usize,
    pub update_concepts: BTreeMap<ConceptId, usize>,
    pub buffer_concepts: BTreeMap<ConceptId, usize>,
}

/// Stacks samples into a model batch.
pub fn to_batch(samples: &[&Sample]) -> Result<Batch> {
    if samples.is_empty() {
        return Err(Error::domain("empty batch"));
    }
    let d = samples[0].image.len();
    if samples.iter().any(|s| s.image.len() != d || s.text.len() != d) {
        return Err(Error::shape("samples have different feature dimensions"));
    }
    let images = Array2::from_shape_fn((samples.len(), d), |(i, j)| samples[i].image[j]);
    let texts = Array2::from_shape_fn((samples.len(), d), |(i, j)| samples[i].text[j]);
    Batch::new(images, texts)
}
