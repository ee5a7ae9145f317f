//! Synthetic concept inventory and image-text pair generator.
//!
//! Every concept has an image prototype `u` and a text prototype
//! `v = u + text_noise * N(0, I)`; a sample adds `noise * N(0, I)` to both.
//! Held-out and pretraining concepts live in the first `base_dims`
//! coordinates. Adaptation concepts put most of their energy in the remaining
//! "novel" coordinates, clustered by dataset, so a model pretrained on the
//! base distribution starts out poor on them and has to give up embedding
//! capacity to learn them.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConceptId(pub u32);

impl fmt::Display for ConceptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub id: ConceptId,
    pub dataset_id: u32,
    pub year: i32,
    pub frequency: u64,
    /// Mean contrastive loss under the base model, once scored.
    #[serde(default)]
    pub difficulty: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolTag {
    Pretrain,
    Update,
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Vec<f64>,
    pub text: Vec<f64>,
    pub concept: ConceptId,
    pub pool: PoolTag,
}

/// Pretraining pools differ in how many distinct concepts they cover and how
/// noisy their pairs are.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub concepts: usize,
    pub samples_per_concept: usize,
    pub noise: f64,
}

pub const PRETRAIN_POOLS: [&str; 4] = ["laion", "cc3m", "cc12m", "datacomp"];

pub fn pool_spec(name: &str) -> Result<PoolSpec> {
    let spec = match name {
        "laion" => PoolSpec {
            concepts: 160,
            samples_per_concept: 12,
            noise: 0.25,
        },
        "cc3m" => PoolSpec {
            concepts: 48,
            samples_per_concept: 40,
            noise: 0.3,
        },
        "cc12m" => PoolSpec {
            concepts: 96,
            samples_per_concept: 20,
            noise: 0.25,
        },
        "datacomp" => PoolSpec {
            concepts: 240,
            samples_per_concept: 8,
            noise: 0.2,
        },
        _ => {
            return Err(Error::config(
                "mixture.pretrain_pool",
                format!("unknown pretraining pool `{name}` (known: {})", PRETRAIN_POOLS.join(", ")),
            ))
        }
    };
    Ok(spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub d_in: usize,
    /// Coordinates shared by held-out and pretraining concepts.
    pub base_dims: usize,
    pub adaptation_concepts: usize,
    pub datasets: usize,
    pub heldout_concepts: usize,
    pub train_samples_per_concept: usize,
    pub eval_samples_per_concept: usize,
    pub noise: f64,
    pub text_noise: f64,
    /// Scale of an adaptation concept's base-coordinate component.
    pub adaptation_base_scale: f64,
    /// Scale of an adaptation concept's novel-coordinate component.
    pub adaptation_novel_scale: f64,
    /// Spread of concepts around their dataset's centre (novel coordinates).
    pub dataset_spread: f64,
    pub zipf_exponent: f64,
    pub pretrain_pool: String,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            d_in: 32,
            base_dims: 12,
            adaptation_concepts: 40,
            datasets: 8,
            heldout_concepts: 20,
            train_samples_per_concept: 50,
            eval_samples_per_concept: 20,
            noise: 0.25,
            text_noise: 0.1,
            adaptation_base_scale: 0.4,
            adaptation_novel_scale: 1.0,
            dataset_spread: 0.8,
            zipf_exponent: 1.1,
            pretrain_pool: "laion".to_string(),
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_dims == 0 || self.base_dims >= self.d_in {
            return Err(Error::config("world.base_dims", "must be in [1, d_in)"));
        }
        if self.adaptation_concepts == 0 || self.heldout_concepts == 0 {
            return Err(Error::config("world", "needs adaptation and held-out concepts"));
        }
        if self.datasets == 0 || self.datasets > self.adaptation_concepts {
            return Err(Error::config("world.datasets", "must be in [1, adaptation_concepts]"));
        }
        if self.train_samples_per_concept == 0 || self.eval_samples_per_concept == 0 {
            return Err(Error::config("world", "sample counts must be positive"));
        }
        if !(self.noise >= 0.0 && self.text_noise >= 0.0) {
            return Err(Error::config("world.noise", "must be >= 0"));
        }
        pool_spec(&self.pretrain_pool)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Prototype {
    pub image: Vec<f64>,
    pub text: Vec<f64>,
}

/// Everything a run needs: the adaptation inventory with per-concept
/// training and evaluation pairs, held-out concepts, and a pretraining pool.
#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    pub concepts: Vec<Concept>,
    pub heldout: Vec<Concept>,
    pub prototypes: BTreeMap<ConceptId, Prototype>,
    pub train: BTreeMap<ConceptId, Vec<Sample>>,
    pub eval: BTreeMap<ConceptId, Vec<Sample>>,
    pub pretrain_pool: Vec<Sample>,
}

fn gaussian_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect()
}

fn noisy(rng: &mut impl Rng, proto: &[f64], sigma: f64) -> Vec<f64> {
    proto.iter().map(|x| x + sigma * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn base_prototype(rng: &mut impl Rng, cfg: &WorldConfig) -> Vec<f64> {
    let mut u = gaussian_vec(rng, cfg.base_dims, 1.0);
    u.resize(cfg.d_in, 0.0);
    u
}

fn text_of(rng: &mut impl Rng, u: &[f64], cfg: &WorldConfig) -> Vec<f64> {
    noisy(rng, u, cfg.text_noise)
}

fn pairs(rng: &mut impl Rng, proto: &Prototype, n: usize, sigma: f64, id: ConceptId, pool: PoolTag) -> Vec<Sample> {
    (0..n)
        .map(|_| Sample {
            image: noisy(rng, &proto.image, sigma),
            text: noisy(rng, &proto.text, sigma),
            concept: id,
            pool,
        })
        .collect()
}

/// Concept ids at or above this value belong to pretraining pools.
pub const PRETRAIN_ID_OFFSET: u32 = 100_000;

impl World {
    /// Deterministic world for `seed`. The pretraining pool is drawn from a
    /// separate stream so swapping pools leaves adaptation and held-out data
    /// unchanged.
    pub fn generate(cfg: &WorldConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_da7a);
        let novel_dims = cfg.d_in - cfg.base_dims;

        let centres: Vec<Vec<f64>> = (0..cfg.datasets).map(|_| gaussian_vec(&mut rng, novel_dims, 1.0)).collect();
        let years: Vec<i32> = (0..cfg.datasets).map(|_| rng.random_range(2009..=2023)).collect();

        let mut ranks: Vec<usize> = (1..=cfg.adaptation_concepts).collect();
        ranks.shuffle(&mut rng);

        let mut concepts = Vec::new();
        let mut prototypes = BTreeMap::new();
        let mut train = BTreeMap::new();
        let mut eval = BTreeMap::new();
        for i in 0..cfg.adaptation_concepts {
            let id = ConceptId(i as u32);
            let dataset = i * cfg.datasets / cfg.adaptation_concepts;
            let rank = ranks[i];
            let frequency = (1e6 / (rank as f64).powf(cfg.zipf_exponent)).floor() as u64;
            // Rarer concepts sit further from the base distribution.
            let novelty = 0.75 + 0.5 * (rank as f64 - 1.0) / cfg.adaptation_concepts.max(2) as f64;
            let mut u: Vec<f64> = gaussian_vec(&mut rng, cfg.base_dims, cfg.adaptation_base_scale);
            let spread = gaussian_vec(&mut rng, novel_dims, cfg.dataset_spread);
            u.extend(
                centres[dataset]
                    .iter()
                    .zip(&spread)
                    .map(|(c, s)| cfg.adaptation_novel_scale * novelty * (c + s) / (1.0 + cfg.dataset_spread.powi(2)).sqrt()),
            );
            let proto = Prototype {
                text: text_of(&mut rng, &u, cfg),
                image: u,
            };
            train.insert(
                id,
                pairs(&mut rng, &proto, cfg.train_samples_per_concept, cfg.noise, id, PoolTag::Update),
            );
            eval.insert(
                id,
                pairs(&mut rng, &proto, cfg.eval_samples_per_concept, cfg.noise, id, PoolTag::Update),
            );
            prototypes.insert(id, proto);
            concepts.push(Concept {
                id,
                dataset_id: dataset as u32,
                year: years[dataset],
                frequency,
                difficulty: None,
            });
        }

        let mut heldout = Vec::new();
        for j in 0..cfg.heldout_concepts {
            let id = ConceptId((cfg.adaptation_concepts + j) as u32);
            let u = base_prototype(&mut rng, cfg);
            let proto = Prototype {
                text: text_of(&mut rng, &u, cfg),
                image: u,
            };
            eval.insert(
                id,
                pairs(&mut rng, &proto, cfg.eval_samples_per_concept, cfg.noise, id, PoolTag::Pretrain),
            );
            prototypes.insert(id, proto);
            heldout.push(Concept {
                id,
                dataset_id: u32::MAX,
                year: 0,
                frequency: 0,
                difficulty: None,
            });
        }

        let pretrain_pool = Self::pretrain_samples(cfg, &cfg.pretrain_pool, seed)?;
        Ok(Self {
            config: cfg.clone(),
            concepts,
            heldout,
            prototypes,
            train,
            eval,
            pretrain_pool,
        })
    }

    /// Samples of a named pretraining pool drawn from the held-out concept
    /// distribution (new concepts, same generator).
    pub fn pretrain_samples(cfg: &WorldConfig, pool: &str, seed: u64) -> Result<Vec<Sample>> {
        let spec = pool_spec(pool)?;
        let salt = pool.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
        let mut out = Vec::with_capacity(spec.concepts * spec.samples_per_concept);
        for k in 0..spec.concepts {
            let id = ConceptId(PRETRAIN_ID_OFFSET + k as u32);
            let u = base_prototype(&mut rng, cfg);
            let proto = Prototype {
                text: text_of(&mut rng, &u, cfg),
                image: u,
            };
            out.extend(pairs(&mut rng, &proto, spec.samples_per_concept, spec.noise, id, PoolTag::Pretrain));
        }
        Ok(out)
    }

    /// Replaces the pretraining pool with another named pool.
    pub fn swap_pretrain_pool(&mut self, pool: &str, seed: u64) -> Result<()> {
        self.pretrain_pool = Self::pretrain_samples(&self.config, pool, seed)?;
        self.config.pretrain_pool = pool.to_string();
        Ok(())
    }

    pub fn concept(&self, id: ConceptId) -> Option<&Concept> {
        self.concepts.iter().find(|c| c.id == id)
    }

    pub fn adaptation_ids(&self) -> Vec<ConceptId> {
        self.concepts.iter().map(|c| c.id).collect()
    }

    pub fn heldout_ids(&self) -> Vec<ConceptId> {
        self.heldout.iter().map(|c| c.id).collect()
    }

    pub fn is_heldout(&self, id: ConceptId) -> bool {
        self.heldout.iter().any(|c| c.id == id)
    }

    /// Training pairs of the given concepts, in the order given.
    pub fn update_pool(&self, ids: &[ConceptId]) -> Vec<Sample> {
        ids.iter()
            .flat_map(|id| self.train.get(id).into_iter().flatten().cloned())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_disjoint() {
        let cfg = WorldConfig::default();
        let a = World::generate(&cfg, 3).unwrap();
        let b = World::generate(&cfg, 3).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.pretrain_pool, b.pretrain_pool);
        let adapt = a.adaptation_ids();
        for h in a.heldout_ids() {
            assert!(!adapt.contains(&h));
        }
        assert!(a.pretrain_pool.iter().all(|s| s.concept.0 >= PRETRAIN_ID_OFFSET));
        assert_eq!(a.concepts.len(), 40);
        assert_eq!(a.train[&ConceptId(0)].len(), 50);
    }

    #[test]
    fn swapping_pools_keeps_adaptation_data() {
        let cfg = WorldConfig::default();
        let mut w = World::generate(&cfg, 1).unwrap();
        let before = w.train.clone();
        w.swap_pretrain_pool("cc3m", 1).unwrap();
        assert_eq!(before, w.train);
        assert_eq!(w.pretrain_pool.len(), 48 * 40);
        assert!(w.swap_pretrain_pool("imagenet", 1).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let cfg = WorldConfig {
            base_dims: 32,
            ..Default::default()
        };
        assert!(World::generate(&cfg, 0).is_err());
    }
}
