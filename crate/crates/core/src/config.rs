//! Run configuration: one TOML table per module, every field optional.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::budget::DEFAULT_TOTAL_BUDGET_GFLOPS;
use crate::data::WorldConfig;
use crate::error::{Error, Result};
use crate::methods::{MethodConfig, MethodKind};
use crate::mixture::MixtureRatios;
use crate::model::{AdamWConfig, DEFAULT_D_EMB, DEFAULT_MIN_TAU, DEFAULT_TAU_INIT};
use crate::schedules::{MetaVariant, ScheduleConfig, ScheduleKind, DEFAULT_BASE_LR};
use crate::streams::{OrderingKind, DEFAULT_SCORE_SAMPLES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BudgetConfig {
    pub total_gflops: f64,
    pub num_tasks: usize,
    /// Cost table to read instead of the bundled one.
    pub cost_table: Option<PathBuf>,
    /// Fixes the step count per task, bypassing the compute budget.
    pub steps_per_task: Option<u64>,
    /// Charge evaluation forward passes against the budget.
    pub charge_eval: bool,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            total_gflops: DEFAULT_TOTAL_BUDGET_GFLOPS,
            num_tasks: 20,
            cost_table: None,
            steps_per_task: None,
            charge_eval: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    pub ordering: OrderingKind,
    pub reversed: bool,
    /// Replay a saved stream manifest instead of building an ordering.
    pub manifest: Option<PathBuf>,
    pub score_samples: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            ordering: OrderingKind::Random,
            reversed: false,
            manifest: None,
            score_samples: DEFAULT_SCORE_SAMPLES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixtureConfig {
    /// Named ratio preset; explicit lambdas override its entries.
    pub preset: Option<String>,
    pub lambda_p: Option<f64>,
    pub lambda_d: Option<f64>,
    pub lambda_b: Option<f64>,
    /// Pool replayed as pretraining data.
    pub pretrain_pool: String,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self {
            preset: None,
            lambda_p: None,
            lambda_d: None,
            lambda_b: None,
            pretrain_pool: "laion".to_string(),
        }
    }
}

impl MixtureConfig {
    pub fn ratios(&self) -> Result<MixtureRatios> {
        let base = MixtureRatios::preset(self.preset.as_deref().unwrap_or("reference"))?;
        MixtureRatios::new(
            self.lambda_p.unwrap_or(base.lambda_p),
            self.lambda_d.unwrap_or(base.lambda_d),
            self.lambda_b.unwrap_or(base.lambda_b),
        )
    }

    pub fn set_ratios(&mut self, r: MixtureRatios) {
        self.preset = None;
        self.lambda_p = Some(r.lambda_p);
        self.lambda_d = Some(r.lambda_d);
        self.lambda_b = Some(r.lambda_b);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub kind: ScheduleKind,
    pub variant: MetaVariant,
    pub eta_min: f64,
    /// Base (peak) learning rate.
    pub eta_max: f64,
    pub warmup_fraction: f64,
    pub cooldown_fraction: f64,
    pub continuous_rsqrt: bool,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let s = ScheduleConfig::default();
        Self {
            kind: ScheduleKind::Cosine,
            variant: MetaVariant::Independent,
            eta_min: s.eta_min,
            eta_max: DEFAULT_BASE_LR,
            warmup_fraction: s.warmup_fraction,
            cooldown_fraction: s.cooldown_fraction,
            continuous_rsqrt: s.continuous_rsqrt,
        }
    }
}

impl ScheduleSection {
    pub fn schedule_config(&self) -> ScheduleConfig {
        ScheduleConfig {
            eta_min: self.eta_min,
            eta_max: self.eta_max,
            warmup_fraction: self.warmup_fraction,
            cooldown_fraction: self.cooldown_fraction,
            continuous_rsqrt: self.continuous_rsqrt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_emb: usize,
    /// Temperature the continual run starts from.
    pub tau_init: f64,
    pub min_tau: f64,
    pub clamp_temperature: bool,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Learning-rate multiplier for the temperature during continual runs.
    pub temperature_lr_scale: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let o = AdamWConfig::default();
        Self {
            d_emb: DEFAULT_D_EMB,
            tau_init: DEFAULT_TAU_INIT,
            min_tau: DEFAULT_MIN_TAU,
            clamp_temperature: true,
            batch_size: 512,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
            clip_norm: o.clip_norm,
            temperature_lr_scale: o.temperature_lr_scale,
        }
    }
}

impl ModelSection {
    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
            temperature_lr_scale: self.temperature_lr_scale,
        }
    }
}

/// How the base model is produced from the world's pretraining pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub tau_init: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            lr: 5e-3,
            batch_size: 128,
            tau_init: 0.07,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub budget: BudgetConfig,
    pub stream: StreamConfig,
    pub mixture: MixtureConfig,
    pub schedule: ScheduleSection,
    pub method: MethodConfig,
    pub model: ModelSection,
    pub pretrain: PretrainConfig,
    pub world: WorldConfig,
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::config(field, format!("must be finite and > 0, got {v}")))
    }
}

fn fraction(field: &str, v: f64) -> Result<()> {
    if (0.0..1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::config(field, format!("must be in [0, 1), got {v}")))
    }
}

/// Named overlays: mixture ratios, temperatures, merge weights, stream
/// lengths, and the desk-scale defaults.
pub const PRESETS: &[&str] = &[
    "toy",
    "reference",
    "no-buffer",
    "pretrain-heavy",
    "ibrahim",
    "iidify",
    "tau-0.01",
    "tau-0.1",
    "tau-0.5",
    "tau-0.75",
    "tau-1.0",
    "merge-w-0.85",
    "merge-w-0.9",
    "merge-w-0.95",
    "tasks-20",
    "tasks-50",
    "tasks-100",
    "tasks-200",
];

impl RunConfig {
    /// Desk-scale settings: the world is small, so the budget, batch size and
    /// learning rate are scaled to match.
    pub fn toy() -> Self {
        let mut c = Self::default();
        c.apply_preset("toy").expect("toy preset exists");
        c
    }

    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        if !PRESETS.contains(&name) {
            return Err(Error::config(
                "preset",
                format!("unknown preset `{name}` (known: {})", PRESETS.join(", ")),
            ));
        }
        if let Some(v) = name.strip_prefix("tau-") {
            self.model.tau_init = v.parse().map_err(|_| Error::config("preset", format!("bad preset `{name}`")))?;
        } else if let Some(v) = name.strip_prefix("merge-w-") {
            self.method.w_merge = v.parse().map_err(|_| Error::config("preset", format!("bad preset `{name}`")))?;
        } else if let Some(v) = name.strip_prefix("tasks-") {
            self.budget.num_tasks = v.parse().map_err(|_| Error::config("preset", format!("bad preset `{name}`")))?;
            self.world.adaptation_concepts = self.world.adaptation_concepts.max(self.budget.num_tasks);
        } else if name == "toy" {
            self.budget.total_gflops = 1e8;
            self.budget.num_tasks = 10;
            self.model.batch_size = 128;
            self.schedule.eta_max = 1e-2;
            self.model.temperature_lr_scale = 0.01;
            self.world.noise = 0.6;
        } else if crate::mixture::PRESET_NAMES.contains(&name) {
            self.mixture.set_ratios(MixtureRatios::preset(name)?);
            self.mixture.preset = Some(name.to_string());
        }
        Ok(())
    }

    /// Parses TOML. Type errors name the offending key path.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Parse(e.to_string()))?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().message().trim().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml(&text)?;
        // Relative paths inside the file resolve against its directory.
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.budget.cost_table, &mut cfg.stream.manifest].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        positive("budget.total_gflops", self.budget.total_gflops)
            .or_else(|e| if self.budget.total_gflops == 0.0 { Ok(()) } else { Err(e) })?;
        if self.budget.num_tasks == 0 {
            return Err(Error::config("budget.num_tasks", "must be >= 1"));
        }
        if self.budget.num_tasks > self.world.adaptation_concepts {
            return Err(Error::config(
                "budget.num_tasks",
                format!(
                    "{} tasks need at least that many adaptation concepts (have {})",
                    self.budget.num_tasks, self.world.adaptation_concepts
                ),
            ));
        }
        self.mixture.ratios()?;
        crate::data::pool_spec(&self.mixture.pretrain_pool)
            .map_err(|_| Error::config("mixture.pretrain_pool", format!("unknown pool `{}`", self.mixture.pretrain_pool)))?;
        let s = &self.schedule;
        if !(s.eta_min >= 0.0 && s.eta_min <= s.eta_max && s.eta_max.is_finite()) {
            return Err(Error::config("schedule.eta_max", "need 0 <= eta_min <= eta_max"));
        }
        fraction("schedule.warmup_fraction", s.warmup_fraction)?;
        fraction("schedule.cooldown_fraction", s.cooldown_fraction)?;
        self.method.validate()?;
        if self.method.kind.is_merge() && !(self.method.w_merge > 0.0 && self.method.w_merge < 1.0) {
            return Err(Error::config("method.w_merge", format!("must be in (0, 1), got {}", self.method.w_merge)));
        }
        let m = &self.model;
        if m.d_emb == 0 {
            return Err(Error::config("model.d_emb", "must be >= 1"));
        }
        if m.batch_size == 0 {
            return Err(Error::config("model.batch_size", "must be >= 1"));
        }
        positive("model.tau_init", m.tau_init)?;
        positive("model.min_tau", m.min_tau)?;
        positive("model.clip_norm", m.clip_norm)?;
        if !(m.temperature_lr_scale >= 0.0 && m.temperature_lr_scale.is_finite()) {
            return Err(Error::config("model.temperature_lr_scale", "must be finite and >= 0"));
        }
        positive("model.eps", m.eps)?;
        fraction("model.beta1", m.beta1)?;
        fraction("model.beta2", m.beta2)?;
        if !(m.weight_decay >= 0.0) {
            return Err(Error::config("model.weight_decay", "must be >= 0"));
        }
        if self.pretrain.batch_size == 0 {
            return Err(Error::config("pretrain.batch_size", "must be >= 1"));
        }
        positive("pretrain.lr", self.pretrain.lr)?;
        positive("pretrain.tau_init", self.pretrain.tau_init)?;
        self.world.validate()?;
        Ok(())
    }

    pub fn method_kind(&self) -> MethodKind {
        self.method.kind
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
        let c = RunConfig::toy();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn errors_name_the_field() {
        let e = RunConfig::from_toml("[mixture]\nlambda_p = 0.5\nlambda_d = 0.5\nlambda_b = 0.5\n").unwrap_err();
        assert!(e.to_string().contains("mixture"), "{e}");
        let e = RunConfig::from_toml("[method]\nkind = \"merge-ema\"\nw_merge = 1.0\n").unwrap_err();
        assert!(e.to_string().contains("method.w_merge"), "{e}");
        let e = RunConfig::from_toml("[method]\nkind = \"lora\"\nrank = 0\n").unwrap_err();
        assert!(e.to_string().contains("method.rank"), "{e}");
        let e = RunConfig::from_toml("[model]\nbatch_size = \"big\"\n").unwrap_err();
        assert!(e.to_string().contains("model.batch_size"), "{e}");
        let e = RunConfig::from_toml("[model]\nbatchsize = 3\n").unwrap_err();
        assert!(e.to_string().contains("batchsize"), "{e}");
    }

    #[test]
    fn presets_apply() {
        let mut c = RunConfig::default();
        c.apply_preset("ibrahim").unwrap();
        assert_eq!(c.mixture.ratios().unwrap(), MixtureRatios::new(0.05, 0.48, 0.47).unwrap());
        c.apply_preset("tau-1.0").unwrap();
        assert_eq!(c.model.tau_init, 1.0);
        c.apply_preset("tasks-50").unwrap();
        assert_eq!(c.budget.num_tasks, 50);
        assert!(c.apply_preset("tau-hot").is_err());
        assert!(c.apply_preset("nope").is_err());
        for p in PRESETS {
            RunConfig::default().apply_preset(p).unwrap();
        }
    }
}
