//! Per-task learning-rate schedules and task-level meta-schedules.
//!
//! A meta-schedule looks at the task lengths seen so far and builds a
//! hypothetical base schedule stretched across all of them. Autoregressive
//! variants take only the peak from it; continued-dynamic variants follow it
//! after warmup.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BASE_LR: f64 = 1e-5;
pub const DEFAULT_WARMUP_FRACTION: f64 = 0.1;
pub const DEFAULT_COOLDOWN_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub eta_min: f64,
    pub eta_max: f64,
    pub n_warm: u64,
    pub n_task: u64,
    /// Linear cooldown length at the end of an rsqrt schedule.
    pub n_cool: u64,
    /// Use `sqrt(n_warm) / sqrt(max(n, n_warm))` for the rsqrt decay instead of
    /// `sqrt(n_warm) / sqrt(n + n_warm)`, removing the drop at the end of warmup.
    #[serde(default)]
    pub continuous_rsqrt: bool,
}

impl ScheduleParams {
    pub fn new(eta_min: f64, eta_max: f64, n_warm: u64, n_task: u64, n_cool: u64) -> Result<Self> {
        let p = Self {
            eta_min,
            eta_max,
            n_warm,
            n_task,
            n_cool,
            continuous_rsqrt: false,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta_min >= 0.0 && self.eta_max > self.eta_min && self.eta_max.is_finite()) {
            return Err(Error::domain(format!(
                "need 0 <= eta_min < eta_max, got eta_min={} eta_max={}",
                self.eta_min, self.eta_max
            )));
        }
        if !(self.n_warm > 0 && self.n_warm < self.n_task) {
            return Err(Error::domain(format!(
                "need 0 < n_warm < n_task, got n_warm={} n_task={}",
                self.n_warm, self.n_task
            )));
        }
        if self.n_cool > self.n_task - self.n_warm {
            return Err(Error::domain(format!(
                "n_cool={} exceeds n_task - n_warm={}",
                self.n_cool,
                self.n_task - self.n_warm
            )));
        }
        Ok(())
    }

    fn check_step(&self, n: u64) -> Result<()> {
        if n > self.n_task {
            return Err(Error::domain(format!("step {n} outside [0, {}]", self.n_task)));
        }
        Ok(())
    }

    fn warmup(&self, n: u64) -> f64 {
        self.eta_min + (n as f64 / self.n_warm as f64) * (self.eta_max - self.eta_min)
    }
}

/// Fractions that turn a task length into concrete [`ScheduleParams`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub eta_min: f64,
    pub eta_max: f64,
    pub warmup_fraction: f64,
    pub cooldown_fraction: f64,
    pub continuous_rsqrt: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            eta_min: 0.0,
            eta_max: DEFAULT_BASE_LR,
            warmup_fraction: DEFAULT_WARMUP_FRACTION,
            cooldown_fraction: DEFAULT_COOLDOWN_FRACTION,
            continuous_rsqrt: false,
        }
    }
}

impl ScheduleConfig {
    /// Schedule parameters for a task of `n_task` steps. Needs at least two
    /// steps so that warmup and decay are both non-empty.
    pub fn params_for(&self, n_task: u64) -> Result<ScheduleParams> {
        if n_task < 2 {
            return Err(Error::domain(format!("a scheduled task needs >= 2 steps, got {n_task}")));
        }
        let n_warm = ((self.warmup_fraction * n_task as f64).round() as u64).clamp(1, n_task - 1);
        let n_cool = ((self.cooldown_fraction * n_task as f64).round() as u64).min(n_task - n_warm);
        let mut p = ScheduleParams::new(self.eta_min, self.eta_max, n_warm, n_task, n_cool)?;
        p.continuous_rsqrt = self.continuous_rsqrt;
        Ok(p)
    }
}

/// Cosine decay with linear warmup.
pub fn cosine_lr(n: u64, p: &ScheduleParams) -> Result<f64> {
    p.check_step(n)?;
    Ok(cosine_unchecked(n, p))
}

fn cosine_unchecked(n: u64, p: &ScheduleParams) -> f64 {
    if n < p.n_warm {
        return p.warmup(n);
    }
    let progress = (n - p.n_warm) as f64 / (p.n_task - p.n_warm) as f64;
    p.eta_min + 0.5 * (p.eta_max - p.eta_min) * (1.0 + (PI * progress).cos())
}

/// Reciprocal-square-root decay with linear warmup and a linear cooldown to
/// zero over the final `n_cool` steps.
pub fn rsqrt_lr(n: u64, p: &ScheduleParams) -> Result<f64> {
    p.check_step(n)?;
    Ok(rsqrt_unchecked(n, p))
}

fn rsqrt_decay(n: u64, p: &ScheduleParams) -> f64 {
    let w = p.n_warm as f64;
    if p.continuous_rsqrt {
        p.eta_max * w.sqrt() / (n.max(p.n_warm) as f64).sqrt()
    } else {
        p.eta_max * w.sqrt() / (n as f64 + w).sqrt()
    }
}

fn rsqrt_unchecked(n: u64, p: &ScheduleParams) -> f64 {
    if n < p.n_warm {
        return p.warmup(n);
    }
    let cool_start = p.n_task - p.n_cool;
    if n <= cool_start || p.n_cool == 0 {
        return rsqrt_decay(n, p);
    }
    rsqrt_decay(cool_start, p) * (p.n_task - n) as f64 / p.n_cool as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Cosine,
    Rsqrt,
}

impl ScheduleKind {
    pub fn lr(self, n: u64, p: &ScheduleParams) -> Result<f64> {
        match self {
            ScheduleKind::Cosine => cosine_lr(n, p),
            ScheduleKind::Rsqrt => rsqrt_lr(n, p),
        }
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "rsqrt" => Ok(Self::Rsqrt),
            _ => Err(Error::config("schedule.kind", format!("unknown schedule `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetaVariant {
    /// Every task replays the same base schedule.
    Independent,
    AutoregressiveCosine,
    ContinuedDynamicCosine,
    AutoregressiveRsqrt,
    ContinuedDynamicRsqrt,
    PeaksMatchRsqrt,
}

impl MetaVariant {
    pub const ALL: [MetaVariant; 6] = [
        MetaVariant::Independent,
        MetaVariant::AutoregressiveCosine,
        MetaVariant::ContinuedDynamicCosine,
        MetaVariant::AutoregressiveRsqrt,
        MetaVariant::ContinuedDynamicRsqrt,
        MetaVariant::PeaksMatchRsqrt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetaVariant::Independent => "independent",
            MetaVariant::AutoregressiveCosine => "autoregressive-cosine",
            MetaVariant::ContinuedDynamicCosine => "continued-dynamic-cosine",
            MetaVariant::AutoregressiveRsqrt => "autoregressive-rsqrt",
            MetaVariant::ContinuedDynamicRsqrt => "continued-dynamic-rsqrt",
            MetaVariant::PeaksMatchRsqrt => "peaks-match-rsqrt",
        }
    }

    /// Schedule family the variant is built on; `None` for independent, which
    /// uses whatever base kind is configured.
    pub fn family(self) -> Option<ScheduleKind> {
        match self {
            MetaVariant::Independent => None,
            MetaVariant::AutoregressiveCosine | MetaVariant::ContinuedDynamicCosine => Some(ScheduleKind::Cosine),
            MetaVariant::AutoregressiveRsqrt | MetaVariant::ContinuedDynamicRsqrt | MetaVariant::PeaksMatchRsqrt => {
                Some(ScheduleKind::Rsqrt)
            }
        }
    }
}

impl fmt::Display for MetaVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetaVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config("schedule.variant", format!("unknown meta-schedule variant `{s}`")))
    }
}

/// Task lengths and warmups up to and including the current task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaState {
    /// 1-based index of the current task.
    pub task_index: usize,
    pub per_task_lengths: Vec<u64>,
    pub per_task_warmups: Vec<u64>,
    pub variant: MetaVariant,
}

impl MetaState {
    fn validate(&self) -> Result<()> {
        if self.per_task_lengths.is_empty() || self.per_task_warmups.is_empty() {
            return Err(Error::domain("meta-schedule needs at least one task length"));
        }
        if self.task_index == 0
            || self.per_task_lengths.len() < self.task_index
            || self.per_task_warmups.len() < self.task_index
        {
            return Err(Error::domain(format!(
                "task_index {} needs that many recorded lengths and warmups",
                self.task_index
            )));
        }
        if self.per_task_lengths[..self.task_index].contains(&0) {
            return Err(Error::domain("task lengths must be positive"));
        }
        Ok(())
    }

    /// Steps taken by all tasks before the current one.
    pub fn offset(&self) -> u64 {
        self.per_task_lengths[..self.task_index - 1].iter().sum()
    }

    /// Base schedule stretched over every task up to the current one, with the
    /// first task's warmup and the current task's cooldown.
    fn hypothetical(&self, base: &ScheduleParams) -> ScheduleParams {
        ScheduleParams {
            n_warm: self.per_task_warmups[0],
            n_task: self.offset() + self.per_task_lengths[self.task_index - 1],
            ..*base
        }
    }
}

fn family_lr(kind: ScheduleKind, n: u64, p: &ScheduleParams) -> f64 {
    match kind {
        ScheduleKind::Cosine => cosine_unchecked(n, p),
        ScheduleKind::Rsqrt => rsqrt_unchecked(n, p),
    }
}

/// Peak learning rate of the current task under an autoregressive
/// meta-schedule: the hypothetical extended schedule evaluated where the
/// current task's warmup ends.
pub fn meta_peak(meta: &MetaState, base: &ScheduleParams) -> Result<f64> {
    meta.validate()?;
    let family = meta.variant.family().ok_or_else(|| {
        Error::config("schedule.variant", "the independent variant has no meta peak".to_string())
    })?;
    Ok(meta_peak_unchecked(family, meta, base))
}

fn meta_peak_unchecked(family: ScheduleKind, meta: &MetaState, base: &ScheduleParams) -> f64 {
    if meta.task_index == 1 {
        return base.eta_max;
    }
    let hyp = meta.hypothetical(base);
    let n_prime = meta.per_task_warmups[meta.task_index - 1] + meta.offset();
    family_lr(family, n_prime.min(hyp.n_task), &hyp)
}

/// Learning rate at `step` of the current task under `meta.variant`. `base`
/// carries the current task's own warmup, length and cooldown; `kind` is the
/// base schedule used by the independent variant (the other variants imply
/// their family).
pub fn meta_lr(meta: &MetaState, step: u64, base: &ScheduleParams, kind: ScheduleKind) -> Result<f64> {
    meta.validate()?;
    base.check_step(step)?;
    if base.n_task != meta.per_task_lengths[meta.task_index - 1] {
        return Err(Error::domain(format!(
            "base n_task {} differs from recorded length {} of task {}",
            base.n_task,
            meta.per_task_lengths[meta.task_index - 1],
            meta.task_index
        )));
    }
    Ok(meta_lr_unchecked(meta, step, base, kind))
}

fn meta_lr_unchecked(meta: &MetaState, n: u64, base: &ScheduleParams, independent_kind: ScheduleKind) -> f64 {
    let variant = meta.variant;
    let Some(family) = variant.family() else {
        return family_lr(independent_kind, n, base);
    };
    let peak = meta_peak_unchecked(family, meta, base);
    match variant {
        MetaVariant::AutoregressiveCosine | MetaVariant::AutoregressiveRsqrt => {
            let p = ScheduleParams { eta_max: peak.max(base.eta_min), ..*base };
            if peak <= base.eta_min {
                return base.eta_min;
            }
            family_lr(family, n, &p)
        }
        MetaVariant::ContinuedDynamicCosine | MetaVariant::ContinuedDynamicRsqrt => {
            if n < base.n_warm {
                base.eta_min + (n as f64 / base.n_warm as f64) * (peak - base.eta_min)
            } else {
                let hyp = meta.hypothetical(base);
                family_lr(family, meta.offset() + n, &hyp)
            }
        }
        MetaVariant::PeaksMatchRsqrt => peaks_match_rsqrt(n, peak, base),
        MetaVariant::Independent => unreachable!("handled above"),
    }
}

/// Within-task rsqrt warmup to `peak`, then the rsqrt decay shape rescaled so
/// it starts at `peak` where warmup ends.
fn peaks_match_rsqrt(n: u64, peak: f64, p: &ScheduleParams) -> f64 {
    if n < p.n_warm {
        return p.eta_min + (n as f64 / p.n_warm as f64) * (peak - p.eta_min);
    }
    let w = p.n_warm as f64;
    let decay = |m: u64| -> f64 {
        if p.continuous_rsqrt {
            peak * w.sqrt() / (m.max(p.n_warm) as f64).sqrt()
        } else {
            peak * (2.0 * w).sqrt() / (m as f64 + w).sqrt()
        }
    };
    let cool_start = p.n_task - p.n_cool;
    if n <= cool_start || p.n_cool == 0 {
        decay(n)
    } else {
        decay(cool_start) * (p.n_task - n) as f64 / p.n_cool as f64
    }
}

/// One row of a schedule dump.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LrPoint {
    pub global_step: u64,
    pub task: usize,
    pub step: u64,
    pub lr: f64,
}

/// Learning rate of every step of the last task in `task_lengths`, given the
/// lengths of all tasks up to and including it. A task shorter than two
/// steps has no room for warmup and decay and runs at `eta_max`.
pub fn task_lrs(
    kind: ScheduleKind,
    variant: MetaVariant,
    config: &ScheduleConfig,
    task_lengths: &[u64],
) -> Result<Vec<f64>> {
    let Some(&len) = task_lengths.last() else {
        return Err(Error::domain("no task lengths"));
    };
    if len < 2 {
        return Ok(vec![config.eta_max; len as usize]);
    }
    let warmups = task_lengths
        .iter()
        .map(|&n| if n < 2 { Ok(1) } else { config.params_for(n).map(|p| p.n_warm) })
        .collect::<Result<Vec<u64>>>()?;
    let params = config.params_for(len)?;
    let meta = MetaState {
        task_index: task_lengths.len(),
        per_task_lengths: task_lengths.to_vec(),
        per_task_warmups: warmups,
        variant,
    };
    (0..len).map(|step| meta_lr(&meta, step, &params, kind)).collect()
}

/// Full learning-rate curve over a sequence of tasks. Each task contributes
/// exactly `len` rows (steps `0..len`).
pub fn dump(
    kind: ScheduleKind,
    variant: MetaVariant,
    config: &ScheduleConfig,
    task_lengths: &[u64],
) -> Result<Vec<LrPoint>> {
    let mut out = Vec::with_capacity(task_lengths.iter().sum::<u64>() as usize);
    let mut global = 0;
    for i in 0..task_lengths.len() {
        for (step, lr) in task_lrs(kind, variant, config, &task_lengths[..=i])?.into_iter().enumerate() {
            out.push(LrPoint {
                global_step: global,
                task: i + 1,
                step: step as u64,
                lr,
            });
            global += 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ScheduleParams {
        ScheduleParams::new(0.0, 1e-5, 100, 1000, 100).unwrap()
    }

    fn meta(variant: MetaVariant, t: usize) -> MetaState {
        MetaState {
            task_index: t,
            per_task_lengths: vec![1000; t],
            per_task_warmups: vec![100; t],
            variant,
        }
    }

    #[test]
    fn cosine_examples() {
        let p = base();
        assert!((cosine_lr(50, &p).unwrap() - 5e-6).abs() < 1e-18);
        assert_eq!(cosine_lr(100, &p).unwrap(), 1e-5);
        assert!((cosine_lr(550, &p).unwrap() - 5e-6).abs() < 1e-18);
        assert!(cosine_lr(1000, &p).unwrap().abs() < 1e-20);
        assert!(cosine_lr(1001, &p).is_err());
    }

    #[test]
    fn rsqrt_examples() {
        let p = base();
        assert!((rsqrt_lr(100, &p).unwrap() - 1e-5 / 2f64.sqrt()).abs() < 1e-18);
        assert!((rsqrt_lr(300, &p).unwrap() - 5e-6).abs() < 1e-18);
        assert_eq!(rsqrt_lr(1000, &p).unwrap(), 0.0);
        let at_900 = 1e-5 * 10.0 / 1000f64.sqrt();
        assert!((rsqrt_lr(950, &p).unwrap() - at_900 / 2.0).abs() < 1e-18);
        assert!(rsqrt_lr(2000, &p).is_err());
    }

    #[test]
    fn continuous_rsqrt_has_no_drop() {
        let mut p = base();
        p.continuous_rsqrt = true;
        assert_eq!(rsqrt_lr(100, &p).unwrap(), 1e-5);
        assert!((rsqrt_lr(400, &p).unwrap() - 5e-6).abs() < 1e-18);
    }

    #[test]
    fn invalid_params_are_rejected() {
        assert!(ScheduleParams::new(0.0, 1e-5, 0, 1000, 0).is_err());
        assert!(ScheduleParams::new(0.0, 1e-5, 1000, 1000, 0).is_err());
        assert!(ScheduleParams::new(1e-5, 1e-5, 10, 1000, 0).is_err());
        assert!(ScheduleParams::new(0.0, 1e-5, 100, 1000, 901).is_err());
        assert!(ScheduleConfig::default().params_for(1).is_err());
    }

    #[test]
    fn meta_peak_examples() {
        let p = base();
        assert_eq!(meta_peak(&meta(MetaVariant::AutoregressiveCosine, 1), &p).unwrap(), 1e-5);
        assert_eq!(meta_peak(&meta(MetaVariant::AutoregressiveRsqrt, 1), &p).unwrap(), 1e-5);

        let cos2 = 0.5e-5 * (1.0 + (PI * 1000.0 / 1900.0).cos());
        let got = meta_peak(&meta(MetaVariant::AutoregressiveCosine, 2), &p).unwrap();
        assert!(((got - cos2) / cos2).abs() < 1e-12);
        assert!((got - 4.587e-6).abs() < 1e-9);

        let rs2 = 1e-5 * 10.0 / 1200f64.sqrt();
        let got = meta_peak(&meta(MetaVariant::AutoregressiveRsqrt, 2), &p).unwrap();
        assert!(((got - rs2) / rs2).abs() < 1e-12);
    }

    #[test]
    fn meta_peak_errors() {
        let p = base();
        let mut m = meta(MetaVariant::AutoregressiveCosine, 1);
        m.per_task_lengths.clear();
        assert!(meta_peak(&m, &p).is_err());
        assert!(meta_peak(&meta(MetaVariant::Independent, 2), &p).is_err());
        assert!("bogus".parse::<MetaVariant>().is_err());
    }

    #[test]
    fn independent_matches_base() {
        let p = base();
        for t in 1..4 {
            let m = meta(MetaVariant::Independent, t);
            for n in (0..=1000).step_by(37) {
                assert_eq!(meta_lr(&m, n, &p, ScheduleKind::Cosine).unwrap(), cosine_lr(n, &p).unwrap());
                assert_eq!(meta_lr(&m, n, &p, ScheduleKind::Rsqrt).unwrap(), rsqrt_lr(n, &p).unwrap());
            }
        }
    }

    #[test]
    fn continued_dynamic_follows_long_schedule() {
        let p = base();
        let m = meta(MetaVariant::ContinuedDynamicCosine, 2);
        let peak = meta_peak(&m, &p).unwrap();
        assert_eq!(meta_lr(&m, 100, &p, ScheduleKind::Cosine).unwrap(), peak);
        let long = ScheduleParams::new(0.0, 1e-5, 100, 2000, 100).unwrap();
        for k in 0..=900 {
            let got = meta_lr(&m, 100 + k, &p, ScheduleKind::Cosine).unwrap();
            let want = cosine_lr(1100 + k, &long).unwrap();
            assert!((got - want).abs() <= 1e-12 * want.abs().max(1e-30), "k={k}");
        }
    }

    #[test]
    fn peaks_match_is_continuous_at_warmup_end() {
        let p = base();
        let m = meta(MetaVariant::PeaksMatchRsqrt, 3);
        let peak = meta_peak(&MetaState { variant: MetaVariant::AutoregressiveRsqrt, ..m.clone() }, &p).unwrap();
        assert!((meta_lr(&m, 100, &p, ScheduleKind::Cosine).unwrap() - peak).abs() < 1e-18);
        assert_eq!(meta_lr(&m, 1000, &p, ScheduleKind::Rsqrt).unwrap(), 0.0);
    }

    #[test]
    fn dump_has_one_row_per_step() {
        let cfg = ScheduleConfig::default();
        let rows = dump(ScheduleKind::Cosine, MetaVariant::AutoregressiveCosine, &cfg, &[100, 120, 80]).unwrap();
        assert_eq!(rows.len(), 300);
        assert_eq!(rows.last().unwrap().global_step, 299);
        assert_eq!(rows[0].lr, 0.0);
    }
}
