//! Update strategies. Each method decides which tensors train, may add a
//! penalty to the loss, and may run a hook at the end of every task.

pub mod lowrank;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, Batch, GradContext, ParamSet, Penalty, Tower, LOG_TEMPERATURE};
use lowrank::Adapter;

/// Merge weights studied for the interpolation methods.
pub const MERGE_WEIGHT_PRESETS: [f64; 3] = [0.85, 0.9, 0.95];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodKind {
    FullFt,
    LockedImage,
    LockedText,
    Lora,
    Vera,
    Dora,
    Bitfit,
    Lnfit,
    Ewc,
    Si,
    MergeEma,
    MergeFt,
    MergeZs,
}

impl MethodKind {
    pub const ALL: [MethodKind; 13] = [
        MethodKind::FullFt,
        MethodKind::LockedImage,
        MethodKind::LockedText,
        MethodKind::Lora,
        MethodKind::Vera,
        MethodKind::Dora,
        MethodKind::Bitfit,
        MethodKind::Lnfit,
        MethodKind::Ewc,
        MethodKind::Si,
        MethodKind::MergeEma,
        MethodKind::MergeFt,
        MethodKind::MergeZs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::FullFt => "full-ft",
            MethodKind::LockedImage => "locked-image",
            MethodKind::LockedText => "locked-text",
            MethodKind::Lora => "lora",
            MethodKind::Vera => "vera",
            MethodKind::Dora => "dora",
            MethodKind::Bitfit => "bitfit",
            MethodKind::Lnfit => "lnfit",
            MethodKind::Ewc => "ewc",
            MethodKind::Si => "si",
            MethodKind::MergeEma => "merge-ema",
            MethodKind::MergeFt => "merge-ft",
            MethodKind::MergeZs => "merge-zs",
        }
    }

    pub fn is_low_rank(self) -> bool {
        matches!(self, MethodKind::Lora | MethodKind::Vera | MethodKind::Dora)
    }

    pub fn is_merge(self) -> bool {
        matches!(self, MethodKind::MergeEma | MethodKind::MergeFt | MethodKind::MergeZs)
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config("method.kind", format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodConfig {
    pub kind: MethodKind,
    pub rank: usize,
    pub lambda_ewc: f64,
    pub c_si: f64,
    pub zeta_si: f64,
    pub w_merge: f64,
    pub fisher_batches: usize,
    /// Cost-table row charged per step. Defaults to the row matching the
    /// method (and rank, for adapters).
    pub cost_row: Option<String>,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            kind: MethodKind::FullFt,
            rank: 4,
            lambda_ewc: 100.0,
            c_si: 0.5,
            zeta_si: 1e-3,
            w_merge: 0.9,
            fisher_batches: 10,
            cost_row: None,
        }
    }
}

impl MethodConfig {
    pub fn new(kind: MethodKind) -> Self {
        Self {
            kind,
            ..Default::default()
        }
    }

    /// Checks the hyperparameters the kind actually uses. The merge weight
    /// may be 0 or 1 here (degenerate merges); config files require the open
    /// interval.
    pub fn validate(&self) -> Result<()> {
        if self.kind.is_low_rank() && self.rank == 0 {
            return Err(Error::config("method.rank", "rank must be >= 1"));
        }
        if self.kind == MethodKind::Ewc {
            if !(self.lambda_ewc.is_finite() && self.lambda_ewc >= 0.0) {
                return Err(Error::config("method.lambda_ewc", "must be finite and >= 0"));
            }
            if self.fisher_batches == 0 {
                return Err(Error::config("method.fisher_batches", "must be >= 1"));
            }
        }
        if self.kind == MethodKind::Si {
            if !(self.c_si.is_finite() && self.c_si >= 0.0) {
                return Err(Error::config("method.c_si", "must be finite and >= 0"));
            }
            if !(self.zeta_si.is_finite() && self.zeta_si > 0.0) {
                return Err(Error::config("method.zeta_si", "must be > 0"));
            }
        }
        if self.kind.is_merge() && !(0.0..=1.0).contains(&self.w_merge) {
            return Err(Error::config("method.w_merge", "must be in [0, 1]"));
        }
        Ok(())
    }

    pub fn adapter(&self) -> Adapter {
        match self.kind {
            MethodKind::Lora => Adapter::Lora { rank: self.rank },
            MethodKind::Vera => Adapter::Vera { rank: self.rank },
            MethodKind::Dora => Adapter::Dora { rank: self.rank },
            _ => Adapter::None,
        }
    }

    /// Cost-table row for this method. Adapters use `<kind>-r<rank>` when
    /// the table has it, otherwise the row with the nearest rank.
    pub fn cost_row_name(&self, available: &[&str]) -> Result<String> {
        if let Some(row) = &self.cost_row {
            return Ok(row.clone());
        }
        if !self.kind.is_low_rank() {
            return Ok(self.kind.name().to_string());
        }
        let prefix = format!("{}-r", self.kind.name());
        let best = available
            .iter()
            .filter_map(|name| {
                let r: usize = name.strip_prefix(&prefix)?.parse().ok()?;
                Some((((r as f64).ln() - (self.rank as f64).ln()).abs(), r, *name))
            })
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        best.map(|(_, _, name)| name.to_string()).ok_or_else(|| {
            Error::config(
                "method.cost_row",
                format!("cost table has no `{prefix}<rank>` row; set cost_row explicitly"),
            )
        })
    }
}

/// Names of the tensors `kind` trains. The temperature always trains.
pub fn trainable_set(config: &MethodConfig, params: &ParamSet) -> BTreeSet<String> {
    let all = || params.names().map(str::to_owned).collect::<BTreeSet<_>>();
    let mut set: BTreeSet<String> = match config.kind {
        MethodKind::FullFt
        | MethodKind::Ewc
        | MethodKind::Si
        | MethodKind::MergeEma
        | MethodKind::MergeFt
        | MethodKind::MergeZs => all(),
        MethodKind::LockedImage => all()
            .into_iter()
            .filter(|n| !n.starts_with(&format!("{}.", Tower::Image.prefix())))
            .collect(),
        MethodKind::LockedText => all()
            .into_iter()
            .filter(|n| !n.starts_with(&format!("{}.", Tower::Text.prefix())))
            .collect(),
        MethodKind::Bitfit => [Tower::Image.bias(), Tower::Text.bias()].into_iter().collect(),
        MethodKind::Lnfit => [
            Tower::Image.scale(),
            Tower::Image.shift(),
            Tower::Text.scale(),
            Tower::Text.shift(),
        ]
        .into_iter()
        .collect(),
        MethodKind::Lora | MethodKind::Vera | MethodKind::Dora => {
            let adapter = config.adapter();
            [Tower::Image, Tower::Text]
                .into_iter()
                .flat_map(|t| adapter.tensor_names(t.prefix()).0)
                .collect()
        }
    };
    set.insert(LOG_TEMPERATURE.to_string());
    set.retain(|n| params.contains(n));
    set
}

/// Elastic weight consolidation: `(lambda / 2) * sum F_k (theta_k - anchor_k)^2`.
#[derive(Debug, Clone)]
pub struct Ewc {
    pub lambda: f64,
    pub anchor: ParamSet,
    pub fisher: ParamSet,
}

impl Ewc {
    pub fn new(lambda: f64, anchor: ParamSet, fisher: ParamSet) -> Result<Self> {
        anchor.check_layout(&fisher)?;
        if fisher.iter().any(|(_, t)| t.data.iter().any(|f| !(*f >= 0.0))) {
            return Err(Error::domain("fisher entries must be >= 0"));
        }
        Ok(Self { lambda, anchor, fisher })
    }

    /// Moves the anchor to `params` and folds `fisher` into the running
    /// estimate as `(old + new) / 2`.
    pub fn roll(&mut self, params: &ParamSet, fisher: &ParamSet) -> Result<()> {
        self.fisher.check_layout(fisher)?;
        self.fisher.zip_apply(fisher, |_, old, new| {
            for (o, n) in old.iter_mut().zip(new) {
                *o = 0.5 * (*o + n);
            }
        })?;
        self.anchor.overwrite_from(params)
    }
}

/// Standalone form of the EWC penalty.
pub fn ewc_penalty(params: &ParamSet, anchor: &ParamSet, fisher: &ParamSet, lambda: f64) -> Result<f64> {
    params.check_layout(anchor)?;
    params.check_layout(fisher)?;
    let mut total = 0.0;
    for (((_, p), (_, a)), (_, f)) in params.iter().zip(anchor.iter()).zip(fisher.iter()) {
        for i in 0..p.data.len() {
            let d = p.data[i] - a.data[i];
            total += f.data[i] * d * d;
        }
    }
    Ok(0.5 * lambda * total)
}

impl Penalty for Ewc {
    fn value(&self, params: &ParamSet) -> Result<f64> {
        ewc_penalty(params, &self.anchor, &self.fisher, self.lambda)
    }

    fn add_grad(&self, params: &ParamSet, grads: &mut ParamSet) -> Result<()> {
        params.check_layout(&self.anchor)?;
        for ((name, a), (_, f)) in self.anchor.iter().zip(self.fisher.iter()) {
            let p = params.require(name)?;
            let g = grads
                .get_mut(name)
                .ok_or_else(|| Error::shape(format!("missing gradient `{name}`")))?;
            for i in 0..p.data.len() {
                g.data[i] += self.lambda * f.data[i] * (p.data[i] - a.data[i]);
            }
        }
        Ok(())
    }
}

/// Diagonal Fisher estimate: mean over `batches` of the squared gradient of
/// the contrastive loss.
pub fn estimate_fisher(params: &ParamSet, batches: &[Batch], adapter: Adapter) -> Result<ParamSet> {
    if batches.is_empty() {
        return Err(Error::domain("fisher estimation needs at least one batch"));
    }
    let mut fisher = params.zeros_like();
    let ctx = GradContext {
        adapter,
        ..Default::default()
    };
    for batch in batches {
        let g = model::grad(params, batch, &ctx)?.grads;
        fisher.zip_apply(&g, |_, f, g| {
            for (f, g) in f.iter_mut().zip(g) {
                *f += g * g;
            }
        })?;
    }
    fisher.scale(1.0 / batches.len() as f64);
    Ok(fisher)
}

/// Synaptic intelligence bookkeeping.
#[derive(Debug, Clone)]
pub struct Si {
    pub c: f64,
    pub zeta: f64,
    /// Path integral of the current task.
    pub omega: ParamSet,
    /// Parameters when the current task started.
    pub start: ParamSet,
    /// `sum over past tasks of omega / (delta^2 + zeta)`.
    pub importance: ParamSet,
    /// Parameters at the end of the previous task.
    pub anchor: Option<ParamSet>,
}

impl Si {
    pub fn new(c: f64, zeta: f64, params: &ParamSet) -> Result<Self> {
        if !(zeta > 0.0) {
            return Err(Error::config("method.zeta_si", "must be > 0"));
        }
        Ok(Self {
            c,
            zeta,
            omega: params.zeros_like(),
            start: params.clone(),
            importance: params.zeros_like(),
            anchor: None,
        })
    }

    /// `omega_k += -g_k * delta_k` for one optimizer step.
    pub fn accumulate(&mut self, grads: &ParamSet, delta: &ParamSet) -> Result<()> {
        grads.check_layout(delta)?;
        self.omega.check_layout(grads)?;
        for ((name, g), (_, d)) in grads.iter().zip(delta.iter()) {
            let w = self.omega.get_mut(name).expect("layout checked");
            for i in 0..w.data.len() {
                w.data[i] -= g.data[i] * d.data[i];
            }
        }
        Ok(())
    }

    /// Closes the current task at `params`: folds the path integral into the
    /// importance, and restarts tracking from `params`.
    pub fn end_task(&mut self, params: &ParamSet) -> Result<()> {
        self.start.check_layout(params)?;
        let zeta = self.zeta;
        for ((name, end), (_, start)) in params.iter().zip(self.start.iter()) {
            let omega = &self.omega.get(name).expect("layout checked").data;
            let imp = &mut self.importance.get_mut(name).expect("layout checked").data;
            for i in 0..imp.len() {
                let delta = end.data[i] - start.data[i];
                imp[i] += omega[i] / (delta * delta + zeta);
            }
        }
        self.omega = params.zeros_like();
        self.start = params.clone();
        self.anchor = Some(params.clone());
        Ok(())
    }
}

impl Penalty for Si {
    fn value(&self, params: &ParamSet) -> Result<f64> {
        let Some(anchor) = &self.anchor else {
            return Ok(0.0);
        };
        params.check_layout(anchor)?;
        let mut total = 0.0;
        for (((_, p), (_, a)), (_, w)) in params.iter().zip(anchor.iter()).zip(self.importance.iter()) {
            for i in 0..p.data.len() {
                let d = a.data[i] - p.data[i];
                total += w.data[i] * d * d;
            }
        }
        Ok(self.c * total)
    }

    fn add_grad(&self, params: &ParamSet, grads: &mut ParamSet) -> Result<()> {
        let Some(anchor) = &self.anchor else {
            return Ok(());
        };
        params.check_layout(anchor)?;
        for ((name, a), (_, w)) in anchor.iter().zip(self.importance.iter()) {
            let p = params.require(name)?;
            let g = grads
                .get_mut(name)
                .ok_or_else(|| Error::shape(format!("missing gradient `{name}`")))?;
            for i in 0..p.data.len() {
                g.data[i] += 2.0 * self.c * w.data[i] * (p.data[i] - a.data[i]);
            }
        }
        Ok(())
    }
}

/// Weights a merge method trains from at the start of a task.
pub fn merge_start<'a>(kind: MethodKind, theta0: &'a ParamSet, prev: &'a ParamSet) -> &'a ParamSet {
    match kind {
        MethodKind::MergeZs => theta0,
        _ => prev,
    }
}

/// End-of-task interpolation. EMA and ZS mix with the previous merged
/// weights, FT with the original weights: `w * reference + (1 - w) * tuned`.
pub fn merge_end_of_task(
    kind: MethodKind,
    theta0: &ParamSet,
    prev: &ParamSet,
    tuned: &ParamSet,
    w: f64,
) -> Result<ParamSet> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::domain(format!("merge weight must be in [0, 1], got {w}")));
    }
    let reference = match kind {
        MethodKind::MergeEma | MethodKind::MergeZs => prev,
        MethodKind::MergeFt => theta0,
        other => return Err(Error::domain(format!("`{other}` is not a merge method"))),
    };
    reference.check_layout(tuned)?;
    let mut out = reference.clone();
    out.zip_apply(tuned, |_, r, t| {
        for (r, t) in r.iter_mut().zip(t) {
            *r = w * *r + (1.0 - w) * t;
        }
    })?;
    Ok(out)
}

/// GFLOPs of one interpolation over `num_scalars` parameters (a multiply on
/// each side and an add).
pub fn merge_cost_gflops(num_scalars: usize) -> f64 {
    3.0 * num_scalars as f64 * 1e-9
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(seed: u64) -> ParamSet {
        init_params(&ModelConfig::default(), 0.01, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn names_round_trip() {
        for k in MethodKind::ALL {
            assert_eq!(k.name().parse::<MethodKind>().unwrap(), k);
        }
        assert!("galore".parse::<MethodKind>().is_err());
    }

    #[test]
    fn bitfit_trains_biases_and_temperature() {
        let p = params(0);
        let set = trainable_set(&MethodConfig::new(MethodKind::Bitfit), &p);
        let count: usize = set.iter().map(|n| p.get(n).unwrap().len()).sum();
        assert_eq!(count, 2 * 16 + 1);
        let full = trainable_set(&MethodConfig::new(MethodKind::FullFt), &p);
        assert_eq!(full.len(), p.num_tensors());
        let locked = trainable_set(&MethodConfig::new(MethodKind::LockedImage), &p);
        assert!(locked.iter().all(|n| !n.starts_with("image.")));
        assert!(locked.contains(LOG_TEMPERATURE));
    }

    #[test]
    fn ewc_penalty_examples() {
        let a = params(1);
        let b = params(2);
        let mut ones = a.zeros_like();
        ones.iter_mut().for_each(|(_, t)| t.data.iter_mut().for_each(|x| *x = 1.0));
        assert_eq!(ewc_penalty(&a, &a, &ones, 2.0).unwrap(), 0.0);
        let mut diff = b.clone();
        diff.axpy(-1.0, &a).unwrap();
        let sq = diff.dot(&diff).unwrap();
        assert!((ewc_penalty(&b, &a, &ones, 2.0).unwrap() - sq).abs() < 1e-9 * sq);
        let p1 = ewc_penalty(&b, &a, &ones, 1.0).unwrap();
        assert_eq!(ewc_penalty(&b, &a, &ones, 2.0).unwrap(), 2.0 * p1);
    }

    #[test]
    fn si_examples() {
        let p = params(3);
        let mut si = Si::new(1.0, 0.1, &p).unwrap();
        assert_eq!(si.value(&p).unwrap(), 0.0);
        let mut g = p.zeros_like();
        g.get_mut("image.bias").unwrap().data[0] = 2.0;
        let zero = p.zeros_like();
        si.accumulate(&g, &zero).unwrap();
        assert_eq!(si.omega.norm(), 0.0);
        let mut step = p.zeros_like();
        step.get_mut("image.bias").unwrap().data[0] = -0.5;
        si.accumulate(&g, &step).unwrap();
        si.accumulate(&g, &step).unwrap();
        assert_eq!(si.omega.get("image.bias").unwrap().data[0], 2.0);

        let mut end = p.clone();
        end.get_mut("image.bias").unwrap().data[0] -= 1.0;
        si.end_task(&end).unwrap();
        assert!((si.importance.get("image.bias").unwrap().data[0] - 2.0 / 1.1).abs() < 1e-12);
        assert_eq!(si.value(&end).unwrap(), 0.0);
    }

    #[test]
    fn si_zero_movement_is_damped_by_zeta() {
        let p = params(4);
        let mut si = Si::new(1.0, 0.25, &p).unwrap();
        si.omega.get_mut("text.shift").unwrap().data[1] = 1.0;
        si.end_task(&p).unwrap();
        assert_eq!(si.importance.get("text.shift").unwrap().data[1], 4.0);
        assert!(Si::new(1.0, 0.0, &p).is_err());
    }

    #[test]
    fn merge_endpoints_are_exact() {
        let (t0, prev, tuned) = (params(5), params(6), params(7));
        for kind in [MethodKind::MergeEma, MethodKind::MergeZs] {
            assert_eq!(merge_end_of_task(kind, &t0, &prev, &tuned, 1.0).unwrap(), prev);
            assert_eq!(merge_end_of_task(kind, &t0, &prev, &tuned, 0.0).unwrap(), tuned);
        }
        assert_eq!(merge_end_of_task(MethodKind::MergeFt, &t0, &prev, &tuned, 1.0).unwrap(), t0);
        assert!(merge_end_of_task(MethodKind::FullFt, &t0, &prev, &tuned, 0.5).is_err());
        assert!(merge_end_of_task(MethodKind::MergeEma, &t0, &prev, &tuned, 1.5).is_err());
    }

    #[test]
    fn ema_converges_geometrically() {
        let target = params(8);
        let mut theta = params(9);
        let mut d0 = theta.clone();
        d0.axpy(-1.0, &target).unwrap();
        let w: f64 = 0.9;
        for _ in 0..10 {
            theta = merge_end_of_task(MethodKind::MergeEma, &theta, &theta, &target, w).unwrap();
        }
        let mut d = theta.clone();
        d.axpy(-1.0, &target).unwrap();
        let expected = w.powi(10) * d0.norm();
        assert!((d.norm() - expected).abs() <= 1e-9 * expected);
    }

    #[test]
    fn cost_rows_resolve_by_rank() {
        let rows = ["full-ft", "lora-r4", "lora-r64", "dora-r4", "dora-r64"];
        let mut cfg = MethodConfig::new(MethodKind::Lora);
        assert_eq!(cfg.cost_row_name(&rows).unwrap(), "lora-r4");
        cfg.rank = 32;
        assert_eq!(cfg.cost_row_name(&rows).unwrap(), "lora-r64");
        cfg.kind = MethodKind::Vera;
        assert!(cfg.cost_row_name(&rows).is_err());
        cfg.cost_row = Some("full-ft".into());
        assert_eq!(cfg.cost_row_name(&rows).unwrap(), "full-ft");
        assert_eq!(MethodConfig::new(MethodKind::Si).cost_row_name(&rows).unwrap(), "si");
    }

    #[test]
    fn fisher_is_nonnegative_and_deterministic() {
        let p = params(10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let batch = Batch::new(
            ndarray::Array2::from_shape_fn((6, 32), |_| rand::Rng::random::<f64>(&mut rng)),
            ndarray::Array2::from_shape_fn((6, 32), |_| rand::Rng::random::<f64>(&mut rng)),
        )
        .unwrap();
        let f1 = estimate_fisher(&p, std::slice::from_ref(&batch), Adapter::None).unwrap();
        let f2 = estimate_fisher(&p, std::slice::from_ref(&batch), Adapter::None).unwrap();
        assert_eq!(f1, f2);
        assert!(f1.iter().all(|(_, t)| t.data.iter().all(|x| *x >= 0.0)));
        assert!(estimate_fisher(&p, &[], Adapter::None).is_err());
    }
}
