//! Memory-adjusted FLOPs (MAF) accounting.
//!
//! Every update method is charged `per_step_gflops * memory_multiplier` per
//! gradient step, where the multiplier is the method's peak device memory
//! relative to full finetuning on the same backbone. A fixed total budget is
//! split evenly across tasks and converted into a whole number of steps.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Total compute budget of a ViT-B/16 continual-pretraining run, in GFLOPs.
pub const DEFAULT_TOTAL_BUDGET_GFLOPS: f64 = 1.8e9;

/// Decimal places the memory multiplier is reported at before it enters the
/// MAF product.
pub const MULTIPLIER_DECIMALS: i32 = 4;

/// Name of the row every other row's memory is measured against.
pub const REFERENCE_METHOD: &str = "full-ft";

const BUNDLED_TABLE: &str = include_str!("../data/cost_table_vitb16.csv");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodCost {
    pub per_step_gflops: f64,
    pub peak_memory_gb: f64,
    pub reference_memory_gb: f64,
}

impl MethodCost {
    pub fn new(per_step_gflops: f64, peak_memory_gb: f64, reference_memory_gb: f64) -> Result<Self> {
        let cost = Self {
            per_step_gflops,
            peak_memory_gb,
            reference_memory_gb,
        };
        cost.validate()?;
        Ok(cost)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("per_step_gflops", self.per_step_gflops),
            ("peak_memory_gb", self.peak_memory_gb),
            ("reference_memory_gb", self.reference_memory_gb),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::domain(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Peak memory relative to the reference (full finetuning) peak memory.
pub fn memory_multiplier(cost: &MethodCost) -> Result<f64> {
    cost.validate()?;
    Ok(cost.peak_memory_gb / cost.reference_memory_gb)
}

/// The multiplier at reporting precision.
pub fn reported_multiplier(cost: &MethodCost) -> Result<f64> {
    let m = memory_multiplier(cost)?;
    let scale = 10f64.powi(MULTIPLIER_DECIMALS);
    Ok((m * scale).round() / scale)
}

/// GFLOPs charged per gradient step once memory is accounted for.
pub fn maf_per_step(cost: &MethodCost) -> Result<f64> {
    Ok(cost.per_step_gflops * reported_multiplier(cost)?)
}

/// Whole gradient steps affordable per task: `floor(total / num_tasks / maf)`.
pub fn steps_per_task(total_budget_gflops: f64, num_tasks: u64, maf: f64) -> Result<u64> {
    steps_per_task_with_overhead(total_budget_gflops, num_tasks, maf, 0.0)
}

/// Like [`steps_per_task`], but a fixed per-task overhead (for example
/// Fisher-estimation passes or a weight interpolation) is deducted from the
/// task budget first.
pub fn steps_per_task_with_overhead(
    total_budget_gflops: f64,
    num_tasks: u64,
    maf: f64,
    overhead_gflops: f64,
) -> Result<u64> {
    if !(maf.is_finite() && maf > 0.0) {
        return Err(Error::domain(format!("maf must be > 0, got {maf}")));
    }
    if num_tasks == 0 {
        return Err(Error::domain("num_tasks must be >= 1"));
    }
    if !(total_budget_gflops.is_finite() && total_budget_gflops >= 0.0) {
        return Err(Error::domain(format!(
            "total budget must be finite and >= 0, got {total_budget_gflops}"
        )));
    }
    if !(overhead_gflops.is_finite() && overhead_gflops >= 0.0) {
        return Err(Error::domain(format!("overhead must be >= 0, got {overhead_gflops}")));
    }
    let per_task = total_budget_gflops / num_tasks as f64 - overhead_gflops;
    if per_task <= 0.0 {
        return Ok(0);
    }
    Ok((per_task / maf).floor() as u64)
}

pub fn total_samples(steps_per_task: u64, num_tasks: u64, batch_size: u64) -> u64 {
    steps_per_task * num_tasks * batch_size
}

/// Step allocation for one method under one budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodBudget {
    pub memory_multiplier: f64,
    pub maf_per_step: f64,
    pub steps_per_task: u64,
    pub total_steps: u64,
    pub total_samples: u64,
}

impl MethodBudget {
    pub fn plan(cost: &MethodCost, total_budget_gflops: f64, num_tasks: u64, batch_size: u64) -> Result<Self> {
        Self::plan_with_overhead(cost, total_budget_gflops, num_tasks, batch_size, 0.0)
    }

    pub fn plan_with_overhead(
        cost: &MethodCost,
        total_budget_gflops: f64,
        num_tasks: u64,
        batch_size: u64,
        overhead_gflops: f64,
    ) -> Result<Self> {
        let memory_multiplier = reported_multiplier(cost)?;
        let maf = cost.per_step_gflops * memory_multiplier;
        let steps = steps_per_task_with_overhead(total_budget_gflops, num_tasks, maf, overhead_gflops)?;
        Ok(Self {
            memory_multiplier,
            maf_per_step: maf,
            steps_per_task: steps,
            total_steps: steps * num_tasks,
            total_samples: total_samples(steps, num_tasks, batch_size),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub method: String,
    pub per_step_gflops: f64,
    pub peak_memory_gb: f64,
}

/// Per-method compute and memory figures. The `full-ft` row, when present,
/// is the memory reference.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CostTable {
    pub rows: Vec<CostRow>,
}

impl CostTable {
    /// The ViT-B/16 figures shipped with the crate.
    pub fn bundled() -> Self {
        Self::parse(BUNDLED_TABLE).expect("bundled cost table is well-formed")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Parses comma-separated `method,per_step_gflops,peak_memory_gb` rows.
    /// Lines starting with `#` are comments and the header row is required.
    pub fn parse(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for (i, rec) in reader.deserialize::<CostRow>().enumerate() {
            let row = rec.map_err(|e| Error::Parse(format!("cost table row {}: {e}", i + 1)))?;
            if !(row.per_step_gflops > 0.0 && row.peak_memory_gb > 0.0) {
                return Err(Error::Parse(format!(
                    "cost table row {} ({}): values must be positive",
                    i + 1,
                    row.method
                )));
            }
            rows.push(row);
        }
        Ok(Self { rows })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,per_step_gflops,peak_memory_gb\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.method, r.per_step_gflops, r.peak_memory_gb));
        }
        out
    }

    pub fn row(&self, method: &str) -> Option<&CostRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn reference_memory_gb(&self) -> Result<f64> {
        self.row(REFERENCE_METHOD)
            .map(|r| r.peak_memory_gb)
            .ok_or_else(|| Error::Parse(format!("cost table has no `{REFERENCE_METHOD}` row")))
    }

    pub fn cost(&self, method: &str) -> Result<MethodCost> {
        let reference = self.reference_memory_gb()?;
        let row = self
            .row(method)
            .ok_or_else(|| Error::config("budget.cost_row", format!("no cost-table row named `{method}`")))?;
        MethodCost::new(row.per_step_gflops, row.peak_memory_gb, reference)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cost(g: f64, m: f64) -> MethodCost {
        MethodCost::new(g, m, 46.5917).unwrap()
    }

    #[test]
    fn multiplier_examples() {
        assert!((memory_multiplier(&cost(1.0, 37.5761)).unwrap() - 0.8064).abs() <= 1e-4);
        assert_eq!(memory_multiplier(&cost(1.0, 46.5917)).unwrap(), 1.0);
        assert!((memory_multiplier(&cost(1.0, 46.6523)).unwrap() - 1.0013).abs() <= 1e-4);
    }

    #[test]
    fn non_positive_memory_is_rejected() {
        assert!(MethodCost::new(1.0, 0.0, 46.0).is_err());
        assert!(MethodCost::new(1.0, 1.0, -1.0).is_err());
        let bad = MethodCost {
            per_step_gflops: 1.0,
            peak_memory_gb: 1.0,
            reference_memory_gb: 0.0,
        };
        assert!(memory_multiplier(&bad).is_err());
    }

    #[test]
    fn maf_examples() {
        let lora = cost(54479.2515, 40.5449);
        assert!((maf_per_step(&lora).unwrap() - 47407.8446).abs() <= 0.5);
        assert_eq!(maf_per_step(&cost(63394.7585, 46.5917)).unwrap(), 63394.7585);
        let ewc = cost(6276081.094, 47.207);
        assert!((maf_per_step(&ewc).unwrap() - 6358925.36).abs() <= 1.0);
    }

    #[test]
    fn steps_examples() {
        assert_eq!(steps_per_task(1.8e9, 20, 47407.8446).unwrap(), 1898);
        assert_eq!(steps_per_task(1.8e9, 20, 6358925.364).unwrap(), 14);
        let full = steps_per_task(1.8e9, 20, 63394.7585).unwrap();
        assert!(full == 1419 || full == 1420);
        assert!(steps_per_task(1.8e9, 20, 0.0).is_err());
        assert!(steps_per_task(1.8e9, 0, 1.0).is_err());
    }

    #[test]
    fn overhead_is_deducted_and_saturates() {
        assert_eq!(steps_per_task_with_overhead(100.0, 1, 10.0, 25.0).unwrap(), 7);
        assert_eq!(steps_per_task_with_overhead(100.0, 1, 10.0, 200.0).unwrap(), 0);
    }

    #[test]
    fn samples_examples() {
        assert_eq!(total_samples(1420, 20, 512), 14_540_800);
        assert_eq!(total_samples(1, 1, 512), 512);
        assert_eq!(total_samples(3179, 20, 512), 32_552_960);
    }

    #[test]
    fn plan_fields_are_consistent() {
        let c = cost(54479.2515, 40.5449);
        let b = MethodBudget::plan(&c, 1.8e9, 20, 512).unwrap();
        assert_eq!(b.maf_per_step, c.per_step_gflops * b.memory_multiplier);
        assert_eq!(b.total_steps, b.steps_per_task * 20);
        assert_eq!(b.total_samples, b.total_steps * 512);
        assert!(b.steps_per_task as f64 * b.maf_per_step <= 1.8e9 / 20.0);
    }

    #[test]
    fn bundled_table_has_sixteen_rows() {
        let t = CostTable::bundled();
        assert_eq!(t.rows.len(), 16);
        assert_eq!(t.reference_memory_gb().unwrap(), 46.5917);
        assert_eq!(CostTable::parse(&t.to_csv()).unwrap(), t);
    }

    #[test]
    fn malformed_rows_are_reported() {
        assert!(CostTable::parse("method,per_step_gflops,peak_memory_gb\nx,abc,1\n").is_err());
        assert!(CostTable::parse("method,per_step_gflops,peak_memory_gb\nx,1\n").is_err());
        assert!(CostTable::parse("method,per_step_gflops,peak_memory_gb\n").unwrap().rows.is_empty());
    }
}
