//! Named parameter tensors and the checkpoint format.
//!
//! Checkpoint layout (UTF-8 text, one tensor per line after the header):
//!
//! ```text
//! cpt-params 1
//! <name> <ndim> <dim_0> ... <dim_k> <value_0> ... <value_n>
//! ```
//!
//! Values use Rust's shortest round-trip float formatting, so a save/load
//! cycle reproduces every bit.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{ArrayView1, ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const CHECKPOINT_MAGIC: &str = "cpt-params 1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn matrix(&self) -> ArrayView2<'_, f64> {
        assert_eq!(self.shape.len(), 2, "tensor is not a matrix");
        ArrayView2::from_shape((self.shape[0], self.shape[1]), &self.data).expect("shape checked at construction")
    }

    pub fn matrix_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        assert_eq!(self.shape.len(), 2, "tensor is not a matrix");
        ArrayViewMut2::from_shape((self.shape[0], self.shape[1]), &mut self.data)
            .expect("shape checked at construction")
    }

    pub fn vector(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.data[..])
    }
}

/// An ordered, named collection of tensors. Gradients, optimizer moments and
/// merge references all share the layout of the parameters they describe.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    tensors: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.shift_remove(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::shape(format!("missing tensor `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_tensors(&self) -> usize {
        self.tensors.len()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape.clone())))
                .collect(),
        }
    }

    /// True when both sets hold the same names with the same shapes in the
    /// same order.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(other.tensors.iter())
                .all(|((a, ta), (b, tb))| a == b && ta.shape == tb.shape)
    }

    pub fn check_layout(&self, other: &Self) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::shape("parameter sets have different layouts".to_string()))
        }
    }

    /// Restriction to the named tensors, in this set's order.
    pub fn subset<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let wanted: BTreeSet<&str> = names.into_iter().collect();
        let mut out = Self::new();
        for (k, t) in &self.tensors {
            if wanted.contains(k.as_str()) {
                out.insert(k.clone(), t.clone());
            }
        }
        if out.num_tensors() != wanted.len() {
            return Err(Error::shape("subset names a tensor that does not exist".to_string()));
        }
        Ok(out)
    }

    /// Calls `f` on matching tensors of `self` and `other`, which must share a
    /// layout.
    pub fn zip_apply(&mut self, other: &Self, mut f: impl FnMut(&str, &mut [f64], &[f64])) -> Result<()> {
        self.check_layout(other)?;
        for ((name, a), (_, b)) in self.tensors.iter_mut().zip(other.tensors.iter()) {
            f(name, &mut a.data, &b.data);
        }
        Ok(())
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Self) -> Result<()> {
        self.zip_apply(other, |_, a, b| {
            for (x, y) in a.iter_mut().zip(b) {
                *x += alpha * y;
            }
        })
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.tensors.values_mut() {
            t.data.iter_mut().for_each(|x| *x *= alpha);
        }
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.check_layout(other)?;
        Ok(self
            .tensors
            .values()
            .zip(other.tensors.values())
            .map(|(a, b)| a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum::<f64>())
            .sum())
    }

    pub fn norm(&self) -> f64 {
        self.tensors
            .values()
            .flat_map(|t| t.data.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    /// Concatenation of every tensor's values in layout order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.values().flat_map(|t| t.data.iter().copied()).collect()
    }

    /// Overwrites values from a flat buffer produced by [`ParamSet::flatten`].
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::shape(format!(
                "flat buffer has {} values, layout needs {}",
                flat.len(),
                self.num_scalars()
            )));
        }
        let mut offset = 0;
        for t in self.tensors.values_mut() {
            let n = t.len();
            t.data.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Overwrites tensors of `self` that also appear in `other`.
    pub fn overwrite_from(&mut self, other: &Self) -> Result<()> {
        for (name, t) in other.iter() {
            let dst = self
                .get_mut(name)
                .ok_or_else(|| Error::shape(format!("missing tensor `{name}`")))?;
            if dst.shape != t.shape {
                return Err(Error::shape(format!("tensor `{name}` has a different shape")));
            }
            dst.data.copy_from_slice(&t.data);
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> String {
        let mut out = String::from(CHECKPOINT_MAGIC);
        out.push('\n');
        for (name, t) in &self.tensors {
            write!(out, "{name} {}", t.shape.len()).unwrap();
            for d in &t.shape {
                write!(out, " {d}").unwrap();
            }
            for v in &t.data {
                write!(out, " {v:e}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(CHECKPOINT_MAGIC) {
            return Err(Error::Parse(format!("checkpoint must start with `{CHECKPOINT_MAGIC}`")));
        }
        let mut out = Self::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |what: &str| Error::Parse(format!("checkpoint line {}: {what}", i + 2));
            let mut fields = line.split_ascii_whitespace();
            let name = fields.next().ok_or_else(|| bad("missing name"))?;
            let ndim: usize = fields
                .next()
                .ok_or_else(|| bad("missing rank"))?
                .parse()
                .map_err(|_| bad("bad rank"))?;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(
                    fields
                        .next()
                        .ok_or_else(|| bad("missing dimension"))?
                        .parse::<usize>()
                        .map_err(|_| bad("bad dimension"))?,
                );
            }
            let data = fields
                .map(|f| f.parse::<f64>().map_err(|_| bad("bad value")))
                .collect::<Result<Vec<_>>>()?;
            out.insert(name, Tensor::new(shape, data).map_err(|e| bad(&e.to_string()))?);
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_checkpoint())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&std::fs::read_to_string(path)?)
    }
}
