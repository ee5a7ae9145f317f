//! Low-rank weight reparameterizations (LoRA, VeRA, DoRA) and their
//! backward passes.
//!
//! For a tower with prefix `p` the adapter tensors are stored next to the
//! frozen base weight `p.weight` (shape `d_emb x d_in`):
//!
//! | adapter | tensors |
//! |---------|---------|
//! | LoRA    | `p.lora_b` (d_emb x r), `p.lora_a` (r x d_in) |
//! | DoRA    | LoRA tensors plus `p.dora_m` (d_in), the per-column magnitude |
//! | VeRA    | frozen `p.vera_b`, `p.vera_a`; trainable `p.vera_lambda_b` (d_emb), `p.vera_lambda_a` (r) |

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamSet, Tensor};

/// Initial value of every entry of VeRA's `lambda_a` scaling vector.
pub const VERA_LAMBDA_A_INIT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Adapter {
    #[default]
    None,
    Lora {
        rank: usize,
    },
    Vera {
        rank: usize,
    },
    Dora {
        rank: usize,
    },
}

impl Adapter {
    pub fn is_low_rank(self) -> bool {
        !matches!(self, Adapter::None)
    }

    /// Names of the adapter tensors for one tower prefix, split into
    /// (trainable, frozen).
    pub fn tensor_names(self, prefix: &str) -> (Vec<String>, Vec<String>) {
        let n = |s: &str| format!("{prefix}.{s}");
        match self {
            Adapter::None => (vec![], vec![]),
            Adapter::Lora { .. } => (vec![n("lora_b"), n("lora_a")], vec![]),
            Adapter::Dora { .. } => (vec![n("lora_b"), n("lora_a"), n("dora_m")], vec![]),
            Adapter::Vera { .. } => (
                vec![n("vera_lambda_b"), n("vera_lambda_a")],
                vec![n("vera_b"), n("vera_a")],
            ),
        }
    }
}

fn mat(params: &ParamSet, name: &str) -> Result<Array2<f64>> {
    let t = params.require(name)?;
    if t.shape.len() != 2 {
        return Err(Error::shape(format!("`{name}` must be a matrix")));
    }
    Ok(t.matrix().to_owned())
}

fn vec1(params: &ParamSet, name: &str) -> Result<Array1<f64>> {
    Ok(params.require(name)?.vector().to_owned())
}

fn column_norms(v: &Array2<f64>) -> Array1<f64> {
    v.map_axis(Axis(0), |col| col.dot(&col).sqrt())
}

/// `B A` for LoRA-style factors, or `diag(lambda_b) B diag(lambda_a) A` for VeRA.
fn low_rank_update(adapter: Adapter, prefix: &str, params: &ParamSet) -> Result<Array2<f64>> {
    match adapter {
        Adapter::None => Err(Error::domain("no low-rank adapter configured")),
        Adapter::Lora { .. } | Adapter::Dora { .. } => {
            let b = mat(params, &format!("{prefix}.lora_b"))?;
            let a = mat(params, &format!("{prefix}.lora_a"))?;
            Ok(b.dot(&a))
        }
        Adapter::Vera { .. } => {
            let b = mat(params, &format!("{prefix}.vera_b"))?;
            let a = mat(params, &format!("{prefix}.vera_a"))?;
            let lb = vec1(params, &format!("{prefix}.vera_lambda_b"))?;
            let la = vec1(params, &format!("{prefix}.vera_lambda_a"))?;
            let scaled_b = &b * &la.view().insert_axis(Axis(0));
            let mut out = scaled_b.dot(&a);
            out *= &lb.view().insert_axis(Axis(1));
            Ok(out)
        }
    }
}

/// Weight actually applied by a tower: the base weight composed with any
/// adapter. Equals the base weight bit-for-bit at adapter initialization.
pub fn effective_weight(adapter: Adapter, prefix: &str, params: &ParamSet) -> Result<Array2<f64>> {
    let w0 = mat(params, &format!("{prefix}.weight"))?;
    match adapter {
        Adapter::None => Ok(w0),
        Adapter::Lora { .. } | Adapter::Vera { .. } => {
            let delta = low_rank_update(adapter, prefix, params)?;
            if delta.shape() != w0.shape() {
                return Err(Error::shape(format!("adapter update for `{prefix}` does not match weight shape")));
            }
            Ok(w0 + delta)
        }
        Adapter::Dora { .. } => {
            let delta = low_rank_update(adapter, prefix, params)?;
            if delta.shape() != w0.shape() {
                return Err(Error::shape(format!("adapter update for `{prefix}` does not match weight shape")));
            }
            let v = w0 + delta;
            let m = vec1(params, &format!("{prefix}.dora_m"))?;
            if m.len() != v.ncols() {
                return Err(Error::shape(format!("`{prefix}.dora_m` must have one entry per column")));
            }
            let c = column_norms(&v);
            let ratio = Array1::from_iter(m.iter().zip(c.iter()).map(|(m, c)| if *c > 0.0 { m / c } else { 0.0 }));
            Ok(v * &ratio.view().insert_axis(Axis(0)))
        }
    }
}

/// Gradients of the base weight and adapter tensors given `grad_w`, the
/// gradient with respect to the effective weight.
pub fn effective_weight_backward(
    adapter: Adapter,
    prefix: &str,
    params: &ParamSet,
    grad_w: &Array2<f64>,
) -> Result<Vec<(String, Vec<f64>)>> {
    let weight_name = format!("{prefix}.weight");
    let flat = |a: Array2<f64>| a.iter().copied().collect::<Vec<_>>();
    match adapter {
        Adapter::None => Ok(vec![(weight_name, flat(grad_w.clone()))]),
        Adapter::Lora { .. } => {
            let b = mat(params, &format!("{prefix}.lora_b"))?;
            let a = mat(params, &format!("{prefix}.lora_a"))?;
            Ok(vec![
                (weight_name, flat(grad_w.clone())),
                (format!("{prefix}.lora_b"), flat(grad_w.dot(&a.t()))),
                (format!("{prefix}.lora_a"), flat(b.t().dot(grad_w))),
            ])
        }
        Adapter::Vera { .. } => {
            let b = mat(params, &format!("{prefix}.vera_b"))?;
            let a = mat(params, &format!("{prefix}.vera_a"))?;
            let lb = vec1(params, &format!("{prefix}.vera_lambda_b"))?;
            let la = vec1(params, &format!("{prefix}.vera_lambda_a"))?;
            // M = B diag(la) A; W' = W0 + diag(lb) M.
            let scaled_b = &b * &la.view().insert_axis(Axis(0));
            let m = scaled_b.dot(&a);
            let d_lb = (grad_w * &m).sum_axis(Axis(1));
            // d la_k = sum_i lb_i B_ik (G A^T)_ik
            let ga = grad_w.dot(&a.t());
            let weighted = &b * &ga * &lb.view().insert_axis(Axis(1));
            let d_la = weighted.sum_axis(Axis(0));
            Ok(vec![
                (weight_name, flat(grad_w.clone())),
                (format!("{prefix}.vera_lambda_b"), d_lb.to_vec()),
                (format!("{prefix}.vera_lambda_a"), d_la.to_vec()),
            ])
        }
        Adapter::Dora { .. } => {
            let b = mat(params, &format!("{prefix}.lora_b"))?;
            let a = mat(params, &format!("{prefix}.lora_a"))?;
            let m = vec1(params, &format!("{prefix}.dora_m"))?;
            let v = mat(params, &weight_name)? + b.dot(&a);
            let c = column_norms(&v);
            let mut grad_v = Array2::<f64>::zeros(v.raw_dim());
            let mut grad_m = Array1::<f64>::zeros(m.len());
            for j in 0..v.ncols() {
                let cj = c[j];
                if cj == 0.0 {
                    continue;
                }
                let vj = v.column(j);
                let gj = grad_w.column(j);
                let vg = vj.dot(&gj);
                grad_m[j] = vg / cj;
                let s = m[j] / cj;
                let mut col = grad_v.column_mut(j);
                for i in 0..vj.len() {
                    col[i] = s * (gj[i] - vj[i] * vg / (cj * cj));
                }
            }
            Ok(vec![
                (weight_name, flat(grad_v.clone())),
                (format!("{prefix}.lora_b"), flat(grad_v.dot(&a.t()))),
                (format!("{prefix}.lora_a"), flat(b.t().dot(&grad_v))),
                (format!("{prefix}.dora_m"), grad_m.to_vec()),
            ])
        }
    }
}

fn gaussian(rng: &mut impl Rng, shape: (usize, usize), std: f64) -> Tensor {
    let data = (0..shape.0 * shape.1)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
        .collect();
    Tensor::new(vec![shape.0, shape.1], data).expect("consistent shape")
}

/// Inserts freshly initialized adapter tensors for one tower so that the
/// effective weight starts out equal to the base weight: LoRA/DoRA `B = 0`
/// with Gaussian `A`; DoRA magnitude = base column norms; VeRA random frozen
/// projections with `lambda_b = 0`.
pub fn init_adapter(adapter: Adapter, prefix: &str, params: &mut ParamSet, rng: &mut impl Rng) -> Result<()> {
    let w0 = mat(params, &format!("{prefix}.weight"))?;
    let (d_emb, d_in) = w0.dim();
    match adapter {
        Adapter::None => {}
        Adapter::Lora { rank } | Adapter::Dora { rank } => {
            if rank == 0 {
                return Err(Error::config("method.rank", "rank must be >= 1"));
            }
            params.insert(format!("{prefix}.lora_b"), Tensor::zeros(vec![d_emb, rank]));
            params.insert(format!("{prefix}.lora_a"), gaussian(rng, (rank, d_in), 1.0 / (d_in as f64).sqrt()));
            if matches!(adapter, Adapter::Dora { .. }) {
                params.insert(format!("{prefix}.dora_m"), Tensor::new(vec![d_in], column_norms(&w0).to_vec())?);
            }
        }
        Adapter::Vera { rank } => {
            if rank == 0 {
                return Err(Error::config("method.rank", "rank must be >= 1"));
            }
            params.insert(format!("{prefix}.vera_b"), gaussian(rng, (d_emb, rank), 1.0 / (rank as f64).sqrt()));
            params.insert(format!("{prefix}.vera_a"), gaussian(rng, (rank, d_in), 1.0 / (d_in as f64).sqrt()));
            params.insert(format!("{prefix}.vera_lambda_b"), Tensor::zeros(vec![d_emb]));
            params.insert(format!("{prefix}.vera_lambda_a"), Tensor::filled(vec![rank], VERA_LAMBDA_A_INIT));
        }
    }
    Ok(())
}

/// Folds the adapter into the base weight and re-initializes the adapter for
/// the next task.
pub fn absorb(adapter: Adapter, prefix: &str, params: &mut ParamSet, rng: &mut impl Rng) -> Result<()> {
    if !adapter.is_low_rank() {
        return Err(Error::domain("absorb requires a low-rank adapter"));
    }
    let merged = effective_weight(adapter, prefix, params)?;
    let w = params
        .get_mut(&format!("{prefix}.weight"))
        .ok_or_else(|| Error::shape(format!("missing `{prefix}.weight`")))?;
    w.data = merged.iter().copied().collect();
    let (trainable, frozen) = adapter.tensor_names(prefix);
    for name in trainable.iter().chain(frozen.iter()) {
        params.remove(name);
    }
    init_adapter(adapter, prefix, params, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn base(rng: &mut ChaCha8Rng) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("t.weight", gaussian(rng, (4, 6), 1.0));
        p
    }

    #[test]
    fn init_is_identity_for_every_adapter() {
        for adapter in [Adapter::Lora { rank: 2 }, Adapter::Dora { rank: 2 }, Adapter::Vera { rank: 3 }] {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mut p = base(&mut rng);
            init_adapter(adapter, "t", &mut p, &mut rng).unwrap();
            let w = effective_weight(adapter, "t", &p).unwrap();
            assert_eq!(w, p.get("t.weight").unwrap().matrix().to_owned(), "{adapter:?}");
        }
    }

    #[test]
    fn rank_one_lora_perturbs_one_entry() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = base(&mut rng);
        let adapter = Adapter::Lora { rank: 1 };
        init_adapter(adapter, "t", &mut p, &mut rng).unwrap();
        let mut b = vec![0.0; 4];
        b[0] = 1.0;
        let mut a = vec![0.0; 6];
        a[0] = 1.0;
        p.insert("t.lora_b", Tensor::new(vec![4, 1], b).unwrap());
        p.insert("t.lora_a", Tensor::new(vec![1, 6], a).unwrap());
        let w = effective_weight(adapter, "t", &p).unwrap();
        let w0 = p.get("t.weight").unwrap().matrix().to_owned();
        let diff = &w - &w0;
        for ((i, j), d) in diff.indexed_iter() {
            assert!((*d - if (i, j) == (0, 0) { 1.0 } else { 0.0 }).abs() < 1e-12);
        }
    }

    #[test]
    fn lora_absorb_cycles_add_up() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = base(&mut rng);
        let adapter = Adapter::Lora { rank: 2 };
        let w0 = p.get("t.weight").unwrap().matrix().to_owned();
        init_adapter(adapter, "t", &mut p, &mut rng).unwrap();
        let mut expected = w0.clone();
        for _ in 0..2 {
            let b = gaussian(&mut rng, (4, 2), 1.0);
            p.insert("t.lora_b", b);
            let delta = p.get("t.lora_b").unwrap().matrix().dot(&p.get("t.lora_a").unwrap().matrix());
            expected += &delta;
            absorb(adapter, "t", &mut p, &mut rng).unwrap();
            // Fresh adapter leaves the absorbed weight unchanged.
            assert_eq!(effective_weight(adapter, "t", &p).unwrap(), p.get("t.weight").unwrap().matrix().to_owned());
        }
        let got = p.get("t.weight").unwrap().matrix().to_owned();
        for (g, e) in got.iter().zip(expected.iter()) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn vera_absorb_is_seed_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let mut p = base(&mut rng);
            let adapter = Adapter::Vera { rank: 2 };
            init_adapter(adapter, "t", &mut p, &mut rng).unwrap();
            absorb(adapter, "t", &mut p, &mut rng).unwrap();
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn absorb_rejects_plain_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = base(&mut rng);
        assert!(absorb(Adapter::None, "t", &mut p, &mut rng).is_err());
        assert!(init_adapter(Adapter::Lora { rank: 0 }, "t", &mut p, &mut rng).is_err());
    }
}
