//! Toy two-tower contrastive model.
//!
//! Each tower maps a `d_in` feature vector to a unit embedding:
//! `normalize(scale * (W x + bias) + shift)`. A shared learnable
//! log-temperature scales the cosine-similarity logits of a symmetric
//! cross-entropy loss. Gradients are computed analytically.

mod optim;
mod params;

pub use optim::{clip_grad_norm, AdamW, AdamWConfig};
pub use params::{ParamSet, Tensor};

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::ConceptId;
use crate::error::{Error, Result};
use crate::methods::lowrank::{effective_weight, effective_weight_backward, Adapter};

pub const DEFAULT_D_IN: usize = 32;
pub const DEFAULT_D_EMB: usize = 16;
pub const DEFAULT_TAU_INIT: f64 = 0.01;
/// Lower bound applied to the temperature after every optimizer step.
pub const DEFAULT_MIN_TAU: f64 = 0.01;
const NORM_EPS: f64 = 1e-12;

pub const LOG_TEMPERATURE: &str = "log_temperature";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tower {
    Image,
    Text,
}

impl Tower {
    pub const BOTH: [Tower; 2] = [Tower::Image, Tower::Text];

    pub fn prefix(self) -> &'static str {
        match self {
            Tower::Image => "image",
            Tower::Text => "text",
        }
    }

    pub fn weight(self) -> String {
        format!("{}.weight", self.prefix())
    }
    pub fn bias(self) -> String {
        format!("{}.bias", self.prefix())
    }
    pub fn scale(self) -> String {
        format!("{}.scale", self.prefix())
    }
    pub fn shift(self) -> String {
        format!("{}.shift", self.prefix())
    }

    /// The four base tensors of the tower.
    pub fn base_names(self) -> [String; 4] {
        [self.weight(), self.bias(), self.scale(), self.shift()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_in: usize,
    pub d_emb: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_in: DEFAULT_D_IN,
            d_emb: DEFAULT_D_EMB,
        }
    }
}

/// Random towers (Gaussian weights with variance `1/d_in`, zero bias, unit
/// scale, zero shift) and temperature `tau`.
pub fn init_params(cfg: &ModelConfig, tau: f64, rng: &mut impl Rng) -> ParamSet {
    let mut p = ParamSet::new();
    let std = 1.0 / (cfg.d_in as f64).sqrt();
    for tower in Tower::BOTH {
        let w = (0..cfg.d_emb * cfg.d_in)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
            .collect();
        p.insert(tower.weight(), Tensor::new(vec![cfg.d_emb, cfg.d_in], w).expect("shape"));
        p.insert(tower.bias(), Tensor::zeros(vec![cfg.d_emb]));
        p.insert(tower.scale(), Tensor::filled(vec![cfg.d_emb], 1.0));
        p.insert(tower.shift(), Tensor::zeros(vec![cfg.d_emb]));
    }
    p.insert(LOG_TEMPERATURE, Tensor::scalar(tau.ln()));
    p
}

pub fn temperature(params: &ParamSet) -> Result<f64> {
    Ok(params.require(LOG_TEMPERATURE)?.data[0].exp())
}

pub fn set_temperature(params: &mut ParamSet, tau: f64) -> Result<()> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::domain(format!("temperature must be > 0, got {tau}")));
    }
    params
        .get_mut(LOG_TEMPERATURE)
        .ok_or_else(|| Error::shape("missing log_temperature"))?
        .data[0] = tau.ln();
    Ok(())
}

/// Raises the temperature to at least `min_tau`; a no-op when disabled.
pub fn clamp_temperature(params: &mut ParamSet, min_tau: f64, enabled: bool) -> Result<()> {
    if !enabled {
        return Ok(());
    }
    let floor = min_tau.ln();
    let t = params
        .get_mut(LOG_TEMPERATURE)
        .ok_or_else(|| Error::shape("missing log_temperature"))?;
    if t.data[0] < floor {
        t.data[0] = floor;
    }
    Ok(())
}

/// Paired image and text features, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Array2<f64>,
    pub texts: Array2<f64>,
}

impl Batch {
    pub fn new(images: Array2<f64>, texts: Array2<f64>) -> Result<Self> {
        if images.dim() != texts.dim() {
            return Err(Error::shape(format!(
                "image batch {:?} and text batch {:?} differ",
                images.dim(),
                texts.dim()
            )));
        }
        if images.nrows() == 0 {
            return Err(Error::domain("empty batch"));
        }
        Ok(Self { images, texts })
    }

    pub fn from_rows<'a>(pairs: impl IntoIterator<Item = (&'a [f64], &'a [f64])>) -> Result<Self> {
        let mut img = Vec::new();
        let mut txt = Vec::new();
        let mut rows = 0;
        let mut dim = None;
        for (i, t) in pairs {
            if i.len() != t.len() || dim.is_some_and(|d| d != i.len()) {
                return Err(Error::shape("inconsistent feature dimensions in batch"));
            }
            dim = Some(i.len());
            img.extend_from_slice(i);
            txt.extend_from_slice(t);
            rows += 1;
        }
        let d = dim.ok_or_else(|| Error::domain("empty batch"))?;
        Self::new(
            Array2::from_shape_vec((rows, d), img).expect("shape"),
            Array2::from_shape_vec((rows, d), txt).expect("shape"),
        )
    }

    pub fn len(&self) -> usize {
        self.images.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

struct TowerCache {
    x: Array2<f64>,
    z: Array2<f64>,
    h: Array2<f64>,
    norms: Array1<f64>,
    u: Array2<f64>,
}

fn tower_forward(params: &ParamSet, adapter: Adapter, tower: Tower, x: ArrayView2<f64>) -> Result<TowerCache> {
    let w = effective_weight(adapter, tower.prefix(), params)?;
    if x.ncols() != w.ncols() {
        return Err(Error::shape(format!(
            "{} tower expects {} input features, got {}",
            tower.prefix(),
            w.ncols(),
            x.ncols()
        )));
    }
    let bias = params.require(&tower.bias())?.vector();
    let scale = params.require(&tower.scale())?.vector();
    let shift = params.require(&tower.shift())?.vector();
    let z = x.dot(&w.t()) + &bias;
    let h = &z * &scale + &shift;
    let norms = h.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let denom = norms.mapv(|n| n + NORM_EPS);
    let u = &h / &denom.view().insert_axis(Axis(1));
    Ok(TowerCache {
        x: x.to_owned(),
        z,
        h,
        norms,
        u,
    })
}

fn tower_backward(
    params: &ParamSet,
    adapter: Adapter,
    tower: Tower,
    cache: &TowerCache,
    grad_u: &Array2<f64>,
) -> Result<Vec<(String, Vec<f64>)>> {
    let scale = params.require(&tower.scale())?.vector();
    let mut grad_h = Array2::<f64>::zeros(cache.h.raw_dim());
    for (i, mut row) in grad_h.axis_iter_mut(Axis(0)).enumerate() {
        let n = cache.norms[i];
        let d = n + NORM_EPS;
        let h = cache.h.row(i);
        let gu = grad_u.row(i);
        if n > 0.0 {
            let hg = h.dot(&gu);
            let k = hg / (n * d * d);
            for j in 0..row.len() {
                row[j] = gu[j] / d - h[j] * k;
            }
        } else {
            row.assign(&(&gu / d));
        }
    }
    let grad_scale = (&grad_h * &cache.z).sum_axis(Axis(0));
    let grad_shift = grad_h.sum_axis(Axis(0));
    let grad_z = &grad_h * &scale;
    let grad_bias = grad_z.sum_axis(Axis(0));
    let grad_w = grad_z.t().dot(&cache.x);
    let mut out = effective_weight_backward(adapter, tower.prefix(), params, &grad_w)?;
    out.push((tower.bias(), grad_bias.to_vec()));
    out.push((tower.scale(), grad_scale.to_vec()));
    out.push((tower.shift(), grad_shift.to_vec()));
    Ok(out)
}

/// Unit embedding of one feature vector.
pub fn encode(params: &ParamSet, adapter: Adapter, tower: Tower, x: &[f64]) -> Result<Array1<f64>> {
    let xs = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
    Ok(tower_forward(params, adapter, tower, xs)?.u.row(0).to_owned())
}

/// Unit embeddings of every row of `xs`.
pub fn encode_batch(params: &ParamSet, adapter: Adapter, tower: Tower, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
    Ok(tower_forward(params, adapter, tower, xs)?.u)
}

/// Softmax probabilities of each row.
fn row_softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
    }
    p
}

struct LossParts {
    loss: f64,
    per_sample: Vec<f64>,
    row_probs: Array2<f64>,
    col_probs: Array2<f64>,
    logits: Array2<f64>,
}

fn clip_loss_parts(img: &Array2<f64>, txt: &Array2<f64>, tau: f64) -> Result<LossParts> {
    if img.nrows() != txt.nrows() {
        return Err(Error::shape(format!(
            "{} image embeddings vs {} text embeddings",
            img.nrows(),
            txt.nrows()
        )));
    }
    if img.nrows() == 0 {
        return Err(Error::domain("empty batch"));
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::domain(format!("temperature must be > 0, got {tau}")));
    }
    let logits = img.dot(&txt.t()) / tau;
    let row_probs = row_softmax(&logits);
    let col_probs = row_softmax(&logits.t().to_owned()).reversed_axes();
    let b = img.nrows();
    let per_sample: Vec<f64> = (0..b)
        .map(|i| {
            let lr = log_softmax_at(logits.row(i), i);
            let lc = log_softmax_at(logits.column(i), i);
            -0.5 * (lr + lc)
        })
        .collect();
    let loss = per_sample.iter().sum::<f64>() / b as f64;
    Ok(LossParts {
        loss,
        per_sample,
        row_probs,
        col_probs,
        logits,
    })
}

fn log_softmax_at(v: ndarray::ArrayView1<f64>, idx: usize) -> f64 {
    let max = v.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    v[idx] - lse
}

/// Symmetric contrastive loss over matched pairs: the mean of image-to-text
/// and text-to-image cross-entropies with diagonal targets. Returns the mean
/// loss and each pair's own loss (the average of its two cross-entropies).
pub fn clip_loss(img_embs: &Array2<f64>, txt_embs: &Array2<f64>, tau: f64) -> Result<(f64, Vec<f64>)> {
    let parts = clip_loss_parts(img_embs, txt_embs, tau)?;
    Ok((parts.loss, parts.per_sample))
}

/// Extra loss term attached by an update method (for example a quadratic
/// pull towards an anchor).
pub trait Penalty {
    fn value(&self, params: &ParamSet) -> Result<f64>;
    /// Adds the penalty gradient into `grads`, which has the layout of `params`.
    fn add_grad(&self, params: &ParamSet, grads: &mut ParamSet) -> Result<()>;
}

/// What the gradient computation needs to know about the active method.
#[derive(Clone, Copy, Default)]
pub struct GradContext<'a> {
    pub adapter: Adapter,
    /// Names of trainable tensors; `None` means everything is trainable.
    pub trainable: Option<&'a BTreeSet<String>>,
    pub penalty: Option<&'a dyn Penalty>,
}

#[derive(Debug, Clone)]
pub struct LossAndGrad {
    /// Contrastive loss plus penalty.
    pub loss: f64,
    pub contrastive_loss: f64,
    pub per_sample: Vec<f64>,
    pub grads: ParamSet,
}

/// Loss of `batch` under `params`, including any active penalty.
pub fn loss(params: &ParamSet, batch: &Batch, ctx: &GradContext<'_>) -> Result<f64> {
    let img = tower_forward(params, ctx.adapter, Tower::Image, batch.images.view())?;
    let txt = tower_forward(params, ctx.adapter, Tower::Text, batch.texts.view())?;
    let parts = clip_loss_parts(&img.u, &txt.u, temperature(params)?)?;
    let pen = match ctx.penalty {
        Some(p) => p.value(params)?,
        None => 0.0,
    };
    Ok(parts.loss + pen)
}

/// Exact gradient of the mean contrastive loss (plus penalty) with respect to
/// every tensor in `params`. Tensors outside `ctx.trainable` get zeros.
pub fn grad(params: &ParamSet, batch: &Batch, ctx: &GradContext<'_>) -> Result<LossAndGrad> {
    let img = tower_forward(params, ctx.adapter, Tower::Image, batch.images.view())?;
    let txt = tower_forward(params, ctx.adapter, Tower::Text, batch.texts.view())?;
    let log_tau = params.require(LOG_TEMPERATURE)?.data[0];
    let tau = log_tau.exp();
    let parts = clip_loss_parts(&img.u, &txt.u, tau)?;
    if !parts.loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "contrastive loss is {} (tau = {tau}, batch = {})",
            parts.loss,
            batch.len()
        )));
    }
    let b = batch.len() as f64;
    let mut grad_logits = (&parts.row_probs + &parts.col_probs) / (2.0 * b);
    for i in 0..batch.len() {
        grad_logits[[i, i]] -= 1.0 / b;
    }
    let grad_log_tau = -(&grad_logits * &parts.logits).sum();
    let grad_sim = &grad_logits / tau;
    let grad_img = grad_sim.dot(&txt.u);
    let grad_txt = grad_sim.t().dot(&img.u);

    let mut grads = params.zeros_like();
    let mut pieces = tower_backward(params, ctx.adapter, Tower::Image, &img, &grad_img)?;
    pieces.extend(tower_backward(params, ctx.adapter, Tower::Text, &txt, &grad_txt)?);
    pieces.push((LOG_TEMPERATURE.to_string(), vec![grad_log_tau]));
    for (name, g) in pieces {
        if let Some(t) = grads.get_mut(&name) {
            if t.data.len() != g.len() {
                return Err(Error::shape(format!("gradient for `{name}` has the wrong size")));
            }
            t.data.copy_from_slice(&g);
        }
    }
    let mut total = parts.loss;
    if let Some(pen) = ctx.penalty {
        total += pen.value(params)?;
        pen.add_grad(params, &mut grads)?;
    }
    if let Some(mask) = ctx.trainable {
        for (name, t) in grads.iter_mut() {
            if !mask.contains(name) {
                t.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    if !grads.all_finite() {
        return Err(Error::NonFinite("gradient has non-finite entries".to_string()));
    }
    Ok(LossAndGrad {
        loss: total,
        contrastive_loss: parts.loss,
        per_sample: parts.per_sample,
        grads,
    })
}

/// Predicted concept for each image: the prototype whose text embedding has
/// the highest cosine similarity, ties going to the lower concept id.
pub fn classify(
    params: &ParamSet,
    adapter: Adapter,
    prototypes: &[(ConceptId, &[f64])],
    images: ArrayView2<f64>,
) -> Result<Vec<ConceptId>> {
    if prototypes.is_empty() {
        return Err(Error::domain("no class prototypes"));
    }
    let mut protos: Vec<(ConceptId, &[f64])> = prototypes.to_vec();
    protos.sort_by_key(|(id, _)| *id);
    let d = protos[0].1.len();
    let flat: Vec<f64> = protos.iter().flat_map(|(_, v)| v.iter().copied()).collect();
    if flat.len() != d * protos.len() {
        return Err(Error::shape("prototype dimensions differ"));
    }
    let proto_mat = Array2::from_shape_vec((protos.len(), d), flat).expect("shape");
    let text = encode_batch(params, adapter, Tower::Text, proto_mat.view())?;
    let img = encode_batch(params, adapter, Tower::Image, images)?;
    let sims = img.dot(&text.t());
    Ok(sims
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            protos[best].0
        })
        .collect())
}

/// Fraction of labelled images whose predicted concept is their label.
pub fn zero_shot_eval(
    params: &ParamSet,
    adapter: Adapter,
    prototypes: &[(ConceptId, &[f64])],
    samples: &[(ConceptId, &[f64])],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::domain("empty evaluation set"));
    }
    let known: BTreeSet<ConceptId> = prototypes.iter().map(|(c, _)| *c).collect();
    if let Some((c, _)) = samples.iter().find(|(c, _)| !known.contains(c)) {
        return Err(Error::domain(format!("no prototype for concept {c}")));
    }
    let d = samples[0].1.len();
    let flat: Vec<f64> = samples.iter().flat_map(|(_, x)| x.iter().copied()).collect();
    if flat.len() != d * samples.len() {
        return Err(Error::shape("evaluation sample dimensions differ"));
    }
    let images = Array2::from_shape_vec((samples.len(), d), flat).expect("shape");
    let pred = classify(params, adapter, prototypes, images.view())?;
    let correct = pred.iter().zip(samples).filter(|(p, (c, _))| *p == c).count();
    Ok(correct as f64 / samples.len() as f64)
}
