//! Desk-scale MLP classifier with analytic gradients.
//!
//! Hidden layers are affine + ReLU. The head is either affine (cross-entropy
//! and outlier-exposure training) or a set of reciprocal points whose squared
//! distances act as logits (ARPL-lite: no confusing-sample generator).
//! Everything runs in `f64` and is deterministic given the seed.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scores::softmax;
use crate::shiftpack::{
    Role, ShiftPack, FC_BIAS, FC_WEIGHT, FEATURES_PREFIX, HEAD_RECIPROCAL, LOGITS, META_HEAD,
    PERTURBED_LOGITS,
};

const CHECKPOINT_MAGIC: &[u8; 4] = b"SLCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `[out, in]`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, gain: f64) -> Self {
        let std = (gain / fan_in as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((fan_out, fan_in), |_| {
                std * {
                    let v: f64 = StandardNormal.sample(rng);
                    v
                }
            }),
            bias: Array1::zeros(fan_out),
        }
    }

    fn apply(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }
}

/// Per-class points describing the "not class k" region, plus a radius
/// bounding open space. Logits are squared distances `‖f − P_k‖²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReciprocalPoints {
    /// `[C, D_feat]`
    pub points: Array2<f64>,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Linear(Layer),
    Reciprocal(ReciprocalPoints),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    /// `[D, h_1, …, h_L, C]`
    pub widths: Vec<usize>,
    pub hidden: Vec<Layer>,
    pub head: Head,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    Ce,
    Oe,
    Arpl,
}

impl Loss {
    pub fn as_str(self) -> &'static str {
        match self {
            Loss::Ce => "ce",
            Loss::Oe => "oe",
            Loss::Arpl => "arpl",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSpec {
    pub loss: Loss,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Weight of the uniform-target term on auxiliary outliers.
    pub oe_lambda: f64,
    pub mixup_alpha: Option<f64>,
    /// Weight of the open-space term `|‖f − P_y‖² − R|`.
    pub arpl_lambda: f64,
    pub arpl_radius: f64,
    /// Gradient shards per batch; each shard is evaluated independently and
    /// the results are summed in shard order.
    pub grad_shards: usize,
    /// Evaluate shards on the rayon pool.
    pub parallel: bool,
    pub seed: u64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            loss: Loss::Ce,
            hidden: vec![64, 64],
            epochs: 20,
            batch_size: 64,
            learning_rate: 0.05,
            schedule: Schedule::Cosine,
            momentum: 0.9,
            weight_decay: 0.0,
            oe_lambda: 0.5,
            mixup_alpha: None,
            arpl_lambda: 0.003,
            arpl_radius: 1.0,
            grad_shards: 1,
            parallel: false,
            seed: 0,
        }
    }
}

impl TrainSpec {
    pub fn new(loss: Loss) -> Self {
        Self {
            loss,
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 {
            return err("epochs must be at least 1");
        }
        if self.batch_size == 0 || self.grad_shards == 0 {
            return err("batch_size and grad_shards must be positive");
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 || self.momentum < 0.0 || self.weight_decay < 0.0 {
            return err("learning_rate must be positive; momentum and weight_decay non-negative");
        }
        if self.oe_lambda < 0.0 || self.arpl_lambda < 0.0 {
            return err("loss weights must be non-negative");
        }
        if let Some(a) = self.mixup_alpha {
            if a.is_nan() || a <= 0.0 {
                return err("mixup_alpha must be positive");
            }
            if self.loss == Loss::Arpl {
                return err("mixup is not supported with the arpl loss");
            }
        }
        Ok(())
    }
}

/// Gradients with the same layout as [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub hidden: Vec<(Array2<f64>, Array1<f64>)>,
    pub head: HeadGrad,
}

#[derive(Debug, Clone, PartialEq)]
pub enum HeadGrad {
    Linear(Array2<f64>, Array1<f64>),
    Reciprocal(Array2<f64>, f64),
}

impl Gradients {
    fn add_assign(&mut self, other: &Gradients) {
        for ((w, b), (ow, ob)) in self.hidden.iter_mut().zip(&other.hidden) {
            *w += ow;
            *b += ob;
        }
        match (&mut self.head, &other.head) {
            (HeadGrad::Linear(w, b), HeadGrad::Linear(ow, ob)) => {
                *w += ow;
                *b += ob;
            }
            (HeadGrad::Reciprocal(p, r), HeadGrad::Reciprocal(op, or)) => {
                *p += op;
                *r += or;
            }
            _ => unreachable!("gradient heads of different kinds"),
        }
    }

    /// Flattened in [`Mlp::to_flat`] order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.hidden {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        match &self.head {
            HeadGrad::Linear(w, b) => {
                out.extend(w.iter());
                out.extend(b.iter());
            }
            HeadGrad::Reciprocal(p, r) => {
                out.extend(p.iter());
                out.push(*r);
            }
        }
        out
    }
}

/// Activations kept for the backward pass.
struct Cache {
    /// `inputs[l]` feeds hidden layer `l`; the last entry feeds the head.
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

/// Output of [`Mlp::forward`].
#[derive(Debug, Clone)]
pub struct Forward {
    /// Post-ReLU activations of each hidden layer.
    pub activations: Vec<Array2<f64>>,
    pub logits: Array2<f64>,
}

impl Mlp {
    /// Builds a network with an affine head.
    pub fn new(widths: &[usize], seed: u64) -> Result<Self> {
        Self::build(widths, seed, false)
    }

    /// Builds a network whose head is a set of reciprocal points.
    pub fn new_reciprocal(widths: &[usize], seed: u64, radius: f64) -> Result<Self> {
        let mut m = Self::build(widths, seed, true)?;
        if let Head::Reciprocal(rp) = &mut m.head {
            rp.radius = radius;
        }
        Ok(m)
    }

    /// Architecture and head kind appropriate for a training loss.
    pub fn for_spec(input_dim: usize, class_count: usize, spec: &TrainSpec) -> Result<Self> {
        let mut widths = vec![input_dim];
        widths.extend(&spec.hidden);
        widths.push(class_count);
        match spec.loss {
            Loss::Arpl => Self::new_reciprocal(&widths, spec.seed, spec.arpl_radius),
            _ => Self::new(&widths, spec.seed),
        }
    }

    fn build(widths: &[usize], seed: u64, reciprocal: bool) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "invalid layer widths {widths:?}"
            )));
        }
        if reciprocal && widths.len() < 3 {
            return Err(Error::InvalidArgument(
                "reciprocal head needs a hidden layer".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = widths.len();
        let hidden = (0..n - 2)
            .map(|l| Layer::init(&mut rng, widths[l], widths[l + 1], 2.0))
            .collect();
        let (feat, classes) = (widths[n - 2], widths[n - 1]);
        let head = if reciprocal {
            Head::Reciprocal(ReciprocalPoints {
                points: Array2::from_shape_fn((classes, feat), |_| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    v
                }),
                radius: 1.0,
            })
        } else {
            Head::Linear(Layer::init(&mut rng, feat, classes, 1.0))
        };
        Ok(Self {
            widths: widths.to_vec(),
            hidden,
            head,
            seed,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn class_count(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn feature_dim(&self) -> usize {
        self.widths[self.widths.len() - 2]
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "input has {} columns, network expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite network input".into()));
        }
        Ok(())
    }

    fn head_logits(&self, feats: &ArrayView2<f64>) -> Array2<f64> {
        match &self.head {
            Head::Linear(layer) => layer.apply(feats),
            Head::Reciprocal(rp) => {
                // ‖f‖² − 2 f·P_k + ‖P_k‖²
                let f2 = feats.map_axis(Axis(1), |r| r.dot(&r));
                let p2 = rp.points.map_axis(Axis(1), |r| r.dot(&r));
                let mut z = feats.dot(&rp.points.t()) * -2.0;
                z += &p2;
                z += &f2.insert_axis(Axis(1));
                z
            }
        }
    }

    fn forward_cached(&self, x: ArrayView2<f64>) -> (Cache, Array2<f64>) {
        let mut inputs = vec![x.to_owned()];
        let mut pre = Vec::with_capacity(self.hidden.len());
        for layer in &self.hidden {
            let z = layer.apply(&inputs.last().unwrap().view());
            inputs.push(z.mapv(|v| v.max(0.0)));
            pre.push(z);
        }
        let logits = self.head_logits(&inputs.last().unwrap().view());
        (Cache { inputs, pre }, logits)
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Forward> {
        self.check_input(&x)?;
        let (cache, logits) = self.forward_cached(x);
        let mut activations = cache.inputs;
        activations.remove(0);
        Ok(Forward {
            activations,
            logits,
        })
    }

    /// Penultimate (last hidden) activations.
    pub fn features(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let f = self.forward(x)?;
        Ok(f.activations
            .last()
            .cloned()
            .unwrap_or_else(|| x.to_owned()))
    }

    /// Backpropagates `dlogits` through the network; also returns the
    /// gradient with respect to the input.
    fn backward(&self, cache: &Cache, dlogits: &Array2<f64>) -> (Gradients, Array2<f64>) {
        let feats = cache.inputs.last().unwrap();
        let (head, mut da) = match &self.head {
            Head::Linear(layer) => {
                let dw = dlogits.t().dot(feats);
                let db = dlogits.sum_axis(Axis(0));
                (HeadGrad::Linear(dw, db), dlogits.dot(&layer.weight))
            }
            Head::Reciprocal(rp) => {
                // z_ik = ‖f_i − P_k‖²
                let c = 2.0;
                let g_row = dlogits.sum_axis(Axis(1)).insert_axis(Axis(1));
                let da = (feats * &g_row - dlogits.dot(&rp.points)) * c;
                let g_col = dlogits.sum_axis(Axis(0)).insert_axis(Axis(1));
                let dp = (&rp.points * &g_col - dlogits.t().dot(feats)) * c;
                (HeadGrad::Reciprocal(dp, 0.0), da)
            }
        };
        let mut hidden = Vec::with_capacity(self.hidden.len());
        for l in (0..self.hidden.len()).rev() {
            let mut dz = da;
            dz.zip_mut_with(&cache.pre[l], |g, &z| {
                if z <= 0.0 {
                    *g = 0.0;
                }
            });
            let dw = dz.t().dot(&cache.inputs[l]);
            let db = dz.sum_axis(Axis(0));
            da = dz.dot(&self.hidden[l].weight);
            hidden.push((dw, db));
        }
        hidden.reverse();
        (Gradients { hidden, head }, da)
    }

    fn zero_gradients(&self) -> Gradients {
        Gradients {
            hidden: self
                .hidden
                .iter()
                .map(|l| (Array2::zeros(l.weight.dim()), Array1::zeros(l.bias.len())))
                .collect(),
            head: match &self.head {
                Head::Linear(l) => {
                    HeadGrad::Linear(Array2::zeros(l.weight.dim()), Array1::zeros(l.bias.len()))
                }
                Head::Reciprocal(rp) => HeadGrad::Reciprocal(Array2::zeros(rp.points.dim()), 0.0),
            },
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.hidden {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        match &self.head {
            Head::Linear(l) => {
                out.extend(l.weight.iter());
                out.extend(l.bias.iter());
            }
            Head::Reciprocal(rp) => {
                out.extend(rp.points.iter());
                out.push(rp.radius);
            }
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        let mut fill = |dst: &mut dyn Iterator<Item = &mut f64>| {
            for v in dst {
                *v = it.next().expect("flat parameter vector too short");
            }
        };
        for l in &mut self.hidden {
            fill(&mut l.weight.iter_mut());
            fill(&mut l.bias.iter_mut());
        }
        match &mut self.head {
            Head::Linear(l) => {
                fill(&mut l.weight.iter_mut());
                fill(&mut l.bias.iter_mut());
            }
            Head::Reciprocal(rp) => {
                fill(&mut rp.points.iter_mut());
                fill(&mut std::iter::once(&mut rp.radius));
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.to_flat().len()
    }

    /// Serialises to the versioned checkpoint format: magic `SLCK`, `u32`
    /// version, `u64` body length, JSON body.
    pub fn write_checkpoint<W: Write>(&self, mut sink: W) -> Result<()> {
        let body = serde_json::to_vec(self).map_err(|e| Error::Header(e.to_string()))?;
        sink.write_all(CHECKPOINT_MAGIC)?;
        sink.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        sink.write_all(&(body.len() as u64).to_le_bytes())?;
        sink.write_all(&body)?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut source: R) -> Result<Self> {
        let mut bytes = Vec::new();
        source.read_to_end(&mut bytes)?;
        if bytes.len() < 16 || &bytes[0..4] != CHECKPOINT_MAGIC {
            return Err(Error::Header("not a shiftlab checkpoint".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16 + len)
            .ok_or_else(|| Error::Header("checkpoint body truncated".into()))?;
        serde_json::from_slice(body).map_err(|e| Error::Header(e.to_string()))
    }
}

/// One objective evaluation: ID batch with soft targets, optional
/// auxiliary outliers pushed towards the uniform distribution.
#[derive(Clone, Copy)]
pub struct Objective<'a> {
    pub x: ArrayView2<'a, f64>,
    /// Soft targets, rows summing to one.
    pub targets: ArrayView2<'a, f64>,
    /// Hard labels for the open-space term (reciprocal head only).
    pub labels: &'a [i64],
    pub aux: Option<ArrayView2<'a, f64>>,
    pub oe_lambda: f64,
    pub arpl_lambda: f64,
}

/// One-hot targets.
pub fn one_hot(labels: &[i64], classes: usize) -> Array2<f64> {
    let mut t = Array2::zeros((labels.len(), classes));
    for (i, &y) in labels.iter().enumerate() {
        t[[i, y as usize]] = 1.0;
    }
    t
}

/// `−Σ t log softmax(z)` summed over rows, and its gradient `softmax − t`.
fn soft_cross_entropy(logits: &Array2<f64>, targets: &ArrayView2<f64>) -> (f64, Array2<f64>) {
    let mut loss = 0.0;
    let mut grad = Array2::zeros(logits.dim());
    for ((z, t), mut g) in logits
        .rows()
        .into_iter()
        .zip(targets.rows())
        .zip(grad.rows_mut())
    {
        let p = softmax(z, 1.0);
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        loss += t
            .iter()
            .zip(z)
            .map(|(&tk, &zk)| if tk == 0.0 { 0.0 } else { tk * (lse - zk) })
            .sum::<f64>();
        g.assign(&(&p - &t));
    }
    (loss, grad)
}

impl Mlp {
    /// Sum-form loss over the objective's rows, scaled by `scale`, with
    /// gradients. ID and auxiliary terms use separate scales so that sharded
    /// evaluation reproduces the full-batch mean.
    fn objective_sum(&self, obj: &Objective, id_scale: f64, aux_scale: f64) -> (f64, Gradients) {
        let mut grads = self.zero_gradients();
        let mut total = 0.0;
        if obj.x.nrows() > 0 {
            let (cache, logits) = self.forward_cached(obj.x);
            let (mut loss, mut dl) = soft_cross_entropy(&logits, &obj.targets);
            let mut d_radius = 0.0;
            if let Head::Reciprocal(rp) = &self.head {
                for (i, &y) in obj.labels.iter().enumerate() {
                    let y = y as usize;
                    let dev = logits[[i, y]] - rp.radius;
                    loss += obj.arpl_lambda * dev.abs();
                    let sign = dev.signum() * (dev != 0.0) as i32 as f64;
                    dl[[i, y]] += obj.arpl_lambda * sign;
                    d_radius -= obj.arpl_lambda * sign;
                }
            }
            dl *= id_scale;
            let (mut g, _) = self.backward(&cache, &dl);
            if let HeadGrad::Reciprocal(_, r) = &mut g.head {
                *r = d_radius * id_scale;
            }
            grads.add_assign(&g);
            total += loss * id_scale;
        }
        if let Some(aux) = obj.aux.filter(|a| a.nrows() > 0) {
            let (cache, logits) = self.forward_cached(aux);
            let c = logits.ncols();
            let uniform = Array2::from_elem((aux.nrows(), c), 1.0 / c as f64);
            let (loss, mut dl) = soft_cross_entropy(&logits, &uniform.view());
            let w = obj.oe_lambda * aux_scale;
            dl *= w;
            let (g, _) = self.backward(&cache, &dl);
            grads.add_assign(&g);
            total += loss * w;
        }
        (total, grads)
    }

    /// Mean loss over the batch and its exact gradient.
    pub fn loss_and_grad(&self, obj: &Objective) -> (f64, Gradients) {
        let id_scale = 1.0 / obj.x.nrows().max(1) as f64;
        let aux_scale = 1.0 / obj.aux.map_or(1, |a| a.nrows().max(1)) as f64;
        self.objective_sum(obj, id_scale, aux_scale)
    }

    /// Loss only, for finite-difference checks.
    pub fn loss(&self, obj: &Objective) -> f64 {
        self.loss_and_grad(obj).0
    }

    /// Same result as [`Mlp::loss_and_grad`] up to summation order, with
    /// the batch split into `shards` contiguous pieces.
    pub fn sharded_loss_and_grad(
        &self,
        obj: &Objective,
        shards: usize,
        parallel: bool,
    ) -> (f64, Gradients) {
        let id_scale = 1.0 / obj.x.nrows().max(1) as f64;
        let aux_scale = 1.0 / obj.aux.map_or(1, |a| a.nrows().max(1)) as f64;
        let bounds = |n: usize, k: usize| (n * k / shards, n * (k + 1) / shards);
        let piece = |k: usize| {
            let (a, b) = bounds(obj.x.nrows(), k);
            let aux = obj.aux.map(|x| {
                let (c, d) = bounds(x.nrows(), k);
                x.slice_move(s![c..d, ..])
            });
            let labels = if obj.labels.is_empty() {
                obj.labels
            } else {
                &obj.labels[a..b]
            };
            let sub = Objective {
                x: obj.x.slice(s![a..b, ..]),
                targets: obj.targets.slice(s![a..b, ..]),
                labels,
                aux,
                oe_lambda: obj.oe_lambda,
                arpl_lambda: obj.arpl_lambda,
            };
            self.objective_sum(&sub, id_scale, aux_scale)
        };
        let parts: Vec<(f64, Gradients)> = if parallel {
            (0..shards).into_par_iter().map(piece).collect()
        } else {
            (0..shards).map(piece).collect()
        };
        let mut iter = parts.into_iter();
        let (mut loss, mut grads) = iter.next().expect("at least one shard");
        for (l, g) in iter {
            loss += l;
            grads.add_assign(&g);
        }
        (loss, grads)
    }

    /// Gradient of `log max_k softmax(z/T)_k` with respect to the input.
    pub fn input_gradient(&self, x: ArrayView2<f64>, temperature: f64) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let (cache, logits) = self.forward_cached(x);
        let mut dl = Array2::zeros(logits.dim());
        for (z, mut g) in logits.rows().into_iter().zip(dl.rows_mut()) {
            let p = softmax(z, temperature);
            let top = crate::scores::argmax_rows(&z.insert_axis(Axis(0)))[0];
            g.assign(&(-&p / temperature));
            g[top] += 1.0 / temperature;
        }
        Ok(self.backward(&cache, &dl).1)
    }

    /// ODIN input pre-processing: steps each input by `ε` along the sign of
    /// the gradient that raises the top softmax score, then returns the logits
    /// of the perturbed input. `ε = 0` returns the unperturbed logits.
    pub fn odin_perturb(
        &self,
        x: ArrayView2<f64>,
        epsilon: f64,
        temperature: f64,
    ) -> Result<Array2<f64>> {
        if epsilon.is_nan() || epsilon < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be non-negative, got {epsilon}"
            )));
        }
        if epsilon == 0.0 {
            return Ok(self.forward(x)?.logits);
        }
        let grad = self.input_gradient(x, temperature)?;
        // x̃ = x − ε·sign(−∇ log S)
        let perturbed = &x - &(grad.mapv(|g| -sign(g)) * epsilon);
        Ok(self.forward(perturbed.view())?.logits)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub id_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

/// Training inputs.
pub struct TrainData<'a> {
    pub x: ArrayView2<'a, f64>,
    pub labels: &'a [i64],
    pub aux: Option<ArrayView2<'a, f64>>,
}

fn stream_rng(seed: u64, stream: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos((epoch as u128) << 40);
    rng
}

const STREAM_ID: u64 = 1;
const STREAM_AUX: u64 = 2;
const STREAM_MIXUP: u64 = 3;

fn gather(x: &ArrayView2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}

/// Mixes each row with a partner row: `λ·x + (1 − λ)·x[perm]`, and the
/// targets alike.
pub fn mixup_batch(
    x: &ArrayView2<f64>,
    targets: &ArrayView2<f64>,
    lambda: f64,
    perm: &[usize],
) -> (Array2<f64>, Array2<f64>) {
    if lambda == 1.0 {
        return (x.to_owned(), targets.to_owned());
    }
    let xm = x * lambda + gather(x, perm) * (1.0 - lambda);
    let tm = targets * lambda + gather(targets, perm) * (1.0 - lambda);
    (xm, tm)
}

/// Fraction of rows whose arg-max logit equals the label.
pub fn accuracy(logits: &ArrayView2<f64>, labels: &[i64]) -> f64 {
    let preds = crate::scores::argmax_rows(logits);
    let hits = preds
        .iter()
        .zip(labels)
        .filter(|(p, &y)| **p as i64 == y)
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// Trains `model` in place with mini-batch SGD (momentum, optional cosine
/// decay). Deterministic given `spec.seed`.
pub fn train(model: &mut Mlp, data: &TrainData, spec: &TrainSpec) -> Result<History> {
    spec.validate()?;
    model.check_input(&data.x)?;
    let n = data.x.nrows();
    if n == 0 || data.labels.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{n} training rows but {} labels",
            data.labels.len()
        )));
    }
    let classes = model.class_count();
    if let Some(&bad) = data
        .labels
        .iter()
        .find(|&&y| y < 0 || y as usize >= classes)
    {
        return Err(Error::InvalidArgument(format!(
            "training label {bad} outside [0, {classes})"
        )));
    }
    match (spec.loss, &model.head) {
        (Loss::Arpl, Head::Linear(_)) | (Loss::Ce | Loss::Oe, Head::Reciprocal(_)) => {
            return Err(Error::Config(format!(
                "loss '{}' does not match the model head",
                spec.loss.as_str()
            )));
        }
        _ => {}
    }
    let aux = match spec.loss {
        Loss::Oe => Some(data.aux.filter(|a| a.nrows() > 0).ok_or_else(|| {
            Error::InvalidArgument("outlier exposure needs auxiliary data".into())
        })?),
        _ => None,
    };
    if let Some(a) = aux {
        model.check_input(&a)?;
    }

    let targets_all = one_hot(data.labels, classes);
    let steps_per_epoch = n.div_ceil(spec.batch_size);
    let total_steps = (steps_per_epoch * spec.epochs) as f64;
    let mut velocity = vec![0.0; model.param_count()];
    let mut history = History::default();
    let mut step = 0usize;
    let mixup = spec
        .mixup_alpha
        .map(|a| Beta::new(a, a))
        .transpose()
        .map_err(|e| Error::Config(e.to_string()))?;

    for epoch in 0..spec.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(spec.seed, STREAM_ID, epoch));
        let aux_order: Vec<usize> = aux.map_or_else(Vec::new, |a| {
            let mut o: Vec<usize> = (0..a.nrows()).collect();
            o.shuffle(&mut stream_rng(spec.seed, STREAM_AUX, epoch));
            o
        });
        let mut mix_rng = stream_rng(spec.seed, STREAM_MIXUP, epoch);
        let mut epoch_loss = 0.0;

        for (b, idx) in order.chunks(spec.batch_size).enumerate() {
            let xb = gather(&data.x, idx);
            let tb = gather(&targets_all.view(), idx);
            let lb: Vec<i64> = idx.iter().map(|&i| data.labels[i]).collect();
            let (xb, tb) = match &mixup {
                Some(beta) => {
                    let lambda: f64 = beta.sample(&mut mix_rng);
                    let mut perm: Vec<usize> = (0..idx.len()).collect();
                    perm.shuffle(&mut mix_rng);
                    mixup_batch(&xb.view(), &tb.view(), lambda, &perm)
                }
                None => (xb, tb),
            };
            let ab = aux.map(|a| {
                let m = a.nrows();
                let start = (b * spec.batch_size) % m;
                let ids: Vec<usize> = (0..spec.batch_size.min(m))
                    .map(|k| aux_order[(start + k) % m])
                    .collect();
                gather(&a, &ids)
            });
            let obj = Objective {
                x: xb.view(),
                targets: tb.view(),
                labels: &lb,
                aux: ab.as_ref().map(|a| a.view()),
                oe_lambda: spec.oe_lambda,
                arpl_lambda: spec.arpl_lambda,
            };
            let (loss, grads) = if spec.grad_shards > 1 {
                model.sharded_loss_and_grad(&obj, spec.grad_shards, spec.parallel)
            } else {
                model.loss_and_grad(&obj)
            };
            epoch_loss += loss;

            let lr = match spec.schedule {
                Schedule::Constant => spec.learning_rate,
                Schedule::Cosine => {
                    0.5 * spec.learning_rate
                        * (1.0 + (std::f64::consts::PI * step as f64 / total_steps).cos())
                }
            };
            let mut params = model.to_flat();
            for ((p, v), g) in params
                .iter_mut()
                .zip(velocity.iter_mut())
                .zip(grads.to_flat())
            {
                let g = g + spec.weight_decay * *p;
                *v = spec.momentum * *v + g;
                *p -= lr * *v;
            }
            model.set_flat(&params);
            step += 1;
        }

        let logits = model.forward(data.x)?.logits;
        history.epochs.push(EpochRecord {
            epoch,
            loss: epoch_loss / steps_per_epoch as f64,
            id_accuracy: accuracy(&logits.view(), data.labels),
        });
        if history.epochs.last().is_some_and(|r| !r.loss.is_finite()) {
            return Err(Error::Fit(format!("training diverged at epoch {epoch}")));
        }
    }
    Ok(history)
}

/// A 2-D bottleneck appended after the frozen penultimate layer, read out
/// to class logits by a second linear map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection2d {
    pub project: Layer,
    pub readout: Layer,
}

impl Projection2d {
    pub fn embed(&self, model: &Mlp, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let f = model.features(x)?;
        Ok(self.project.apply(&f.view()))
    }
}

/// Fits the 2-D head with cross-entropy while the backbone stays frozen.
pub fn project2d(
    model: &Mlp,
    x: ArrayView2<f64>,
    labels: &[i64],
    epochs: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<Projection2d> {
    let feats = model.features(x)?;
    let classes = model.class_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut head = Projection2d {
        project: Layer::init(&mut rng, feats.ncols(), 2, 1.0),
        readout: Layer::init(&mut rng, 2, classes, 1.0),
    };
    let targets = one_hot(labels, classes);
    let n = feats.nrows();
    let batch = 64;
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(seed, STREAM_ID, epoch));
        for idx in order.chunks(batch) {
            let f = feats.select(Axis(0), idx);
            let t = targets.select(Axis(0), idx);
            let e = head.project.apply(&f.view());
            let z = head.readout.apply(&e.view());
            let (_, mut dz) = soft_cross_entropy(&z, &t.view());
            dz /= idx.len() as f64;
            let d_readout_w = dz.t().dot(&e);
            let d_readout_b = dz.sum_axis(Axis(0));
            let de = dz.dot(&head.readout.weight);
            let d_project_w = de.t().dot(&f);
            let d_project_b = de.sum_axis(Axis(0));
            head.readout.weight.scaled_add(-learning_rate, &d_readout_w);
            head.readout.bias.scaled_add(-learning_rate, &d_readout_b);
            head.project.weight.scaled_add(-learning_rate, &d_project_w);
            head.project.bias.scaled_add(-learning_rate, &d_project_b);
        }
    }
    Ok(head)
}

/// ODIN settings for exported packs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdinSettings {
    pub epsilon: f64,
    pub temperature: f64,
}

/// Runs the model over `x` and packages logits, every hidden layer's
/// activations, labels and the classifier head.
pub fn export_pack(
    model: &Mlp,
    x: ArrayView2<f64>,
    labels: &[i64],
    role: Role,
    odin: Option<OdinSettings>,
) -> Result<ShiftPack> {
    if labels.len() != x.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "{} rows but {} labels",
            x.nrows(),
            labels.len()
        )));
    }
    let fwd = model.forward(x)?;
    let mut pack = ShiftPack::new(role, model.class_count())
        .with_metadata("producer", "shiftlab toynet")
        .with_metadata("seed", model.seed.to_string());
    pack.insert_matrix(LOGITS, &fwd.logits);
    for (l, a) in fwd.activations.iter().enumerate() {
        pack.insert_matrix(&format!("{FEATURES_PREFIX}layer_{}", l + 1), a);
    }
    pack.insert_labels(labels);
    match &model.head {
        Head::Linear(layer) => {
            pack.insert_matrix(FC_WEIGHT, &layer.weight);
            pack.insert_vector(FC_BIAS, &layer.bias.to_vec());
        }
        Head::Reciprocal(rp) => {
            // ‖f − P_k‖² = ‖f‖² + (−2P_k)·f + ‖P_k‖²
            pack.insert_matrix(FC_WEIGHT, &(&rp.points * -2.0));
            let bias: Vec<f64> = rp.points.rows().into_iter().map(|r| r.dot(&r)).collect();
            pack.insert_vector(FC_BIAS, &bias);
            pack.metadata
                .insert(META_HEAD.into(), HEAD_RECIPROCAL.into());
        }
    }
    if let Some(o) = odin {
        pack.insert_matrix(
            PERTURBED_LOGITS,
            &model.odin_perturb(x, o.epsilon, o.temperature)?,
        );
        pack.metadata
            .insert("odin_epsilon".into(), o.epsilon.to_string());
        pack.metadata
            .insert("odin_temperature".into(), o.temperature.to_string());
    }
    Ok(pack)
}

/// Random parameter perturbation helper for gradient probes.
pub fn random_probe_indices(count: usize, params: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.random_range(0..params)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scores::{recompute_logits, Rule, RuleParams, RuleSpec, Scorer};
    use crate::shiftpack::validate_pack;
    use crate::synth::{to_matrix, ShiftScenario};
    use ndarray::array;

    fn rand_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(&mut rng))
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
    }

    /// Central finite differences on every parameter.
    fn check_gradients(model: &Mlp, obj: &Objective) {
        let (_, g) = model.loss_and_grad(obj);
        let analytic = g.to_flat();
        let base = model.to_flat();
        let h = 1e-5;
        let mut m = model.clone();
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += h;
            m.set_flat(&p);
            let up = m.loss(obj);
            p[i] -= 2.0 * h;
            m.set_flat(&p);
            let down = m.loss(obj);
            let numeric = (up - down) / (2.0 * h);
            assert!(
                rel_err(analytic[i], numeric) < 1e-4,
                "param {i}: {} vs {numeric}",
                analytic[i]
            );
        }
    }

    #[test]
    fn zero_network_gives_zero_logits() {
        let mut m = Mlp::new(&[3, 4, 2], 0).unwrap();
        let zeros = vec![0.0; m.param_count()];
        m.set_flat(&zeros);
        let f = m.forward(rand_matrix(5, 3, 1).view()).unwrap();
        assert!(f.logits.iter().all(|&v| v == 0.0));
        assert_eq!(f.activations.len(), 1);
    }

    #[test]
    fn single_layer_matches_affine_head() {
        let m = Mlp::new(&[3, 2], 4).unwrap();
        let x = rand_matrix(6, 3, 2);
        let Head::Linear(layer) = &m.head else {
            unreachable!()
        };
        let expected = recompute_logits(x.view(), layer.weight.view(), layer.bias.view()).unwrap();
        assert_eq!(m.forward(x.view()).unwrap().logits, expected);
    }

    #[test]
    fn forward_is_deterministic() {
        let x = rand_matrix(4, 5, 3);
        let a = Mlp::new(&[5, 8, 3], 11)
            .unwrap()
            .forward(x.view())
            .unwrap()
            .logits;
        let b = Mlp::new(&[5, 8, 3], 11)
            .unwrap()
            .forward(x.view())
            .unwrap()
            .logits;
        assert_eq!(a, b);
        assert!(Mlp::new(&[4, 3], 0).unwrap().forward(x.view()).is_err());
    }

    #[test]
    fn ce_gradients_match_finite_differences() {
        let m = Mlp::new(&[4, 6, 3], 5).unwrap();
        let x = rand_matrix(7, 4, 6);
        let labels = [0, 1, 2, 0, 1, 2, 2];
        let t = one_hot(&labels, 3);
        check_gradients(
            &m,
            &Objective {
                x: x.view(),
                targets: t.view(),
                labels: &labels,
                aux: None,
                oe_lambda: 0.0,
                arpl_lambda: 0.0,
            },
        );
    }

    #[test]
    fn oe_gradients_match_finite_differences() {
        let m = Mlp::new(&[4, 6, 3], 8).unwrap();
        let x = rand_matrix(5, 4, 9);
        let aux = rand_matrix(4, 4, 10);
        let labels = [2, 1, 0, 0, 1];
        let t = one_hot(&labels, 3);
        check_gradients(
            &m,
            &Objective {
                x: x.view(),
                targets: t.view(),
                labels: &labels,
                aux: Some(aux.view()),
                oe_lambda: 0.7,
                arpl_lambda: 0.0,
            },
        );
    }

    #[test]
    fn arpl_gradients_match_finite_differences() {
        let m = Mlp::new_reciprocal(&[4, 6, 3], 12, 0.5).unwrap();
        let x = rand_matrix(5, 4, 13);
        let labels = [0, 1, 2, 1, 0];
        let t = one_hot(&labels, 3);
        check_gradients(
            &m,
            &Objective {
                x: x.view(),
                targets: t.view(),
                labels: &labels,
                aux: None,
                oe_lambda: 0.0,
                arpl_lambda: 0.3,
            },
        );
    }

    #[test]
    fn mixed_targets_gradients_match_finite_differences() {
        let m = Mlp::new(&[3, 5, 4, 2], 21).unwrap();
        let x = rand_matrix(4, 3, 22);
        let t = array![[0.3, 0.7], [1.0, 0.0], [0.5, 0.5], [0.1, 0.9]];
        check_gradients(
            &m,
            &Objective {
                x: x.view(),
                targets: t.view(),
                labels: &[],
                aux: None,
                oe_lambda: 0.0,
                arpl_lambda: 0.0,
            },
        );
    }

    #[test]
    fn oe_term_vanishes_at_uniform_softmax() {
        let mut m = Mlp::new(&[3, 4, 3], 1).unwrap();
        if let Head::Linear(l) = &mut m.head {
            l.weight.fill(0.0);
            l.bias.fill(0.25);
        }
        let aux = rand_matrix(6, 3, 2);
        let empty = Array2::zeros((0, 3));
        let obj = Objective {
            x: empty.view(),
            targets: empty.view(),
            labels: &[],
            aux: Some(aux.view()),
            oe_lambda: 1.0,
            arpl_lambda: 0.0,
        };
        let (_, g) = m.loss_and_grad(&obj);
        assert!(g.to_flat().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let m = Mlp::new(&[4, 8, 3], 31).unwrap();
        let x = rand_matrix(3, 4, 32);
        let t = 2.0;
        let g = m.input_gradient(x.view(), t).unwrap();
        let log_msp = |x: &Array2<f64>| -> Vec<f64> {
            let z = m.forward(x.view()).unwrap().logits;
            crate::scores::msp(z.view(), t)
                .unwrap()
                .iter()
                .map(|v| v.ln())
                .collect()
        };
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..4 {
                let mut up = x.clone();
                up[[i, j]] += h;
                let mut down = x.clone();
                down[[i, j]] -= h;
                let numeric = (log_msp(&up)[i] - log_msp(&down)[i]) / (2.0 * h);
                assert!(
                    rel_err(g[[i, j]], numeric) < 1e-3,
                    "{} vs {numeric}",
                    g[[i, j]]
                );
            }
        }
    }

    #[test]
    fn odin_zero_epsilon_is_forward() {
        let m = Mlp::new(&[4, 8, 3], 3).unwrap();
        let x = rand_matrix(5, 4, 4);
        assert_eq!(
            m.odin_perturb(x.view(), 0.0, 1000.0).unwrap(),
            m.forward(x.view()).unwrap().logits
        );
        assert_ne!(
            m.odin_perturb(x.view(), 0.01, 1000.0).unwrap(),
            m.forward(x.view()).unwrap().logits
        );
        assert!(m.odin_perturb(x.view(), -1.0, 1.0).is_err());
    }

    #[test]
    fn odin_zero_epsilon_matches_post_hoc_path() {
        let m = Mlp::new(&[4, 8, 3], 3).unwrap();
        let x = rand_matrix(5, 4, 4);
        let pack = export_pack(
            &m,
            x.view(),
            &[0; 5],
            Role::IdTest,
            Some(OdinSettings {
                epsilon: 0.0,
                temperature: 1000.0,
            }),
        )
        .unwrap();
        let params = RuleParams {
            temperature: 1000.0,
            ..Default::default()
        };
        let with = Scorer::fit(RuleSpec::plain(Rule::Odin), params, &pack)
            .unwrap()
            .score(&pack)
            .unwrap();
        assert!(!with.rule.degenerate);
        let logits = pack.logits().unwrap();
        let (plain, _) = crate::scores::odin_temperature(logits.view(), 1000.0, None).unwrap();
        assert_eq!(with.values, plain);
    }

    fn separable() -> (Array2<f64>, Vec<i64>) {
        let s = ShiftScenario::generated(2, 2, 2, 0, 4.0, 0.5);
        let (x, y) = to_matrix(&s.gen_id(400, "train"));
        (x, y)
    }

    #[test]
    fn ce_training_separates_two_classes() {
        let (x, y) = separable();
        let spec = TrainSpec {
            hidden: vec![8],
            epochs: 10,
            ..TrainSpec::new(Loss::Ce)
        };
        let mut m = Mlp::for_spec(2, 2, &spec).unwrap();
        let h = train(
            &mut m,
            &TrainData {
                x: x.view(),
                labels: &y,
                aux: None,
            },
            &spec,
        )
        .unwrap();
        assert!(h.epochs.last().unwrap().id_accuracy >= 0.99, "{h:?}");
        assert!(h.epochs.last().unwrap().loss < h.epochs[0].loss);
    }

    #[test]
    fn ce_gradient_shrinks_on_two_points() {
        let x = array![[1.0, 0.0], [-1.0, 0.0]];
        let y = [0, 1];
        let spec = TrainSpec {
            hidden: vec![4],
            batch_size: 2,
            learning_rate: 0.1,
            schedule: Schedule::Constant,
            ..TrainSpec::new(Loss::Ce)
        };
        let mut m = Mlp::for_spec(2, 2, &spec).unwrap();
        let t = one_hot(&y, 2);
        let grad_norm = |m: &Mlp| {
            let obj = Objective {
                x: x.view(),
                targets: t.view(),
                labels: &y,
                aux: None,
                oe_lambda: 0.0,
                arpl_lambda: 0.0,
            };
            m.loss_and_grad(&obj)
                .1
                .to_flat()
                .iter()
                .map(|g| g * g)
                .sum::<f64>()
                .sqrt()
        };
        let before = grad_norm(&m);
        let data = TrainData {
            x: x.view(),
            labels: &y,
            aux: None,
        };
        for epochs in [50, 200] {
            let s = TrainSpec {
                epochs,
                ..spec.clone()
            };
            let mut mm = m.clone();
            train(&mut mm, &data, &s).unwrap();
            assert!(grad_norm(&mm) < before);
            m = mm;
        }
        assert!(grad_norm(&m) < 0.05 * before);
    }

    #[test]
    fn oe_with_zero_lambda_equals_ce() {
        let (x, y) = separable();
        let aux = rand_matrix(100, 2, 5);
        let ce = TrainSpec {
            hidden: vec![6],
            epochs: 3,
            ..TrainSpec::new(Loss::Ce)
        };
        let oe = TrainSpec {
            loss: Loss::Oe,
            oe_lambda: 0.0,
            ..ce.clone()
        };
        let mut a = Mlp::for_spec(2, 2, &ce).unwrap();
        let mut b = a.clone();
        train(
            &mut a,
            &TrainData {
                x: x.view(),
                labels: &y,
                aux: None,
            },
            &ce,
        )
        .unwrap();
        train(
            &mut b,
            &TrainData {
                x: x.view(),
                labels: &y,
                aux: Some(aux.view()),
            },
            &oe,
        )
        .unwrap();
        assert_eq!(a.to_flat(), b.to_flat());
    }

    #[test]
    fn oe_requires_aux() {
        let (x, y) = separable();
        let spec = TrainSpec::new(Loss::Oe);
        let mut m = Mlp::for_spec(2, 2, &spec).unwrap();
        assert!(train(
            &mut m,
            &TrainData {
                x: x.view(),
                labels: &y,
                aux: None
            },
            &spec
        )
        .is_err());
    }

    #[test]
    fn seeded_training_is_reproducible() {
        let (x, y) = separable();
        let spec = TrainSpec {
            hidden: vec![6],
            epochs: 2,
            mixup_alpha: Some(0.4),
            ..TrainSpec::new(Loss::Ce)
        };
        let run = || {
            let mut m = Mlp::for_spec(2, 2, &spec).unwrap();
            train(
                &mut m,
                &TrainData {
                    x: x.view(),
                    labels: &y,
                    aux: None,
                },
                &spec,
            )
            .unwrap();
            m.to_flat()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn mixup_with_unit_lambda_is_identity() {
        let x = rand_matrix(4, 3, 1);
        let t = one_hot(&[0, 1, 1, 0], 2);
        let (xm, tm) = mixup_batch(&x.view(), &t.view(), 1.0, &[3, 2, 1, 0]);
        assert_eq!(xm, x);
        assert_eq!(tm, t);
        let (xm, tm) = mixup_batch(&x.view(), &t.view(), 0.0, &[3, 2, 1, 0]);
        assert_eq!(xm.row(0), x.row(3));
        assert_eq!(tm.row(0), t.row(3));
    }

    #[test]
    fn parallel_shards_match_serial_shards() {
        let (x, y) = separable();
        let aux = rand_matrix(120, 2, 9);
        let base = TrainSpec {
            loss: Loss::Oe,
            hidden: vec![6],
            epochs: 2,
            grad_shards: 4,
            ..TrainSpec::default()
        };
        let run = |parallel: bool| {
            let spec = TrainSpec {
                parallel,
                ..base.clone()
            };
            let mut m = Mlp::for_spec(2, 2, &spec).unwrap();
            train(
                &mut m,
                &TrainData {
                    x: x.view(),
                    labels: &y,
                    aux: Some(aux.view()),
                },
                &spec,
            )
            .unwrap();
            m.to_flat()
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn sharded_gradient_equals_full_batch() {
        let m = Mlp::new(&[3, 5, 2], 3).unwrap();
        let x = rand_matrix(10, 3, 4);
        let aux = rand_matrix(6, 3, 5);
        let labels = [0, 1, 0, 1, 1, 0, 0, 1, 1, 0];
        let t = one_hot(&labels, 2);
        let obj = Objective {
            x: x.view(),
            targets: t.view(),
            labels: &labels,
            aux: Some(aux.view()),
            oe_lambda: 0.5,
            arpl_lambda: 0.0,
        };
        let (l1, g1) = m.loss_and_grad(&obj);
        let (l2, g2) = m.sharded_loss_and_grad(&obj, 3, false);
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.to_flat().iter().zip(g2.to_flat()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn arpl_first_epoch_pushes_features_from_reciprocal_points() {
        let s = ShiftScenario::desk_default(4);
        let (x, y) = to_matrix(&s.gen_id(2000, "train"));
        for seed in 0..3 {
            let spec = TrainSpec {
                epochs: 1,
                seed,
                ..TrainSpec::new(Loss::Arpl)
            };
            let mean_dist = |m: &Mlp| {
                let f = m.features(x.view()).unwrap();
                let Head::Reciprocal(rp) = &m.head else {
                    unreachable!()
                };
                f.rows()
                    .into_iter()
                    .zip(&y)
                    .map(|(r, &k)| {
                        (&r - &rp.points.row(k as usize))
                            .mapv(|v| v * v)
                            .sum()
                            .sqrt()
                    })
                    .sum::<f64>()
                    / y.len() as f64
            };
            let mut m = Mlp::for_spec(16, 6, &spec).unwrap();
            let before = mean_dist(&m);
            train(
                &mut m,
                &TrainData {
                    x: x.view(),
                    labels: &y,
                    aux: None,
                },
                &spec,
            )
            .unwrap();
            assert!(mean_dist(&m) > before, "seed {seed}");
        }
    }

    #[test]
    fn loss_head_mismatch_rejected() {
        let (x, y) = separable();
        let mut m = Mlp::new(&[2, 4, 2], 0).unwrap();
        let spec = TrainSpec::new(Loss::Arpl);
        assert!(train(
            &mut m,
            &TrainData {
                x: x.view(),
                labels: &y,
                aux: None
            },
            &spec
        )
        .is_err());
    }

    #[test]
    fn projection_leaves_backbone_untouched() {
        let (x, y) = separable();
        let m = Mlp::new(&[2, 6, 2], 1).unwrap();
        let before = m.clone();
        let p = project2d(&m, x.view(), &y, 2, 0.05, 3).unwrap();
        assert_eq!(m, before);
        assert_eq!(p, project2d(&m, x.view(), &y, 2, 0.05, 3).unwrap());
        assert_eq!(p.embed(&m, x.view()).unwrap().ncols(), 2);
    }

    #[test]
    fn export_is_valid_and_head_consistent() {
        let s = ShiftScenario::desk_default(2);
        let (x, y) = to_matrix(&s.gen_id(50, "test"));
        let m = Mlp::new(&[16, 12, 10, 6], 2).unwrap();
        let pack = export_pack(&m, x.view(), &y, Role::IdTest, None).unwrap();
        assert!(validate_pack(&pack).is_empty());
        assert_eq!(
            pack.feature_layers(),
            vec!["features/layer_1", "features/layer_2"]
        );
        let f = pack.penultimate_features().unwrap();
        let w = pack.matrix(FC_WEIGHT).unwrap();
        let b = Array1::from(pack.vector(FC_BIAS).unwrap());
        let re = recompute_logits(f.view(), w.view(), b.view()).unwrap();
        let stored = pack.logits().unwrap();
        assert!(re
            .iter()
            .zip(stored.iter())
            .all(|(a, b)| (a - b).abs() < 1e-5));

        let (ox, oy) = to_matrix(&s.gen_semantic_ood(20));
        let ood = export_pack(&m, ox.view(), &oy, Role::OodTest, None).unwrap();
        assert!(ood.labels().unwrap().iter().all(|&l| l == -1));
    }

    #[test]
    fn reciprocal_export_round_trips_through_head() {
        let s = ShiftScenario::desk_default(2);
        let (x, y) = to_matrix(&s.gen_id(30, "test"));
        let m = Mlp::new_reciprocal(&[16, 8, 6], 2, 1.0).unwrap();
        let pack = export_pack(&m, x.view(), &y, Role::IdTest, None).unwrap();
        let f = pack.penultimate_features().unwrap();
        let re = crate::scores::pack_head_logits(&pack, f.view()).unwrap();
        let stored = pack.logits().unwrap();
        for (a, b) in re.iter().zip(stored.iter()) {
            assert!((a - b).abs() < 1e-4 * b.abs().max(1.0));
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = Mlp::new_reciprocal(&[3, 4, 2], 9, 2.0).unwrap();
        let mut buf = Vec::new();
        m.write_checkpoint(&mut buf).unwrap();
        assert_eq!(&buf[0..4], b"SLCK");
        assert_eq!(Mlp::read_checkpoint(buf.as_slice()).unwrap(), m);
        buf[4] = 9;
        assert!(Mlp::read_checkpoint(buf.as_slice()).is_err());
    }

    #[test]
    fn train_spec_toml() {
        let spec =
            TrainSpec::from_toml_str("loss = \"oe\"\nepochs = 3\nmixup_alpha = 0.2").unwrap();
        assert_eq!(spec.loss, Loss::Oe);
        assert_eq!(spec.mixup_alpha, Some(0.2));
        assert!(TrainSpec::from_toml_str("epochs = 0").is_err());
        assert!(TrainSpec::from_toml_str("loss = \"arpl\"\nmixup_alpha = 0.2").is_err());
    }
}
