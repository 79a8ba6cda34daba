//! Post-hoc scoring rules and activation transforms.
//!
//! Every rule returns scores oriented so that a higher value means "more
//! in-distribution". Percentiles use the nearest-rank definition throughout.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::shiftpack::{ShiftPack, FC_BIAS, FC_WEIGHT, PERTURBED_LOGITS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rule {
    Msp,
    Mls,
    Energy,
    Odin,
    GradNorm,
    She,
}

impl Rule {
    pub const ALL: [Rule; 6] = [
        Rule::Msp,
        Rule::Mls,
        Rule::Energy,
        Rule::Odin,
        Rule::GradNorm,
        Rule::She,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Rule::Msp => "msp",
            Rule::Mls => "mls",
            Rule::Energy => "energy",
            Rule::Odin => "odin",
            Rule::GradNorm => "gradnorm",
            Rule::She => "she",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    React,
    Ash,
}

impl Transform {
    pub fn as_str(self) -> &'static str {
        match self {
            Transform::React => "react",
            Transform::Ash => "ash",
        }
    }
}

/// A rule identifier such as `energy` or `react+mls`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RuleSpec {
    pub transform: Option<Transform>,
    pub rule: Rule,
}

impl RuleSpec {
    pub const fn plain(rule: Rule) -> Self {
        Self {
            transform: None,
            rule,
        }
    }

    pub const fn with(transform: Transform, rule: Rule) -> Self {
        Self {
            transform: Some(transform),
            rule,
        }
    }
}

impl fmt::Display for RuleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.transform {
            Some(t) => write!(f, "{}+{}", t.as_str(), self.rule.as_str()),
            None => f.write_str(self.rule.as_str()),
        }
    }
}

impl FromStr for RuleSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse_rule = |name: &str| {
            Rule::ALL
                .into_iter()
                .find(|r| r.as_str() == name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown scoring rule '{s}'")))
        };
        match s.split_once('+') {
            None => Ok(RuleSpec::plain(parse_rule(s)?)),
            Some((t, r)) => {
                let transform = match t {
                    "react" => Transform::React,
                    "ash" => Transform::Ash,
                    _ => {
                        return Err(Error::InvalidArgument(format!(
                            "unknown transform in '{s}'"
                        )))
                    }
                };
                Ok(RuleSpec::with(transform, parse_rule(r)?))
            }
        }
    }
}

impl Serialize for RuleSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RuleSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AshVariant {
    #[default]
    Prune,
    Scale,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuleParams {
    pub temperature: f64,
    pub react_percentile: f64,
    pub ash_percentile: f64,
    pub ash_variant: AshVariant,
    pub odin_epsilon: f64,
}

impl Default for RuleParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            react_percentile: 90.0,
            ash_percentile: 65.0,
            ash_variant: AshVariant::Prune,
            odin_epsilon: 0.0,
        }
    }
}

impl RuleParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        for (name, p) in [
            ("react_percentile", self.react_percentile),
            ("ash_percentile", self.ash_percentile),
        ] {
            check_percentile(name, p)?;
        }
        if !(self.odin_epsilon >= 0.0 && self.odin_epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "odin_epsilon must be non-negative, got {}",
                self.odin_epsilon
            )));
        }
        Ok(())
    }
}

fn check_percentile(name: &str, p: f64) -> Result<()> {
    if (0.0..=100.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "{name} must lie in [0, 100], got {p}"
        )))
    }
}

/// Identifies how a score vector was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleRecord {
    pub spec: RuleSpec,
    pub params: RuleParams,
    /// Set when ODIN ran without input perturbation (ε = 0 fallback).
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub rule: RuleRecord,
    pub values: Vec<f64>,
}

fn check_finite(what: &str, m: &ArrayView2<f64>) -> Result<()> {
    match m.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::InvalidArgument(format!(
            "non-finite {what} at flat index {i}"
        ))),
        None => Ok(()),
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {t}"
        )))
    }
}

fn row_max(row: ArrayView1<f64>) -> f64 {
    row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Numerically stable `log Σ exp(row / t)`.
fn log_sum_exp(row: ArrayView1<f64>, t: f64) -> f64 {
    let m = row_max(row) / t;
    m + row.iter().map(|&z| (z / t - m).exp()).sum::<f64>().ln()
}

/// Softmax of `row / t`.
pub fn softmax(row: ArrayView1<f64>, t: f64) -> Array1<f64> {
    let m = row_max(row) / t;
    let mut e = row.mapv(|z| (z / t - m).exp());
    let s = e.sum();
    e /= s;
    e
}

/// Index of the first maximal entry of each row.
pub fn argmax_rows(m: &ArrayView2<f64>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

/// Maximum softmax probability.
pub fn msp(logits: ArrayView2<f64>, temperature: f64) -> Result<Vec<f64>> {
    check_temperature(temperature)?;
    if logits.ncols() < 2 {
        return Err(Error::InvalidArgument(
            "msp needs at least two classes".into(),
        ));
    }
    check_finite("logits", &logits)?;
    Ok(logits
        .rows()
        .into_iter()
        .map(|row| {
            // max_k softmax_k = 1 / Σ exp((z_k - z_max)/T)
            let m = row_max(row);
            1.0 / row
                .iter()
                .map(|&z| ((z - m) / temperature).exp())
                .sum::<f64>()
        })
        .collect())
}

/// Maximum logit.
pub fn mls(logits: ArrayView2<f64>) -> Result<Vec<f64>> {
    if logits.ncols() < 1 {
        return Err(Error::InvalidArgument(
            "mls needs at least one class".into(),
        ));
    }
    check_finite("logits", &logits)?;
    Ok(logits.rows().into_iter().map(row_max).collect())
}

/// Negative free energy `T · log Σ exp(z / T)`.
pub fn energy(logits: ArrayView2<f64>, temperature: f64) -> Result<Vec<f64>> {
    check_temperature(temperature)?;
    if logits.ncols() < 1 {
        return Err(Error::InvalidArgument(
            "energy needs at least one class".into(),
        ));
    }
    check_finite("logits", &logits)?;
    Ok(logits
        .rows()
        .into_iter()
        .map(|row| temperature * log_sum_exp(row, temperature))
        .collect())
}

/// Temperature-scaled MSP on perturbed logits when a full-model producer
/// supplied them. Without them the result is plain temperature MSP and the
/// returned flag reports the degenerate (ε = 0) case.
pub fn odin_temperature(
    logits: ArrayView2<f64>,
    temperature: f64,
    perturbed_logits: Option<ArrayView2<f64>>,
) -> Result<(Vec<f64>, bool)> {
    match perturbed_logits {
        Some(p) => {
            if p.dim() != logits.dim() {
                return Err(Error::ShapeMismatch(format!(
                    "perturbed logits {:?} vs logits {:?}",
                    p.dim(),
                    logits.dim()
                )));
            }
            Ok((msp(p, temperature)?, false))
        }
        None => Ok((msp(logits, temperature)?, true)),
    }
}

/// Closed-form GradNorm: `‖softmax(z/T) − u‖₁ · ‖f‖₁`, the L1 norm of the
/// gradient of KL(u ‖ softmax) with respect to the final linear layer.
pub fn gradnorm(
    logits: ArrayView2<f64>,
    features: ArrayView2<f64>,
    temperature: f64,
) -> Result<Vec<f64>> {
    check_temperature(temperature)?;
    if logits.nrows() != features.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "logits have {} rows, features {}",
            logits.nrows(),
            features.nrows()
        )));
    }
    check_finite("logits", &logits)?;
    let u = 1.0 / logits.ncols() as f64;
    Ok(logits
        .rows()
        .into_iter()
        .zip(features.rows())
        .map(|(z, f)| {
            let p = softmax(z, temperature);
            let dev: f64 = p.iter().map(|&pk| (pk - u).abs()).sum();
            dev * f.iter().map(|v| v.abs()).sum::<f64>()
        })
        .collect())
}

/// Per-class mean features of correctly classified training samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShePrototypes {
    pub means: Array2<f64>,
    pub counts: Vec<usize>,
}

pub fn she_fit(
    train_features: ArrayView2<f64>,
    train_logits: ArrayView2<f64>,
    labels: &[i64],
) -> Result<ShePrototypes> {
    let (n, d) = train_features.dim();
    let c = train_logits.ncols();
    if train_logits.nrows() != n || labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "features {n} rows, logits {} rows, labels {}",
            train_logits.nrows(),
            labels.len()
        )));
    }
    let mut sums = Array2::<f64>::zeros((c, d));
    let mut counts = vec![0usize; c];
    for ((f, pred), &y) in train_features
        .rows()
        .into_iter()
        .zip(argmax_rows(&train_logits))
        .zip(labels)
    {
        if y < 0 || y as usize >= c {
            return Err(Error::InvalidArgument(format!(
                "training label {y} outside [0, {c})"
            )));
        }
        if pred == y as usize {
            let mut row = sums.row_mut(pred);
            row += &f;
            counts[pred] += 1;
        }
    }
    if let Some(k) = counts.iter().position(|&k| k == 0) {
        return Err(Error::Fit(format!(
            "class {k} has no correctly classified training sample"
        )));
    }
    for (mut row, &k) in sums.rows_mut().into_iter().zip(&counts) {
        row /= k as f64;
    }
    Ok(ShePrototypes {
        means: sums,
        counts,
    })
}

/// Inner product between each feature row and the prototype of its
/// predicted class.
pub fn she_score(
    features: ArrayView2<f64>,
    logits: ArrayView2<f64>,
    prototypes: &ShePrototypes,
) -> Result<Vec<f64>> {
    if features.ncols() != prototypes.means.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "feature width {} vs prototype width {}",
            features.ncols(),
            prototypes.means.ncols()
        )));
    }
    if logits.ncols() != prototypes.means.nrows() || logits.nrows() != features.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} incompatible with {} prototypes over {} samples",
            logits.dim(),
            prototypes.means.nrows(),
            features.nrows()
        )));
    }
    Ok(features
        .rows()
        .into_iter()
        .zip(argmax_rows(&logits))
        .map(|(f, k)| f.dot(&prototypes.means.row(k)))
        .collect())
}

/// Nearest-rank percentile: the value at rank `max(1, ⌈p/100 · n⌉)` of the
/// ascending order. Reorders `values`.
pub fn nearest_rank_percentile(values: &mut [f64], p: f64) -> f64 {
    assert!(!values.is_empty());
    let n = values.len();
    let rank = ((p / 100.0) * n as f64).ceil().clamp(1.0, n as f64) as usize;
    let (_, v, _) = values.select_nth_unstable_by(rank - 1, f64::total_cmp);
    *v
}

/// Global clipping threshold: the `p`-th percentile of all ID activations.
pub fn react_threshold(id_features: ArrayView2<f64>, percentile: f64) -> Result<f64> {
    check_percentile("percentile", percentile)?;
    if id_features.is_empty() {
        return Err(Error::EmptyInput(
            "react threshold needs ID activations".into(),
        ));
    }
    let mut flat: Vec<f64> = id_features.iter().copied().collect();
    Ok(nearest_rank_percentile(&mut flat, percentile))
}

pub fn react_transform(features: ArrayView2<f64>, threshold: f64) -> Array2<f64> {
    features.mapv(|v| v.min(threshold))
}

/// Per-sample activation shaping. Values strictly below the row's `p`-th
/// percentile are zeroed; `Scale` then rescales survivors so the row sum
/// matches its pre-pruning sum (factor 1 when nothing survives).
pub fn ash_transform(
    features: ArrayView2<f64>,
    percentile: f64,
    variant: AshVariant,
) -> Result<Array2<f64>> {
    check_percentile("percentile", percentile)?;
    let mut out = features.to_owned();
    if features.ncols() == 0 {
        return Ok(out);
    }
    let mut scratch = vec![0.0; features.ncols()];
    for mut row in out.rows_mut() {
        scratch
            .iter_mut()
            .zip(row.iter())
            .for_each(|(s, &v)| *s = v);
        let t = nearest_rank_percentile(&mut scratch, percentile);
        let before: f64 = row.sum();
        row.mapv_inplace(|v| if v < t { 0.0 } else { v });
        if variant == AshVariant::Scale {
            let after: f64 = row.sum();
            let factor = if after == 0.0 { 1.0 } else { before / after };
            row *= factor;
        }
    }
    Ok(out)
}

/// Affine classifier head: `logits[i] = W · features[i] + b`.
pub fn recompute_logits(
    features: ArrayView2<f64>,
    weight: ArrayView2<f64>,
    bias: ArrayView1<f64>,
) -> Result<Array2<f64>> {
    if weight.ncols() != features.ncols() || weight.nrows() != bias.len() {
        return Err(Error::ShapeMismatch(format!(
            "features {:?}, fc.weight {:?}, fc.bias [{}]",
            features.dim(),
            weight.dim(),
            bias.len()
        )));
    }
    Ok(features.dot(&weight.t()) + bias)
}

/// Applies the pack's stored head. Reciprocal-point heads add `‖f‖²` to the
/// affine part.
pub fn pack_head_logits(pack: &ShiftPack, features: ArrayView2<f64>) -> Result<Array2<f64>> {
    let w = pack.matrix(FC_WEIGHT)?;
    let b = Array1::from(pack.vector(FC_BIAS)?);
    let mut logits = recompute_logits(features, w.view(), b.view())?;
    if pack.has_reciprocal_head() {
        for (mut row, f) in logits.rows_mut().into_iter().zip(features.rows()) {
            row += f.dot(&f);
        }
    }
    Ok(logits)
}

/// A rule specification bound to everything it needs from ID training data.
#[derive(Debug, Clone)]
pub struct Scorer {
    pub spec: RuleSpec,
    pub params: RuleParams,
    pub react_threshold: Option<f64>,
    pub prototypes: Option<ShePrototypes>,
}

/// Logits and features after the optional activation transform.
struct Prepared {
    logits: Array2<f64>,
    features: Option<Array2<f64>>,
}

impl Scorer {
    /// Fits the data-dependent parts of the rule (ReAct threshold, SHE
    /// prototypes) on `reference`, normally the `id_train` pack.
    pub fn fit(spec: RuleSpec, params: RuleParams, reference: &ShiftPack) -> Result<Self> {
        params.validate()?;
        let mut scorer = Scorer {
            spec,
            params,
            react_threshold: None,
            prototypes: None,
        };
        if spec.transform == Some(Transform::React) {
            let f = reference.penultimate_features()?;
            scorer.react_threshold = Some(react_threshold(f.view(), params.react_percentile)?);
        }
        if spec.rule == Rule::She {
            let prepared = scorer.prepare(reference)?;
            let features = prepared
                .features
                .ok_or_else(|| Error::MissingTensor("features/*".into()))?;
            scorer.prototypes = Some(she_fit(
                features.view(),
                prepared.logits.view(),
                &reference.labels()?,
            )?);
        }
        Ok(scorer)
    }

    fn needs_features(&self) -> bool {
        self.spec.transform.is_some() || matches!(self.spec.rule, Rule::GradNorm | Rule::She)
    }

    fn prepare(&self, pack: &ShiftPack) -> Result<Prepared> {
        let stored = pack.logits()?;
        if !self.needs_features() {
            return Ok(Prepared {
                logits: stored,
                features: None,
            });
        }
        let raw = pack.penultimate_features()?;
        let Some(transform) = self.spec.transform else {
            return Ok(Prepared {
                logits: stored,
                features: Some(raw),
            });
        };
        let shaped = match transform {
            Transform::React => {
                let c = self
                    .react_threshold
                    .ok_or_else(|| Error::Fit("ReAct threshold not fitted".into()))?;
                react_transform(raw.view(), c)
            }
            Transform::Ash => ash_transform(
                raw.view(),
                self.params.ash_percentile,
                self.params.ash_variant,
            )?,
        };
        let mut logits = pack_head_logits(pack, shaped.view())?;
        // Rows the transform left untouched keep the producer's logits.
        for (i, (a, b)) in raw.rows().into_iter().zip(shaped.rows()).enumerate() {
            if a == b {
                logits.row_mut(i).assign(&stored.row(i));
            }
        }
        Ok(Prepared {
            logits,
            features: Some(shaped),
        })
    }

    pub fn score(&self, pack: &ShiftPack) -> Result<ScoreVector> {
        let prepared = self.prepare(pack)?;
        let logits = prepared.logits.view();
        let t = self.params.temperature;
        let mut degenerate = false;
        let values = match self.spec.rule {
            Rule::Msp => msp(logits, t)?,
            Rule::Mls => mls(logits)?,
            Rule::Energy => energy(logits, t)?,
            Rule::Odin => {
                let perturbed = match (self.spec.transform, pack.contains(PERTURBED_LOGITS)) {
                    (None, true) => Some(pack.matrix(PERTURBED_LOGITS)?),
                    _ => None,
                };
                let (v, d) = odin_temperature(logits, t, perturbed.as_ref().map(|p| p.view()))?;
                degenerate = d;
                v
            }
            Rule::GradNorm => gradnorm(logits, prepared.features.as_ref().unwrap().view(), t)?,
            Rule::She => {
                let protos = self
                    .prototypes
                    .as_ref()
                    .ok_or_else(|| Error::Fit("SHE prototypes not fitted".into()))?;
                she_score(prepared.features.as_ref().unwrap().view(), logits, protos)?
            }
        };
        Ok(ScoreVector {
            rule: RuleRecord {
                spec: self.spec,
                params: self.params,
                degenerate,
            },
            values,
        })
    }
}

/// Closed-set predictions from the pack's stored logits.
pub fn pack_predictions(pack: &ShiftPack) -> Result<Vec<usize>> {
    Ok(argmax_rows(&pack.logits()?.view()))
}
