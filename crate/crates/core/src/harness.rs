//! Cross-benchmarking harness.
//!
//! A matrix run crosses training methods (trained on a synthetic scenario,
//! or loaded from external packs) with scoring rules, shift datasets and
//! seeds. Cells are isolated: a failing cell is recorded with its reason and
//! the run continues. Results are aggregated in a fixed key order so the
//! output bytes do not depend on scheduling.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::{self, OaaInputs};
use crate::proximity::{self, FeatureSet};
use crate::scores::{pack_predictions, Rule, RuleParams, RuleSpec, Scorer, Transform};
use crate::shiftpack::{read_pack_file, Role, ShiftPack, PERTURBED_LOGITS};
use crate::synth::{to_matrix, ShiftScenario};
use crate::toynet::{export_pack, train, Loss, Mlp, TrainData, TrainSpec};

/// Bins per layer in activation histograms.
pub const HISTOGRAM_BINS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftKind {
    Semantic,
    Covariate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Auroc,
    Aupr,
    Oscr,
    Moaa,
    IdAccuracy,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Auroc, Metric::Aupr, Metric::Oscr, Metric::Moaa, Metric::IdAccuracy];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Auroc => "auroc",
            Metric::Aupr => "aupr",
            Metric::Oscr => "oscr",
            Metric::Moaa => "moaa",
            Metric::IdAccuracy => "id_accuracy",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown metric '{s}'")))
    }
}

/// Sample counts for scenario-generated splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub test: usize,
    pub aux: usize,
}

impl SplitSizes {
    pub fn uniform(n: usize) -> Self {
        Self { train: n, test: n, aux: n }
    }
}

/// One shift dataset with its evaluation pack.
#[derive(Debug, Clone)]
pub struct ShiftSet {
    pub name: String,
    pub kind: ShiftKind,
    pub pack: ShiftPack,
    /// Raw inputs, when a model is available for input perturbation.
    pub inputs: Option<Array2<f64>>,
}

/// Everything needed to score one (method, seed) combination.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub id_train: Option<ShiftPack>,
    pub id_test: ShiftPack,
    pub id_test_inputs: Option<Array2<f64>>,
    pub shifts: Vec<ShiftSet>,
    pub model: Option<Mlp>,
}

/// Dataset names used for scenario-generated shifts.
pub const SEMANTIC_DATASET: &str = "semantic_ood";
pub const COVARIATE_DATASET: &str = "covariate";

/// Trains one model on `scenario` (sampled with `seed`) and exports the
/// evaluation packs.
pub fn scenario_run(scenario: &ShiftScenario, spec: &TrainSpec, sizes: SplitSizes, seed: u64, covariate: bool) -> Result<EvalSet> {
    let sc = scenario.clone().with_seed(seed);
    sc.validate()?;
    let spec = TrainSpec { seed, ..spec.clone() };
    let (x_train, y_train) = to_matrix(&sc.gen_id(sizes.train, "train"));
    let aux = (spec.loss == Loss::Oe).then(|| to_matrix(&sc.gen_aux(sizes.aux)).0);
    let mut model = Mlp::for_spec(sc.dim, sc.class_count(), &spec)?;
    train(
        &mut model,
        &TrainData {
            x: x_train.view(),
            labels: &y_train,
            aux: aux.as_ref().map(|a| a.view()),
        },
        &spec,
    )?;

    let id_train = export_pack(&model, x_train.view(), &y_train, Role::IdTrain, None)?;
    let (x_test, y_test) = to_matrix(&sc.gen_id(sizes.test, "test"));
    let id_test = export_pack(&model, x_test.view(), &y_test, Role::IdTest, None)?;
    let mut shifts = Vec::new();
    let ood = sc.gen_semantic_ood(sizes.test);
    if !ood.is_empty() {
        let (x, y) = to_matrix(&ood);
        shifts.push(ShiftSet {
            name: SEMANTIC_DATASET.into(),
            kind: ShiftKind::Semantic,
            pack: export_pack(&model, x.view(), &y, Role::OodTest, None)?,
            inputs: Some(x),
        });
    }
    if covariate {
        let (x, y) = to_matrix(&sc.gen_covariate(&sc.gen_id(sizes.test, "covariate"))?);
        shifts.push(ShiftSet {
            name: COVARIATE_DATASET.into(),
            kind: ShiftKind::Covariate,
            pack: export_pack(&model, x.view(), &y, Role::CovariateTest, None)?,
            inputs: Some(x),
        });
    }
    Ok(EvalSet {
        id_train: Some(id_train),
        id_test,
        id_test_inputs: Some(x_test),
        shifts,
        model: Some(model),
    })
}

/// Scores of one rule on the ID test pack and one shift pack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellScores {
    pub kind: ShiftKind,
    pub id: Vec<f64>,
    pub id_correct: Vec<bool>,
    pub shift: Vec<f64>,
    /// Class correctness of covariate-shifted samples.
    pub shift_correct: Option<Vec<bool>>,
    /// ODIN ran without perturbed logits.
    pub degenerate: bool,
}

fn correctness(pack: &ShiftPack) -> Result<Vec<bool>> {
    let preds = pack_predictions(pack)?;
    Ok(preds.iter().zip(pack.labels()?).map(|(&p, y)| p as i64 == y).collect())
}

/// Scorer for a rule, fitted on `id_train` when one is present.
pub fn fit_scorer(set: &EvalSet, spec: RuleSpec, params: RuleParams) -> Result<Scorer> {
    let needs_reference = spec.transform == Some(Transform::React) || spec.rule == Rule::She;
    match &set.id_train {
        Some(r) => Scorer::fit(spec, params, r),
        None if needs_reference => Err(Error::InvalidArgument(format!("'{spec}' fits on ID training data; supply an id_train pack"))),
        None => Scorer::fit(spec, params, &set.id_test),
    }
}

/// Re-runs the model with ODIN input perturbation when the rule asks for it
/// and a model is available.
fn odin_view(scorer: &Scorer, model: Option<&Mlp>, pack: &ShiftPack, inputs: Option<&Array2<f64>>) -> Result<Option<ShiftPack>> {
    let p = scorer.params;
    if scorer.spec != RuleSpec::plain(Rule::Odin) || p.odin_epsilon == 0.0 {
        return Ok(None);
    }
    let (Some(m), Some(x)) = (model, inputs) else {
        return Ok(None);
    };
    let mut out = pack.clone();
    out.insert_matrix(PERTURBED_LOGITS, &m.odin_perturb(x.view(), p.odin_epsilon, p.temperature)?);
    Ok(Some(out))
}

pub fn score_cell(set: &EvalSet, scorer: &Scorer, shift: &ShiftSet) -> Result<CellScores> {
    let model = set.model.as_ref();
    let id_pack = odin_view(scorer, model, &set.id_test, set.id_test_inputs.as_ref())?;
    let shift_pack = odin_view(scorer, model, &shift.pack, shift.inputs.as_ref())?;
    let id = scorer.score(id_pack.as_ref().unwrap_or(&set.id_test))?;
    let sh = scorer.score(shift_pack.as_ref().unwrap_or(&shift.pack))?;
    let shift_correct = match shift.kind {
        ShiftKind::Covariate => Some(correctness(&shift.pack)?),
        ShiftKind::Semantic => None,
    };
    Ok(CellScores {
        kind: shift.kind,
        id: id.values,
        id_correct: correctness(&set.id_test)?,
        shift: sh.values,
        shift_correct,
        degenerate: id.rule.degenerate || sh.rule.degenerate,
    })
}

/// Evaluates one metric. ID is the positive class throughout; covariate
/// samples keep their labels and join the ID side for mOAA.
pub fn evaluate_metric(metric: Metric, s: &CellScores) -> Result<f64> {
    match metric {
        Metric::Auroc => metrics::auroc(&s.id, &s.shift),
        Metric::Aupr => metrics::aupr(&s.id, &s.shift),
        Metric::Oscr => match s.kind {
            ShiftKind::Semantic => metrics::oscr(&s.id, &s.id_correct, &s.shift),
            ShiftKind::Covariate => Err(Error::InvalidArgument("oscr is undefined for covariate shift".into())),
        },
        Metric::Moaa => {
            let inputs = match &s.shift_correct {
                Some(c) => OaaInputs::with_default_thresholds(
                    s.id.iter().chain(&s.shift).copied().collect(),
                    s.id_correct.iter().chain(c).copied().collect(),
                    Vec::new(),
                )?,
                None => OaaInputs::with_default_thresholds(s.id.clone(), s.id_correct.clone(), s.shift.clone())?,
            };
            Ok(metrics::moaa(&inputs))
        }
        Metric::IdAccuracy => metrics::accuracy(&s.id_correct).ok_or_else(|| Error::EmptyInput("no ID test samples".into())),
    }
}

// ---------------------------------------------------------------------------
// Matrix configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Scenario TOML; the built-in desk scenario when absent.
    pub file: Option<PathBuf>,
    /// Layout seed for the built-in scenario.
    pub seed: u64,
    pub aux_overlap: Option<f64>,
    pub train_size: Option<usize>,
    pub test_size: Option<usize>,
    pub aux_size: Option<usize>,
    pub covariate: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            file: None,
            seed: 0,
            aux_overlap: None,
            train_size: None,
            test_size: None,
            aux_size: None,
            covariate: true,
        }
    }
}

impl ScenarioConfig {
    pub fn resolve(&self, base_dir: &Path) -> Result<(ShiftScenario, SplitSizes)> {
        let mut sc = match &self.file {
            Some(f) => ShiftScenario::load(base_dir.join(f))?,
            None => ShiftScenario::desk_default(self.seed),
        };
        if let Some(a) = self.aux_overlap {
            sc = sc.with_overlap(a);
        }
        sc.validate()?;
        let n = sc.samples_per_split;
        let sizes = SplitSizes {
            train: self.train_size.unwrap_or(n),
            test: self.test_size.unwrap_or(n),
            aux: self.aux_size.unwrap_or(n),
        };
        Ok((sc, sizes))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalShift {
    pub path: String,
    pub kind: ShiftKind,
}

/// Pre-computed packs; paths may contain a `{seed}` placeholder and are
/// resolved against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalPacks {
    #[serde(default)]
    pub id_train: Option<String>,
    pub id_test: String,
    pub shifts: BTreeMap<String, ExternalShift>,
}

impl ExternalPacks {
    pub fn load(&self, base_dir: &Path, seed: u64) -> Result<EvalSet> {
        let path = |p: &str| base_dir.join(p.replace("{seed}", &seed.to_string()));
        let id_train = self.id_train.as_deref().map(|p| read_pack_file(path(p))).transpose()?;
        let id_test = read_pack_file(path(&self.id_test))?;
        let shifts = self
            .shifts
            .iter()
            .map(|(name, s)| {
                Ok(ShiftSet {
                    name: name.clone(),
                    kind: s.kind,
                    pack: read_pack_file(path(&s.path))?,
                    inputs: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalSet {
            id_train,
            id_test,
            id_test_inputs: None,
            shifts,
            model: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum MethodConfig {
    Train(TrainSpec),
    External(ExternalPacks),
}

/// A rule, optionally with parameter grids expanded as a Cartesian product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RuleEntry {
    Name(RuleSpec),
    Grid(RuleGrid),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleGrid {
    pub rule: RuleSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub react_percentile: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ash_percentile: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub odin_epsilon: Option<Vec<f64>>,
}

/// A rule row of the matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleVariant {
    pub label: String,
    pub spec: RuleSpec,
    pub params: RuleParams,
}

fn fmt_param(v: f64) -> String {
    format!("{v}")
}

impl RuleEntry {
    pub fn expand(&self, base: RuleParams) -> Result<Vec<RuleVariant>> {
        let g = match self {
            RuleEntry::Name(spec) => {
                return Ok(vec![RuleVariant {
                    label: spec.to_string(),
                    spec: *spec,
                    params: base,
                }]);
            }
            RuleEntry::Grid(g) => g,
        };
        type Setter = fn(&mut RuleParams, f64);
        let axes: Vec<(&str, &Vec<f64>, Setter)> = [
            ("temperature", &g.temperature, (|p: &mut RuleParams, v| p.temperature = v) as Setter),
            ("react_percentile", &g.react_percentile, |p, v| p.react_percentile = v),
            ("ash_percentile", &g.ash_percentile, |p, v| p.ash_percentile = v),
            ("odin_epsilon", &g.odin_epsilon, |p, v| p.odin_epsilon = v),
        ]
        .into_iter()
        .filter_map(|(n, v, s)| v.as_ref().map(|v| (n, v, s)))
        .collect();
        let mut out = vec![(Vec::<String>::new(), base)];
        for (name, values, set) in axes {
            if values.is_empty() {
                return Err(Error::Config(format!("empty '{name}' grid for rule '{}'", g.rule)));
            }
            out = out
                .into_iter()
                .flat_map(|(tags, p)| {
                    values.iter().map(move |&v| {
                        let mut p = p;
                        set(&mut p, v);
                        let mut tags = tags.clone();
                        tags.push(format!("{name}={}", fmt_param(v)));
                        (tags, p)
                    })
                })
                .collect();
        }
        out.into_iter()
            .map(|(tags, params)| {
                params.validate()?;
                let label = if tags.is_empty() {
                    g.rule.to_string()
                } else {
                    format!("{}[{}]", g.rule, tags.join(","))
                };
                Ok(RuleVariant { label, spec: g.rule, params })
            })
            .collect()
    }
}

fn default_metrics() -> Vec<Metric> {
    vec![Metric::Auroc]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixConfig {
    #[serde(default)]
    pub scenario: ScenarioConfig,
    pub methods: BTreeMap<String, MethodConfig>,
    pub rules: Vec<RuleEntry>,
    /// Base parameters shared by all rules; grids override per axis.
    #[serde(default)]
    pub params: RuleParams,
    pub seeds: Vec<u64>,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<Metric>,
    /// Write per-cell score vectors next to the report.
    #[serde(default)]
    pub persist_scores: bool,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl MatrixConfig {
    pub fn from_toml_str(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.base_dir = base_dir.into();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&text, dir)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.methods.is_empty() || self.rules.is_empty() || self.seeds.is_empty() || self.metrics.is_empty() {
            return err("methods, rules, seeds and metrics must all be non-empty".into());
        }
        self.params.validate()?;
        self.rule_variants()?;
        for (name, m) in &self.methods {
            match m {
                MethodConfig::Train(spec) => spec.validate().map_err(|e| Error::Config(format!("method '{name}': {e}")))?,
                MethodConfig::External(ext) => {
                    if ext.id_test.trim().is_empty() {
                        return err(format!("method '{name}' has an empty id_test path"));
                    }
                    if ext.shifts.is_empty() {
                        return err(format!("method '{name}' lists no shift packs"));
                    }
                }
            }
        }
        let mut labels: Vec<String> = self.rule_variants()?.into_iter().map(|v| v.label).collect();
        labels.sort();
        if let Some(w) = labels.windows(2).find(|w| w[0] == w[1]) {
            return err(format!("rule '{}' listed twice", w[0]));
        }
        Ok(())
    }

    pub fn rule_variants(&self) -> Result<Vec<RuleVariant>> {
        let mut out = Vec::new();
        for r in &self.rules {
            out.extend(r.expand(self.params)?);
        }
        Ok(out)
    }

    /// SHA-256 over the canonical JSON form of the configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

// ---------------------------------------------------------------------------
// Result table

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub method: String,
    pub rule: String,
    pub dataset: String,
    pub metric: Metric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellValue {
    Value { mean: f64, std: f64, n: usize },
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub engine_version: String,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    /// Row/column orders for rendering.
    pub methods: Vec<String>,
    pub rules: Vec<String>,
    pub datasets: Vec<String>,
    pub metrics: Vec<Metric>,
    #[serde(with = "cell_list")]
    pub cells: BTreeMap<CellKey, CellValue>,
    pub provenance: Provenance,
    /// Cells where ODIN ran without perturbation.
    pub warnings: Vec<String>,
}

/// JSON object keys must be strings, so cells travel as a key-ordered list.
mod cell_list {
    use super::{CellKey, CellValue};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    #[derive(Serialize, Deserialize)]
    struct Entry {
        #[serde(flatten)]
        key: CellKey,
        value: CellValue,
    }

    pub fn serialize<S: Serializer>(cells: &BTreeMap<CellKey, CellValue>, s: S) -> Result<S::Ok, S::Error> {
        let list: Vec<Entry> = cells
            .iter()
            .map(|(k, v)| Entry { key: k.clone(), value: v.clone() })
            .collect();
        list.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<CellKey, CellValue>, D::Error> {
        Ok(Vec::<Entry>::deserialize(d)?.into_iter().map(|e| (e.key, e.value)).collect())
    }
}

impl ResultTable {
    pub fn get(&self, method: &str, rule: &str, dataset: &str, metric: Metric) -> Option<&CellValue> {
        self.cells.get(&CellKey {
            method: method.into(),
            rule: rule.into(),
            dataset: dataset.into(),
            metric,
        })
    }
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads for independent (method, seed) jobs; `None` = rayon default.
    pub jobs: Option<usize>,
    /// Directory for per-cell score sidecars.
    pub scores_dir: Option<PathBuf>,
}

type JobOutput = (Vec<(CellKey, std::result::Result<f64, String>)>, Vec<String>);

fn sidecar_name(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._+=-".contains(c) { c } else { '_' })
        .collect()
}

/// Writes a score vector sidecar as CSV: `set,score,correct`.
pub fn write_score_sidecar(path: &Path, scores: &CellScores) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
    let csv_err = |e: csv::Error| Error::Io(e.into());
    w.write_record(["set", "score", "correct"]).map_err(csv_err)?;
    for (s, c) in scores.id.iter().zip(&scores.id_correct) {
        w.write_record(["id", &format!("{s:e}"), if *c { "1" } else { "0" }]).map_err(csv_err)?;
    }
    for (i, s) in scores.shift.iter().enumerate() {
        let c = scores.shift_correct.as_ref().map_or("", |c| if c[i] { "1" } else { "0" });
        w.write_record(["shift", &format!("{s:e}"), c]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn run_job(cfg: &MatrixConfig, method: &str, seed: u64, variants: &[RuleVariant], datasets: &[String], opts: &RunOptions) -> JobOutput {
    let mut cells = Vec::new();
    let mut warnings = Vec::new();
    let set = match &cfg.methods[method] {
        MethodConfig::Train(spec) => cfg
            .scenario
            .resolve(&cfg.base_dir)
            .and_then(|(sc, sizes)| scenario_run(&sc, spec, sizes, seed, cfg.scenario.covariate)),
        MethodConfig::External(ext) => ext.load(&cfg.base_dir, seed),
    };
    let push_all = |cells: &mut Vec<_>, rule: &str, dataset: &str, res: &std::result::Result<(), String>| {
        for &metric in &cfg.metrics {
            let key = CellKey {
                method: method.into(),
                rule: rule.into(),
                dataset: dataset.into(),
                metric,
            };
            cells.push((key, res.clone().map(|_| f64::NAN)));
        }
    };
    let set = match set {
        Ok(s) => s,
        Err(e) => {
            for v in variants {
                for d in datasets {
                    push_all(&mut cells, &v.label, d, &Err(e.to_string()));
                }
            }
            return (cells, warnings);
        }
    };
    for v in variants {
        let scorer = fit_scorer(&set, v.spec, v.params);
        for d in datasets {
            let Some(shift) = set.shifts.iter().find(|s| &s.name == d) else {
                push_all(&mut cells, &v.label, d, &Err(format!("dataset '{d}' not available")));
                continue;
            };
            let scores = scorer.as_ref().map_err(|e| e.to_string()).and_then(|s| score_cell(&set, s, shift).map_err(|e| e.to_string()));
            let scores = match scores {
                Ok(s) => s,
                Err(e) => {
                    push_all(&mut cells, &v.label, d, &Err(e));
                    continue;
                }
            };
            if scores.degenerate {
                warnings.push(format!("{method}/{}/{d}: odin ran without input perturbation", v.label));
            }
            if let Some(dir) = &opts.scores_dir {
                let path = dir
                    .join(sidecar_name(method))
                    .join(format!("seed-{seed}"))
                    .join(sidecar_name(&v.label))
                    .join(format!("{}.csv", sidecar_name(d)));
                if let Err(e) = write_score_sidecar(&path, &scores) {
                    warnings.push(format!("could not write {}: {e}", path.display()));
                }
            }
            for &metric in &cfg.metrics {
                let key = CellKey {
                    method: method.into(),
                    rule: v.label.clone(),
                    dataset: d.clone(),
                    metric,
                };
                let value = evaluate_metric(metric, &scores).map_err(|e| e.to_string()).and_then(|x| {
                    if x.is_finite() {
                        Ok(x)
                    } else {
                        Err("non-finite metric value".into())
                    }
                });
                cells.push((key, value));
            }
        }
    }
    (cells, warnings)
}

fn method_datasets(cfg: &MatrixConfig, method: &MethodConfig) -> Vec<String> {
    match method {
        MethodConfig::Train(_) => {
            let mut d = vec![SEMANTIC_DATASET.to_string()];
            if cfg.scenario.covariate {
                d.push(COVARIATE_DATASET.into());
            }
            d
        }
        MethodConfig::External(ext) => ext.shifts.keys().cloned().collect(),
    }
}

/// Runs every (method, seed) job, then aggregates cells over seeds.
pub fn run_matrix(cfg: &MatrixConfig, opts: &RunOptions) -> Result<ResultTable> {
    cfg.validate()?;
    let variants = cfg.rule_variants()?;
    let jobs: Vec<(&String, u64)> = cfg.methods.keys().flat_map(|m| cfg.seeds.iter().map(move |&s| (m, s))).collect();
    let run = || -> Vec<JobOutput> {
        jobs.par_iter()
            .map(|(m, seed)| run_job(cfg, m, *seed, &variants, &method_datasets(cfg, &cfg.methods[*m]), opts))
            .collect()
    };
    let outputs = match opts.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?
            .install(run),
        None => run(),
    };

    let mut per_cell: BTreeMap<CellKey, Vec<std::result::Result<f64, String>>> = BTreeMap::new();
    let mut warnings = Vec::new();
    for (cells, w) in outputs {
        for (k, v) in cells {
            per_cell.entry(k).or_default().push(v);
        }
        warnings.extend(w);
    }
    let cells = per_cell
        .into_iter()
        .map(|(k, vals)| {
            let value = match vals.iter().find_map(|v| v.as_ref().err()) {
                Some(reason) => CellValue::Failed { reason: reason.clone() },
                None => {
                    let xs: Vec<f64> = vals.into_iter().map(|v| v.unwrap()).collect();
                    let (mean, std) = mean_std(&xs);
                    CellValue::Value { mean, std, n: xs.len() }
                }
            };
            (k, value)
        })
        .collect();

    let mut datasets: Vec<String> = Vec::new();
    for m in cfg.methods.values() {
        for d in method_datasets(cfg, m) {
            if !datasets.contains(&d) {
                datasets.push(d);
            }
        }
    }
    Ok(ResultTable {
        methods: cfg.methods.keys().cloned().collect(),
        rules: variants.into_iter().map(|v| v.label).collect(),
        datasets,
        metrics: cfg.metrics.clone(),
        cells,
        provenance: Provenance {
            config_hash: cfg.hash(),
            engine_version: env!("CARGO_PKG_VERSION").into(),
            seeds: cfg.seeds.clone(),
        },
        warnings,
    })
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "md" | "markdown" => Ok(Self::Markdown),
            other => Err(Error::InvalidArgument(format!("unsupported report format '{other}'"))),
        }
    }
}

fn f4(v: f64) -> String {
    format!("{v:.4}")
}

pub fn emit_report(table: &ResultTable, format: ReportFormat) -> Result<Vec<u8>> {
    match format {
        ReportFormat::Csv => report_csv(table),
        ReportFormat::Markdown => Ok(report_markdown(table).into_bytes()),
    }
}

fn report_csv(table: &ResultTable) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Io(e.into());
    w.write_record(["method", "rule", "dataset", "metric", "mean", "std", "n"]).map_err(csv_err)?;
    for (k, v) in &table.cells {
        let (mean, std, n) = match v {
            CellValue::Value { mean, std, n } => (f4(*mean), f4(*std), n.to_string()),
            CellValue::Failed { reason } => (format!("FAILED({reason})"), String::new(), String::new()),
        };
        w.write_record([k.method.as_str(), &k.rule, &k.dataset, k.metric.as_str(), &mean, &std, &n])
            .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Rank marks per column: 1 for the best mean (all ties), 2 for the best
/// strictly lower mean.
pub fn column_ranks(values: &[Option<f64>]) -> Vec<u8> {
    let best = values.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let second = values.iter().flatten().copied().filter(|&v| v < best).fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .map(|v| match v {
            Some(x) if *x == best => 1,
            Some(x) if *x == second => 2,
            _ => 0,
        })
        .collect()
}

fn escape_md(s: &str) -> String {
    s.replace('|', "\\|")
}

fn report_markdown(table: &ResultTable) -> String {
    let mut out = String::new();
    writeln!(out, "<!-- config {} · shiftlab {} -->", table.provenance.config_hash, table.provenance.engine_version).unwrap();
    for &metric in &table.metrics {
        writeln!(out, "\n### {metric}\n").unwrap();
        let mut header = String::from("| method | rule |");
        let mut rule_line = String::from("|---|---|");
        for d in &table.datasets {
            write!(header, " {} |", escape_md(d)).unwrap();
            rule_line.push_str("---:|");
        }
        writeln!(out, "{header}\n{rule_line}").unwrap();
        let rows: Vec<(&String, &String)> = table.methods.iter().flat_map(|m| table.rules.iter().map(move |r| (m, r))).collect();
        let columns: Vec<Vec<Option<&CellValue>>> = table
            .datasets
            .iter()
            .map(|d| rows.iter().map(|(m, r)| table.get(m, r, d, metric)).collect())
            .collect();
        let ranks: Vec<Vec<u8>> = columns
            .iter()
            .map(|col| {
                let means: Vec<Option<f64>> = col
                    .iter()
                    .map(|c| match c {
                        Some(CellValue::Value { mean, .. }) => Some((mean * 1e4).round() / 1e4),
                        _ => None,
                    })
                    .collect();
                column_ranks(&means)
            })
            .collect();
        for (i, (m, r)) in rows.iter().enumerate() {
            let mut line = format!("| {} | {} |", escape_md(m), escape_md(r));
            for (col, rank) in columns.iter().zip(&ranks) {
                let text = match col[i] {
                    None => "–".to_string(),
                    Some(CellValue::Failed { reason }) => format!("FAILED({})", escape_md(reason)),
                    Some(CellValue::Value { mean, std, n }) => {
                        let v = if *n > 1 { format!("{} ± {}", f4(*mean), f4(*std)) } else { f4(*mean) };
                        match rank[i] {
                            1 => format!("**{v}**"),
                            2 => format!("<u>{v}</u>"),
                            _ => v,
                        }
                    }
                };
                write!(line, " {text} |").unwrap();
            }
            writeln!(out, "{line}").unwrap();
        }
    }
    out
}

/// Writes `results.csv`, `results.md` and `provenance.json` into `dir`.
pub fn write_reports(table: &ResultTable, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("results.csv"), emit_report(table, ReportFormat::Csv)?)?;
    fs::write(dir.join("results.md"), emit_report(table, ReportFormat::Markdown)?)?;
    let prov = serde_json::to_string_pretty(&table.provenance).map_err(|e| Error::Header(e.to_string()))?;
    fs::write(dir.join("provenance.json"), prov + "\n")?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Sweeps

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Temperature,
    ReactPercentile,
    AshPercentile,
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "temperature" | "T" => Ok(Self::Temperature),
            "react_percentile" => Ok(Self::ReactPercentile),
            "ash_percentile" => Ok(Self::AshPercentile),
            other => Err(Error::InvalidArgument(format!("unknown sweep parameter '{other}'"))),
        }
    }
}

impl SweepParam {
    fn belongs_to(self, spec: RuleSpec) -> bool {
        match self {
            SweepParam::Temperature => matches!(spec.rule, Rule::Msp | Rule::Energy | Rule::Odin | Rule::GradNorm),
            SweepParam::ReactPercentile => spec.transform == Some(Transform::React),
            SweepParam::AshPercentile => spec.transform == Some(Transform::Ash),
        }
    }

    fn apply(self, p: &mut RuleParams, v: f64) {
        match self {
            SweepParam::Temperature => p.temperature = v,
            SweepParam::ReactPercentile => p.react_percentile = v,
            SweepParam::AshPercentile => p.ash_percentile = v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub param: SweepParam,
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    /// Index of the best value (first on ties).
    pub best: usize,
}

/// Evaluates `metric` for each grid value of `param`, all else fixed.
pub fn sweep(spec: RuleSpec, base: RuleParams, param: SweepParam, grid: &[f64], set: &EvalSet, dataset: &str, metric: Metric) -> Result<SweepCurve> {
    if grid.is_empty() {
        return Err(Error::EmptyInput("sweep grid is empty".into()));
    }
    if !param.belongs_to(spec) {
        return Err(Error::InvalidArgument(format!("parameter {param:?} does not apply to '{spec}'")));
    }
    let shift = set
        .shifts
        .iter()
        .find(|s| s.name == dataset)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown dataset '{dataset}'")))?;
    let values = grid
        .iter()
        .map(|&v| {
            let mut p = base;
            param.apply(&mut p, v);
            let scorer = fit_scorer(set, spec, p)?;
            evaluate_metric(metric, &score_cell(set, &scorer, shift)?)
        })
        .collect::<Result<Vec<f64>>>()?;
    let best = values
        .iter()
        .enumerate()
        .fold(0, |b, (i, &v)| if v > values[b] { i } else { b });
    Ok(SweepCurve {
        param,
        grid: grid.to_vec(),
        values,
        best,
    })
}

// ---------------------------------------------------------------------------
// Activation and magnitude analyses

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerActivations {
    pub layer: String,
    /// Shared bin edges, `HISTOGRAM_BINS + 1` values.
    pub edges: Vec<f64>,
    /// (pack name, counts) with the ID pack first.
    pub histograms: Vec<(String, Vec<usize>)>,
    /// Histogram intersection of each other pack with the ID pack.
    pub overlaps: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationReport {
    pub layers: Vec<LayerActivations>,
}

/// Per-sample maximum activation.
pub fn max_activations(features: ArrayView2<f64>) -> Vec<f64> {
    features
        .axis_iter(Axis(0))
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// Counts over `bins` equal-width bins spanning `[lo, hi]`.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    let width = hi - lo;
    for &v in values {
        let b = if width > 0.0 { (((v - lo) / width) * bins as f64).floor() as usize } else { 0 };
        counts[b.min(bins - 1)] += 1;
    }
    counts
}

/// `Σ min(p_b, q_b)` of the normalised histograms; 1 for identical shapes,
/// 0 for disjoint supports.
pub fn histogram_intersection(a: &[usize], b: &[usize]) -> f64 {
    let na: usize = a.iter().sum();
    let nb: usize = b.iter().sum();
    if na == 0 || nb == 0 {
        return 0.0;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 / na as f64).min(y as f64 / nb as f64))
        .sum()
}

/// Per-layer max-activation histograms with bin edges shared across packs.
pub fn analyze_activations(id: (&str, &ShiftPack), others: &[(&str, &ShiftPack)]) -> Result<ActivationReport> {
    let layers: Vec<String> = id.1.feature_layers().into_iter().map(String::from).collect();
    if layers.is_empty() {
        return Err(Error::MissingTensor("features/*".into()));
    }
    let mut out = Vec::new();
    for layer in layers {
        let mut maxima = vec![(id.0.to_string(), max_activations(id.1.matrix(&layer)?.view()))];
        for (name, pack) in others {
            if !pack.contains(&layer) {
                return Err(Error::MissingTensor(format!("{layer} in pack '{name}'")));
            }
            maxima.push((name.to_string(), max_activations(pack.matrix(&layer)?.view())));
        }
        let all = maxima.iter().flat_map(|(_, v)| v.iter().copied());
        let lo = all.clone().fold(f64::INFINITY, f64::min);
        let hi = all.fold(f64::NEG_INFINITY, f64::max);
        let width = (hi - lo) / HISTOGRAM_BINS as f64;
        let edges = (0..=HISTOGRAM_BINS)
            .map(|i| if i == HISTOGRAM_BINS { hi } else { lo + width * i as f64 })
            .collect();
        let histograms: Vec<(String, Vec<usize>)> = maxima
            .into_iter()
            .map(|(n, v)| (n, histogram(&v, lo, hi, HISTOGRAM_BINS)))
            .collect();
        let overlaps = histograms[1..]
            .iter()
            .map(|(n, h)| (n.clone(), histogram_intersection(&histograms[0].1, h)))
            .collect();
        out.push(LayerActivations {
            layer,
            edges,
            histograms,
            overlaps,
        });
    }
    Ok(ActivationReport { layers: out })
}

impl ActivationReport {
    pub fn overlap(&self, layer: &str, pack: &str) -> Option<f64> {
        self.layers
            .iter()
            .find(|l| l.layer == layer)?
            .overlaps
            .iter()
            .find(|(n, _)| n == pack)
            .map(|(_, v)| *v)
    }

    /// Plot-ready rows: `layer,bin_left,bin_right,count,pack`.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Io(e.into());
        w.write_record(["layer", "bin_left", "bin_right", "count", "pack"]).map_err(csv_err)?;
        for l in &self.layers {
            for (pack, counts) in &l.histograms {
                for (b, c) in counts.iter().enumerate() {
                    w.write_record([
                        l.layer.as_str(),
                        &l.edges[b].to_string(),
                        &l.edges[b + 1].to_string(),
                        &c.to_string(),
                        pack,
                    ])
                    .map_err(csv_err)?;
                }
            }
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeReport {
    pub id_mean_norm: f64,
    pub shift_mean_norm: f64,
    /// AUROC of the penultimate feature norm used as the score.
    pub norm_auroc: f64,
}

fn row_norms(m: &Array2<f64>) -> Vec<f64> {
    m.axis_iter(Axis(0)).map(|r| r.dot(&r).sqrt()).collect()
}

pub fn magnitude_report(id: &ShiftPack, shift: &ShiftPack) -> Result<MagnitudeReport> {
    let a = row_norms(&id.penultimate_features()?);
    let b = row_norms(&shift.penultimate_features()?);
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("magnitude report needs samples on both sides".into()));
    }
    Ok(MagnitudeReport {
        id_mean_norm: a.iter().sum::<f64>() / a.len() as f64,
        shift_mean_norm: b.iter().sum::<f64>() / b.len() as f64,
        norm_auroc: metrics::auroc(&a, &b)?,
    })
}

// ---------------------------------------------------------------------------
// Proximity study

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProximityPoint {
    pub alpha: f64,
    pub dist_nn: f64,
    pub auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProximityStudy {
    pub points: Vec<ProximityPoint>,
    /// Spearman correlation of Dist_nn against AUROC; `None` when undefined
    /// (e.g. a constant column).
    pub spearman: Option<f64>,
}

/// For each overlap `α`: trains an OE model with auxiliary data drawn at
/// that overlap, measures the MSP-AUROC on semantic OOD and the Top-K
/// distance from OOD test inputs to the auxiliary inputs (normalised).
pub fn proximity_correlation(scenario: &ShiftScenario, alphas: &[f64], spec: &TrainSpec, sizes: SplitSizes, seed: u64, k: usize) -> Result<ProximityStudy> {
    if alphas.len() < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 overlap values, got {}", alphas.len())));
    }
    if spec.loss != Loss::Oe {
        return Err(Error::InvalidArgument("the proximity study trains with outlier exposure".into()));
    }
    let points = alphas
        .par_iter()
        .map(|&alpha| {
            let sc = scenario.clone().with_overlap(alpha).with_seed(seed);
            sc.validate()?;
            let set = scenario_run(&sc, spec, sizes, seed, false)?;
            let shift = set
                .shifts
                .iter()
                .find(|s| s.kind == ShiftKind::Semantic)
                .ok_or_else(|| Error::Config("scenario has no semantic OOD components".into()))?;
            let scorer = Scorer::fit(RuleSpec::plain(Rule::Msp), RuleParams::default(), &set.id_test)?;
            let auroc = evaluate_metric(Metric::Auroc, &score_cell(&set, &scorer, shift)?)?;
            let ood = FeatureSet::normalize(shift.inputs.as_ref().unwrap().view(), "ood")?;
            let aux = to_matrix(&sc.gen_aux(sizes.aux)).0;
            let aux = FeatureSet::normalize(aux.view(), format!("aux@{alpha}"))?;
            Ok(ProximityPoint {
                alpha,
                dist_nn: proximity::dist_nn(&ood, &aux, k)?,
                auroc,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let d: Vec<f64> = points.iter().map(|p| p.dist_nn).collect();
    let a: Vec<f64> = points.iter().map(|p| p.auroc).collect();
    Ok(ProximityStudy {
        spearman: metrics::spearman(&d, &a),
        points,
    })
}
