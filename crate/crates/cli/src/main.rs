//! `shiftlab` command-line front end.
//!
//! Exit codes: 0 success, 1 user error (bad flags, missing files, bad
//! config), 2 data or validation error, 3 internal error. Results go to
//! stdout; diagnostics go to stderr.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use shiftlab_core::harness::{Metric, ShiftKind, SweepParam};
use shiftlab_core::scores::AshVariant;
use shiftlab_core::toynet::Loss;
use shiftlab_core::{ErrorKind, RuleSpec};

#[derive(Parser, Debug)]
#[command(name = "shiftlab", version, about = "Distribution-shift detection benchmarks: scoring rules, metrics, toy training, dataset proximity")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Sample a synthetic scenario and write raw-input packs
    Synth(SynthArgs),
    /// Train a toy MLP on a scenario and export evaluation packs
    Train(TrainArgs),
    /// Score every sample of a pack with one rule
    Score(ScoreArgs),
    /// Evaluate a rule on an ID pack against a shift pack
    Eval(EvalArgs),
    /// Run a method × rule × dataset × seed matrix from a config file
    Matrix(MatrixArgs),
    /// Sweep one rule parameter over a grid
    Sweep(SweepArgs),
    /// Rank auxiliary sets by proximity to an OOD set, or run the overlap study
    Proximity(ProximityArgs),
    /// Per-layer max-activation histograms and feature-norm report
    Activations(ActivationsArgs),
    /// Re-render a stored result table
    Report(ReportArgs),
    /// Check a pack file for structural problems
    Validate(ValidateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Text,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TableFormat {
    Csv,
    Md,
}

#[derive(Args, Debug, Clone)]
pub struct ScenarioArgs {
    /// Scenario TOML file (built-in desk scenario when omitted)
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Auxiliary overlap α in [0, 1]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Samples per split (defaults to the scenario's setting)
    #[arg(long)]
    pub samples: Option<usize>,
    /// Sampling seed
    #[arg(long, env = "SHIFTLAB_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Output directory for the packs
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print the resolved scenario as TOML instead of sampling
    #[arg(long)]
    pub print_scenario: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Training spec TOML; flags below override it
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Weight of the outlier-exposure term
    #[arg(long)]
    pub oe_lambda: Option<f64>,
    #[arg(long)]
    pub mixup_alpha: Option<f64>,
    /// Also store ODIN-perturbed logits with this ε
    #[arg(long)]
    pub odin_epsilon: Option<f64>,
    /// Temperature used for the ODIN perturbation
    #[arg(long, default_value_t = 1000.0)]
    pub odin_temperature: f64,
    /// Output directory for packs and the checkpoint
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Ce,
    Oe,
    Arpl,
}

impl From<LossArg> for Loss {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Ce => Loss::Ce,
            LossArg::Oe => Loss::Oe,
            LossArg::Arpl => Loss::Arpl,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AshArg {
    Prune,
    Scale,
}

#[derive(Args, Debug, Clone)]
pub struct RuleArgs {
    /// Rule, optionally with a transform: msp, mls, energy, odin, gradnorm, she, react+mls, ash+energy, ...
    #[arg(long)]
    pub rule: RuleSpec,
    /// Temperature
    #[arg(long = "T", default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 90.0)]
    pub react_percentile: f64,
    #[arg(long, default_value_t = 65.0)]
    pub ash_percentile: f64,
    #[arg(long, value_enum, default_value_t = AshArg::Prune)]
    pub ash_variant: AshArg,
    /// ID training pack for rules that fit on training data (ReAct, SHE)
    #[arg(long)]
    pub reference: Option<PathBuf>,
}

impl RuleArgs {
    pub fn params(&self) -> shiftlab_core::RuleParams {
        shiftlab_core::RuleParams {
            temperature: self.temperature,
            react_percentile: self.react_percentile,
            ash_percentile: self.ash_percentile,
            ash_variant: match self.ash_variant {
                AshArg::Prune => AshVariant::Prune,
                AshArg::Scale => AshVariant::Scale,
            },
            odin_epsilon: 0.0,
        }
    }
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[arg(long)]
    pub pack: PathBuf,
    #[command(flatten)]
    pub rule: RuleArgs,
    /// Write scores to this CSV file instead of stdout
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Text)]
    pub format: OutputFormat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Semantic,
    Covariate,
}

impl From<KindArg> for ShiftKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Semantic => ShiftKind::Semantic,
            KindArg::Covariate => ShiftKind::Covariate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Auroc,
    Aupr,
    Oscr,
    Moaa,
    IdAccuracy,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Auroc => Metric::Auroc,
            MetricArg::Aupr => Metric::Aupr,
            MetricArg::Oscr => Metric::Oscr,
            MetricArg::Moaa => Metric::Moaa,
            MetricArg::IdAccuracy => Metric::IdAccuracy,
        }
    }
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// ID test pack
    #[arg(long)]
    pub id: PathBuf,
    /// Shift pack
    #[arg(long)]
    pub shift: PathBuf,
    /// Shift type of the shift pack
    #[arg(long, value_enum, default_value_t = KindArg::Semantic)]
    pub kind: KindArg,
    #[command(flatten)]
    pub rule: RuleArgs,
    /// Metrics to report (repeatable)
    #[arg(long, value_enum, default_values_t = vec![MetricArg::Auroc])]
    pub metric: Vec<MetricArg>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Text)]
    pub format: OutputFormat,
}

#[derive(Args, Debug)]
pub struct MatrixArgs {
    /// Matrix config TOML
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for results.csv, results.md, results.json, provenance.json
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads for independent (method, seed) jobs
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Write per-cell score sidecars under <out>/scores
    #[arg(long)]
    pub persist_scores: bool,
    /// Also print the report to stdout
    #[arg(long, value_enum)]
    pub format: Option<TableFormat>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub id: PathBuf,
    #[arg(long)]
    pub shift: PathBuf,
    #[arg(long, value_enum, default_value_t = KindArg::Semantic)]
    pub kind: KindArg,
    #[command(flatten)]
    pub rule: RuleArgs,
    /// Parameter to sweep: temperature, react_percentile, ash_percentile
    #[arg(long)]
    pub param: SweepParam,
    /// Comma-separated grid values
    #[arg(long, value_delimiter = ',', required = true)]
    pub grid: Vec<f64>,
    #[arg(long, value_enum, default_value_t = MetricArg::Auroc)]
    pub metric: MetricArg,
    #[arg(long, value_enum, default_value_t = OutputFormat::Text)]
    pub format: OutputFormat,
}

#[derive(Args, Debug)]
pub struct ProximityArgs {
    /// OOD test pack (pack mode)
    #[arg(long, required_unless_present = "study")]
    pub ood: Option<PathBuf>,
    /// Auxiliary pack, optionally `name=path` (repeatable)
    #[arg(long, required_unless_present = "study")]
    pub aux: Vec<String>,
    /// Feature tensor to compare (penultimate layer by default)
    #[arg(long)]
    pub layer: Option<String>,
    /// Nearest neighbours per query
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Safeguard-kernel weight of the deep-kernel MMD
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Run the overlap study: train one OE model per α and correlate Dist_nn with AUROC
    #[arg(long, conflicts_with_all = ["ood", "aux"])]
    pub study: bool,
    /// Comma-separated α grid for the study
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
    pub alphas: Vec<f64>,
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long, value_enum, default_value_t = OutputFormat::Text)]
    pub format: OutputFormat,
}

#[derive(Args, Debug)]
pub struct ActivationsArgs {
    /// ID test pack
    #[arg(long)]
    pub id: PathBuf,
    /// Other pack as `name=path` (repeatable)
    #[arg(long = "pack", required = true)]
    pub packs: Vec<String>,
    /// Write the histogram CSV here
    #[arg(long)]
    pub histograms: Option<PathBuf>,
    /// Also report mean penultimate feature norms and norm-AUROC
    #[arg(long)]
    pub norms: bool,
    #[arg(long, value_enum, default_value_t = OutputFormat::Text)]
    pub format: OutputFormat,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// results.json written by `matrix`
    #[arg(long)]
    pub table: PathBuf,
    #[arg(long, value_enum, default_value_t = TableFormat::Md)]
    pub format: TableFormat,
}

#[derive(Args, Debug)]
pub struct ValidateArgs {
    /// Pack file
    pub pack: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::User => 1,
                ErrorKind::Data => 2,
                ErrorKind::Internal => 3,
            })
        }
    }
}
