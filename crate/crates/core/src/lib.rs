//! Distribution-shift detection toolkit.
//!
//! The crate covers the whole evaluation pipeline for out-of-distribution
//! detection and open-set recognition:
//!
//! - [`shiftpack`]: the `.shpk` binary dump through which models feed the engine
//! - [`scores`]: post-hoc scoring rules (MSP, MLS, Energy, ODIN, GradNorm, SHE)
//!   and activation transforms (ReAct, ASH)
//! - [`metrics`]: AUROC, AUPR, OSCR and outlier-aware accuracy (OAA / mOAA)
//! - [`proximity`]: Top-K nearest-neighbour distance and deep-kernel MMD between
//!   feature sets
//! - [`synth`]: synthetic scenarios with independent semantic and covariate shift
//! - [`toynet`]: a small MLP trainer (cross-entropy, outlier exposure, reciprocal
//!   points) with analytic gradients
//! - [`harness`]: matrix runs, sweeps, activation and magnitude analyses, reports

pub mod error;
pub mod harness;
pub mod metrics;
pub mod proximity;
pub mod scores;
pub mod shiftpack;
pub mod synth;
pub mod toynet;

pub use error::{Error, ErrorKind, Result};
pub use metrics::{aupr, auroc, moaa, oaa, oscr, OaaInputs};
pub use scores::{Rule, RuleParams, RuleSpec, ScoreVector, Scorer, Transform};
pub use shiftpack::{
    read_pack, read_pack_file, validate_pack, write_pack, write_pack_file, Role, ShiftPack,
};
pub use synth::ShiftScenario;
pub use toynet::{Loss, Mlp, TrainSpec};
