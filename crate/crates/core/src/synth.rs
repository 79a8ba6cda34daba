//! Synthetic shift scenarios.
//!
//! Semantic attributes are realised as Gaussian mixture identity (which
//! component a sample comes from); covariate attributes as a transform
//! (rotation, translation, additive noise) that leaves the label untouched.
//! Every draw is a pure function of the scenario seed, a stream tag and the
//! sample index, so batches can be generated in any order or in parallel.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::shiftpack::{Role, ShiftPack, LABELS};

/// Feature name under which raw inputs are stored in synthetic packs.
pub const INPUT_FEATURES: &str = "features/input";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub mean: Vec<f64>,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CovariateShift {
    /// Rotation angle (radians) applied in the plane of the first two coordinates.
    pub rotation: f64,
    /// Standard deviation of additive isotropic noise.
    pub noise: f64,
    /// Additive offset; empty means zero.
    pub translation: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftScenario {
    pub dim: usize,
    pub id_components: Vec<Component>,
    pub ood_components: Vec<Component>,
    #[serde(default)]
    pub covariate: CovariateShift,
    /// Interpolation weight pulling auxiliary means from the remote anchors
    /// (0) onto the OOD component means (1).
    pub aux_overlap: f64,
    /// Norm of the remote auxiliary anchors.
    pub remote_radius: f64,
    /// Samples per split used by front ends.
    #[serde(default = "default_split_size")]
    pub samples_per_split: usize,
    pub seed: u64,
}

fn default_split_size() -> usize {
    2000
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Id,
    SemanticOod,
    Covariate,
    Aux,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub x: Vec<f64>,
    /// Class index, or -1 for semantic OOD and auxiliary samples.
    pub label: i64,
    pub provenance: Provenance,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Counter-based generator for `(seed, tag, index)`.
fn sample_rng(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(seed ^ fnv1a(tag)) ^ index))
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_direction(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

impl ShiftScenario {
    /// Desk-scale default: 16-D inputs, six ID classes, four held-out
    /// components, 2000 samples per split.
    pub fn desk_default(seed: u64) -> Self {
        Self::generated(seed, 16, 6, 4, 4.0, 1.0)
    }

    /// Component means on a sphere of `radius` along seeded random directions.
    pub fn generated(
        seed: u64,
        dim: usize,
        id_classes: usize,
        ood_classes: usize,
        radius: f64,
        sigma: f64,
    ) -> Self {
        let mut rng = sample_rng(seed, "layout", 0);
        let mut component = || Component {
            mean: random_direction(&mut rng, dim)
                .into_iter()
                .map(|v| v * radius)
                .collect(),
            sigma,
        };
        let id_components = (0..id_classes).map(|_| component()).collect();
        let ood_components = (0..ood_classes).map(|_| component()).collect();
        Self {
            dim,
            id_components,
            ood_components,
            covariate: CovariateShift {
                rotation: 0.5,
                noise: 0.5,
                translation: Vec::new(),
            },
            aux_overlap: 1.0,
            remote_radius: 3.0 * radius,
            samples_per_split: default_split_size(),
            seed,
        }
    }

    pub fn with_overlap(mut self, alpha: f64) -> Self {
        self.aux_overlap = alpha;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn class_count(&self) -> usize {
        self.id_components.len()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let s: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.dim == 0 {
            return err("dim must be positive".into());
        }
        if self.id_components.is_empty() {
            return err("at least one ID component is required".into());
        }
        for (kind, comps) in [("id", &self.id_components), ("ood", &self.ood_components)] {
            for (i, c) in comps.iter().enumerate() {
                if c.mean.len() != self.dim {
                    return err(format!(
                        "{kind} component {i} has {} coordinates, dim is {}",
                        c.mean.len(),
                        self.dim
                    ));
                }
                if !(c.sigma > 0.0 && c.sigma.is_finite()) {
                    return err(format!(
                        "{kind} component {i} needs sigma > 0, got {}",
                        c.sigma
                    ));
                }
            }
        }
        let all: Vec<&Vec<f64>> = self
            .id_components
            .iter()
            .chain(&self.ood_components)
            .map(|c| &c.mean)
            .collect();
        for i in 0..all.len() {
            for j in (i + 1)..all.len() {
                if all[i] == all[j] {
                    return err(format!("component means {i} and {j} coincide"));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.aux_overlap) {
            return err(format!(
                "aux_overlap must lie in [0, 1], got {}",
                self.aux_overlap
            ));
        }
        if !(self.remote_radius >= 0.0 && self.remote_radius.is_finite()) {
            return err(format!(
                "remote_radius must be non-negative, got {}",
                self.remote_radius
            ));
        }
        let cov = &self.covariate;
        if !cov.translation.is_empty() && cov.translation.len() != self.dim {
            return err(format!(
                "translation has {} coordinates, dim is {}",
                cov.translation.len(),
                self.dim
            ));
        }
        if cov.noise < 0.0 {
            return err(format!(
                "covariate noise must be non-negative, got {}",
                cov.noise
            ));
        }
        Ok(())
    }

    fn draw(
        &self,
        comps: &[Component],
        tag: &str,
        n: usize,
        label_of: impl Fn(usize) -> i64 + Sync,
        provenance: Provenance,
    ) -> Vec<LabeledSample> {
        (0..n as u64)
            .into_par_iter()
            .map(|i| {
                let mut rng = sample_rng(self.seed, tag, i);
                let k = rng.random_range(0..comps.len());
                let c = &comps[k];
                let x = c
                    .mean
                    .iter()
                    .map(|m| m + c.sigma * gaussian(&mut rng))
                    .collect();
                LabeledSample {
                    x,
                    label: label_of(k),
                    provenance,
                }
            })
            .collect()
    }

    /// ID samples for the split named by `split` (e.g. "train", "test").
    pub fn gen_id(&self, n: usize, split: &str) -> Vec<LabeledSample> {
        self.draw(
            &self.id_components,
            &format!("id/{split}"),
            n,
            |k| k as i64,
            Provenance::Id,
        )
    }

    pub fn gen_semantic_ood(&self, n: usize) -> Vec<LabeledSample> {
        if self.ood_components.is_empty() {
            return Vec::new();
        }
        self.draw(
            &self.ood_components,
            "semantic_ood",
            n,
            |_| -1,
            Provenance::SemanticOod,
        )
    }

    /// Applies the covariate transform to labelled samples.
    pub fn gen_covariate(&self, id_samples: &[LabeledSample]) -> Result<Vec<LabeledSample>> {
        let cov = &self.covariate;
        if cov.rotation != 0.0 && self.dim < 2 {
            return Err(Error::InvalidArgument(
                "rotation needs at least two dimensions".into(),
            ));
        }
        if let Some(s) = id_samples.iter().find(|s| s.label < 0) {
            return Err(Error::InvalidArgument(format!(
                "covariate shift needs labelled inputs, got label {}",
                s.label
            )));
        }
        let (sin, cos) = cov.rotation.sin_cos();
        Ok(id_samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let mut x = s.x.clone();
                if cov.rotation != 0.0 {
                    let (a, b) = (x[0], x[1]);
                    x[0] = cos * a - sin * b;
                    x[1] = sin * a + cos * b;
                }
                for (xi, t) in x.iter_mut().zip(&cov.translation) {
                    *xi += t;
                }
                if cov.noise > 0.0 {
                    let mut rng = sample_rng(self.seed, "covariate", i as u64);
                    for xi in x.iter_mut() {
                        *xi += cov.noise * gaussian(&mut rng);
                    }
                }
                LabeledSample {
                    x,
                    label: s.label,
                    provenance: Provenance::Covariate,
                }
            })
            .collect())
    }

    /// Far-away anchors, one per OOD component, fixed by the seed.
    pub fn remote_anchors(&self) -> Vec<Vec<f64>> {
        let mut rng = sample_rng(self.seed, "remote", 0);
        self.ood_components
            .iter()
            .map(|_| {
                random_direction(&mut rng, self.dim)
                    .into_iter()
                    .map(|v| v * self.remote_radius)
                    .collect()
            })
            .collect()
    }

    /// Auxiliary components: `(1 − α)·remote + α·ood` means, OOD spreads.
    pub fn aux_components(&self) -> Vec<Component> {
        let a = self.aux_overlap;
        self.remote_anchors()
            .into_iter()
            .zip(&self.ood_components)
            .map(|(r, c)| Component {
                mean: if a == 1.0 {
                    c.mean.clone()
                } else if a == 0.0 {
                    r
                } else {
                    r.iter()
                        .zip(&c.mean)
                        .map(|(r, o)| (1.0 - a) * r + a * o)
                        .collect()
                },
                sigma: c.sigma,
            })
            .collect()
    }

    pub fn gen_aux(&self, n: usize) -> Vec<LabeledSample> {
        let comps = self.aux_components();
        if comps.is_empty() {
            return Vec::new();
        }
        self.draw(&comps, "aux", n, |_| -1, Provenance::Aux)
    }
}

/// Stacks samples into an input matrix and label vector.
pub fn to_matrix(samples: &[LabeledSample]) -> (Array2<f64>, Vec<i64>) {
    let d = samples.first().map_or(0, |s| s.x.len());
    let flat: Vec<f64> = samples.iter().flat_map(|s| s.x.iter().copied()).collect();
    let x = Array2::from_shape_vec((samples.len(), d), flat).expect("samples share one dimension");
    (x, samples.iter().map(|s| s.label).collect())
}

/// A pack holding raw inputs under `features/input` plus labels.
pub fn raw_pack(samples: &[LabeledSample], role: Role, class_count: usize) -> ShiftPack {
    let (x, labels) = to_matrix(samples);
    let mut pack = ShiftPack::new(role, class_count).with_metadata("producer", "shiftlab synth");
    pack.insert_matrix(INPUT_FEATURES, &x);
    pack.insert_labels(&labels);
    debug_assert!(pack.contains(LABELS));
    pack
}
