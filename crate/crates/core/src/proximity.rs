//! Dataset proximity between OOD and auxiliary feature sets.
//!
//! Two measures are provided: the mean distance from each OOD row to its
//! Top-K nearest auxiliary rows, and an unbiased MMD² estimate under a blended
//! Gaussian kernel `φ(a, b) = [(1 − ε)·κ(a, b) + ε]·q(a, b)`.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default neighbour count for [`dist_nn`].
pub const DEFAULT_K: usize = 10;
/// Default safeguard weight for [`mmd_dk`].
pub const DEFAULT_EPSILON: f64 = 0.1;

const UNIT_TOL: f64 = 1e-6;

/// Rows of unit L2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    rows: Array2<f64>,
    pub origin: String,
}

impl FeatureSet {
    /// L2-normalises every row. Zero rows are rejected.
    pub fn normalize(raw: ArrayView2<f64>, origin: impl Into<String>) -> Result<Self> {
        if raw.nrows() == 0 {
            return Err(Error::EmptyInput("feature set has no rows".into()));
        }
        let mut rows = raw.to_owned();
        for (i, mut row) in rows.rows_mut().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "row {i} has norm {norm} and cannot be normalised"
                )));
            }
            row /= norm;
        }
        Ok(Self {
            rows,
            origin: origin.into(),
        })
    }

    /// Wraps rows that are already unit-norm (within 1e-6).
    pub fn from_normalized(rows: Array2<f64>, origin: impl Into<String>) -> Result<Self> {
        if rows.nrows() == 0 {
            return Err(Error::EmptyInput("feature set has no rows".into()));
        }
        for (i, row) in rows.rows().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if (norm - 1.0).abs() > UNIT_TOL {
                return Err(Error::InvalidArgument(format!(
                    "row {i} has norm {norm}, expected 1"
                )));
            }
        }
        Ok(Self {
            rows,
            origin: origin.into(),
        })
    }

    pub fn rows(&self) -> ArrayView2<'_, f64> {
        self.rows.view()
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    match (a.as_slice(), b.as_slice()) {
        (Some(a), Some(b)) => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
        _ => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
    }
}

fn check_dims(a: &FeatureSet, b: &FeatureSet) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!(
            "feature widths differ: {} ({}) vs {} ({})",
            a.dim(),
            a.origin,
            b.dim(),
            b.origin
        )));
    }
    Ok(())
}

/// Mean Euclidean distance from each OOD row to its `k` nearest auxiliary
/// rows, averaged over `k · |ood|` terms.
pub fn dist_nn(ood: &FeatureSet, aux: &FeatureSet, k: usize) -> Result<f64> {
    check_dims(ood, aux)?;
    if k == 0 || k > aux.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must lie in [1, {}] (auxiliary rows)",
            aux.len()
        )));
    }
    let queries: Vec<ArrayView1<f64>> = ood.rows.rows().into_iter().collect();
    let per_row: Vec<f64> = queries
        .par_iter()
        .map(|&q| {
            let mut d: Vec<f64> = aux
                .rows
                .rows()
                .into_iter()
                .map(|r| sq_dist(q, r).sqrt())
                .collect();
            if k < d.len() {
                d.select_nth_unstable_by(k - 1, f64::total_cmp);
            }
            let mut nearest = d[..k].to_vec();
            nearest.sort_by(f64::total_cmp);
            nearest.iter().sum::<f64>()
        })
        .collect();
    Ok(per_row.iter().sum::<f64>() / (k * ood.len()) as f64)
}

/// Gaussian kernel bandwidth: a fixed σ or the median pairwise distance of
/// the pooled sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    Fixed(f64),
    Median,
}

impl Serialize for Bandwidth {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Bandwidth::Fixed(v) => s.serialize_f64(*v),
            Bandwidth::Median => s.serialize_str("median"),
        }
    }
}

impl<'de> Deserialize<'de> for Bandwidth {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Bandwidth::Fixed(v)),
            Raw::Text(s) if s == "median" => Ok(Bandwidth::Median),
            Raw::Text(s) => s.parse().map(Bandwidth::Fixed).map_err(|_| {
                serde::de::Error::custom(format!(
                    "bandwidth '{s}' is neither a number nor \"median\""
                ))
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelConfig {
    pub epsilon: f64,
    pub bandwidth_kappa: Bandwidth,
    pub bandwidth_q: Bandwidth,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            bandwidth_kappa: Bandwidth::Median,
            bandwidth_q: Bandwidth::Median,
        }
    }
}

impl KernelConfig {
    /// Default bandwidths with ε drawn uniformly from (0, 1) by a seeded RNG.
    pub fn with_sampled_epsilon(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut epsilon = 0.0;
        while epsilon == 0.0 {
            epsilon = rng.random::<f64>();
        }
        Self {
            epsilon,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must lie in (0, 1), got {}",
                self.epsilon
            )));
        }
        for bw in [self.bandwidth_kappa, self.bandwidth_q] {
            if let Bandwidth::Fixed(v) = bw {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::InvalidArgument(format!(
                        "bandwidth must be positive, got {v}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Median of all pairwise distances within `pooled` (falls back to 1 when
/// every point coincides).
fn median_pairwise_distance(pooled: &[ArrayView1<f64>]) -> f64 {
    let n = pooled.len();
    let mut d: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| ((i + 1)..n).map(move |j| sq_dist(pooled[i], pooled[j]).sqrt()))
        .collect();
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, hi, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    let hi = *hi;
    let median = if d.len() % 2 == 1 {
        hi
    } else {
        let lo = d[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo + hi) / 2.0
    };
    if median > 0.0 {
        median
    } else {
        1.0
    }
}

/// Sums after sorting so the result does not depend on evaluation order.
fn ordered_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

struct BlendedKernel {
    epsilon: f64,
    // -1 / (2σ²) for κ and q
    kappa_scale: f64,
    q_scale: f64,
}

impl BlendedKernel {
    fn eval(&self, a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
        let d2 = sq_dist(a, b);
        let kappa = (d2 * self.kappa_scale).exp();
        let q = (d2 * self.q_scale).exp();
        ((1.0 - self.epsilon) * kappa + self.epsilon) * q
    }
}

/// Unbiased MMD² U-statistic between two feature sets.
pub fn mmd_dk(ood: &FeatureSet, aux: &FeatureSet, cfg: &KernelConfig) -> Result<f64> {
    mmd_u(ood.rows(), aux.rows(), cfg)
}

/// [`mmd_dk`] on raw rows (no normalisation requirement).
pub fn mmd_u(x: ArrayView2<f64>, y: ArrayView2<f64>, cfg: &KernelConfig) -> Result<f64> {
    cfg.validate()?;
    let (m, n) = (x.nrows(), y.nrows());
    if m < 2 || n < 2 {
        return Err(Error::EmptyInput(format!(
            "MMD needs at least 2 rows per side (got {m} and {n})"
        )));
    }
    if x.ncols() != y.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "feature widths {} vs {}",
            x.ncols(),
            y.ncols()
        )));
    }

    let needs_median = matches!(cfg.bandwidth_kappa, Bandwidth::Median)
        || matches!(cfg.bandwidth_q, Bandwidth::Median);
    let median = if needs_median {
        let pooled: Vec<ArrayView1<f64>> = x.rows().into_iter().chain(y.rows()).collect();
        median_pairwise_distance(&pooled)
    } else {
        1.0
    };
    let sigma = |bw: Bandwidth| match bw {
        Bandwidth::Fixed(v) => v,
        Bandwidth::Median => median,
    };
    let scale = |s: f64| -1.0 / (2.0 * s * s);
    let kernel = BlendedKernel {
        epsilon: cfg.epsilon,
        kappa_scale: scale(sigma(cfg.bandwidth_kappa)),
        q_scale: scale(sigma(cfg.bandwidth_q)),
    };

    let within = |z: ArrayView2<f64>| -> f64 {
        let rows: Vec<ArrayView1<f64>> = z.rows().into_iter().collect();
        let k = rows.len();
        let terms: Vec<f64> = (0..k)
            .into_par_iter()
            .flat_map_iter(|i| {
                let rows = &rows;
                let kernel = &kernel;
                ((i + 1)..k).map(move |j| kernel.eval(rows[i], rows[j]))
            })
            .collect();
        2.0 * ordered_sum(terms) / (k * (k - 1)) as f64
    };
    let xrows: Vec<ArrayView1<f64>> = x.rows().into_iter().collect();
    let yrows: Vec<ArrayView1<f64>> = y.rows().into_iter().collect();
    let cross_terms: Vec<f64> = xrows
        .par_iter()
        .flat_map_iter(|a| yrows.iter().map(|b| kernel.eval(*a, *b)))
        .collect();
    let cross = ordered_sum(cross_terms) / (m * n) as f64;
    Ok(within(x) + within(y) - 2.0 * cross)
}

/// One auxiliary candidate's distances to the OOD set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProximityRow {
    pub name: String,
    pub dist_nn: f64,
    pub mmd: f64,
}

/// Both measures for each auxiliary candidate, closest (lowest `dist_nn`) first.
pub fn rank_auxiliaries(
    ood: &FeatureSet,
    candidates: &[FeatureSet],
    k: usize,
    cfg: &KernelConfig,
) -> Result<Vec<ProximityRow>> {
    let mut rows = candidates
        .iter()
        .map(|aux| {
            Ok(ProximityRow {
                name: aux.origin.clone(),
                dist_nn: dist_nn(ood, aux, k.min(aux.len()))?,
                mmd: mmd_dk(ood, aux, cfg)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| {
        a.dist_nn
            .total_cmp(&b.dist_nn)
            .then_with(|| a.name.cmp(&b.name))
    });
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn fs(rows: Array2<f64>) -> FeatureSet {
        FeatureSet::normalize(rows.view(), "t").unwrap()
    }

    /// Full distance matrix, full per-row sort.
    fn brute_dist_nn(ood: &FeatureSet, aux: &FeatureSet, k: usize) -> f64 {
        let mut total = 0.0;
        for q in ood.rows().rows() {
            let mut d: Vec<f64> = aux
                .rows()
                .rows()
                .into_iter()
                .map(|r| {
                    q.iter()
                        .zip(r)
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect();
            d.sort_by(f64::total_cmp);
            total += d[..k].iter().sum::<f64>();
        }
        total / (k * ood.len()) as f64
    }

    fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |_| StandardNormal.sample(rng))
    }

    #[test]
    fn normalisation() {
        let f = fs(array![[3.0, 4.0], [0.0, -2.0]]);
        assert_eq!(f.rows(), array![[0.6, 0.8], [0.0, -1.0]]);
        assert!(FeatureSet::normalize(array![[0.0, 0.0]].view(), "z").is_err());
        assert!(FeatureSet::from_normalized(array![[2.0, 0.0]], "z").is_err());
        assert!(FeatureSet::normalize(Array2::zeros((0, 2)).view(), "z").is_err());
    }

    #[test]
    fn dist_nn_cases() {
        let a = fs(array![[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]]);
        assert_eq!(dist_nn(&a, &a, 1).unwrap(), 0.0);
        let one = fs(array![[1.0, 0.0]]);
        let other = fs(array![[0.0, 1.0]]);
        assert!((dist_nn(&one, &other, 1).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        // K = |aux| averages every pairwise distance
        let mut all = 0.0;
        for q in one.rows().rows() {
            for r in a.rows().rows() {
                all += sq_dist(q, r).sqrt();
            }
        }
        assert!((dist_nn(&one, &a, 3).unwrap() - all / 3.0).abs() < 1e-15);
        assert!(dist_nn(&one, &other, 2).is_err());
        assert!(dist_nn(&one, &other, 0).is_err());
    }

    #[test]
    fn dist_nn_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ood = fs(random_rows(&mut rng, 40, 5));
        let aux = fs(random_rows(&mut rng, 70, 5));
        for k in [1, 3, 10, 70] {
            assert!((dist_nn(&ood, &aux, k).unwrap() - brute_dist_nn(&ood, &aux, k)).abs() < 1e-9);
        }
    }

    /// Explicit double sums for X = Y = {−1, +1} in one dimension.
    #[test]
    fn mmd_hand_expanded() {
        let x = array![[-1.0], [1.0]];
        let cfg = KernelConfig {
            epsilon: 0.5,
            bandwidth_kappa: Bandwidth::Fixed(1.0),
            bandwidth_q: Bandwidth::Fixed(1.0),
        };
        let g = |a: f64, b: f64| (-(a - b) * (a - b) / 2.0f64).exp();
        let phi = |a: f64, b: f64| (0.5 * g(a, b) + 0.5) * g(a, b);
        let pts = [-1.0, 1.0];
        let mut xx = 0.0;
        let mut xy = 0.0;
        for (i, &a) in pts.iter().enumerate() {
            for (j, &b) in pts.iter().enumerate() {
                if i != j {
                    xx += phi(a, b);
                }
                xy += phi(a, b);
            }
        }
        let expected = xx / 2.0 + xx / 2.0 - 2.0 * xy / 4.0;
        let got = mmd_dk(&fs(x.clone()), &fs(x), &cfg).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn mmd_separated_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_rows(&mut rng, 100, 4) * 0.1;
        let mut b = random_rows(&mut rng, 100, 4) * 0.1;
        b.column_mut(0).mapv_inplace(|v| v + 10.0);
        let v = mmd_u(a.view(), b.view(), &KernelConfig::default()).unwrap();
        assert!(v > 0.5, "{v}");
    }

    #[test]
    fn mmd_needs_two_rows() {
        let one = fs(array![[1.0, 0.0]]);
        let two = fs(array![[1.0, 0.0], [0.0, 1.0]]);
        assert!(mmd_dk(&one, &two, &KernelConfig::default()).is_err());
        let bad = KernelConfig {
            epsilon: 1.0,
            ..Default::default()
        };
        assert!(mmd_dk(&two, &two, &bad).is_err());
    }

    #[test]
    fn sampled_epsilon_is_seeded() {
        let a = KernelConfig::with_sampled_epsilon(5);
        assert_eq!(a, KernelConfig::with_sampled_epsilon(5));
        assert!(a.epsilon > 0.0 && a.epsilon < 1.0);
    }

    #[test]
    fn bandwidth_config_parsing() {
        let cfg: KernelConfig =
            toml::from_str("epsilon = 0.2\nbandwidth_kappa = \"median\"\nbandwidth_q = 0.5")
                .unwrap();
        assert_eq!(cfg.bandwidth_kappa, Bandwidth::Median);
        assert_eq!(cfg.bandwidth_q, Bandwidth::Fixed(0.5));
    }

    #[test]
    fn ranking_orders_by_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ood = fs(random_rows(&mut rng, 20, 3) + 5.0);
        let near =
            FeatureSet::normalize((random_rows(&mut rng, 20, 3) + 5.0).view(), "near").unwrap();
        let far =
            FeatureSet::normalize((random_rows(&mut rng, 20, 3) - 5.0).view(), "far").unwrap();
        let table = rank_auxiliaries(&ood, &[far, near], 5, &KernelConfig::default()).unwrap();
        assert_eq!(table[0].name, "near");
        assert!(table[0].mmd < table[1].mmd);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn mmd_symmetric_and_knn_monotone(seed in any::<u64>(), m in 2usize..12, n in 2usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = fs(random_rows(&mut rng, m, 3));
            let y = fs(random_rows(&mut rng, n, 3));
            let cfg = KernelConfig::default();
            prop_assert_eq!(mmd_dk(&x, &y, &cfg).unwrap().to_bits(), mmd_dk(&y, &x, &cfg).unwrap().to_bits());
            let d1 = dist_nn(&x, &y, 1).unwrap();
            for k in 2..=n {
                prop_assert!(d1 <= dist_nn(&x, &y, k).unwrap() + 1e-15);
            }
            // permuting rows leaves dist_nn unchanged
            let mut rev = y.rows().to_owned();
            rev.invert_axis(ndarray::Axis(0));
            let yr = FeatureSet::from_normalized(rev, "r").unwrap();
            prop_assert!((dist_nn(&x, &y, 2.min(n)).unwrap() - dist_nn(&x, &yr, 2.min(n)).unwrap()).abs() < 1e-12);
        }
    }
}
