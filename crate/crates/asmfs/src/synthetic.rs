//! Synthetic benchmark generator and independent test oracles.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data_model::MultiModalDataset;
use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// Parameters of the synthetic two-class multi-modality problem.
///
/// A shared set of `n_informative` feature rows carries the class signal in
/// every modality (`y * class_separation / 2` plus noise); all remaining
/// rows are pure noise. With `correlated_noise`, half of each noise
/// feature's variance comes from a component shared across modalities,
/// which makes the modalities partially redundant and recovery harder.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_subjects: usize,
    /// Features per modality (all modalities share this count).
    pub n_features: usize,
    pub n_modalities: usize,
    pub n_informative: usize,
    pub class_separation: f64,
    pub noise_sigma: f64,
    pub correlated_noise: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_subjects: 200,
            n_features: 93,
            n_modalities: 2,
            n_informative: 10,
            class_separation: 3.0,
            noise_sigma: 1.0,
            correlated_noise: false,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < 4 {
            return Err(Error::InvalidConfig(format!(
                "n_subjects must be at least 4, got {}",
                self.n_subjects
            )));
        }
        if self.n_modalities == 0 {
            return Err(Error::InvalidConfig("n_modalities must be at least 1".into()));
        }
        if self.n_features == 0 {
            return Err(Error::InvalidConfig("n_features must be at least 1".into()));
        }
        if self.n_informative == 0 || self.n_informative > self.n_features {
            return Err(Error::InvalidConfig(format!(
                "n_informative must be in 1..={}, got {}",
                self.n_features, self.n_informative
            )));
        }
        if !(self.class_separation >= 0.0) || !self.class_separation.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "class_separation must be finite and >= 0, got {}",
                self.class_separation
            )));
        }
        if !(self.noise_sigma > 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "noise_sigma must be finite and > 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// Generates the dataset plus the ground-truth informative feature indices
/// (sorted ascending; the same rows are informative in every modality).
///
/// Each independent component draws from its own seed-derived stream, so
/// e.g. toggling `correlated_noise` leaves labels, support and the
/// informative features bit-identical.
pub fn generate(spec: &SyntheticSpec) -> Result<(MultiModalDataset, Vec<usize>)> {
    spec.validate()?;
    let n = spec.n_subjects;
    let d = spec.n_features;

    let mut labels: Vec<f64> = (0..n).map(|j| if j < n.div_ceil(2) { 1.0 } else { -1.0 }).collect();
    let mut labels_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "labels", 0));
    labels.shuffle(&mut labels_rng);

    let mut support_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "support", 0));
    let mut all: Vec<usize> = (0..d).collect();
    all.shuffle(&mut support_rng);
    let mut informative: Vec<usize> = all[..spec.n_informative].to_vec();
    informative.sort_unstable();
    let is_informative = {
        let mut mask = vec![false; d];
        for &i in &informative {
            mask[i] = true;
        }
        mask
    };

    // component shared across modalities by correlated noise features
    let shared: Option<Array2<f64>> = if spec.correlated_noise {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "shared", 0));
        let mut s = Array2::<f64>::zeros((d, n));
        for i in 0..d {
            for j in 0..n {
                s[[i, j]] = rng.sample(StandardNormal);
            }
        }
        Some(s)
    } else {
        None
    };
    let mix = 0.5_f64.sqrt(); // half the noise variance is shared

    let mut modalities = Vec::with_capacity(spec.n_modalities);
    for m in 0..spec.n_modalities {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "modality", m as u64));
        let mut x = Array2::<f64>::zeros((d, n));
        for i in 0..d {
            for j in 0..n {
                let g: f64 = rng.sample(StandardNormal);
                x[[i, j]] = if is_informative[i] {
                    labels[j] * spec.class_separation / 2.0 + spec.noise_sigma * g
                } else if let Some(shared) = &shared {
                    spec.noise_sigma * (mix * shared[[i, j]] + mix * g)
                } else {
                    spec.noise_sigma * g
                };
            }
        }
        modalities.push(x);
    }

    let ds = MultiModalDataset::new(modalities, labels)?;
    Ok((ds, informative))
}

/// Euclidean projection of `-d / (2 gamma)` onto the probability simplex
/// (sort-based exact algorithm). This is the reference solution of the
/// per-row similarity QP and is computed without the closed form used by
/// the production code.
pub fn oracle_simplex_qp(distances: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if !(gamma > 0.0) {
        return Err(Error::Degenerate(format!(
            "simplex QP oracle needs gamma > 0, got {gamma}"
        )));
    }
    let p = distances.len();
    if p == 0 {
        return Err(Error::InvalidInput("empty distance vector".into()));
    }
    let v: Vec<f64> = distances.iter().map(|d| -d / (2.0 * gamma)).collect();
    let mut u = v.clone();
    u.sort_by(|a, b| b.partial_cmp(a).expect("finite distances"));
    let mut cumsum = 0.0;
    let mut rho = 0;
    let mut tau = 0.0;
    for (j, uj) in u.iter().enumerate() {
        cumsum += uj;
        let t = (cumsum - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            rho = j + 1;
            tau = t;
        }
    }
    debug_assert!(rho > 0);
    Ok(v.iter().map(|vi| (vi - tau).max(0.0)).collect())
}

/// Naive `O(n^2)` evaluation of `sum_ij s_ij (z_i - z_j)^2`, the graph
/// smoothness penalty expressed without the Laplacian.
pub fn oracle_quadratic_form(s: &ArrayView2<f64>, z: &[f64]) -> f64 {
    let n = s.nrows();
    assert_eq!(s.ncols(), n, "similarity matrix must be square");
    assert_eq!(z.len(), n, "projection length must match");
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            let d = z[i] - z[j];
            acc += s[[i, j]] * d * d;
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::similarity::{solve_row, DistanceRow};
    use approx::assert_abs_diff_eq;

    #[test]
    fn deterministic_and_balanced() {
        let spec = SyntheticSpec {
            n_subjects: 51,
            n_features: 20,
            n_modalities: 2,
            n_informative: 4,
            seed: 7,
            ..Default::default()
        };
        let (a, inf_a) = generate(&spec).unwrap();
        let (b, inf_b) = generate(&spec).unwrap();
        assert_eq!(inf_a, inf_b);
        assert_eq!(a.labels(), b.labels());
        for m in 0..2 {
            for (x, y) in a.modality(m).iter().zip(b.modality(m).iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let (pos, neg) = a.class_counts();
        assert!(pos.abs_diff(neg) <= 1, "{pos} vs {neg}");
        assert_eq!(inf_a.len(), 4);
        assert!(inf_a.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn informative_features_separate_classes() {
        let spec = SyntheticSpec {
            n_subjects: 400,
            n_features: 30,
            n_informative: 5,
            class_separation: 3.0,
            seed: 3,
            ..Default::default()
        };
        let (ds, informative) = generate(&spec).unwrap();
        let labels = ds.labels();
        for m in 0..ds.n_modalities() {
            let x = ds.modality(m);
            for i in 0..spec.n_features {
                let mut pos = 0.0;
                let mut neg = 0.0;
                let (mut np, mut nn) = (0.0, 0.0);
                for j in 0..spec.n_subjects {
                    if labels[j] > 0.0 {
                        pos += x[[i, j]];
                        np += 1.0;
                    } else {
                        neg += x[[i, j]];
                        nn += 1.0;
                    }
                }
                let gap = pos / np - neg / nn;
                if informative.contains(&i) {
                    assert!((gap - 3.0).abs() < 0.5, "informative row {i}: gap {gap}");
                } else {
                    assert!(gap.abs() < 0.5, "noise row {i}: gap {gap}");
                }
            }
        }
    }

    #[test]
    fn zero_separation_removes_signal() {
        let spec = SyntheticSpec {
            n_subjects: 400,
            n_features: 10,
            n_informative: 3,
            class_separation: 0.0,
            seed: 11,
            ..Default::default()
        };
        let (ds, informative) = generate(&spec).unwrap();
        let labels = ds.labels();
        let x = ds.modality(0);
        for &i in &informative {
            let mut pos = 0.0;
            let mut neg = 0.0;
            for j in 0..spec.n_subjects {
                if labels[j] > 0.0 {
                    pos += x[[i, j]];
                } else {
                    neg += x[[i, j]];
                }
            }
            let gap = pos / 200.0 - neg / 200.0;
            assert!(gap.abs() < 0.5, "row {i}: gap {gap}");
        }
    }

    #[test]
    fn correlated_toggle_leaves_informative_rows_unchanged() {
        let base = SyntheticSpec {
            n_subjects: 40,
            n_features: 12,
            n_informative: 3,
            seed: 5,
            ..Default::default()
        };
        let corr = SyntheticSpec {
            correlated_noise: true,
            ..base.clone()
        };
        let (a, inf) = generate(&base).unwrap();
        let (b, inf_b) = generate(&corr).unwrap();
        assert_eq!(inf, inf_b);
        assert_eq!(a.labels(), b.labels());
        for &i in &inf {
            for j in 0..40 {
                assert_eq!(
                    a.modality(0)[[i, j]].to_bits(),
                    b.modality(0)[[i, j]].to_bits()
                );
            }
        }
        // noise rows differ under the toggle
        let noise_row = (0..12).find(|i| !inf.contains(i)).unwrap();
        assert_ne!(a.modality(0)[[noise_row, 0]], b.modality(0)[[noise_row, 0]]);
    }

    #[test]
    fn correlated_noise_couples_modalities() {
        let spec = SyntheticSpec {
            n_subjects: 2000,
            n_features: 4,
            n_informative: 1,
            correlated_noise: true,
            seed: 13,
            ..Default::default()
        };
        let (ds, inf) = generate(&spec).unwrap();
        let noise_row = (0..4).find(|i| !inf.contains(i)).unwrap();
        let a = ds.modality(0).row(noise_row);
        let b = ds.modality(1).row(noise_row);
        let n = 2000.0;
        let ma = a.sum() / n;
        let mb = b.sum() / n;
        let cov = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - ma) * (y - mb))
            .sum::<f64>()
            / n;
        let va = a.iter().map(|x| (x - ma) * (x - ma)).sum::<f64>() / n;
        let vb = b.iter().map(|y| (y - mb) * (y - mb)).sum::<f64>() / n;
        let corr = cov / (va * vb).sqrt();
        assert!((corr - 0.5).abs() < 0.1, "cross-modality correlation {corr}");
    }

    #[test]
    fn validation_rejects_bad_specs() {
        let mut s = SyntheticSpec::default();
        s.n_informative = 200;
        assert!(generate(&s).is_err());
        let mut s = SyntheticSpec::default();
        s.noise_sigma = 0.0;
        assert!(generate(&s).is_err());
        let mut s = SyntheticSpec::default();
        s.n_subjects = 2;
        assert!(generate(&s).is_err());
    }

    #[test]
    fn projection_oracle_agrees_with_closed_form() {
        let rows = [
            vec![1.0, 2.0, 4.0, 8.0],
            vec![0.3, 5.0, 0.01, 2.0, 2.0, 9.0],
            vec![10.0, 0.0, 3.0, 3.0, 1.0],
        ];
        for distances in rows {
            let p = distances.len();
            for k in 1..p {
                let row = DistanceRow {
                    subject: 0,
                    candidates: (1..=p).collect(),
                    distances: distances.clone(),
                };
                let sol = solve_row(&row, k).unwrap();
                if sol.gamma <= 0.0 {
                    continue;
                }
                let oracle = oracle_simplex_qp(&distances, sol.gamma).unwrap();
                let sum: f64 = oracle.iter().sum();
                assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
                for (w, o) in sol.weights.iter().zip(oracle.iter()) {
                    assert_abs_diff_eq!(*w, *o, epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn projection_oracle_rejects_degenerate_gamma() {
        assert!(oracle_simplex_qp(&[1.0, 2.0], 0.0).is_err());
        assert!(oracle_simplex_qp(&[1.0, 2.0], -1.0).is_err());
    }
}
