//! Adaptive similarity learning.
//!
//! Each subject's row of the similarity matrix solves a small quadratic
//! program over its within-class candidates: minimize
//! `sum_j (d_ij * s_ij + gamma_i * s_ij^2)` subject to `s_i >= 0`,
//! `sum_j s_ij = 1`. With the row regularizer `gamma_i` chosen so that
//! exactly K neighbors stay active, the solution is available in closed
//! form from the K+1 smallest distances:
//!
//! * `gamma_i = (K * d_(K+1) - sum_{j<=K} d_(j)) / 2`
//! * `s_(j) = 1/K + (sum_{j<=K} d_(j) - K * d_(j)) / (2 K gamma_i)` clamped at 0
//!
//! where `d_(1) <= ... <= d_(p)` are the sorted candidate distances. Rows
//! are row-stochastic with at most K nonzeros, and cross-class entries are
//! exactly zero.

use std::io::Write;

use ndarray::{Array2, ArrayView2};

use crate::data_model::{fmt_f64, MultiModalDataset};
use crate::error::{Error, Result};
use crate::parallel::map_range;

/// Row-stochastic, class-masked, K-sparse similarity matrix together with
/// the learned per-row regularizer weights.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    values: Array2<f64>,
    neighbor_count: usize,
    gammas: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    /// The K requested at construction (individual rows may use fewer
    /// neighbors when clamped).
    pub fn neighbor_count(&self) -> usize {
        self.neighbor_count
    }

    /// Learned per-row regularizer weights (clamped at zero for degenerate
    /// rows resolved by uniform tie-breaking).
    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }

    /// Row-major nonzero entries as `(row, col, value)`.
    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for ((i, j), v) in self.values.indexed_iter() {
            if *v != 0.0 {
                out.push((i, j, *v));
            }
        }
        out
    }

    /// Writes the dense `n x n` matrix as CSV (no header).
    pub fn write_dense_csv(&self, mut w: impl Write) -> Result<()> {
        let n = self.n();
        let mut line = String::new();
        for i in 0..n {
            line.clear();
            for j in 0..n {
                if j > 0 {
                    line.push(',');
                }
                line.push_str(&fmt_f64(self.values[[i, j]]));
            }
            line.push('\n');
            w.write_all(line.as_bytes()).map_err(|e| Error::Io {
                path: "<similarity dense csv>".into(),
                source: e,
            })?;
        }
        Ok(())
    }

    /// Writes nonzero entries as `row,col,value` CSV with a header.
    pub fn write_triplet_csv(&self, mut w: impl Write) -> Result<()> {
        let io = |e| Error::Io {
            path: "<similarity triplet csv>".into(),
            source: e,
        };
        w.write_all(b"row,col,value\n").map_err(io)?;
        for (i, j, v) in self.triplets() {
            w.write_all(format!("{i},{j},{}\n", fmt_f64(v)).as_bytes())
                .map_err(io)?;
        }
        Ok(())
    }
}

/// serde representation: sparse triplets plus row metadata.
#[derive(serde::Serialize, serde::Deserialize)]
struct SimilarityDto {
    n: usize,
    neighbor_count: usize,
    gammas: Vec<f64>,
    triplets: Vec<(usize, usize, f64)>,
}

impl serde::Serialize for SimilarityMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        SimilarityDto {
            n: self.n(),
            neighbor_count: self.neighbor_count,
            gammas: self.gammas.clone(),
            triplets: self.triplets(),
        }
        .serialize(s)
    }
}

impl<'de> serde::Deserialize<'de> for SimilarityMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let dto = SimilarityDto::deserialize(d)?;
        let mut values = Array2::<f64>::zeros((dto.n, dto.n));
        for (i, j, v) in dto.triplets {
            if i >= dto.n || j >= dto.n {
                return Err(serde::de::Error::custom("triplet index out of range"));
            }
            values[[i, j]] = v;
        }
        Ok(SimilarityMatrix {
            values,
            neighbor_count: dto.neighbor_count,
            gammas: dto.gammas,
        })
    }
}

/// Within-class candidate distances for one subject.
#[derive(Debug, Clone)]
pub struct DistanceRow {
    pub subject: usize,
    /// Candidate subject indices (same class, excluding `subject`).
    pub candidates: Vec<usize>,
    /// Squared distances aligned with `candidates`.
    pub distances: Vec<f64>,
}

/// Closed-form solution of one row's simplex QP.
#[derive(Debug, Clone)]
pub struct RowSolution {
    /// Weights aligned with the candidate order of the input row.
    pub weights: Vec<f64>,
    /// Learned row regularizer (0 for degenerate rows).
    pub gamma: f64,
    /// Dual shift of the closed form; `+inf` for degenerate rows where the
    /// uniform tie-break applies.
    pub eta: f64,
}

fn class_candidates(labels: &[f64], subject: usize) -> Vec<usize> {
    let y = labels[subject];
    (0..labels.len())
        .filter(|&j| j != subject && labels[j] == y)
        .collect()
}

/// Per-modality projections `z_m = w_m^T X_m` for all subjects.
fn projections(ds: &MultiModalDataset, w: &ArrayView2<f64>) -> Result<Vec<Vec<f64>>> {
    if w.ncols() != ds.n_modalities() {
        return Err(Error::ShapeMismatch {
            context: "projection".into(),
            expected: format!("{} coefficient columns", ds.n_modalities()),
            actual: format!("{}", w.ncols()),
        });
    }
    let mut out = Vec::with_capacity(ds.n_modalities());
    for m in 0..ds.n_modalities() {
        let x = ds.modality(m);
        if x.nrows() != w.nrows() {
            return Err(Error::ShapeMismatch {
                context: format!("projection, modality {m}"),
                expected: format!("{} features", x.nrows()),
                actual: format!("{} coefficient rows", w.nrows()),
            });
        }
        let wm = w.column(m);
        let z = x.t().dot(&wm);
        out.push(z.to_vec());
    }
    Ok(out)
}

fn squared_projected_distance(proj: &[Vec<f64>], i: usize, j: usize) -> f64 {
    proj.iter()
        .map(|z| {
            let d = z[i] - z[j];
            d * d
        })
        .sum()
}

fn squared_raw_distance(ds: &MultiModalDataset, i: usize, j: usize) -> f64 {
    (0..ds.n_modalities())
        .map(|m| {
            let x = ds.modality(m);
            let a = x.column(i);
            let b = x.column(j);
            a.iter().zip(b.iter()).map(|(u, v)| (u - v) * (u - v)).sum::<f64>()
        })
        .sum()
}

/// Squared distances from `subject` to its within-class candidates in the
/// space spanned by the per-modality projections `w_m^T x`.
pub fn projected_distance_row(
    ds: &MultiModalDataset,
    w: &ArrayView2<f64>,
    subject: usize,
) -> Result<DistanceRow> {
    let proj = projections(ds, w)?;
    let candidates = class_candidates(ds.labels(), subject);
    let distances = candidates
        .iter()
        .map(|&j| squared_projected_distance(&proj, subject, j))
        .collect();
    Ok(DistanceRow {
        subject,
        candidates,
        distances,
    })
}

/// Squared distances in the raw (concatenated) feature space, used to seed
/// the similarity matrix before any coefficients exist.
pub fn raw_distance_row(ds: &MultiModalDataset, subject: usize) -> Result<DistanceRow> {
    let candidates = class_candidates(ds.labels(), subject);
    let distances = candidates
        .iter()
        .map(|&j| squared_raw_distance(ds, subject, j))
        .collect();
    Ok(DistanceRow {
        subject,
        candidates,
        distances,
    })
}

/// Solves one row's simplex QP for exactly `k` active neighbors.
///
/// Requires at least `k + 1` candidates (the (K+1)-th distance sets the
/// regularizer). Ties sort by ascending candidate index; if the learned
/// regularizer degenerates to zero (tied distances), the row falls back to
/// uniform `1/k` over the `k` nearest.
pub fn solve_row(row: &DistanceRow, k: usize) -> Result<RowSolution> {
    let p = row.candidates.len();
    if row.distances.len() != p {
        return Err(Error::ShapeMismatch {
            context: format!("distance row of subject {}", row.subject),
            expected: format!("{p} distances"),
            actual: format!("{}", row.distances.len()),
        });
    }
    if k == 0 {
        return Err(Error::InvalidConfig("K must be at least 1".into()));
    }
    if p < k + 1 {
        return Err(Error::NeighborCount {
            subject: row.subject,
            available: p,
            k,
        });
    }
    for (pos, d) in row.distances.iter().enumerate() {
        if !d.is_finite() || *d < 0.0 {
            return Err(Error::NonFinite {
                context: format!("distance row of subject {}", row.subject),
                location: format!("candidate {}", row.candidates[pos]),
            });
        }
    }

    // sort candidate positions by (distance, candidate index)
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| {
        row.distances[a]
            .partial_cmp(&row.distances[b])
            .expect("finite distances")
            .then(row.candidates[a].cmp(&row.candidates[b]))
    });

    let kf = k as f64;
    let sum_k: f64 = order[..k].iter().map(|&pos| row.distances[pos]).sum();
    let d_next = row.distances[order[k]];
    let gamma = 0.5 * (kf * d_next - sum_k);

    let mut weights = vec![0.0; p];
    if gamma <= 0.0 {
        // all K+1 nearest distances coincide: uniform over the K nearest
        for &pos in &order[..k] {
            weights[pos] = 1.0 / kf;
        }
        return Ok(RowSolution {
            weights,
            gamma: 0.0,
            eta: f64::INFINITY,
        });
    }

    let eta = 1.0 / kf + sum_k / (2.0 * kf * gamma);
    let mut total = 0.0;
    for &pos in &order[..k] {
        let s = 1.0 / kf + (sum_k - kf * row.distances[pos]) / (2.0 * kf * gamma);
        let s = s.max(0.0);
        weights[pos] = s;
        total += s;
    }
    // guard: renormalize so the row sums to one exactly up to rounding
    if total > 0.0 {
        for &pos in &order[..k] {
            weights[pos] /= total;
        }
    }
    Ok(RowSolution { weights, gamma, eta })
}

/// Solves one row's QP over K-sparse simplex vectors for an externally
/// supplied `gamma` (exact water-filling over the K nearest candidates).
///
/// Restricting the support to the K nearest is optimal among all K-sparse
/// simplex vectors: moving mass from a candidate to a strictly closer one
/// never increases the objective. Used by the joint fit, which learns the
/// row regularizers once and then holds them fixed so the alternation
/// descends a single objective.
pub(crate) fn solve_row_given_gamma(
    row: &DistanceRow,
    k: usize,
    gamma: f64,
) -> Result<RowSolution> {
    let p = row.candidates.len();
    if row.distances.len() != p {
        return Err(Error::ShapeMismatch {
            context: format!("distance row of subject {}", row.subject),
            expected: format!("{p} distances"),
            actual: format!("{}", row.distances.len()),
        });
    }
    if k == 0 {
        return Err(Error::InvalidConfig("K must be at least 1".into()));
    }
    if p < k {
        return Err(Error::NeighborCount {
            subject: row.subject,
            available: p,
            k,
        });
    }
    if !gamma.is_finite() || gamma < 0.0 {
        return Err(Error::NonFinite {
            context: format!("row regularizer of subject {}", row.subject),
            location: format!("gamma = {gamma}"),
        });
    }
    for (pos, d) in row.distances.iter().enumerate() {
        if !d.is_finite() || *d < 0.0 {
            return Err(Error::NonFinite {
                context: format!("distance row of subject {}", row.subject),
                location: format!("candidate {}", row.candidates[pos]),
            });
        }
    }

    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| {
        row.distances[a]
            .partial_cmp(&row.distances[b])
            .expect("finite distances")
            .then(row.candidates[a].cmp(&row.candidates[b]))
    });

    let kf = k as f64;
    let mut weights = vec![0.0; p];
    if gamma == 0.0 {
        // limit of the QP as the quadratic term vanishes: uniform K nearest
        for &pos in &order[..k] {
            weights[pos] = 1.0 / kf;
        }
        return Ok(RowSolution {
            weights,
            gamma,
            eta: f64::INFINITY,
        });
    }

    // water-filling: the active set is the largest prefix of the sorted
    // distances whose smallest weight stays positive
    let mut active = 1;
    let mut prefix = row.distances[order[0]];
    for a in 2..=k {
        let d_last = row.distances[order[a - 1]];
        let eta = (1.0 + (prefix + d_last) / (2.0 * gamma)) / a as f64;
        if eta - d_last / (2.0 * gamma) > 0.0 {
            active = a;
            prefix += d_last;
        } else {
            break;
        }
    }
    let eta = (1.0 + prefix / (2.0 * gamma)) / active as f64;
    let mut total = 0.0;
    for &pos in &order[..active] {
        let s = (eta - row.distances[pos] / (2.0 * gamma)).max(0.0);
        weights[pos] = s;
        total += s;
    }
    if total > 0.0 {
        for &pos in &order[..active] {
            weights[pos] /= total;
        }
    }
    Ok(RowSolution { weights, gamma, eta })
}

enum DistanceSource<'a> {
    Raw,
    Projected(&'a [Vec<f64>]),
}

fn assemble(
    ds: &MultiModalDataset,
    k: usize,
    clamp: bool,
    source: DistanceSource<'_>,
    given_gammas: Option<&[f64]>,
) -> Result<SimilarityMatrix> {
    let n = ds.n_subjects();
    if k == 0 {
        return Err(Error::InvalidConfig("K must be at least 1".into()));
    }
    if let Some(g) = given_gammas {
        if g.len() != n {
            return Err(Error::ShapeMismatch {
                context: "given row regularizers".into(),
                expected: format!("{n} entries"),
                actual: format!("{}", g.len()),
            });
        }
    }
    let labels = ds.labels();
    let rows: Vec<Result<(Vec<usize>, Vec<f64>, f64)>> = map_range(n, |i| {
        let candidates = class_candidates(labels, i);
        let p = candidates.len();
        if p == 0 {
            return Err(Error::NeighborCount {
                subject: i,
                available: 0,
                k,
            });
        }
        let distances: Vec<f64> = candidates
            .iter()
            .map(|&j| match source {
                DistanceSource::Raw => squared_raw_distance(ds, i, j),
                DistanceSource::Projected(proj) => squared_projected_distance(proj, i, j),
            })
            .collect();
        if clamp && p == 1 {
            // lone within-class peer gets full weight
            let gamma = given_gammas.map_or(0.0, |g| g[i]);
            return Ok((candidates, vec![1.0], gamma));
        }
        let k_row = if clamp { k.min(p - 1) } else { k };
        if clamp && k_row < k {
            log::debug!("subject {i}: clamped K from {k} to {k_row} ({p} candidates)");
        }
        let row = DistanceRow {
            subject: i,
            candidates: candidates.clone(),
            distances,
        };
        let sol = match given_gammas {
            Some(g) => solve_row_given_gamma(&row, k_row, g[i])?,
            None => solve_row(&row, k_row)?,
        };
        Ok((candidates, sol.weights, sol.gamma))
    });

    let mut values = Array2::<f64>::zeros((n, n));
    let mut gammas = Vec::with_capacity(n);
    for (i, r) in rows.into_iter().enumerate() {
        let (candidates, weights, gamma) = r?;
        for (pos, &j) in candidates.iter().enumerate() {
            values[[i, j]] = weights[pos];
        }
        gammas.push(gamma);
    }
    Ok(SimilarityMatrix {
        values,
        neighbor_count: k,
        gammas,
    })
}

/// Rebuilds all similarity rows from projected distances under the current
/// coefficients `w` (`d x M`).
pub fn update_similarity(
    ds: &MultiModalDataset,
    w: &ArrayView2<f64>,
    k: usize,
    clamp: bool,
) -> Result<SimilarityMatrix> {
    let proj = projections(ds, w)?;
    assemble(ds, k, clamp, DistanceSource::Projected(&proj), None)
}

/// Rebuilds all similarity rows from projected distances while keeping the
/// per-row regularizers fixed at `gammas` (one entry per subject).
pub(crate) fn update_similarity_given_gammas(
    ds: &MultiModalDataset,
    w: &ArrayView2<f64>,
    k: usize,
    clamp: bool,
    gammas: &[f64],
) -> Result<SimilarityMatrix> {
    let proj = projections(ds, w)?;
    assemble(ds, k, clamp, DistanceSource::Projected(&proj), Some(gammas))
}

/// Builds the initial similarity matrix from raw feature-space distances.
pub fn initial_similarity(ds: &MultiModalDataset, k: usize, clamp: bool) -> Result<SimilarityMatrix> {
    assemble(ds, k, clamp, DistanceSource::Raw, None)
}
