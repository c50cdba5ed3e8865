//! Multi-kernel linear SVM on selected features.
//!
//! Per-modality linear kernels are combined with simplex weights `beta`,
//! and the combined kernel feeds a soft-margin dual SVM solved by
//! maximal-violating-pair (SMO-style) updates. The trained model carries
//! everything prediction needs: normalization statistics, per-modality
//! selected feature indices, support vectors, dual coefficients and the
//! kernel weights.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data_model::{matrix_serde, zscore_apply_matrices, MultiModalDataset, NormalizationStats};
use crate::error::{Error, Result};
use crate::evaluation::stratified_kfold;
use crate::linalg::check_kernel_psd;
use crate::parallel::map_range;

/// Fixed stream for the internal beta-search folds; the search is a pure
/// function of its inputs.
const BETA_FOLD_SEED: u64 = 0x42;

/// `A^T B` for `d' x p` and `d' x q` blocks (columns are subjects).
pub fn linear_kernel(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<Array2<f64>> {
    if a.nrows() != b.nrows() {
        return Err(Error::ShapeMismatch {
            context: "linear kernel".into(),
            expected: format!("{} feature rows", a.nrows()),
            actual: format!("{}", b.nrows()),
        });
    }
    Ok(a.t().dot(b))
}

/// Convex combination `sum_m beta_m K_m`; `beta` must lie on the simplex.
pub fn combine_kernels(kernels: &[Array2<f64>], betas: &[f64]) -> Result<Array2<f64>> {
    if kernels.is_empty() || kernels.len() != betas.len() {
        return Err(Error::InvalidInput(format!(
            "{} kernels for {} weights",
            kernels.len(),
            betas.len()
        )));
    }
    if betas.iter().any(|b| *b < 0.0) || (betas.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "kernel weights must be nonnegative and sum to 1, got {betas:?}"
        )));
    }
    let shape = kernels[0].raw_dim();
    let mut out = Array2::<f64>::zeros(shape);
    for (k, beta) in kernels.iter().zip(betas.iter()) {
        if k.raw_dim() != shape {
            return Err(Error::ShapeMismatch {
                context: "combine_kernels".into(),
                expected: format!("{shape:?}"),
                actual: format!("{:?}", k.raw_dim()),
            });
        }
        out.scaled_add(*beta, k);
    }
    Ok(out)
}

/// Dual solution of the soft-margin SVM.
#[derive(Debug, Clone)]
pub struct SvmSolution {
    pub alphas: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    /// True when no free support vectors existed and the bias came from
    /// the bound midpoint rule.
    pub bias_from_bounds: bool,
}

/// Trains a soft-margin SVM on a precomputed kernel by maximal-violating
/// pair updates: minimize `1/2 a^T Q a - 1^T a` with `Q_ij = y_i y_j K_ij`
/// subject to `0 <= a_i <= C`, `sum_i a_i y_i = 0`. Stops when the maximal
/// KKT violation drops below 1e-5 (or after 1e5 iterations, with a
/// warning).
pub fn svm_train(k: &ArrayView2<f64>, y: &[f64], c: f64) -> Result<SvmSolution> {
    let n = k.nrows();
    if k.ncols() != n || y.len() != n {
        return Err(Error::ShapeMismatch {
            context: "svm_train".into(),
            expected: format!("square kernel matching {} labels", y.len()),
            actual: format!("{}x{}", k.nrows(), k.ncols()),
        });
    }
    if !(c > 0.0) {
        return Err(Error::InvalidConfig(format!("C must be > 0, got {c}")));
    }
    for (i, yi) in y.iter().enumerate() {
        if *yi != 1.0 && *yi != -1.0 {
            return Err(Error::LabelDomain {
                subject: i,
                value: format!("{yi}"),
            });
        }
    }
    if !y.iter().any(|v| *v > 0.0) || !y.iter().any(|v| *v < 0.0) {
        return Err(Error::InvalidInput("SVM training needs both classes".into()));
    }
    check_kernel_psd(k, 1e-8, 1e-8)?;

    let tol = 1e-5;
    let max_iters = 100_000;
    let mut alphas = vec![0.0_f64; n];
    // gradient of the dual: g_i = (Q a)_i - 1
    let mut g = vec![-1.0_f64; n];
    let mut iterations = 0;

    loop {
        // maximal violating pair over I_up / I_low
        let mut m_up = f64::NEG_INFINITY;
        let mut i_up = usize::MAX;
        let mut m_low = f64::INFINITY;
        let mut i_low = usize::MAX;
        for t in 0..n {
            let v = -y[t] * g[t];
            let in_up = (y[t] > 0.0 && alphas[t] < c) || (y[t] < 0.0 && alphas[t] > 0.0);
            let in_low = (y[t] > 0.0 && alphas[t] > 0.0) || (y[t] < 0.0 && alphas[t] < c);
            if in_up && v > m_up {
                m_up = v;
                i_up = t;
            }
            if in_low && v < m_low {
                m_low = v;
                i_low = t;
            }
        }
        if i_up == usize::MAX || i_low == usize::MAX || m_up - m_low < tol {
            break;
        }
        if iterations >= max_iters {
            log::warn!("SVM hit the iteration cap with KKT violation {:.3e}", m_up - m_low);
            break;
        }
        iterations += 1;

        let (i, j) = (i_up, i_low);
        let a_ij = (k[[i, i]] + k[[j, j]] - 2.0 * k[[i, j]]).max(1e-12);
        // unconstrained step along the feasible pair direction
        let mut t_step = (m_up - m_low) / a_ij;
        // box caps: alpha_i moves by +y_i t, alpha_j by -y_j t
        let cap_i = if y[i] > 0.0 { c - alphas[i] } else { alphas[i] };
        let cap_j = if y[j] > 0.0 { alphas[j] } else { c - alphas[j] };
        t_step = t_step.min(cap_i).min(cap_j);
        if t_step <= 0.0 {
            break; // numerically stuck; KKT violation is within tolerance anyway
        }
        alphas[i] += y[i] * t_step;
        alphas[j] -= y[j] * t_step;
        for t in 0..n {
            g[t] += t_step * y[t] * (k[[t, i]] - k[[t, j]]);
        }
    }

    // bias from free support vectors, else bound midpoint
    let mut free_sum = 0.0;
    let mut free_count = 0usize;
    for t in 0..n {
        if alphas[t] > 0.0 && alphas[t] < c {
            free_sum += -y[t] * g[t];
            free_count += 1;
        }
    }
    let (bias, bias_from_bounds) = if free_count > 0 {
        (free_sum / free_count as f64, false)
    } else {
        let mut m_up = f64::NEG_INFINITY;
        let mut m_low = f64::INFINITY;
        for t in 0..n {
            let v = -y[t] * g[t];
            let in_up = (y[t] > 0.0 && alphas[t] < c) || (y[t] < 0.0 && alphas[t] > 0.0);
            let in_low = (y[t] > 0.0 && alphas[t] > 0.0) || (y[t] < 0.0 && alphas[t] < c);
            if in_up {
                m_up = m_up.max(v);
            }
            if in_low {
                m_low = m_low.min(v);
            }
        }
        log::warn!("no free support vectors; bias from bound midpoint");
        ((m_up + m_low) / 2.0, true)
    };

    Ok(SvmSolution {
        alphas,
        bias,
        iterations,
        bias_from_bounds,
    })
}

/// A fitted multi-kernel SVM, self-contained for prediction on raw
/// (unnormalized) per-modality feature matrices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainedClassifier {
    /// Normalized training subjects restricted to the selected features;
    /// one block per modality, or a single stacked block when
    /// `concatenate` is set.
    #[serde(with = "matrix_serde::vec")]
    pub support_vectors: Vec<Array2<f64>>,
    pub alphas: Vec<f64>,
    pub bias: f64,
    /// Kernel weights over `support_vectors` blocks (simplex).
    pub betas: Vec<f64>,
    /// Selected feature indices per original modality.
    pub selected_features: Vec<Vec<usize>>,
    pub normalization: NormalizationStats,
    /// Training labels aligned with `alphas`.
    pub labels: Vec<f64>,
    pub svm_c: f64,
    /// Feature-concatenation mode (single-kernel baselines).
    pub concatenate: bool,
}

impl TrainedClassifier {
    /// Checks the dual and simplex invariants (used by tests and on load).
    pub fn validate(&self) -> Result<()> {
        if self.betas.iter().any(|b| *b < 0.0) || (self.betas.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "kernel weights off the simplex: {:?}",
                self.betas
            )));
        }
        if self.alphas.len() != self.labels.len() {
            return Err(Error::ShapeMismatch {
                context: "classifier".into(),
                expected: format!("{} dual coefficients", self.labels.len()),
                actual: format!("{}", self.alphas.len()),
            });
        }
        let mut balance = 0.0;
        for (a, yl) in self.alphas.iter().zip(self.labels.iter()) {
            if *a < -1e-12 || *a > self.svm_c + 1e-12 {
                return Err(Error::InvalidInput(format!("dual coefficient {a} outside [0, C]")));
            }
            balance += a * yl;
        }
        if balance.abs() > 1e-6 {
            return Err(Error::InvalidInput(format!(
                "dual equality constraint violated: sum alpha_i y_i = {balance:.3e}"
            )));
        }
        Ok(())
    }

    /// Decision values and predicted labels for raw per-modality feature
    /// matrices (`d_m x q` each). Normalization and feature restriction
    /// use the stored training statistics; `sign(0)` reports `+1`.
    pub fn predict_matrices(&self, features: &[Array2<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
        let normalized = zscore_apply_matrices(features, &self.normalization)?;
        if normalized.len() != self.selected_features.len() {
            return Err(Error::ShapeMismatch {
                context: "predict".into(),
                expected: format!("{} modalities", self.selected_features.len()),
                actual: format!("{}", normalized.len()),
            });
        }
        let q = normalized.first().map(|x| x.ncols()).unwrap_or(0);
        if normalized.iter().any(|x| x.ncols() != q) {
            return Err(Error::ShapeMismatch {
                context: "predict".into(),
                expected: format!("{q} subjects in every modality"),
                actual: "ragged subject counts".into(),
            });
        }
        let restricted: Vec<Array2<f64>> = normalized
            .iter()
            .zip(self.selected_features.iter())
            .map(|(x, sel)| restrict_rows(x, sel))
            .collect();
        let blocks: Vec<Array2<f64>> = if self.concatenate {
            vec![vstack(&restricted)]
        } else {
            restricted
        };
        if blocks.len() != self.support_vectors.len() {
            return Err(Error::ShapeMismatch {
                context: "predict".into(),
                expected: format!("{} kernel blocks", self.support_vectors.len()),
                actual: format!("{}", blocks.len()),
            });
        }
        let n_sv = self.labels.len();
        let mut combined = Array2::<f64>::zeros((n_sv, q));
        for ((sv, block), beta) in self.support_vectors.iter().zip(blocks.iter()).zip(self.betas.iter()) {
            let kb = linear_kernel(&sv.view(), &block.view())?;
            combined.scaled_add(*beta, &kb);
        }
        let mut decisions = Vec::with_capacity(q);
        let mut labels = Vec::with_capacity(q);
        for col in 0..q {
            let mut f = self.bias;
            for i in 0..n_sv {
                if self.alphas[i] != 0.0 {
                    f += self.alphas[i] * self.labels[i] * combined[[i, col]];
                }
            }
            decisions.push(f);
            labels.push(if f >= 0.0 { 1.0 } else { -1.0 });
        }
        Ok((decisions, labels))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: TrainedClassifier = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }
}

/// Decision values and labels for a dataset's subjects (labels in `ds` are
/// ignored; prediction is pure).
pub fn predict(model: &TrainedClassifier, subjects: &MultiModalDataset) -> Result<(Vec<f64>, Vec<f64>)> {
    model.predict_matrices(subjects.modalities())
}

pub(crate) fn restrict_rows(x: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((rows.len(), x.ncols()));
    for (r, &i) in rows.iter().enumerate() {
        out.row_mut(r).assign(&x.row(i));
    }
    out
}

pub(crate) fn vstack(blocks: &[Array2<f64>]) -> Array2<f64> {
    let cols = blocks.first().map(|b| b.ncols()).unwrap_or(0);
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = Array2::<f64>::zeros((rows, cols));
    let mut at = 0;
    for b in blocks {
        for i in 0..b.nrows() {
            out.row_mut(at).assign(&b.row(i));
            at += 1;
        }
    }
    out
}

/// Candidate kernel-weight vectors: for two modalities the nine interior
/// tenths points; for general M all simplex points with coordinates in
/// {0, 0.1, ..., 1.0}.
fn beta_candidates(m: usize) -> Vec<Vec<f64>> {
    match m {
        0 => Vec::new(),
        1 => vec![vec![1.0]],
        2 => (1..=9).map(|t| vec![t as f64 / 10.0, (10 - t) as f64 / 10.0]).collect(),
        _ => {
            let mut out = Vec::new();
            let mut parts = vec![0u32; m];
            fn rec(parts: &mut Vec<u32>, pos: usize, left: u32, out: &mut Vec<Vec<f64>>) {
                if pos == parts.len() - 1 {
                    parts[pos] = left;
                    out.push(parts.iter().map(|&t| t as f64 / 10.0).collect());
                    return;
                }
                for t in 0..=left {
                    parts[pos] = t;
                    rec(parts, pos + 1, left - t, out);
                }
            }
            rec(&mut parts, 0, 10, &mut out);
            out
        }
    }
}

fn lex_greater(a: &[f64], b: &[f64]) -> bool {
    for (x, y) in a.iter().zip(b.iter()) {
        if x > y {
            return true;
        }
        if x < y {
            return false;
        }
    }
    false
}

/// Selects kernel weights by cross-validated accuracy on the (normalized)
/// training set, restricted to `selected` features per modality. Ties go
/// to the lexicographically largest weight vector (larger `beta_1` first).
pub fn grid_search_beta(
    train: &MultiModalDataset,
    selected: &[Vec<usize>],
    c: f64,
    folds: usize,
) -> Result<Vec<f64>> {
    let m = train.n_modalities();
    if selected.len() != m {
        return Err(Error::ShapeMismatch {
            context: "grid_search_beta".into(),
            expected: format!("{m} selection lists"),
            actual: format!("{}", selected.len()),
        });
    }
    if m == 1 {
        return Ok(vec![1.0]);
    }
    let n = train.n_subjects();
    let y = train.labels();
    let kernels: Vec<Array2<f64>> = (0..m)
        .map(|mi| {
            let block = restrict_rows(train.modality(mi), &selected[mi]);
            linear_kernel(&block.view(), &block.view())
        })
        .collect::<Result<_>>()?;

    // fold layout is shared by every candidate
    let folds_eff = folds.min(n);
    let splits: Vec<(Vec<usize>, Vec<usize>)> = if folds_eff >= 2 {
        let assign = stratified_kfold(y, folds_eff, BETA_FOLD_SEED)?;
        (0..folds_eff)
            .map(|f| {
                let tr: Vec<usize> = (0..n).filter(|&j| assign[j] != f).collect();
                let va: Vec<usize> = (0..n).filter(|&j| assign[j] == f).collect();
                (tr, va)
            })
            .collect()
    } else {
        // degenerate split: score by resubstitution
        vec![((0..n).collect(), (0..n).collect())]
    };

    let candidates = beta_candidates(m);
    let accuracies: Vec<Result<f64>> = map_range(candidates.len(), |ci| {
        let betas = &candidates[ci];
        let combined = combine_kernels(&kernels, betas)?;
        let mut acc_sum = 0.0;
        for (tr, va) in &splits {
            let sub = take_submatrix(&combined, tr, tr);
            let y_tr: Vec<f64> = tr.iter().map(|&j| y[j]).collect();
            let svm = svm_train(&sub.view(), &y_tr, c)?;
            let cross = take_submatrix(&combined, tr, va);
            let mut correct = 0usize;
            for (qc, &jv) in va.iter().enumerate() {
                let mut f = svm.bias;
                for (t, &jt) in tr.iter().enumerate() {
                    if svm.alphas[t] != 0.0 {
                        f += svm.alphas[t] * y[jt] * cross[[t, qc]];
                    }
                }
                let pred = if f >= 0.0 { 1.0 } else { -1.0 };
                if pred == y[jv] {
                    correct += 1;
                }
            }
            acc_sum += correct as f64 / va.len() as f64;
        }
        Ok(acc_sum / splits.len() as f64)
    });

    let mut best: Option<(f64, &Vec<f64>)> = None;
    for (ci, acc) in accuracies.into_iter().enumerate() {
        let acc = acc?;
        let cand = &candidates[ci];
        let replace = match &best {
            None => true,
            Some((best_acc, best_b)) => {
                acc > *best_acc || (acc == *best_acc && lex_greater(cand, best_b))
            }
        };
        if replace {
            best = Some((acc, cand));
        }
    }
    Ok(best.expect("nonempty candidate grid").1.clone())
}

fn take_submatrix(k: &Array2<f64>, rows: &[usize], cols: &[usize]) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((rows.len(), cols.len()));
    for (a, &i) in rows.iter().enumerate() {
        for (b, &j) in cols.iter().enumerate() {
            out[[a, b]] = k[[i, j]];
        }
    }
    out
}
