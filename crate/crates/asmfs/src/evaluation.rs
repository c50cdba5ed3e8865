//! Cross-validated evaluation: stratified folds, metrics, nested
//! hyperparameter selection and method benchmarks.
//!
//! Every pipeline stage that learns anything (normalization statistics,
//! feature selection, kernel weights, hyperparameters) sees training
//! subjects only; held-out folds enter exclusively through
//! `TrainedClassifier::predict_matrices`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classify::{
    combine_kernels, grid_search_beta, linear_kernel, restrict_rows, svm_train, vstack,
    TrainedClassifier,
};
use crate::data_model::{fmt_f64, zscore_apply, zscore_fit, MultiModalDataset};
use crate::error::{Error, Result};
use crate::feature_selection::{
    asmfs_fit, fixed_similarity_fit, lasso_fit, mtfs_fit, select_features, AsmfsConfig,
    FeatureRanking, FitResult, SelectionRule, K_GRID, LAMBDA_GRID, MU_GRID,
};
use crate::parallel::map_range;
use crate::seed::derive_seed;

/// Cross-validation layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvPlan {
    pub folds: usize,
    pub repeats: usize,
    /// Folds of the inner loop that selects hyperparameters.
    pub inner_folds: usize,
    pub stratified: bool,
    pub seed: u64,
}

impl Default for CvPlan {
    fn default() -> Self {
        CvPlan {
            folds: 10,
            repeats: 10,
            inner_folds: 10,
            stratified: true,
            seed: 0,
        }
    }
}

impl CvPlan {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::InvalidConfig(format!("folds must be >= 2, got {}", self.folds)));
        }
        if self.inner_folds < 2 {
            return Err(Error::InvalidConfig(format!(
                "inner_folds must be >= 2, got {}",
                self.inner_folds
            )));
        }
        if self.repeats == 0 {
            return Err(Error::InvalidConfig("repeats must be >= 1".into()));
        }
        Ok(())
    }
}

/// Stratified fold assignment: per-class round-robin dealing after a seeded
/// shuffle. Fold sizes differ by at most one overall and per class. Classes
/// smaller than the fold count are assigned best-effort with a warning.
pub fn stratified_kfold(labels: &[f64], folds: usize, seed: u64) -> Result<Vec<usize>> {
    let n = labels.len();
    if folds < 2 {
        return Err(Error::InvalidConfig(format!("folds must be >= 2, got {folds}")));
    }
    if n < folds {
        return Err(Error::InvalidInput(format!("{n} subjects cannot fill {folds} folds")));
    }
    for (j, y) in labels.iter().enumerate() {
        if *y != 1.0 && *y != -1.0 {
            return Err(Error::LabelDomain {
                subject: j,
                value: format!("{y}"),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assign = vec![0usize; n];
    let mut carry = 0usize;
    for class in [1.0, -1.0] {
        let mut members: Vec<usize> = (0..n).filter(|&j| labels[j] == class).collect();
        if !members.is_empty() && members.len() < folds {
            log::warn!(
                "class {class:+.0} has {} member(s) for {folds} folds; some folds will miss it",
                members.len()
            );
        }
        members.shuffle(&mut rng);
        for (t, &j) in members.iter().enumerate() {
            assign[j] = (carry + t) % folds;
        }
        carry = (carry + members.len()) % folds;
    }
    Ok(assign)
}

/// Unstratified fold assignment (seeded shuffle, round-robin dealing).
pub fn kfold(n: usize, folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::InvalidConfig(format!("folds must be >= 2, got {folds}")));
    }
    if n < folds {
        return Err(Error::InvalidInput(format!("{n} subjects cannot fill {folds} folds")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut assign = vec![0usize; n];
    for (t, &j) in order.iter().enumerate() {
        assign[j] = t % folds;
    }
    Ok(assign)
}

/// Classification metrics of one evaluation. Rates that are undefined for
/// the given confusion counts are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsEntry {
    pub accuracy: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub f1: Option<f64>,
    pub auc: Option<f64>,
    pub true_positives: usize,
    pub true_negatives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

/// Confusion-matrix metrics with the patient class `+1` as positive; AUC by
/// the rank (Mann-Whitney) formulation with tie averaging, which makes it
/// exactly invariant under strictly monotone score transforms.
pub fn compute_metrics(truth: &[f64], predicted: &[f64], scores: &[f64]) -> Result<MetricsEntry> {
    let n = truth.len();
    if n == 0 || predicted.len() != n || scores.len() != n {
        return Err(Error::ShapeMismatch {
            context: "compute_metrics".into(),
            expected: format!("{n} predictions and scores (n >= 1)"),
            actual: format!("{}/{}", predicted.len(), scores.len()),
        });
    }
    for (j, (t, p)) in truth.iter().zip(predicted.iter()).enumerate() {
        if (*t != 1.0 && *t != -1.0) || (*p != 1.0 && *p != -1.0) {
            return Err(Error::LabelDomain {
                subject: j,
                value: format!("truth {t}, predicted {p}"),
            });
        }
        if !scores[j].is_finite() {
            return Err(Error::NonFinite {
                context: "decision values".into(),
                location: format!("subject {j}"),
            });
        }
    }
    let (mut tp, mut tn, mut fp, mut fne) = (0usize, 0usize, 0usize, 0usize);
    for (t, p) in truth.iter().zip(predicted.iter()) {
        match (*t > 0.0, *p > 0.0) {
            (true, true) => tp += 1,
            (true, false) => fne += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
        }
    }
    let accuracy = (tp + tn) as f64 / n as f64;
    let sensitivity = if tp + fne > 0 {
        Some(tp as f64 / (tp + fne) as f64)
    } else {
        log::warn!("no positive subjects; sensitivity undefined");
        None
    };
    let specificity = if tn + fp > 0 {
        Some(tn as f64 / (tn + fp) as f64)
    } else {
        log::warn!("no negative subjects; specificity undefined");
        None
    };
    let f1 = if 2 * tp + fp + fne > 0 {
        Some(2.0 * tp as f64 / (2 * tp + fp + fne) as f64)
    } else {
        log::warn!("no positives in truth or predictions; F1 undefined");
        None
    };
    let auc = rank_auc(truth, scores);
    if auc.is_none() {
        log::warn!("single-class evaluation; AUC undefined");
    }
    Ok(MetricsEntry {
        accuracy,
        sensitivity,
        specificity,
        f1,
        auc,
        true_positives: tp,
        true_negatives: tn,
        false_positives: fp,
        false_negatives: fne,
    })
}

fn rank_auc(truth: &[f64], scores: &[f64]) -> Option<f64> {
    let n = truth.len();
    let np = truth.iter().filter(|t| **t > 0.0).count();
    let nn = n - np;
    if np == 0 || nn == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    // average ranks over tie groups (1-based)
    let mut rank_sum_pos = 0.0;
    let mut lo = 0;
    while lo < n {
        let mut hi = lo;
        while hi + 1 < n && scores[order[hi + 1]] == scores[order[lo]] {
            hi += 1;
        }
        let avg_rank = (lo + hi) as f64 / 2.0 + 1.0;
        for &j in &order[lo..=hi] {
            if truth[j] > 0.0 {
                rank_sum_pos += avg_rank;
            }
        }
        lo = hi + 1;
    }
    Some((rank_sum_pos - np as f64 * (np as f64 + 1.0) / 2.0) / (np as f64 * nn as f64))
}

/// One point of the ROC curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// The initial all-negative point carries `+inf` (JSON `null`).
    #[serde(with = "threshold_serde")]
    pub threshold: f64,
}

mod threshold_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// ROC sweep over decision-value thresholds (descending), emitting one
/// point per distinct score. Starts at (0, 0, +inf).
pub fn roc_points(truth: &[f64], scores: &[f64]) -> Vec<RocPoint> {
    let n = truth.len();
    let np = truth.iter().filter(|t| **t > 0.0).count().max(1);
    let nn = (n - truth.iter().filter(|t| **t > 0.0).count()).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut at = 0;
    while at < n {
        let s = scores[order[at]];
        while at < n && scores[order[at]] == s {
            if truth[order[at]] > 0.0 {
                tp += 1;
            } else {
                fp += 1;
            }
            at += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / nn as f64,
            tpr: tp as f64 / np as f64,
            threshold: s,
        });
    }
    points
}

/// Writes ROC points as `fpr,tpr,threshold` CSV.
pub fn write_roc_csv(points: &[RocPoint], mut w: impl Write) -> Result<()> {
    let io = |e| Error::Io {
        path: "<roc csv>".into(),
        source: e,
    };
    w.write_all(b"fpr,tpr,threshold\n").map_err(io)?;
    for p in points {
        let line = format!("{},{},{}\n", fmt_f64(p.fpr), fmt_f64(p.tpr), fmt_f64(p.threshold));
        w.write_all(line.as_bytes()).map_err(io)?;
    }
    Ok(())
}

/// Benchmark methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    /// Linear SVM on concatenated features (no selection).
    #[serde(rename = "SVM")]
    Svm,
    /// L1 selection on concatenated features, then linear SVM.
    #[serde(rename = "lassoSVM")]
    LassoSvm,
    /// Multi-kernel SVM, all features.
    #[serde(rename = "MKSVM")]
    MkSvm,
    /// Per-modality L1 selection, then multi-kernel SVM.
    #[serde(rename = "lassoMKSVM")]
    LassoMkSvm,
    /// L2,1 multi-task selection, then multi-kernel SVM.
    #[serde(rename = "MTFS")]
    Mtfs,
    /// Joint fit with the similarity matrix frozen at its raw-distance
    /// initialization (ablation).
    #[serde(rename = "fixed-similarity")]
    FixedSimilarity,
    /// Full adaptive-similarity fit.
    #[serde(rename = "ASMFS")]
    Asmfs,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Svm,
        Method::LassoSvm,
        Method::MkSvm,
        Method::LassoMkSvm,
        Method::Mtfs,
        Method::FixedSimilarity,
        Method::Asmfs,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Svm => "SVM",
            Method::LassoSvm => "lassoSVM",
            Method::MkSvm => "MKSVM",
            Method::LassoMkSvm => "lassoMKSVM",
            Method::Mtfs => "MTFS",
            Method::FixedSimilarity => "fixed-similarity",
            Method::Asmfs => "ASMFS",
        }
    }

    /// Hyperparameter candidates searched by the inner CV loop.
    pub fn candidate_grid(&self, grids: &HyperGrids) -> Vec<Hyperparams> {
        match self {
            Method::Svm | Method::MkSvm => vec![Hyperparams::default()],
            Method::LassoSvm | Method::LassoMkSvm | Method::Mtfs => grids
                .mu
                .iter()
                .map(|&mu| Hyperparams {
                    mu: Some(mu),
                    ..Default::default()
                })
                .collect(),
            Method::FixedSimilarity | Method::Asmfs => {
                let mut out = Vec::new();
                for &lambda in &grids.lambda {
                    for &mu in &grids.mu {
                        for &k in &grids.k {
                            out.push(Hyperparams {
                                lambda: Some(lambda),
                                mu: Some(mu),
                                k: Some(k),
                            });
                        }
                    }
                }
                out
            }
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match norm.as_str() {
            "svm" => Ok(Method::Svm),
            "lassosvm" => Ok(Method::LassoSvm),
            "mksvm" => Ok(Method::MkSvm),
            "lassomksvm" => Ok(Method::LassoMkSvm),
            "mtfs" => Ok(Method::Mtfs),
            "fixedsimilarity" | "fixedsim" => Ok(Method::FixedSimilarity),
            "asmfs" => Ok(Method::Asmfs),
            _ => Err(Error::InvalidConfig(format!(
                "unknown method {s:?} (expected one of SVM, lassoSVM, MKSVM, lassoMKSVM, MTFS, fixed-similarity, ASMFS)"
            ))),
        }
    }
}

/// Hyperparameters of one candidate; fields a method does not use stay
/// `None`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub lambda: Option<f64>,
    pub mu: Option<f64>,
    pub k: Option<usize>,
}

/// Search domains for (lambda, mu, K).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperGrids {
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    pub k: Vec<usize>,
}

impl Default for HyperGrids {
    fn default() -> Self {
        HyperGrids {
            lambda: LAMBDA_GRID.to_vec(),
            mu: MU_GRID.to_vec(),
            k: K_GRID.to_vec(),
        }
    }
}

impl HyperGrids {
    pub fn validate(&self) -> Result<()> {
        if self.lambda.is_empty() || self.mu.is_empty() || self.k.is_empty() {
            return Err(Error::InvalidConfig("hyperparameter grids must be nonempty".into()));
        }
        Ok(())
    }
}

/// Fixed pipeline knobs shared by every method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSettings {
    pub svm_c: f64,
    /// Folds of the kernel-weight search.
    pub beta_folds: usize,
    /// Relative score threshold of the selected-feature rule.
    pub select_epsilon: f64,
    /// Optional fixed selection size.
    pub top_t: Option<usize>,
    /// Template for the fit configs; lambda/mu/k are overridden by the
    /// active hyperparameters.
    pub asmfs: AsmfsConfig,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        PipelineSettings {
            svm_c: 1.0,
            beta_folds: 5,
            select_epsilon: 1e-6,
            top_t: None,
            asmfs: AsmfsConfig::default(),
        }
    }
}

impl PipelineSettings {
    pub fn resolve_config(&self, hp: &Hyperparams) -> AsmfsConfig {
        let mut config = self.asmfs.clone();
        if let Some(l) = hp.lambda {
            config.lambda = l;
        }
        if let Some(m) = hp.mu {
            config.mu = m;
        }
        if let Some(k) = hp.k {
            config.k = k;
        }
        config
    }
}

/// A fully fitted pipeline: the classifier plus (when the method has one)
/// the feature-selection fit and ranking.
#[derive(Debug, Clone)]
pub struct FittedPipeline {
    pub method: Method,
    pub hyperparams: Hyperparams,
    pub model: TrainedClassifier,
    pub fit: Option<FitResult>,
    pub ranking: Option<FeatureRanking>,
}

fn check_both_classes(ds: &MultiModalDataset) -> Result<()> {
    let (pos, neg) = ds.class_counts();
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidInput(format!(
            "training split needs both classes (got {pos} positive, {neg} negative)"
        )));
    }
    Ok(())
}

fn lasso_select(w: &[f64], epsilon: f64) -> Vec<usize> {
    let max = w.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    (0..w.len())
        .filter(|&i| w[i].abs() > epsilon * max && w[i] != 0.0)
        .collect()
}

/// Trains one method end to end on a training split: normalize, select
/// features, search kernel weights, train the SVM. Pure given its inputs.
pub fn fit_pipeline(
    train: &MultiModalDataset,
    method: Method,
    hp: &Hyperparams,
    settings: &PipelineSettings,
) -> Result<FittedPipeline> {
    check_both_classes(train)?;
    let stats = zscore_fit(train)?;
    let norm = zscore_apply(train, &stats)?;
    let y = train.labels().to_vec();
    let m = train.n_modalities();
    let all_features: Vec<Vec<usize>> = (0..m).map(|mi| (0..norm.n_features(mi)).collect()).collect();

    let mut fit: Option<FitResult> = None;
    let mut ranking: Option<FeatureRanking> = None;
    let (selected, concatenate): (Vec<Vec<usize>>, bool) = match method {
        Method::Svm => (all_features, true),
        Method::MkSvm => (all_features, false),
        Method::LassoSvm => {
            let mu = hp.mu.unwrap_or(settings.asmfs.mu);
            let stacked = vstack(norm.modalities());
            let w = lasso_fit(&stacked.view(), &y, mu)?;
            let picked = lasso_select(&w, settings.select_epsilon);
            let mut per_modality = vec![Vec::new(); m];
            let mut offsets = vec![0usize; m + 1];
            for mi in 0..m {
                offsets[mi + 1] = offsets[mi] + norm.n_features(mi);
            }
            for idx in picked {
                let mi = (0..m).find(|&mi| idx < offsets[mi + 1]).expect("index in range");
                per_modality[mi].push(idx - offsets[mi]);
            }
            (per_modality, true)
        }
        Method::LassoMkSvm => {
            let mu = hp.mu.unwrap_or(settings.asmfs.mu);
            let sel = (0..m)
                .map(|mi| {
                    let w = lasso_fit(&norm.modality(mi).view(), &y, mu)?;
                    Ok(lasso_select(&w, settings.select_epsilon))
                })
                .collect::<Result<Vec<_>>>()?;
            (sel, false)
        }
        Method::Mtfs => {
            let mu = hp.mu.unwrap_or(settings.asmfs.mu);
            let w = mtfs_fit(&norm, mu)?;
            let r = select_features(&w, SelectionRule::Joint);
            let sel = r.selected(settings.select_epsilon, settings.top_t);
            ranking = Some(r);
            (sel, false)
        }
        Method::FixedSimilarity | Method::Asmfs => {
            let config = settings.resolve_config(hp);
            let f = if method == Method::Asmfs {
                asmfs_fit(&norm, &config)?
            } else {
                fixed_similarity_fit(&norm, &config)?
            };
            let r = select_features(&f.w, SelectionRule::Joint);
            let sel = r.selected(settings.select_epsilon, settings.top_t);
            fit = Some(f);
            ranking = Some(r);
            (sel, false)
        }
    };

    let restricted: Vec<Array2<f64>> = (0..m)
        .map(|mi| restrict_rows(norm.modality(mi), &selected[mi]))
        .collect();
    let (blocks, betas) = if concatenate || m == 1 {
        (vec![vstack(&restricted)], vec![1.0])
    } else {
        let betas = grid_search_beta(&norm, &selected, settings.svm_c, settings.beta_folds)?;
        (restricted, betas)
    };
    let kernels: Vec<Array2<f64>> = blocks
        .iter()
        .map(|b| linear_kernel(&b.view(), &b.view()))
        .collect::<Result<_>>()?;
    let combined = if kernels.len() == 1 {
        kernels[0].clone()
    } else {
        combine_kernels(&kernels, &betas)?
    };
    let svm = svm_train(&combined.view(), &y, settings.svm_c)?;
    let model = TrainedClassifier {
        support_vectors: blocks,
        alphas: svm.alphas,
        bias: svm.bias,
        betas,
        selected_features: selected,
        normalization: stats,
        labels: y,
        svm_c: settings.svm_c,
        concatenate: concatenate || m == 1,
    };
    Ok(FittedPipeline {
        method,
        hyperparams: hp.clone(),
        model,
        fit,
        ranking,
    })
}

fn prefer_on_tie(cand: &Hyperparams, best: &Hyperparams) -> bool {
    if let (Some(a), Some(b)) = (cand.mu, best.mu) {
        if a != b {
            return a < b;
        }
    }
    if let (Some(a), Some(b)) = (cand.lambda, best.lambda) {
        if a != b {
            return a < b;
        }
    }
    if let (Some(a), Some(b)) = (cand.k, best.k) {
        if a != b {
            return a < b;
        }
    }
    false
}

/// Selects hyperparameters by inner cross-validation on the training split
/// (mean fold accuracy; ties prefer smaller mu, then lambda, then K), then
/// refits the full pipeline on the whole split. A single-candidate grid
/// skips the inner loop. `seed` drives only the inner fold layout.
pub fn nested_cv_fit(
    train: &MultiModalDataset,
    method: Method,
    grids: &HyperGrids,
    plan: &CvPlan,
    settings: &PipelineSettings,
    seed: u64,
) -> Result<(Hyperparams, FittedPipeline)> {
    grids.validate()?;
    let candidates = method.candidate_grid(grids);
    debug_assert!(!candidates.is_empty());
    if candidates.len() == 1 {
        let best = candidates.into_iter().next().expect("one candidate");
        let pipeline = fit_pipeline(train, method, &best, settings)?;
        return Ok((best, pipeline));
    }

    let n = train.n_subjects();
    let folds = plan.inner_folds;
    let assign = if plan.stratified {
        stratified_kfold(train.labels(), folds, derive_seed(seed, "inner-folds", 0))?
    } else {
        kfold(n, folds, derive_seed(seed, "inner-folds", 0))?
    };
    // materialize the fold splits once; all candidates share them
    let mut splits = Vec::with_capacity(folds);
    for f in 0..folds {
        let tr: Vec<usize> = (0..n).filter(|&j| assign[j] != f).collect();
        let va: Vec<usize> = (0..n).filter(|&j| assign[j] == f).collect();
        let train_ds = train.subset(&tr)?;
        let val_ds = train.subset(&va)?;
        splits.push((train_ds, val_ds));
    }

    let tasks = candidates.len() * folds;
    let fold_acc: Vec<Result<f64>> = map_range(tasks, |t| {
        let ci = t / folds;
        let fi = t % folds;
        let (train_fold, val_fold) = &splits[fi];
        let pipeline = fit_pipeline(train_fold, method, &candidates[ci], settings)?;
        let (_, pred) = pipeline.model.predict_matrices(val_fold.modalities())?;
        let correct = pred
            .iter()
            .zip(val_fold.labels().iter())
            .filter(|(p, y)| p == y)
            .count();
        Ok(correct as f64 / val_fold.n_subjects() as f64)
    });

    let mut best: Option<(f64, Hyperparams)> = None;
    for (ci, cand) in candidates.iter().enumerate() {
        let mut acc = 0.0;
        for fi in 0..folds {
            match &fold_acc[ci * folds + fi] {
                Ok(a) => acc += a,
                Err(e) => {
                    return Err(Error::InvalidInput(format!(
                        "inner fold {fi} failed for candidate {cand:?}: {e}"
                    )))
                }
            }
        }
        acc /= folds as f64;
        let replace = match &best {
            None => true,
            Some((best_acc, best_hp)) => {
                acc > *best_acc || (acc == *best_acc && prefer_on_tie(cand, best_hp))
            }
        };
        if replace {
            best = Some((acc, cand.clone()));
        }
    }
    let (_, best_hp) = best.expect("nonempty candidate grid");
    let pipeline = fit_pipeline(train, method, &best_hp, settings)?;
    Ok((best_hp, pipeline))
}

/// Mean, sample standard deviation and count of an aggregated metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateEntry {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

fn aggregate<'a>(values: impl Iterator<Item = Option<f64>> + 'a) -> Option<AggregateEntry> {
    let present: Vec<f64> = values.flatten().collect();
    if present.is_empty() {
        return None;
    }
    let n = present.len();
    let mean = present.iter().sum::<f64>() / n as f64;
    let std = if n >= 2 {
        (present.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Some(AggregateEntry { mean, std, count: n })
}

/// Aggregated metrics over all completed folds (mean over repeats x folds,
/// sample std).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub accuracy: Option<AggregateEntry>,
    pub sensitivity: Option<AggregateEntry>,
    pub specificity: Option<AggregateEntry>,
    pub f1: Option<AggregateEntry>,
    pub auc: Option<AggregateEntry>,
}

/// Outcome of one outer fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub repeat: usize,
    pub fold: usize,
    pub hyperparams: Hyperparams,
    pub metrics: MetricsEntry,
}

/// Benchmark result of one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub plan: CvPlan,
    pub grids: HyperGrids,
    pub settings: PipelineSettings,
    pub folds: Vec<FoldRecord>,
    pub aggregate: AggregateMetrics,
    /// ROC of the pooled decision values across all completed folds.
    pub roc: Vec<RocPoint>,
    /// Folds that failed, with reasons; they are excluded from aggregates.
    pub failures: Vec<String>,
}

struct FoldRun {
    record: FoldRecord,
    scores: Vec<f64>,
    truth: Vec<f64>,
}

/// Runs the repeated outer cross-validation for each method. Fold layouts
/// are shared across methods (fair comparison); per-fold hyperparameters
/// come from [`nested_cv_fit`]. Fold failures are recorded and skipped.
pub fn run_benchmark(
    dataset: &MultiModalDataset,
    methods: &[Method],
    plan: &CvPlan,
    grids: &HyperGrids,
    settings: &PipelineSettings,
) -> Result<Vec<MetricsReport>> {
    plan.validate()?;
    grids.validate()?;
    check_both_classes(dataset)?;
    if methods.is_empty() {
        return Err(Error::InvalidConfig("no methods to benchmark".into()));
    }
    let n = dataset.n_subjects();
    let assignments: Vec<Vec<usize>> = (0..plan.repeats)
        .map(|r| {
            let fold_seed = derive_seed(plan.seed, "repeat-folds", r as u64);
            if plan.stratified {
                stratified_kfold(dataset.labels(), plan.folds, fold_seed)
            } else {
                kfold(n, plan.folds, fold_seed)
            }
        })
        .collect::<Result<_>>()?;

    let mut reports = Vec::with_capacity(methods.len());
    for &method in methods {
        let tasks = plan.repeats * plan.folds;
        let runs: Vec<std::result::Result<FoldRun, String>> = map_range(tasks, |t| {
            let r = t / plan.folds;
            let f = t % plan.folds;
            run_fold(dataset, method, plan, grids, settings, &assignments[r], r, f)
                .map_err(|e| format!("{method} repeat {r} fold {f}: {e}"))
        });

        let mut folds = Vec::new();
        let mut failures = Vec::new();
        let mut pooled_scores = Vec::new();
        let mut pooled_truth = Vec::new();
        for run in runs {
            match run {
                Ok(run) => {
                    pooled_scores.extend_from_slice(&run.scores);
                    pooled_truth.extend_from_slice(&run.truth);
                    folds.push(run.record);
                }
                Err(msg) => {
                    log::warn!("{msg}");
                    failures.push(msg);
                }
            }
        }
        let aggregate = AggregateMetrics {
            accuracy: aggregate(folds.iter().map(|f| Some(f.metrics.accuracy))),
            sensitivity: aggregate(folds.iter().map(|f| f.metrics.sensitivity)),
            specificity: aggregate(folds.iter().map(|f| f.metrics.specificity)),
            f1: aggregate(folds.iter().map(|f| f.metrics.f1)),
            auc: aggregate(folds.iter().map(|f| f.metrics.auc)),
        };
        let roc = if pooled_truth.is_empty() {
            Vec::new()
        } else {
            roc_points(&pooled_truth, &pooled_scores)
        };
        reports.push(MetricsReport {
            method: method.name().to_string(),
            plan: plan.clone(),
            grids: grids.clone(),
            settings: settings.clone(),
            folds,
            aggregate,
            roc,
            failures,
        });
    }
    Ok(reports)
}

#[allow(clippy::too_many_arguments)]
fn run_fold(
    dataset: &MultiModalDataset,
    method: Method,
    plan: &CvPlan,
    grids: &HyperGrids,
    settings: &PipelineSettings,
    assignment: &[usize],
    repeat: usize,
    fold: usize,
) -> Result<FoldRun> {
    let n = dataset.n_subjects();
    let train_idx: Vec<usize> = (0..n).filter(|&j| assignment[j] != fold).collect();
    let test_idx: Vec<usize> = (0..n).filter(|&j| assignment[j] == fold).collect();
    if test_idx.is_empty() {
        return Err(Error::InvalidInput("empty test fold".into()));
    }
    let train_ds = dataset.subset(&train_idx)?;
    let test_ds = dataset.subset(&test_idx)?;
    let nested_seed = derive_seed(plan.seed, "nested", (repeat * plan.folds + fold) as u64);
    let (hp, pipeline) = nested_cv_fit(&train_ds, method, grids, plan, settings, nested_seed)?;
    let (scores, pred) = pipeline.model.predict_matrices(test_ds.modalities())?;
    let truth = test_ds.labels().to_vec();
    let metrics = compute_metrics(&truth, &pred, &scores)?;
    Ok(FoldRun {
        record: FoldRecord {
            repeat,
            fold,
            hyperparams: hp,
            metrics,
        },
        scores,
        truth,
    })
}

fn format_entry(e: &Option<AggregateEntry>) -> String {
    match e {
        Some(e) => format!("{:.4} \u{00b1} {:.4}", e.mean, e.std),
        None => "-".to_string(),
    }
}

/// Renders an aligned text table (one row per method; accuracy,
/// sensitivity, specificity, F1, AUC as mean +/- std).
pub fn render_benchmark_table(reports: &[MetricsReport]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<18}{:>17}{:>17}{:>17}{:>17}{:>17}\n",
        "method", "accuracy", "sensitivity", "specificity", "f1", "auc"
    ));
    for r in reports {
        out.push_str(&format!(
            "{:<18}{:>17}{:>17}{:>17}{:>17}{:>17}\n",
            r.method,
            format_entry(&r.aggregate.accuracy),
            format_entry(&r.aggregate.sensitivity),
            format_entry(&r.aggregate.specificity),
            format_entry(&r.aggregate.f1),
            format_entry(&r.aggregate.auc),
        ));
    }
    out
}
