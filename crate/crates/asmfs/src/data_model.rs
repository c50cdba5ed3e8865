//! Multi-modality dataset container, CSV I/O and per-feature normalization.
//!
//! Each modality is a `d_m x n` matrix (features in rows, subjects in
//! columns). All modalities describe the same `n` subjects and share one
//! label vector with entries in `{+1, -1}`.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Formats a float with 17 significant digits so that parsing the text
/// reproduces the exact bit pattern.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Debug, Clone)]
pub struct MultiModalDataset {
    modalities: Vec<Array2<f64>>,
    labels: Vec<f64>,
    modality_names: Vec<String>,
    feature_names: Vec<Vec<String>>,
}

impl MultiModalDataset {
    /// Builds a dataset with generated modality/feature names.
    /// Training datasets need at least two subjects.
    pub fn new(modalities: Vec<Array2<f64>>, labels: Vec<f64>) -> Result<Self> {
        let modality_names = (0..modalities.len()).map(|m| format!("mod{}", m + 1)).collect();
        let feature_names = modalities
            .iter()
            .map(|x| (0..x.nrows()).map(|i| format!("f{i}")).collect())
            .collect();
        Self::with_names(modalities, labels, modality_names, feature_names)
    }

    pub fn with_names(
        modalities: Vec<Array2<f64>>,
        labels: Vec<f64>,
        modality_names: Vec<String>,
        feature_names: Vec<Vec<String>>,
    ) -> Result<Self> {
        if modalities.is_empty() {
            return Err(Error::InvalidInput("dataset needs at least one modality".into()));
        }
        let n = labels.len();
        if n < 2 {
            return Err(Error::InvalidInput(format!(
                "dataset needs at least two subjects, got {n}"
            )));
        }
        let ds = Self::assemble(modalities, labels, modality_names, feature_names)?;
        Ok(ds)
    }

    /// Shared validation; `subset` uses this directly so single-subject
    /// slices (e.g. a one-subject test fold) remain representable.
    fn assemble(
        modalities: Vec<Array2<f64>>,
        labels: Vec<f64>,
        modality_names: Vec<String>,
        feature_names: Vec<Vec<String>>,
    ) -> Result<Self> {
        let n = labels.len();
        if modality_names.len() != modalities.len() || feature_names.len() != modalities.len() {
            return Err(Error::ShapeMismatch {
                context: "dataset names".into(),
                expected: format!("{} modality/feature name lists", modalities.len()),
                actual: format!("{}/{}", modality_names.len(), feature_names.len()),
            });
        }
        for (m, x) in modalities.iter().enumerate() {
            if x.ncols() != n {
                return Err(Error::ShapeMismatch {
                    context: format!("modality {}", modality_names[m]),
                    expected: format!("{n} subject columns"),
                    actual: format!("{}", x.ncols()),
                });
            }
            if x.nrows() == 0 {
                return Err(Error::InvalidInput(format!(
                    "modality {} has no features",
                    modality_names[m]
                )));
            }
            if feature_names[m].len() != x.nrows() {
                return Err(Error::ShapeMismatch {
                    context: format!("feature names of {}", modality_names[m]),
                    expected: format!("{}", x.nrows()),
                    actual: format!("{}", feature_names[m].len()),
                });
            }
            for ((i, j), v) in x.indexed_iter() {
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        context: format!("modality {}", modality_names[m]),
                        location: format!("feature row {i}, subject column {j}"),
                    });
                }
            }
        }
        for (j, y) in labels.iter().enumerate() {
            if *y != 1.0 && *y != -1.0 {
                return Err(Error::LabelDomain {
                    subject: j,
                    value: format!("{y}"),
                });
            }
        }
        Ok(MultiModalDataset {
            modalities,
            labels,
            modality_names,
            feature_names,
        })
    }

    pub fn n_subjects(&self) -> usize {
        self.labels.len()
    }

    pub fn n_modalities(&self) -> usize {
        self.modalities.len()
    }

    /// Feature count of modality `m`.
    pub fn n_features(&self, m: usize) -> usize {
        self.modalities[m].nrows()
    }

    pub fn modality(&self, m: usize) -> &Array2<f64> {
        &self.modalities[m]
    }

    pub fn modalities(&self) -> &[Array2<f64>] {
        &self.modalities
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn modality_names(&self) -> &[String] {
        &self.modality_names
    }

    pub fn feature_names(&self, m: usize) -> &[String] {
        &self.feature_names[m]
    }

    /// Number of subjects with label +1 and -1 respectively.
    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|y| **y > 0.0).count();
        (pos, self.labels.len() - pos)
    }

    /// Selects the subjects at `indices` (in the given order).
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidInput("subset of zero subjects".into()));
        }
        let n = self.n_subjects();
        if let Some(bad) = indices.iter().find(|&&j| j >= n) {
            return Err(Error::InvalidInput(format!(
                "subset index {bad} out of range for {n} subjects"
            )));
        }
        let modalities = self
            .modalities
            .iter()
            .map(|x| {
                let mut sub = Array2::<f64>::zeros((x.nrows(), indices.len()));
                for (c, &j) in indices.iter().enumerate() {
                    sub.column_mut(c).assign(&x.column(j));
                }
                sub
            })
            .collect();
        let labels = indices.iter().map(|&j| self.labels[j]).collect();
        Self::assemble(
            modalities,
            labels,
            self.modality_names.clone(),
            self.feature_names.clone(),
        )
    }

    /// Writes one CSV per modality (subjects in rows, features in columns)
    /// plus a single-column label file.
    pub fn save_csv(&self, modality_paths: &[impl AsRef<Path>], labels_path: impl AsRef<Path>) -> Result<()> {
        if modality_paths.len() != self.n_modalities() {
            return Err(Error::InvalidInput(format!(
                "{} paths for {} modalities",
                modality_paths.len(),
                self.n_modalities()
            )));
        }
        for (m, path) in modality_paths.iter().enumerate() {
            write_matrix_csv(path, &self.modalities[m], &self.feature_names[m])?;
        }
        let path = labels_path.as_ref();
        let mut w = csv_writer(path)?;
        w.write_record(["label"]).map_err(|e| csv_err(path, e))?;
        for y in &self.labels {
            let s = if *y > 0.0 { "1" } else { "-1" };
            w.write_record([s]).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| io_err(path, e))?;
        Ok(())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source: e,
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Csv {
        path: path.display().to_string(),
        source: e,
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    let f = File::create(path).map_err(|e| io_err(path, e))?;
    Ok(csv::Writer::from_writer(BufWriter::new(f)))
}

fn csv_reader(path: &Path) -> Result<csv::Reader<BufReader<File>>> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(BufReader::new(f)))
}

/// Writes a `d x n` feature matrix as CSV with subjects in rows.
/// Values carry 17 significant digits and round-trip bit-identically.
pub fn write_matrix_csv(path: impl AsRef<Path>, matrix: &Array2<f64>, feature_names: &[String]) -> Result<()> {
    let path = path.as_ref();
    if feature_names.len() != matrix.nrows() {
        return Err(Error::InvalidInput(format!(
            "{} feature names for {} features",
            feature_names.len(),
            matrix.nrows()
        )));
    }
    let mut w = csv_writer(path)?;
    w.write_record(feature_names).map_err(|e| csv_err(path, e))?;
    let mut field = String::new();
    for j in 0..matrix.ncols() {
        let record = (0..matrix.nrows()).map(|i| {
            field.clear();
            let _ = write!(field, "{:.16e}", matrix[[i, j]]);
            field.clone()
        });
        w.write_record(record).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Reads a feature matrix written by [`write_matrix_csv`] (or any CSV with a
/// feature-name header and one subject per row). Returns the `d x n` matrix
/// and the feature names. `n = 0` is allowed here; training constructors
/// enforce their own minimum.
pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<(Array2<f64>, Vec<String>)> {
    let path = path.as_ref();
    let mut r = csv_reader(path)?;
    let names: Vec<String> = r
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(|s| s.to_string())
        .collect();
    let d = names.len();
    if d == 0 {
        return Err(Error::InvalidInput(format!(
            "{}: no feature columns in header",
            path.display()
        )));
    }
    let mut values: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for (row, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() != d {
            return Err(Error::ShapeMismatch {
                context: format!("{} row {}", path.display(), row + 2),
                expected: format!("{d} fields"),
                actual: format!("{}", rec.len()),
            });
        }
        for (col, s) in rec.iter().enumerate() {
            let v: f64 = s.trim().parse().map_err(|_| Error::InvalidInput(format!(
                "{}: row {}, column {} ({:?}) is not a number",
                path.display(),
                row + 2,
                names[col],
                s
            )))?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: path.display().to_string(),
                    location: format!("row {}, column {}", row + 2, names[col]),
                });
            }
            values.push(v);
        }
        n += 1;
    }
    // rows are subjects; transpose into d x n
    let mut matrix = Array2::<f64>::zeros((d, n));
    for j in 0..n {
        for i in 0..d {
            matrix[[i, j]] = values[j * d + i];
        }
    }
    Ok((matrix, names))
}

/// Reads the single-column label CSV. Accepts `1`, `+1`, `-1` (and float
/// spellings); `0` is remapped to `-1` with a warning.
pub fn read_labels_csv(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let mut r = csv_reader(path)?;
    let hdr = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if hdr.len() != 1 {
        return Err(Error::InvalidInput(format!(
            "{}: label file must have exactly one column, got {}",
            path.display(),
            hdr.len()
        )));
    }
    let mut labels = Vec::new();
    let mut remapped = 0usize;
    for (row, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let s = rec.get(0).unwrap_or("").trim();
        let v: f64 = s.parse().map_err(|_| Error::LabelDomain {
            subject: row,
            value: s.to_string(),
        })?;
        let y = if v == 1.0 {
            1.0
        } else if v == -1.0 {
            -1.0
        } else if v == 0.0 {
            remapped += 1;
            -1.0
        } else {
            return Err(Error::LabelDomain {
                subject: row,
                value: s.to_string(),
            });
        };
        labels.push(y);
    }
    if remapped > 0 {
        log::warn!(
            "{}: remapped {remapped} label(s) from 0 to -1",
            path.display()
        );
    }
    Ok(labels)
}

/// Loads a training dataset from per-modality CSVs plus a label file.
pub fn load_dataset(
    modality_paths: &[impl AsRef<Path>],
    labels_path: impl AsRef<Path>,
) -> Result<MultiModalDataset> {
    let labels = read_labels_csv(&labels_path)?;
    let mut modalities = Vec::new();
    let mut feature_names = Vec::new();
    let mut modality_names = Vec::new();
    for (m, p) in modality_paths.iter().enumerate() {
        let (x, names) = read_matrix_csv(p)?;
        if x.ncols() != labels.len() {
            return Err(Error::ShapeMismatch {
                context: format!("{}", p.as_ref().display()),
                expected: format!("{} subjects (label count)", labels.len()),
                actual: format!("{}", x.ncols()),
            });
        }
        modalities.push(x);
        feature_names.push(names);
        let stem = p
            .as_ref()
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("mod{}", m + 1));
        modality_names.push(stem);
    }
    MultiModalDataset::with_names(modalities, labels, modality_names, feature_names)
}

/// Per-feature means and standard deviations learned on a training split.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NormalizationStats {
    /// `means[m][i]`: training mean of feature `i` in modality `m`.
    pub means: Vec<Vec<f64>>,
    /// `stds[m][i]`: training standard deviation (population form);
    /// zero-variance features are stored with std exactly 1 so they map to 0.
    pub stds: Vec<Vec<f64>>,
}

/// Computes per-feature normalization statistics. Needs `n >= 2`.
pub fn zscore_fit(ds: &MultiModalDataset) -> Result<NormalizationStats> {
    let n = ds.n_subjects();
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "z-score fit needs at least two subjects, got {n}"
        )));
    }
    let nf = n as f64;
    let mut means = Vec::with_capacity(ds.n_modalities());
    let mut stds = Vec::with_capacity(ds.n_modalities());
    for x in ds.modalities() {
        let mut mu = Vec::with_capacity(x.nrows());
        let mut sd = Vec::with_capacity(x.nrows());
        for i in 0..x.nrows() {
            let row = x.row(i);
            let mean = row.sum() / nf;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
            let std = var.sqrt();
            if std <= 1e-12 * (1.0 + mean.abs()) {
                // constant feature: snap the mean to the observed value so
                // application yields exact zeros, and clamp std to 1
                mu.push(row[0]);
                sd.push(1.0);
            } else {
                mu.push(mean);
                sd.push(std);
            }
        }
        means.push(mu);
        stds.push(sd);
    }
    Ok(NormalizationStats { means, stds })
}

/// Applies training statistics to raw per-modality matrices (used both for
/// training folds and for held-out subjects).
pub fn zscore_apply_matrices(
    modalities: &[Array2<f64>],
    stats: &NormalizationStats,
) -> Result<Vec<Array2<f64>>> {
    if modalities.len() != stats.means.len() {
        return Err(Error::ShapeMismatch {
            context: "z-score apply".into(),
            expected: format!("{} modalities", stats.means.len()),
            actual: format!("{}", modalities.len()),
        });
    }
    let mut out = Vec::with_capacity(modalities.len());
    for (m, x) in modalities.iter().enumerate() {
        if x.nrows() != stats.means[m].len() {
            return Err(Error::ShapeMismatch {
                context: format!("z-score apply, modality {m}"),
                expected: format!("{} features", stats.means[m].len()),
                actual: format!("{}", x.nrows()),
            });
        }
        let mut z = x.clone();
        for i in 0..z.nrows() {
            let mu = stats.means[m][i];
            let sd = stats.stds[m][i];
            z.row_mut(i).mapv_inplace(|v| (v - mu) / sd);
        }
        out.push(z);
    }
    Ok(out)
}

/// Returns a normalized copy of the dataset.
pub fn zscore_apply(ds: &MultiModalDataset, stats: &NormalizationStats) -> Result<MultiModalDataset> {
    let modalities = zscore_apply_matrices(ds.modalities(), stats)?;
    MultiModalDataset::assemble(
        modalities,
        ds.labels().to_vec(),
        ds.modality_names().to_vec(),
        (0..ds.n_modalities()).map(|m| ds.feature_names(m).to_vec()).collect(),
    )
}

/// serde adapters for `ndarray::Array2<f64>` as `{rows, cols, data}`.
pub(crate) mod matrix_serde {
    use ndarray::Array2;
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    pub(crate) struct MatrixDto {
        pub rows: usize,
        pub cols: usize,
        pub data: Vec<f64>,
    }

    impl From<&Array2<f64>> for MatrixDto {
        fn from(a: &Array2<f64>) -> Self {
            MatrixDto {
                rows: a.nrows(),
                cols: a.ncols(),
                data: a.iter().copied().collect(),
            }
        }
    }

    impl TryFrom<MatrixDto> for Array2<f64> {
        type Error = ndarray::ShapeError;
        fn try_from(d: MatrixDto) -> Result<Self, Self::Error> {
            Array2::from_shape_vec((d.rows, d.cols), d.data)
        }
    }

    pub(crate) fn serialize<S: Serializer>(a: &Array2<f64>, s: S) -> Result<S::Ok, S::Error> {
        MatrixDto::from(a).serialize(s)
    }

    pub(crate) fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array2<f64>, D::Error> {
        let dto = MatrixDto::deserialize(d)?;
        Array2::try_from(dto).map_err(D::Error::custom)
    }

    pub(crate) mod vec {
        use super::*;

        pub(crate) fn serialize<S: Serializer>(v: &[Array2<f64>], s: S) -> Result<S::Ok, S::Error> {
            let dtos: Vec<MatrixDto> = v.iter().map(MatrixDto::from).collect();
            dtos.serialize(s)
        }

        pub(crate) fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Array2<f64>>, D::Error> {
            let dtos = Vec::<MatrixDto>::deserialize(d)?;
            dtos.into_iter()
                .map(|dto| Array2::try_from(dto).map_err(D::Error::custom))
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn toy() -> MultiModalDataset {
        let x1 = array![[1.0, 2.0, 3.0, 4.0], [0.5, 0.5, 0.5, 0.5]];
        let x2 = array![[-1.0, 0.0, 1.0, 2.0]];
        MultiModalDataset::new(vec![x1, x2], vec![1.0, 1.0, -1.0, -1.0]).unwrap()
    }

    #[test]
    fn validates_shapes_and_labels() {
        let x = array![[1.0, 2.0], [3.0, 4.0]];
        assert!(MultiModalDataset::new(vec![x.clone()], vec![1.0, -1.0]).is_ok());
        assert!(MultiModalDataset::new(vec![x.clone()], vec![1.0]).is_err());
        assert!(MultiModalDataset::new(vec![x.clone()], vec![1.0, 2.0]).is_err());
        let bad = array![[1.0, f64::NAN], [3.0, 4.0]];
        let err = MultiModalDataset::new(vec![bad], vec![1.0, -1.0]).unwrap_err();
        assert!(err.to_string().contains("row 0"), "{err}");
        assert!(err.to_string().contains("column 1"), "{err}");
    }

    #[test]
    fn zscore_centers_and_scales() {
        let ds = toy();
        let stats = zscore_fit(&ds).unwrap();
        let z = zscore_apply(&ds, &stats).unwrap();
        for m in 0..z.n_modalities() {
            for i in 0..z.n_features(m) {
                let row = z.modality(m).row(i);
                let mean = row.sum() / row.len() as f64;
                assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-12);
            }
        }
        // non-constant features have unit population std
        let row = z.modality(0).row(0);
        let var = row.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert_abs_diff_eq!(var, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_variance_feature_maps_to_zero() {
        let ds = toy();
        let stats = zscore_fit(&ds).unwrap();
        assert_eq!(stats.stds[0][1], 1.0);
        let z = zscore_apply(&ds, &stats).unwrap();
        for j in 0..4 {
            assert_eq!(z.modality(0)[[1, j]], 0.0);
        }
    }

    #[test]
    fn zscore_idempotent_on_normalized_data() {
        let ds = toy();
        let stats = zscore_fit(&ds).unwrap();
        let z1 = zscore_apply(&ds, &stats).unwrap();
        let stats2 = zscore_fit(&z1).unwrap();
        let z2 = zscore_apply(&z1, &stats2).unwrap();
        for m in 0..z1.n_modalities() {
            for ((i, j), v) in z1.modality(m).indexed_iter() {
                assert_abs_diff_eq!(*v, z2.modality(m)[[i, j]], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn csv_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy();
        // exercise awkward values too
        let mut x = ds.modality(0).clone();
        x[[0, 0]] = std::f64::consts::PI * 1e-7;
        x[[0, 1]] = -1.0 / 3.0;
        let ds = MultiModalDataset::new(vec![x, ds.modality(1).clone()], ds.labels().to_vec()).unwrap();

        let p1 = dir.path().join("m1.csv");
        let p2 = dir.path().join("m2.csv");
        let pl = dir.path().join("labels.csv");
        ds.save_csv(&[&p1, &p2], &pl).unwrap();
        let back = load_dataset(&[&p1, &p2], &pl).unwrap();
        assert_eq!(back.labels(), ds.labels());
        for m in 0..2 {
            for ((i, j), v) in ds.modality(m).indexed_iter() {
                let w = back.modality(m)[[i, j]];
                assert_eq!(v.to_bits(), w.to_bits(), "modality {m} [{i},{j}]");
            }
        }
        // write -> read -> write produces identical bytes
        let p1b = dir.path().join("m1b.csv");
        write_matrix_csv(&p1b, back.modality(0), back.feature_names(0)).unwrap();
        assert_eq!(
            std::fs::read(&p1).unwrap(),
            std::fs::read(&p1b).unwrap()
        );
    }

    #[test]
    fn label_zero_remaps_and_bad_labels_fail() {
        let dir = tempfile::tempdir().unwrap();
        let pl = dir.path().join("labels.csv");
        std::fs::write(&pl, "label\n1\n0\n-1\n").unwrap();
        assert_eq!(read_labels_csv(&pl).unwrap(), vec![1.0, -1.0, -1.0]);
        std::fs::write(&pl, "label\n2\n").unwrap();
        assert!(matches!(
            read_labels_csv(&pl).unwrap_err(),
            Error::LabelDomain { subject: 0, .. }
        ));
    }

    #[test]
    fn subset_keeps_order_and_allows_singletons() {
        let ds = toy();
        let sub = ds.subset(&[2, 0]).unwrap();
        assert_eq!(sub.labels(), &[-1.0, 1.0]);
        assert_eq!(sub.modality(0)[[0, 0]], 3.0);
        assert_eq!(sub.modality(0)[[0, 1]], 1.0);
        let single = ds.subset(&[3]).unwrap();
        assert_eq!(single.n_subjects(), 1);
        assert!(ds.subset(&[9]).is_err());
    }
}
