//! Subcommand implementations. Every artifact embeds the resolved run
//! configuration and the tool version; nothing time-stamped, so reruns
//! with one config are byte-identical.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use asmfs::classify::TrainedClassifier;
use asmfs::data_model::{fmt_f64, load_dataset, read_matrix_csv, MultiModalDataset};
use asmfs::evaluation::{
    fit_pipeline, render_benchmark_table, run_benchmark, write_roc_csv, FittedPipeline,
    Hyperparams, Method, MetricsReport,
};
use asmfs::feature_selection::FitResult;
use asmfs::synthetic::generate;
use asmfs::{Error, Result, VERSION};

use crate::config::RunConfig;

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source: e,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn ensure_out_dir(config: &RunConfig) -> Result<()> {
    fs::create_dir_all(&config.out_dir).map_err(|e| io_err(&config.out_dir, e))
}

fn load_labeled_dataset(config: &RunConfig) -> Result<MultiModalDataset> {
    if config.dataset.modalities.is_empty() {
        return Err(Error::InvalidConfig(
            "dataset.modalities must list at least one feature CSV".into(),
        ));
    }
    let labels = config.dataset.labels.as_ref().ok_or_else(|| {
        Error::InvalidConfig("dataset.labels must point at the label CSV".into())
    })?;
    if !labels.exists() {
        return Err(Error::Io {
            path: labels.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "labels file not found"),
        });
    }
    load_dataset(&config.dataset.modalities, labels)
}

#[derive(Serialize, Deserialize)]
struct GroundTruthArtifact {
    version: String,
    config: RunConfig,
    resolved_seed: u64,
    informative_features: Vec<usize>,
    modality_files: Vec<PathBuf>,
    labels_file: PathBuf,
}

pub fn synth(config: &RunConfig) -> Result<()> {
    let spec = config.synth.to_spec(config.seed);
    spec.validate()?;
    let (ds, informative) = generate(&spec)?;
    ensure_out_dir(config)?;
    let modality_files: Vec<PathBuf> = (0..spec.n_modalities)
        .map(|m| config.out_dir.join(format!("modality_{:02}.csv", m + 1)))
        .collect();
    let labels_file = config.out_dir.join("labels.csv");
    ds.save_csv(&modality_files, &labels_file)?;
    let artifact = GroundTruthArtifact {
        version: VERSION.to_string(),
        config: config.clone(),
        resolved_seed: spec.seed,
        informative_features: informative,
        modality_files: modality_files.clone(),
        labels_file: labels_file.clone(),
    };
    write_text(
        &config.out_dir.join("ground_truth.json"),
        &serde_json::to_string_pretty(&artifact)?,
    )?;
    println!(
        "wrote {} modalities x {} subjects to {}",
        spec.n_modalities,
        spec.n_subjects,
        config.out_dir.display()
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
pub struct ModelArtifact {
    pub version: String,
    pub config: RunConfig,
    pub model: TrainedClassifier,
}

#[derive(Serialize, Deserialize)]
struct FitArtifact {
    version: String,
    config: RunConfig,
    fit: FitResult,
}

/// The hyperparameters a method actually consumes, resolved against the
/// settings defaults; unused fields stay `None` so artifacts and the
/// summary don't suggest inactive knobs mattered.
fn active_hyperparams(method: Method, hp: &Hyperparams, config: &RunConfig) -> Hyperparams {
    let defaults = &config.settings.asmfs;
    match method {
        Method::Svm | Method::MkSvm => Hyperparams::default(),
        Method::LassoSvm | Method::LassoMkSvm | Method::Mtfs => Hyperparams {
            mu: Some(hp.mu.unwrap_or(defaults.mu)),
            ..Default::default()
        },
        Method::FixedSimilarity | Method::Asmfs => Hyperparams {
            lambda: Some(hp.lambda.unwrap_or(defaults.lambda)),
            mu: Some(hp.mu.unwrap_or(defaults.mu)),
            k: Some(hp.k.unwrap_or(defaults.k)),
        },
    }
}

fn hyperparam_line(name: &str, value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{name}: {v}\n"),
        None => format!("{name}: inactive\n"),
    }
}

fn fit_summary(
    config: &RunConfig,
    ds: &MultiModalDataset,
    pipeline: &FittedPipeline,
    training_accuracy: f64,
) -> String {
    let (pos, neg) = ds.class_counts();
    let mut s = String::new();
    s.push_str(&format!("asmfs fit summary (version {VERSION})\n"));
    s.push_str(&format!("method: {}\n", pipeline.method));
    s.push_str(&format!("subjects: {} ({pos} positive, {neg} negative)\n", ds.n_subjects()));
    let dims: Vec<String> = (0..ds.n_modalities())
        .map(|m| format!("{}={}", ds.modality_names()[m], ds.n_features(m)))
        .collect();
    s.push_str(&format!("modalities: {}\n", dims.join(", ")));
    s.push_str(&hyperparam_line("lambda", pipeline.hyperparams.lambda));
    s.push_str(&hyperparam_line("mu", pipeline.hyperparams.mu));
    s.push_str(&match pipeline.hyperparams.k {
        Some(k) => format!("k: {k}\n"),
        None => "k: inactive\n".to_string(),
    });
    let betas: Vec<String> = pipeline.model.betas.iter().map(|b| format!("{b:.4}")).collect();
    s.push_str(&format!("kernel weights: [{}]\n", betas.join(", ")));
    for (m, sel) in pipeline.model.selected_features.iter().enumerate() {
        let name = &ds.modality_names()[m];
        s.push_str(&format!("selected[{name}]: {} of {}", sel.len(), ds.n_features(m)));
        match &pipeline.ranking {
            Some(r) => {
                let scored: Vec<String> = sel
                    .iter()
                    .map(|&i| format!("{i} ({:.4})", r.scores[m][i]))
                    .collect();
                s.push_str(&format!(" -> {}\n", scored.join(", ")));
            }
            None => {
                let plain: Vec<String> = sel.iter().map(|i| i.to_string()).collect();
                s.push_str(&format!(" -> {}\n", plain.join(", ")));
            }
        }
    }
    s.push_str(&format!("training accuracy: {training_accuracy:.4}\n"));
    if let Some(fit) = &pipeline.fit {
        s.push_str(&format!(
            "outer iterations: {} (converged: {})\n",
            fit.iterations, fit.converged
        ));
        let history: Vec<String> = fit.objective_history.iter().map(|o| format!("{o:.6e}")).collect();
        s.push_str(&format!("objective history: {}\n", history.join(", ")));
    }
    s.push_str(&format!("resolved config: {}\n", config.out_dir.join("run_config.json").display()));
    s
}

pub fn fit(config: &RunConfig) -> Result<()> {
    let method: Method = config.method.parse()?;
    let ds = load_labeled_dataset(config)?;
    let hp = active_hyperparams(method, &config.hyperparams, config);
    let pipeline = fit_pipeline(&ds, method, &hp, &config.settings)?;
    let (_, pred) = pipeline.model.predict_matrices(ds.modalities())?;
    let correct = pred.iter().zip(ds.labels().iter()).filter(|(a, b)| a == b).count();
    let training_accuracy = correct as f64 / ds.n_subjects() as f64;

    ensure_out_dir(config)?;
    write_run_config(config)?;
    let model_artifact = ModelArtifact {
        version: VERSION.to_string(),
        config: config.clone(),
        model: pipeline.model.clone(),
    };
    write_text(
        &config.out_dir.join("model.json"),
        &serde_json::to_string_pretty(&model_artifact)?,
    )?;
    if let Some(fit) = &pipeline.fit {
        let fit_artifact = FitArtifact {
            version: VERSION.to_string(),
            config: config.clone(),
            fit: fit.clone(),
        };
        write_text(
            &config.out_dir.join("fit.json"),
            &serde_json::to_string_pretty(&fit_artifact)?,
        )?;
    }
    let summary = fit_summary(config, &ds, &pipeline, training_accuracy);
    write_text(&config.out_dir.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

#[derive(Serialize, Deserialize)]
pub struct ReportArtifact {
    pub version: String,
    pub config: RunConfig,
    pub reports: Vec<MetricsReport>,
}

pub fn evaluate(config: &RunConfig) -> Result<()> {
    let ds = load_labeled_dataset(config)?;
    let methods: Vec<Method> = config
        .methods
        .iter()
        .map(|name| name.parse())
        .collect::<Result<_>>()?;
    let plan = config.cv.to_plan(config.seed);
    let reports = run_benchmark(&ds, &methods, &plan, &config.grids, &config.settings)?;

    ensure_out_dir(config)?;
    write_run_config(config)?;
    let artifact = ReportArtifact {
        version: VERSION.to_string(),
        config: config.clone(),
        reports,
    };
    write_text(
        &config.out_dir.join("reports.json"),
        &serde_json::to_string_pretty(&artifact)?,
    )?;
    let table = render_benchmark_table(&artifact.reports);
    write_text(&config.out_dir.join("table.txt"), &table)?;
    for report in &artifact.reports {
        let path = config.out_dir.join(format!("roc_{}.csv", report.method));
        let file = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
        write_roc_csv(&report.roc, file)?;
    }
    print!("{table}");
    for report in &artifact.reports {
        for failure in &report.failures {
            eprintln!("warning: {failure}");
        }
    }
    Ok(())
}

pub fn predict(config: &RunConfig, model_path: &Path) -> Result<()> {
    let text = fs::read_to_string(model_path).map_err(|e| io_err(model_path, e))?;
    let artifact: ModelArtifact = serde_json::from_str(&text)?;
    let model = artifact.model;
    model.validate()?;

    let paths = &config.dataset.modalities;
    let expected = model.selected_features.len();
    if paths.is_empty() {
        return Err(Error::InvalidConfig(
            "dataset.modalities must list the input CSVs".into(),
        ));
    }
    if paths.len() != expected {
        return Err(Error::InvalidInput(format!(
            "model expects {expected} modalities, got {}: missing modality {} of {expected}",
            paths.len(),
            paths.len() + 1,
        )));
    }
    let mut matrices = Vec::with_capacity(expected);
    for p in paths {
        matrices.push(read_matrix_csv(p)?.0);
    }
    let (scores, labels) = model.predict_matrices(&matrices)?;

    ensure_out_dir(config)?;
    write_run_config(config)?;
    let mut csv = String::from("subject,decision_value,predicted_label\n");
    for (j, (score, label)) in scores.iter().zip(labels.iter()).enumerate() {
        csv.push_str(&format!("{j},{},{}\n", fmt_f64(*score), if *label > 0.0 { 1 } else { -1 }));
    }
    let path = config.out_dir.join("predictions.csv");
    write_text(&path, &csv)?;
    println!("wrote {} predictions to {}", scores.len(), path.display());
    Ok(())
}

#[derive(Serialize)]
struct ConfigArtifact<'a> {
    version: &'a str,
    config: &'a RunConfig,
}

fn write_run_config(config: &RunConfig) -> Result<()> {
    let artifact = ConfigArtifact {
        version: VERSION,
        config,
    };
    write_text(
        &config.out_dir.join("run_config.json"),
        &serde_json::to_string_pretty(&artifact)?,
    )
}
