//! Evaluation of trained models and the with/without-penalty ablation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use super::metrics::{confusion, per_class_metrics, ConfusionMatrix, Histogram, MetricsReport};
use crate::diffnet::input_gradient;
use crate::error::{Error, Result};
use crate::jal::{branch_input, train, FusionMode, FusionSample, JalConfig, ModelConfig, TrainHistory, Trained};
use crate::jsm::{classify, VolumeChange};
use crate::synthdata::{CLASS_NAMES, NUM_CLASSES};

/// Metrics of one test mini-batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BatchMetrics {
    pub accuracy: f64,
    pub macro_sensitivity: f64,
    pub macro_specificity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub predictions: Vec<usize>,
    pub confusion: ConfusionMatrix,
    pub metrics: MetricsReport,
    /// Fraction of correctly classified test samples.
    pub accuracy: f64,
    pub batches: Vec<BatchMetrics>,
    pub histograms: BTreeMap<String, Histogram>,
    /// Share of `|input gradient|` mass on voxels whose saliency is flat.
    pub gradient_mass: f64,
}

/// Share of `|g|` falling on flat-saliency voxels (those weighted with the
/// debug weight), summed over the test set and all branches.
pub fn gradient_mass_fraction(trained: &Trained, samples: &[FusionSample], flat_tol: f64) -> Result<f64> {
    let mut parts = Vec::new();
    for (b, model) in trained.models.iter().enumerate() {
        let per: Vec<(f64, f64)> = samples
            .par_iter()
            .map(|s| {
                let (x, j) = branch_input(s, trained.mode, b)?;
                let mut shape = vec![1];
                shape.extend_from_slice(x.shape());
                let g = input_gradient(model, &x.reshaped(&shape))?;
                let (mut debug, mut all) = (0.0, 0.0);
                for (gv, jv) in g.data().iter().zip(j.data()) {
                    all += gv.abs();
                    if classify(*jv, flat_tol) == VolumeChange::None {
                        debug += gv.abs();
                    }
                }
                Ok((debug, all))
            })
            .collect::<Result<_>>()?;
        parts.extend(per);
    }
    let (debug, all) = parts.iter().fold((0.0, 0.0), |(d, a), p| (d + p.0, a + p.1));
    Ok(if all > 0.0 { debug / all } else { 0.0 })
}

/// Test-set metrics, per-batch histograms over consecutive chunks of
/// `batch_size` samples, and the gradient-mass fraction.
pub fn evaluate(trained: &Trained, test: &[FusionSample], batch_size: usize, flat_tol: f64) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::input("empty test set"));
    }
    if batch_size == 0 {
        return Err(Error::config("batch size must be >= 1"));
    }
    let predictions: Vec<usize> = trained.predict(test)?.iter().map(|p| p.argmax()).collect();
    let labels: Vec<usize> = test.iter().map(|s| s.label).collect();
    let cm = confusion(&predictions, &labels, NUM_CLASSES)?;
    let metrics = per_class_metrics(&cm)?;
    let mut batches = Vec::new();
    for (p, y) in predictions.chunks(batch_size).zip(labels.chunks(batch_size)) {
        let m = per_class_metrics(&confusion(p, y, NUM_CLASSES)?)?;
        batches.push(BatchMetrics {
            accuracy: p.iter().zip(y).filter(|(a, b)| a == b).count() as f64 / p.len() as f64,
            macro_sensitivity: m.macro_sensitivity,
            macro_specificity: m.macro_specificity,
        });
    }
    let hist = |f: fn(&BatchMetrics) -> f64| Histogram::of(&batches.iter().map(f).collect::<Vec<_>>());
    let histograms = BTreeMap::from([
        ("accuracy".to_string(), hist(|b| b.accuracy)),
        ("sensitivity".to_string(), hist(|b| b.macro_sensitivity)),
        ("specificity".to_string(), hist(|b| b.macro_specificity)),
    ]);
    let correct = predictions.iter().zip(&labels).filter(|(a, b)| a == b).count();
    Ok(Evaluation {
        accuracy: correct as f64 / labels.len() as f64,
        gradient_mass: gradient_mass_fraction(trained, test, flat_tol)?,
        predictions,
        confusion: cm,
        metrics,
        batches,
        histograms,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ArmReport {
    pub mode: FusionMode,
    pub lambda: f64,
    pub evaluation: Evaluation,
    pub histories: Vec<TrainHistory>,
    #[serde(skip)]
    pub trained: Trained,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    /// For each mode: the arm without the penalty, then the arm with it.
    pub arms: Vec<ArmReport>,
    /// Config keys that differ between the two arms.
    pub config_diff: Vec<String>,
}

impl AblationReport {
    pub fn arm(&self, mode: FusionMode, with_penalty: bool) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.mode == mode && (a.lambda > 0.0) == with_penalty)
    }
}

/// Keys whose values differ between two configs.
pub fn config_diff(a: &JalConfig, b: &JalConfig) -> Result<Vec<String>> {
    let ta = toml::Table::try_from(a).map_err(|e| Error::config(e.to_string()))?;
    let tb = toml::Table::try_from(b).map_err(|e| Error::config(e.to_string()))?;
    let mut keys: Vec<String> = ta
        .keys()
        .chain(tb.keys())
        .filter(|k| ta.get(*k) != tb.get(*k))
        .cloned()
        .collect();
    keys.sort();
    keys.dedup();
    Ok(keys)
}

/// Trains and evaluates, for every mode, one arm with `lambda = 0` and one
/// with `cfg.lambda`; all else shared.
pub fn ablate(
    train_set: &[FusionSample],
    test_set: &[FusionSample],
    modes: &[FusionMode],
    cfg: &JalConfig,
    model: &ModelConfig,
) -> Result<AblationReport> {
    if cfg.lambda <= 0.0 {
        return Err(Error::config("the ablation needs lambda > 0 for the penalised arm"));
    }
    let plain = JalConfig { lambda: 0.0, ..cfg.clone() };
    let mut arms = Vec::new();
    for &mode in modes {
        for arm_cfg in [&plain, cfg] {
            log::info!("training {mode:?} arm with lambda {}", arm_cfg.lambda);
            let trained = train(train_set, mode, arm_cfg, model)?;
            let evaluation = evaluate(&trained, test_set, cfg.batch_size, cfg.flat_tol)?;
            log::info!(
                "{mode:?} lambda {}: accuracy {:.3}, macro accuracy {:.3}, gradient mass {:.3}",
                arm_cfg.lambda,
                evaluation.accuracy,
                evaluation.metrics.macro_accuracy,
                evaluation.gradient_mass
            );
            arms.push(ArmReport {
                mode,
                lambda: arm_cfg.lambda,
                evaluation,
                histories: trained.histories.clone(),
                trained,
            });
        }
    }
    Ok(AblationReport { arms, config_diff: config_diff(&plain, cfg)? })
}

fn toml_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:?}")
    }
}

fn mode_name(mode: FusionMode) -> &'static str {
    match mode {
        FusionMode::Early => "early",
        FusionMode::Late => "late",
    }
}

/// Writes `report.toml` plus per-arm CSV tables into `dir`.
pub fn write_ablation(report: &AblationReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut summary = String::new();
    let _ = writeln!(summary, "config_diff = {:?}\n", report.config_diff);
    for arm in &report.arms {
        let e = &arm.evaluation;
        let tag = format!("{}_lambda{}", mode_name(arm.mode), arm.lambda);
        let _ = writeln!(summary, "[[arm]]");
        let _ = writeln!(summary, "mode = \"{}\"", mode_name(arm.mode));
        let _ = writeln!(summary, "lambda = {}", toml_f64(arm.lambda));
        let _ = writeln!(summary, "accuracy = {}", toml_f64(e.accuracy));
        let _ = writeln!(summary, "macro_accuracy = {}", toml_f64(e.metrics.macro_accuracy));
        let _ = writeln!(summary, "macro_sensitivity = {}", toml_f64(e.metrics.macro_sensitivity));
        let _ = writeln!(summary, "macro_specificity = {}", toml_f64(e.metrics.macro_specificity));
        let _ = writeln!(summary, "gradient_mass = {}", toml_f64(e.gradient_mass));
        let _ = writeln!(summary, "confusion = {:?}", e.confusion.rows());
        let _ = writeln!(summary, "files = \"{tag}_*.csv\"\n");
        fs::write(dir.join(format!("{tag}_metrics.csv")), e.metrics.to_csv(&CLASS_NAMES))?;
        let mut b = String::from("batch,accuracy,macro_sensitivity,macro_specificity\n");
        for (i, m) in e.batches.iter().enumerate() {
            let _ = writeln!(b, "{i},{},{},{}", m.accuracy, m.macro_sensitivity, m.macro_specificity);
        }
        fs::write(dir.join(format!("{tag}_batches.csv")), b)?;
        let mut h = String::from("metric,bin_lo,bin_hi,count,density\n");
        for (name, hist) in &e.histograms {
            for (i, (c, d)) in hist.counts.iter().zip(hist.density()).enumerate() {
                let _ = writeln!(h, "{name},{},{},{c},{d}", i as f64 / 10.0, (i + 1) as f64 / 10.0);
            }
        }
        fs::write(dir.join(format!("{tag}_histograms.csv")), h)?;
        for (i, hist) in arm.histories.iter().enumerate() {
            fs::write(dir.join(format!("{tag}_history_branch{i}.csv")), hist.to_csv())?;
        }
    }
    fs::write(dir.join("report.toml"), summary)?;
    Ok(())
}
