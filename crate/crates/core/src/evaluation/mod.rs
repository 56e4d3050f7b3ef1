//! Synthesis metrics, ROI features, diagnostic classification and model inspection.

mod classification;
mod cv;
mod interpolation;
mod metrics;
mod svm;

use std::path::Path;

use serde::Serialize;

pub use classification::{auc, classification_metrics, AggregateReport, ClassificationReport, MeanStd};
pub use cv::{
    check_no_leak, cross_validate, report_table, CvConfig, CvReport, FoldReport, GeneratorTrainer, Protocol,
    SamplePrediction,
};
pub use interpolation::{dump_activations, interpolation_study, lerp, InterpolationPoint};
pub use metrics::{mae, psnr, roi_features, synthesis_metrics, RoiFeatureVector, SynthesisMetrics};
pub use svm::{fit_classifier, median_heuristic_gamma, standardization, SvmConfig, SvmModel};

use crate::error::{Error, Result};

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::Unwritable { path: path.to_path_buf(), reason: e.to_string() })
}

/// Writes `report.json` and `report.txt` into `dir`.
pub fn write_report(dir: impl AsRef<Path>, report: &impl Serialize, text: &str) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join("report.json"), &serde_json::to_string_pretty(report)?)?;
    write(&dir.join("report.txt"), text)
}

/// Per-subject synthesis metrics as CSV.
pub fn synthesis_csv(rows: &[(String, SynthesisMetrics)]) -> String {
    let mut s = String::from("subject_id,ssim,ms_ssim,psnr,mae\n");
    for (id, m) in rows {
        s.push_str(&format!("{id},{},{},{},{}\n", m.ssim, m.ms_ssim, m.psnr, m.mae));
    }
    s
}

/// Per-subject predictions of a cross-validation run as CSV.
pub fn predictions_csv(report: &CvReport) -> String {
    let mut s = String::from("fold,subject_id,label,predicted,score,synthesized_pet\n");
    for f in &report.folds {
        for p in &f.predictions {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                f.fold + 1,
                p.subject_id,
                p.label,
                p.predicted,
                p.score,
                p.synthesized_pet
            ));
        }
    }
    s
}

pub fn write_csv(path: impl AsRef<Path>, contents: &str) -> Result<()> {
    write(path.as_ref(), contents)
}
