//! Cross-validated diagnosis from ROI features, optionally completing missing PETs with a
//! generator trained per fold.

use std::collections::HashSet;

use log::info;
use serde::{Deserialize, Serialize};

use super::classification::{classification_metrics, AggregateReport, ClassificationReport};
use super::metrics::roi_features;
use super::svm::{fit_classifier, SvmConfig};
use crate::atlas::{AtlasLabelMap, TissueMasks};
use crate::dataset::{Label, PairedSample};
use crate::error::{Error, Result};
use crate::training::{kfold_split, Checkpoint};
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Only subjects with both modalities.
    PairedCv,
    /// Every subject; missing PETs are synthesized by the fold's generator.
    Complete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    pub folds: usize,
    pub seed: u64,
    pub protocol: Protocol,
    /// Replace the real PET of held-out subjects by its synthesis.
    pub synthesize_test_pet: bool,
    pub svm: SvmConfig,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self { folds: 5, seed: 0, protocol: Protocol::Complete, synthesize_test_pet: false, svm: SvmConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePrediction {
    pub subject_id: String,
    pub label: Label,
    pub predicted: Label,
    pub score: f64,
    pub synthesized_pet: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub report: ClassificationReport,
    pub classifier_train_ids: Vec<String>,
    pub generator_train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub synthesized: usize,
    pub predictions: Vec<SamplePrediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub protocol: Protocol,
    pub n_subjects: usize,
    pub n_paired: usize,
    pub folds: Vec<FoldReport>,
    pub aggregate: AggregateReport,
}

/// Trains a generator for fold `fold` from the given paired subjects.
pub type GeneratorTrainer<'a> = dyn FnMut(usize, &[PairedSample]) -> Result<Checkpoint> + 'a;

/// Fails if any held-out id was seen by the classifier or the generator.
pub fn check_no_leak(fold: &FoldReport) -> Result<()> {
    let test: HashSet<&String> = fold.test_ids.iter().collect();
    for (what, ids) in [("classifier", &fold.classifier_train_ids), ("generator", &fold.generator_train_ids)] {
        if let Some(id) = ids.iter().find(|id| test.contains(id)) {
            return Err(Error::Classification(format!("fold {}: test subject {id} used to train the {what}", fold.fold)));
        }
    }
    Ok(())
}

pub fn cross_validate(
    samples: &[PairedSample],
    atlas: &AtlasLabelMap,
    masks: &TissueMasks,
    cfg: &CvConfig,
    mut trainer: Option<&mut GeneratorTrainer>,
) -> Result<CvReport> {
    let cohort: Vec<&PairedSample> = match cfg.protocol {
        Protocol::PairedCv => samples.iter().filter(|s| s.is_paired()).collect(),
        Protocol::Complete => samples.iter().collect(),
    };
    let ids: HashSet<&str> = cohort.iter().map(|s| s.subject_id.as_str()).collect();
    if ids.len() != cohort.len() {
        return Err(Error::Dataset("subject ids must be unique".into()));
    }
    let needs_generator = cfg.synthesize_test_pet || cohort.iter().any(|s| !s.is_paired());
    if needs_generator && trainer.is_none() {
        return Err(Error::InvalidConfig("this protocol needs a generator trainer to synthesize PETs".into()));
    }
    let labels: Vec<Label> = cohort.iter().map(|s| s.label).collect();
    let split = kfold_split(&labels, cfg.folds, cfg.seed)?;
    let mut folds = Vec::with_capacity(cfg.folds);
    for fold in 0..cfg.folds {
        let train_idx = split.train_indices(fold);
        let test_idx = split.test_indices(fold);
        let gen_train: Vec<PairedSample> =
            train_idx.iter().map(|&i| cohort[i]).filter(|s| s.is_paired()).cloned().collect();
        let ckpt = match (&mut trainer, needs_generator) {
            (Some(t), true) => Some(t(fold, &gen_train)?),
            _ => None,
        };
        let mut synthesized = 0;
        let mut pet_for = |s: &PairedSample, held_out: bool| -> Result<(Volume, bool)> {
            match (&s.pet, held_out && cfg.synthesize_test_pet) {
                (Some(p), false) => Ok((p.clone(), false)),
                _ => {
                    synthesized += 1;
                    Ok((ckpt.as_ref().expect("generator trained").generator.forward(&s.mri)?, true))
                }
            }
        };
        let mut features = |idx: &[usize], held_out: bool| -> Result<Vec<(Vec<f64>, bool)>> {
            idx.iter()
                .map(|&i| {
                    let s = cohort[i];
                    let (pet, synth) = pet_for(s, held_out)?;
                    Ok((roi_features(&s.mri, &pet, atlas, masks)?.values, synth))
                })
                .collect()
        };
        let train_f: Vec<Vec<f64>> = features(&train_idx, false)?.into_iter().map(|(f, _)| f).collect();
        let test_f = features(&test_idx, true)?;
        let train_labels: Vec<Label> = train_idx.iter().map(|&i| labels[i]).collect();
        let test_labels: Vec<Label> = test_idx.iter().map(|&i| labels[i]).collect();
        let model = fit_classifier(&train_f, &train_labels, &cfg.svm)?;
        let (pred, scores) = model.predict(&test_f.iter().map(|(f, _)| f.clone()).collect::<Vec<_>>());
        let report = classification_metrics(&pred, &scores, &test_labels)?;
        let predictions = test_idx
            .iter()
            .enumerate()
            .map(|(j, &i)| SamplePrediction {
                subject_id: cohort[i].subject_id.clone(),
                label: labels[i],
                predicted: pred[j],
                score: scores[j],
                synthesized_pet: test_f[j].1,
            })
            .collect();
        let fr = FoldReport {
            fold,
            report,
            classifier_train_ids: train_idx.iter().map(|&i| cohort[i].subject_id.clone()).collect(),
            generator_train_ids: if ckpt.is_some() { gen_train.iter().map(|s| s.subject_id.clone()).collect() } else { Vec::new() },
            test_ids: test_idx.iter().map(|&i| cohort[i].subject_id.clone()).collect(),
            synthesized,
            predictions,
        };
        check_no_leak(&fr)?;
        info!("fold {}: acc {:.3} auc {:.3} ({} synthesized PETs)", fold + 1, report.acc, report.auc, synthesized);
        folds.push(fr);
    }
    let aggregate = AggregateReport::from_folds(&folds.iter().map(|f| f.report).collect::<Vec<_>>());
    Ok(CvReport {
        protocol: cfg.protocol,
        n_subjects: cohort.len(),
        n_paired: cohort.iter().filter(|s| s.is_paired()).count(),
        folds,
        aggregate,
    })
}

/// Per-fold rows and a `mean ± std` row, in percent.
pub fn report_table(report: &CvReport) -> String {
    let head = ["ACC", "SENS", "SPEC", "F1", "MCC", "AUC"];
    let mut s = format!(
        "protocol: {:?}, {} subjects ({} paired), {} folds\n",
        report.protocol,
        report.n_subjects,
        report.n_paired,
        report.folds.len()
    );
    s.push_str(&format!("{:<10}", "fold"));
    for h in head {
        s.push_str(&format!("{h:>16}"));
    }
    s.push('\n');
    for f in &report.folds {
        s.push_str(&format!("{:<10}", f.fold + 1));
        let r = f.report;
        for v in [r.acc, r.sens, r.spec, r.f1, r.mcc, r.auc] {
            s.push_str(&format!("{:>16.2}", 100.0 * v));
        }
        s.push('\n');
    }
    s.push_str(&format!("{:<10}", "mean±std"));
    for (_, m) in report.aggregate.columns() {
        s.push_str(&format!("{:>16}", format!("{:.2} ± {:.2}", 100.0 * m.mean, 100.0 * m.std)));
    }
    s.push('\n');
    s
}
