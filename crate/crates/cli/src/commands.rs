use std::collections::HashMap;
use std::path::{Path, PathBuf};

use glagan::atlas::{AtlasLabelMap, TissueMasks};
use glagan::evaluation::{
    cross_validate, dump_activations, fit_classifier, interpolation_study, predictions_csv, report_table,
    roi_features, synthesis_csv, synthesis_metrics, write_csv, write_report, MeanStd, Protocol, SvmModel,
    SynthesisMetrics,
};
use glagan::generator::LAYER_IDS;
use glagan::losses::roi_loss;
use glagan::nifti_io::{load_labels, load_volume, save_volume};
use glagan::phantom::{drop_pets, generate_dataset, sample_seed, synthetic_atlas};
use glagan::training::{synthesize_missing, train, Checkpoint};
use glagan::{Dataset, Error, Label, PairedSample, Result, Volume};
use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DataSection, ExperimentConfig};
use crate::render::{self, Plane};

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.to_path_buf(), source })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_csv(path, &serde_json::to_string_pretty(value)?)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    Ok(serde_json::from_str(&text)?)
}

fn require_dir(dir: &Path) -> Result<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(Error::MissingFile(dir.to_path_buf()))
    }
}

fn file_stem(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    name.trim_end_matches(".gz").trim_end_matches(".nii").to_string()
}

fn is_nifti(path: &Path) -> bool {
    let name = path.to_string_lossy();
    name.ends_with(".nii") || name.ends_with(".nii.gz")
}

/// Paired subjects split into training, validation and held-out test ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

pub fn holdout_split(samples: &[PairedSample], data: &DataSection, seed: u64) -> Result<HoldoutSplit> {
    let mut ids: Vec<String> = samples.iter().filter(|s| s.is_paired()).map(|s| s.subject_id.clone()).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = ids.len();
    let n_test = (n as f64 * data.test_fraction).round() as usize;
    let n_val = (n as f64 * data.val_fraction).round() as usize;
    if n_test + n_val >= n {
        return Err(Error::Dataset(format!("{n} paired subjects leave none for training")));
    }
    let test = ids.drain(..n_test).collect();
    let val = ids.drain(..n_val).collect();
    Ok(HoldoutSplit { train: ids, val, test })
}

fn pick(ds: &Dataset, ids: &[String]) -> Vec<PairedSample> {
    let by_id: HashMap<&str, &PairedSample> = ds.samples.iter().map(|s| (s.subject_id.as_str(), s)).collect();
    ids.iter().filter_map(|id| by_id.get(id.as_str()).map(|s| (*s).clone())).collect()
}

pub fn make_phantoms(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let d = &cfg.data;
    let spec = &d.phantom;
    let mut samples = generate_dataset(d.n_subjects, d.ad_fraction, spec)?;
    drop_pets(&mut samples, d.n_mri_only, spec.seed)?;
    let (atlas, masks) = synthetic_atlas(spec)?;
    let seeds: Vec<u64> = (0..d.n_subjects).map(|i| sample_seed(spec, i)).collect();
    Dataset { samples, atlas, masks }.write(out, Some(&seeds), serde_json::to_value(spec)?)?;
    info!("wrote {} phantom subjects to {}", d.n_subjects, out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct VariantSummary {
    name: String,
    dir: PathBuf,
    k_patches: usize,
    best_epoch: usize,
    final_val_l1: f64,
    best_val_l1: f64,
}

fn variants(cfg: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    let e = &cfg.eval;
    if e.ablations.is_empty() && e.k_patches.is_empty() {
        return vec![(String::new(), cfg.clone())];
    }
    let ks = if e.k_patches.is_empty() { vec![cfg.model.k_patches] } else { e.k_patches.clone() };
    let mut out = Vec::new();
    for &k in &ks {
        let mut base = cfg.clone();
        base.model.k_patches = k;
        if e.ablations.is_empty() {
            out.push((format!("k{k}"), base));
            continue;
        }
        for a in &e.ablations {
            let mut v = base.clone();
            let (weights, perceptual) = a.apply(cfg.train.weights);
            v.train.weights = weights;
            v.train.perceptual = perceptual;
            let name = serde_json::to_value(a).ok().and_then(|n| n.as_str().map(str::to_string)).unwrap_or_default();
            out.push((format!("{name}_k{k}"), v));
        }
    }
    out
}

pub fn train_cmd(cfg: &ExperimentConfig, data: &Path, out: &Path) -> Result<()> {
    require_dir(data)?;
    let ds = Dataset::load(data)?;
    let split = holdout_split(&ds.samples, &cfg.data, cfg.train.seed)?;
    mkdir(out)?;
    write_json(&out.join("split.json"), &split)?;
    let train_set = pick(&ds, &split.train);
    let val_set = pick(&ds, &split.val);
    let mut summary = Vec::new();
    for (name, v) in variants(cfg) {
        v.model.validate()?;
        let dir = if name.is_empty() { out.to_path_buf() } else { out.join(&name) };
        info!("training {} on {} subjects ({} validation)", if name.is_empty() { "model" } else { &name }, train_set.len(), val_set.len());
        let o = train(&train_set, &val_set, &ds.atlas, &v.model, &v.train, Some(&dir))?;
        let last = o.log.epochs.last().copied();
        summary.push(VariantSummary {
            name,
            dir,
            k_patches: v.model.k_patches,
            best_epoch: o.best_epoch,
            final_val_l1: last.map_or(f64::NAN, |e| e.val_l1),
            best_val_l1: o.log.epochs.get(o.best_epoch.saturating_sub(1)).map_or(f64::NAN, |e| e.val_l1),
        });
    }
    write_json(&out.join("train_summary.json"), &summary)
}

pub fn synthesize(ckpt_path: &Path, input: &Path, complete: bool, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    mkdir(out)?;
    if input.is_dir() && input.join("manifest.json").is_file() {
        let ds = Dataset::load(input)?;
        for s in &ds.samples {
            let dir = out.join(&s.subject_id);
            mkdir(&dir)?;
            save_volume(&ckpt.generator.forward(&s.mri)?, dir.join("pet_synth.nii.gz"))?;
        }
        if complete {
            let samples = synthesize_missing(&ds.samples, &ckpt)?;
            let filled: Vec<&str> =
                ds.samples.iter().filter(|s| !s.is_paired()).map(|s| s.subject_id.as_str()).collect();
            let source = serde_json::json!({
                "completed_from": input,
                "checkpoint": ckpt_path,
                "synthesized_pet": filled,
            });
            Dataset { samples, atlas: ds.atlas, masks: ds.masks }.write(out.join("complete"), None, source)?;
        }
        info!("synthesized {} PET volumes", ds.samples.len());
        return Ok(());
    }
    let files: Vec<PathBuf> = if input.is_dir() {
        let mut f: Vec<PathBuf> = std::fs::read_dir(input)
            .map_err(|source| Error::Io { path: input.to_path_buf(), source })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_nifti(p))
            .collect();
        f.sort();
        f
    } else {
        vec![input.to_path_buf()]
    };
    for f in &files {
        let mri = load_volume(f)?;
        save_volume(&ckpt.generator.forward(&mri)?, out.join(format!("{}_pet.nii.gz", file_stem(f))))?;
    }
    info!("synthesized {} PET volumes", files.len());
    Ok(())
}

enum Predictor {
    Model(Box<Checkpoint>),
    Files(PathBuf),
}

impl Predictor {
    fn predict(&self, s: &PairedSample) -> Result<Volume> {
        match self {
            Predictor::Model(c) => c.generator.forward(&s.mri),
            Predictor::Files(dir) => load_volume(dir.join(&s.subject_id).join("pet_synth.nii.gz")),
        }
    }
}

#[derive(Debug, Serialize)]
struct Summary {
    ssim: MeanStd,
    ms_ssim: MeanStd,
    psnr: MeanStd,
    mae: MeanStd,
    roi_loss: MeanStd,
}

impl Summary {
    fn of(rows: &[(SynthesisMetrics, f64)]) -> Self {
        let col = |f: &dyn Fn(&(SynthesisMetrics, f64)) -> f64| MeanStd::of(&rows.iter().map(f).collect::<Vec<_>>());
        Summary {
            ssim: col(&|r| r.0.ssim),
            ms_ssim: col(&|r| r.0.ms_ssim),
            psnr: col(&|r| r.0.psnr),
            mae: col(&|r| r.0.mae),
            roi_loss: col(&|r| r.1),
        }
    }

    fn row(&self, name: &str) -> String {
        let c = |m: MeanStd| format!("{:.4}±{:.4}", m.mean, m.std);
        format!(
            "{name:<20}{:>18}{:>18}{:>20}{:>18}{:>22}\n",
            c(self.ssim),
            c(self.ms_ssim),
            c(self.psnr),
            c(self.mae),
            format!("{:.3e}±{:.1e}", self.roi_loss.mean, self.roi_loss.std)
        )
    }
}

#[derive(Debug, Serialize)]
struct EvalReport {
    test_ids: Vec<String>,
    baseline_constant: f64,
    baseline: Summary,
    models: Vec<(String, Summary)>,
}

fn find_split(ckpt: Option<&Path>) -> Option<PathBuf> {
    let p = ckpt?;
    let dir = if p.is_dir() { p } else { p.parent()? };
    [dir.join("split.json"), dir.parent()?.join("split.json")].into_iter().find(|p| p.is_file())
}

fn predictors(ckpt: Option<&Path>, predictions: Option<&Path>) -> Result<Vec<(String, Predictor)>> {
    if let Some(dir) = predictions {
        require_dir(dir)?;
        return Ok(vec![("predictions".into(), Predictor::Files(dir.to_path_buf()))]);
    }
    let p = ckpt.ok_or_else(|| Error::InvalidConfig("evaluate needs --checkpoint or --predictions".into()))?;
    if !p.is_dir() {
        return Ok(vec![("model".into(), Predictor::Model(Box::new(Checkpoint::load(p)?)))]);
    }
    let mut found = Vec::new();
    if p.join("final.safetensors").is_file() {
        found.push(("model".to_string(), p.join("final.safetensors")));
    }
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(p)
        .map_err(|source| Error::Io { path: p.to_path_buf(), source })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|d| d.join("final.safetensors").is_file())
        .collect();
    subdirs.sort();
    for d in subdirs {
        found.push((file_stem(&d), d.join("final.safetensors")));
    }
    if found.is_empty() {
        return Err(Error::MissingFile(p.join("final.safetensors")));
    }
    found.into_iter().map(|(n, f)| Ok((n, Predictor::Model(Box::new(Checkpoint::load(f)?))))).collect()
}

pub fn evaluate(
    cfg: &ExperimentConfig,
    ckpt: Option<&Path>,
    predictions: Option<&Path>,
    data: &Path,
    out: &Path,
) -> Result<()> {
    require_dir(data)?;
    let ds = Dataset::load(data)?;
    let models = predictors(ckpt, predictions)?;
    let split = match find_split(ckpt) {
        Some(p) => read_json(&p)?,
        None => holdout_split(&ds.samples, &cfg.data, cfg.train.seed)?,
    };
    let test = pick(&ds, &split.test);
    if test.is_empty() {
        return Err(Error::Dataset("the held-out split is empty".into()));
    }
    let train_set = pick(&ds, &split.train);
    let pets: Vec<&Volume> = train_set.iter().filter_map(|s| s.pet.as_ref()).collect();
    let constant = pets.iter().map(|p| p.mean()).sum::<f64>() / pets.len().max(1) as f64;
    let score = |predict: &dyn Fn(&PairedSample) -> Result<Volume>| -> Result<Vec<(String, SynthesisMetrics, f64)>> {
        test.iter()
            .map(|s| {
                let pet = s.pet.as_ref().expect("held-out subjects are paired");
                let y_hat = predict(s)?;
                Ok((s.subject_id.clone(), synthesis_metrics(pet, &y_hat)?, roi_loss(pet, &y_hat, &ds.atlas)?))
            })
            .collect()
    };
    let strip = |rows: &[(String, SynthesisMetrics, f64)]| rows.iter().map(|r| (r.1, r.2)).collect::<Vec<_>>();
    mkdir(out)?;
    let base_rows = score(&|s| Ok(Volume::filled(s.mri.shape(), constant as f32)))?;
    let mut report =
        EvalReport { test_ids: split.test.clone(), baseline_constant: constant, baseline: Summary::of(&strip(&base_rows)), models: Vec::new() };
    let mut text = format!(
        "{} held-out subjects\n{:<20}{:>18}{:>18}{:>20}{:>18}{:>22}\n",
        test.len(),
        "predictor",
        "SSIM",
        "MS-SSIM",
        "PSNR (dB)",
        "MAE",
        "ROI loss"
    );
    text.push_str(&report.baseline.row("constant-mean"));
    for (name, p) in &models {
        let rows = score(&|s| p.predict(s))?;
        let csv_rows: Vec<(String, SynthesisMetrics)> = rows.iter().map(|r| (r.0.clone(), r.1)).collect();
        write_csv(out.join(format!("metrics_{name}.csv")), &synthesis_csv(&csv_rows))?;
        let s = Summary::of(&strip(&rows));
        text.push_str(&s.row(name));
        report.models.push((name.clone(), s));
    }
    info!("\n{text}");
    write_report(out, &report, &text)
}

fn override_space(ds: &mut Dataset, atlas: Option<&Path>, gm: Option<&Path>, wm: Option<&Path>) -> Result<()> {
    if let Some(a) = atlas {
        let (labels, shape) = load_labels(a)?;
        ds.atlas = AtlasLabelMap::from_labels(labels, shape)?;
    }
    match (gm, wm) {
        (None, None) => {}
        (Some(g), Some(w)) => {
            let (g, gs) = load_labels(g)?;
            let (w, ws) = load_labels(w)?;
            if gs != ws {
                return Err(Error::ShapeMismatch { expected: gs, found: ws });
            }
            ds.masks = TissueMasks::new(g.iter().map(|&v| v > 0).collect(), w.iter().map(|&v| v > 0).collect(), gs)?;
        }
        _ => return Err(Error::InvalidConfig("--gm-mask and --wm-mask go together".into())),
    }
    if ds.masks.shape() != ds.atlas.shape() {
        return Err(Error::ShapeMismatch { expected: ds.atlas.shape(), found: ds.masks.shape() });
    }
    Ok(())
}

pub struct ClassifyArgs<'a> {
    pub data: &'a Path,
    pub atlas: Option<&'a Path>,
    pub gm_mask: Option<&'a Path>,
    pub wm_mask: Option<&'a Path>,
    pub protocol: Option<Protocol>,
    pub folds: Option<usize>,
}

pub fn classify(cfg: &ExperimentConfig, args: &ClassifyArgs, out: &Path) -> Result<()> {
    require_dir(args.data)?;
    let mut ds = Dataset::load(args.data)?;
    override_space(&mut ds, args.atlas, args.gm_mask, args.wm_mask)?;
    let mut cv = cfg.eval.cv.clone();
    if let Some(p) = args.protocol {
        cv.protocol = p;
    }
    if let Some(k) = args.folds {
        cv.folds = k;
    }
    mkdir(out)?;
    let (atlas, model, tcfg) = (&ds.atlas, &cfg.model, &cfg.train);
    let mut trainer = |fold: usize, set: &[PairedSample]| -> Result<Checkpoint> {
        let dir = out.join(format!("fold_{}", fold + 1)).join("generator");
        Ok(train(set, &[], atlas, model, tcfg, Some(&dir))?.last)
    };
    let report = cross_validate(&ds.samples, &ds.atlas, &ds.masks, &cv, Some(&mut trainer))?;
    for f in &report.folds {
        let dir = out.join(format!("fold_{}", f.fold + 1));
        mkdir(&dir)?;
        write_json(&dir.join("report.json"), f)?;
    }
    let table = report_table(&report);
    info!("\n{table}");
    write_report(out, &report, &table)?;
    write_csv(out.join("predictions.csv"), &predictions_csv(&report))?;

    let paired: Vec<&PairedSample> = ds.paired().collect();
    let features = paired
        .iter()
        .map(|s| Ok(roi_features(&s.mri, s.pet.as_ref().expect("paired"), &ds.atlas, &ds.masks)?.values))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<Label> = paired.iter().map(|s| s.label).collect();
    write_json(&out.join("classifier.json"), &fit_classifier(&features, &labels, &cv.svm)?)
}

pub struct InterpolateArgs<'a> {
    pub checkpoint: &'a Path,
    pub classifier: &'a Path,
    pub data: &'a Path,
    pub cn: Option<&'a str>,
    pub ad: Option<&'a str>,
    pub steps: Option<usize>,
}

#[derive(Debug, Serialize)]
struct InterpolationReport<'a> {
    subject_cn: &'a str,
    subject_ad: &'a str,
    points: Vec<glagan::evaluation::InterpolationPoint>,
}

fn subject<'a>(ds: &'a Dataset, id: Option<&str>, label: Label) -> Result<&'a PairedSample> {
    match id {
        Some(id) => ds
            .samples
            .iter()
            .find(|s| s.subject_id == id)
            .ok_or_else(|| Error::Dataset(format!("no subject `{id}`"))),
        None => ds
            .samples
            .iter()
            .find(|s| s.label == label)
            .ok_or_else(|| Error::Dataset(format!("no {label} subject"))),
    }
}

pub fn interpolate(cfg: &ExperimentConfig, args: &InterpolateArgs, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(args.checkpoint)?;
    let classifier: SvmModel = read_json(args.classifier)?;
    require_dir(args.data)?;
    let ds = Dataset::load(args.data)?;
    let cn = subject(&ds, args.cn, Label::Cn)?;
    let ad = subject(&ds, args.ad, Label::Ad)?;
    let steps = args.steps.unwrap_or(cfg.eval.interpolation_steps);
    let points = interpolation_study(&cn.mri, &ad.mri, steps, &ckpt.generator, &classifier, &ds.atlas, &ds.masks)?;
    mkdir(out)?;
    let mut csv = String::from("step,alpha,p_normal\n");
    for (i, p) in points.iter().enumerate() {
        save_volume(&p.mri, out.join(format!("step_{i:02}_mri.nii.gz")))?;
        save_volume(&p.pet, out.join(format!("step_{i:02}_pet.nii.gz")))?;
        csv.push_str(&format!("{i},{},{}\n", p.alpha, p.p_normal));
    }
    write_csv(out.join("probabilities.csv"), &csv)?;
    info!("\n{csv}");
    write_json(
        &out.join("report.json"),
        &InterpolationReport { subject_cn: &cn.subject_id, subject_ad: &ad.subject_id, points },
    )
}

pub fn inspect_units(ckpt: &Path, volume: &Path, layer: &str, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt)?;
    let x = load_volume(volume)?;
    let layers: Vec<&str> = if layer == "all" { LAYER_IDS.to_vec() } else { vec![layer] };
    let mut csv = String::from("layer,channel,mean,min,max\n");
    for id in layers {
        let maps = dump_activations(&ckpt.generator, &x, id)?;
        let dir = out.join(id);
        mkdir(&dir)?;
        for (c, m) in maps.iter().enumerate() {
            save_volume(m, dir.join(format!("channel_{c:03}.nii.gz")))?;
            let (lo, hi) = m.min_max();
            csv.push_str(&format!("{id},{c},{},{lo},{hi}\n", m.mean()));
        }
    }
    write_csv(out.join("units.csv"), &csv)
}

pub struct RenderArgs<'a> {
    pub volumes: &'a [PathBuf],
    pub reference: Option<&'a Path>,
    pub planes: &'a [Plane],
    pub slice: Option<usize>,
    pub scale: u32,
}

/// Slices of every volume; error maps against `reference`, or against the first volume
/// when several are given.
pub fn render_slices(args: &RenderArgs, out: &Path) -> Result<()> {
    let vols = args.volumes.iter().map(load_volume).collect::<Result<Vec<_>>>()?;
    let reference = match args.reference {
        Some(r) => Some(load_volume(r)?),
        None if vols.len() > 1 => Some(vols[0].clone()),
        None => None,
    };
    let first_compared = if args.reference.is_some() { 0 } else { 1 };
    mkdir(out)?;
    for (i, (v, path)) in vols.iter().zip(args.volumes).enumerate() {
        let name = format!("v{i}_{}", file_stem(path));
        for &plane in args.planes {
            let s = render::extract(v, plane, args.slice)?;
            render::save_png(render::gray_image(&s, args.scale), &out.join(format!("{name}_{}.png", plane.name())))?;
            if let Some(r) = reference.as_ref().filter(|_| i >= first_compared) {
                r.ensure_same_shape(v)?;
                let rs = render::extract(r, plane, args.slice)?;
                let img = render::error_image(&s, &rs, args.scale)?;
                render::save_png(img, &out.join(format!("{name}_error_{}.png", plane.name())))?;
            }
        }
    }
    Ok(())
}
