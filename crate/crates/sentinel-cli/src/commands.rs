//! The pipeline commands. Each command is callable as a library function
//! (the binary is a thin argument-parsing shell) and writes write-once
//! artifacts under the configured output directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sentinel_core::attack::{craft_batch, sheet, AdversarialBatch, AttackConfig, SampleRecord};
use sentinel_core::container::atomic_write;
use sentinel_core::data::ppm;
use sentinel_core::detect::{
    self, calibrate_threshold, fit_ensemble, fit_stats, lid_features, msp_score, odin_score,
    tap_features, DetectorModel, Provenance,
};
use sentinel_core::metrics::{make_report, EvalReport, EvalRow, MetricSet, ScoredSample};
use sentinel_core::model::checkpoint::{self, CheckpointMeta};
use sentinel_core::model::train::{train, TrainConfig, TrainHistory};
use sentinel_core::model::SmallCnn;
use sentinel_core::rng::{derive_seed, seeded};
use sentinel_core::tensor::io as ten_io;
use sentinel_core::Tensor;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::pipeline::{load_pipeline_data, PipelineData};

/// Artifact locations under the run directory.
pub struct Paths {
    out: PathBuf,
}

impl Paths {
    pub fn new(config: &RunConfig, base: &Path) -> Self {
        let out = if config.out_dir.is_absolute() {
            config.out_dir.clone()
        } else {
            base.join(&config.out_dir)
        };
        Paths { out }
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.out.join("checkpoint.ckpt")
    }

    pub fn history(&self) -> PathBuf {
        self.out.join("history.json")
    }

    pub fn detector(&self) -> PathBuf {
        self.out.join("detector.det")
    }

    pub fn attack_dir(&self, kind: &str) -> PathBuf {
        self.out.join("attacks").join(kind)
    }

    pub fn sheet(&self) -> PathBuf {
        self.out.join("sheet.ppm")
    }

    pub fn report_json(&self) -> PathBuf {
        self.out.join("report.json")
    }

    pub fn report_csv(&self) -> PathBuf {
        self.out.join("report.csv")
    }
}

// ── train ────────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct HistoryFile {
    seed: u64,
    config_digest: String,
    history: TrainHistory,
}

pub fn cmd_train(config: &RunConfig, base: &Path) -> Result<PathBuf, CliError> {
    let paths = Paths::new(config, base);
    let data = load_pipeline_data(config, base)?;
    let mut model = SmallCnn::new(
        data.train.num_classes(),
        config.data.input_size,
        derive_seed(config.seed, "init"),
    )?;

    let train_config = TrainConfig {
        epochs: config.model.epochs,
        lr: config.model.lr,
        momentum: config.model.momentum,
        batch_size: config.model.batch_size,
        seed: derive_seed(config.seed, "train"),
        augment: config.model.augment.clone(),
    };
    let history = train(&mut model, &data.train, &data.val, &train_config)?;

    let meta = CheckpointMeta {
        architecture: model.descriptor(),
        tap_manifest: model.taps().to_vec(),
        num_classes: model.num_classes(),
        input_size: model.input_size(),
        seed: config.seed,
        epochs: config.model.epochs,
        final_val_accuracy: history.best_val_accuracy,
        normalization: "scale-to-unit".to_string(),
        config_digest: config.digest(),
    };
    checkpoint::save(&paths.checkpoint(), &model, &meta)?;

    let history_file = HistoryFile {
        seed: config.seed,
        config_digest: config.digest(),
        history,
    };
    let mut text = serde_json::to_string_pretty(&history_file).expect("history serializes");
    text.push('\n');
    atomic_write(&paths.history(), text.as_bytes())?;

    println!(
        "trained {} for {} epochs: best validation accuracy {:.4} (epoch {})",
        model.descriptor(),
        config.model.epochs,
        history_file.history.best_val_accuracy,
        history_file.history.best_epoch,
    );
    Ok(paths.checkpoint())
}

// ── fit-detector ─────────────────────────────────────────────────────

fn load_model(path: &Path) -> Result<(SmallCnn, CheckpointMeta), CliError> {
    if !path.exists() {
        return Err(CliError::usage(format!("checkpoint not found: {}", path.display())));
    }
    Ok(checkpoint::load(path)?)
}

fn images_of(items: &[(Tensor, usize)]) -> Vec<Tensor> {
    items.iter().map(|(t, _)| t.clone()).collect()
}

fn batch_rows(batch: &AdversarialBatch) -> Result<Vec<Tensor>, CliError> {
    batch.adversarial.iter().map(|t| t.row(0).map_err(CliError::from)).collect()
}

/// Negatives for the fuser: a held-out OOD slice when an OOD source is
/// configured, otherwise signed-gradient examples crafted on validation.
fn fuser_negatives(
    config: &RunConfig,
    data: &PipelineData,
    model: &SmallCnn,
) -> Result<(Vec<Tensor>, String), CliError> {
    if !data.ood_val.is_empty() {
        return Ok((data.ood_val.clone(), "ood-holdout".to_string()));
    }
    let eps = config
        .attacks
        .iter()
        .find_map(|a| match a {
            AttackConfig::Fgsm { eps } => Some(*eps),
            _ => None,
        })
        .unwrap_or(0.1);
    let batch = craft_batch(model, data.val.items(), &AttackConfig::Fgsm { eps })?;
    Ok((batch_rows(&batch)?, format!("fgsm(eps={eps})-on-validation")))
}

pub fn cmd_fit_detector(
    config: &RunConfig,
    base: &Path,
    checkpoint_path: Option<&Path>,
) -> Result<PathBuf, CliError> {
    let paths = Paths::new(config, base);
    let ckpt = checkpoint_path.map(Path::to_path_buf).unwrap_or_else(|| paths.checkpoint());
    let (model, _) = load_model(&ckpt)?;
    let data = load_pipeline_data(config, base)?;

    let stats = fit_stats(&model, data.train.items(), config.detector.lambda)?;
    let val_pos = images_of(data.val.items());
    let (negatives, negative_source) = fuser_negatives(config, &data, &model)?;

    let ensemble = fit_ensemble(&model, &stats, &val_pos, &negatives, &config.detector.eps_grid)?;
    let provenance = Provenance {
        model_digest: model.digest(),
        fit_seed: config.seed,
        validation_positives: val_pos.len(),
        validation_negatives: negatives.len(),
        negative_source,
    };
    let mut detector = DetectorModel::assemble(
        stats,
        &ensemble,
        0.0,
        model.taps().to_vec(),
        provenance,
    )?;
    let pos_scores = detector.ensemble_scores(&model, &val_pos)?;
    detector.set_threshold(calibrate_threshold(&pos_scores)?);
    detect::save(&paths.detector(), &detector)?;

    println!(
        "fitted detector: eps* = {}, validation auroc {:.4}, threshold {:.4}",
        detector.epsilon(),
        ensemble.auroc,
        detector.threshold(),
    );
    Ok(paths.detector())
}

// ── attack ───────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
pub struct BatchManifest {
    pub kind: String,
    pub params: AttackConfig,
    pub seed: u64,
    pub config_digest: String,
    pub model_digest: String,
    pub total: usize,
    pub success_count: usize,
    pub records: Vec<SampleRecord>,
}

fn save_batch(dir: &Path, batch: &AdversarialBatch, manifest: &BatchManifest) -> Result<(), CliError> {
    let originals: Vec<Tensor> = batch
        .originals
        .iter()
        .map(|t| t.row(0))
        .collect::<Result<_, _>>()
        .map_err(CliError::from)?;
    let adversarial: Vec<Tensor> = batch
        .adversarial
        .iter()
        .map(|t| t.row(0))
        .collect::<Result<_, _>>()
        .map_err(CliError::from)?;
    ten_io::write_tensor(&dir.join("originals.ten"), &Tensor::stack(&originals)?)?;
    ten_io::write_tensor(&dir.join("adversarial.ten"), &Tensor::stack(&adversarial)?)?;
    let mut text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    text.push('\n');
    atomic_write(&dir.join("manifest.json"), text.as_bytes())?;
    Ok(())
}

pub fn load_batch(dir: &Path) -> Result<(Tensor, Tensor, BatchManifest), CliError> {
    let manifest: BatchManifest = serde_json::from_str(
        &std::fs::read_to_string(dir.join("manifest.json"))
            .map_err(|e| CliError::usage(format!("missing attack manifest in {}: {e}", dir.display())))?,
    )
    .map_err(CliError::runtime)?;
    let originals = ten_io::read_tensor(&dir.join("originals.ten"))?;
    let adversarial = ten_io::read_tensor(&dir.join("adversarial.ten"))?;
    Ok((originals, adversarial, manifest))
}

/// Which attacks to run, with flag overrides applied on top of config.
pub fn select_attacks(
    config: &RunConfig,
    kind: Option<&str>,
    eps: Option<f32>,
    steps: Option<usize>,
) -> Result<Vec<AttackConfig>, CliError> {
    let mut selected: Vec<AttackConfig> = match kind {
        None => config.attacks.clone(),
        Some(k) => {
            let found = config.attacks.iter().find(|a| a.kind_name() == k).cloned();
            vec![found.unwrap_or(match k {
                "fgsm" => AttackConfig::fgsm_default(),
                "bim" => AttackConfig::bim_default(),
                "deepfool" => AttackConfig::deepfool_default(),
                "cw" => AttackConfig::cw_default(),
                other => {
                    return Err(CliError::usage(format!(
                        "unknown attack kind {other:?} (expected fgsm, bim, deepfool, cw)"
                    )))
                }
            })]
        }
    };
    for attack in selected.iter_mut() {
        match attack {
            AttackConfig::Fgsm { eps: e } => {
                if let Some(v) = eps {
                    *e = v;
                }
            }
            AttackConfig::Bim { eps: e, steps: s, .. } => {
                if let Some(v) = eps {
                    *e = v;
                }
                if let Some(v) = steps {
                    *s = v;
                }
            }
            AttackConfig::Deepfool { max_iter, .. } => {
                if let Some(v) = steps {
                    *max_iter = v;
                }
            }
            AttackConfig::Cw { iterations, .. } => {
                if let Some(v) = steps {
                    *iterations = v;
                }
            }
        }
        attack.validate().map_err(|e| CliError::usage(e.to_string()))?;
    }
    Ok(selected)
}

pub fn cmd_attack(
    config: &RunConfig,
    base: &Path,
    kind: Option<&str>,
    eps: Option<f32>,
    steps: Option<usize>,
    checkpoint_path: Option<&Path>,
) -> Result<Vec<PathBuf>, CliError> {
    let paths = Paths::new(config, base);
    let ckpt = checkpoint_path.map(Path::to_path_buf).unwrap_or_else(|| paths.checkpoint());
    let (model, _) = load_model(&ckpt)?;
    let data = load_pipeline_data(config, base)?;
    let attacks = select_attacks(config, kind, eps, steps)?;

    let mut items = data.test.items().to_vec();
    if let Some(cap) = config.attack_sample_cap {
        items.truncate(cap);
    }

    let mut dirs = Vec::new();
    for attack in &attacks {
        let batch = craft_batch(&model, &items, attack)?;
        let manifest = BatchManifest {
            kind: attack.kind_name().to_string(),
            params: attack.clone(),
            seed: config.seed,
            config_digest: config.digest(),
            model_digest: model.digest(),
            total: batch.records.len(),
            success_count: batch.success_count(),
            records: batch.records.clone(),
        };
        let dir = paths.attack_dir(attack.kind_name());
        save_batch(&dir, &batch, &manifest)?;
        println!(
            "{}: {}/{} adversarial successes (rate {:.3})",
            attack.kind_name(),
            batch.success_count(),
            batch.records.len(),
            batch.success_rate(),
        );
        dirs.push(dir);
    }

    // Signed-gradient sweep sheet: the standard budgets plus any
    // explicitly requested one.
    let mut sweep = vec![0.0f32, 0.1, 0.2, 0.3];
    if let Some(v) = eps {
        if !sweep.contains(&v) {
            sweep.push(v);
        }
    }
    sweep.sort_by(|a, b| a.partial_cmp(b).expect("finite eps"));
    let mut per_class: Vec<(Tensor, usize)> = Vec::new();
    for class in 0..data.test.num_classes() {
        let found = data.test.items().iter().find(|(img, label)| {
            *label == class
                && model
                    .predict(&Tensor::stack(std::slice::from_ref(img)).expect("stack one"))
                    .map(|p| p[0] == class)
                    .unwrap_or(false)
        });
        if let Some((img, label)) = found {
            per_class.push((img.clone(), *label));
        }
    }
    if !per_class.is_empty() {
        let (sheet_img, _) = sheet::render_fgsm_sheet(&model, &per_class, &sweep)?;
        atomic_write(&paths.sheet(), &ppm::encode(&sheet_img)?)?;
    }
    Ok(dirs)
}

// ── evaluate ─────────────────────────────────────────────────────────

const ATTACK_EVAL_ORDER: [&str; 4] = ["fgsm", "bim", "deepfool", "cw"];

fn display_source(kind: &str) -> String {
    match kind {
        "fgsm" => "FGSM".to_string(),
        "bim" => "BIM".to_string(),
        "deepfool" => "DeepFool".to_string(),
        "cw" => "CW".to_string(),
        other => other.to_uppercase(),
    }
}

struct EvalSource {
    display: String,
    /// Evaluation negatives.
    negatives: Vec<Tensor>,
    /// Negatives used to fit per-source fusers (Mahalanobis, LID).
    fuser_negatives: Vec<Tensor>,
}

fn collect_sources(
    config: &RunConfig,
    paths: &Paths,
    model: &SmallCnn,
    data: &PipelineData,
) -> Result<Vec<EvalSource>, CliError> {
    let mut sources = Vec::new();
    if !data.ood_test.is_empty() {
        sources.push(EvalSource {
            display: "OOD".to_string(),
            negatives: data.ood_test.clone(),
            fuser_negatives: data.ood_val.clone(),
        });
    }
    for kind in ATTACK_EVAL_ORDER {
        let dir = paths.attack_dir(kind);
        if !dir.join("manifest.json").exists() {
            continue;
        }
        let (_, adversarial, manifest) = load_batch(&dir)?;
        if manifest.model_digest != model.digest() {
            return Err(CliError::usage(format!(
                "attack batch {} was crafted against a different checkpoint",
                dir.display()
            )));
        }
        // Successful adversarial examples are the abnormal set.
        let mut negatives = Vec::new();
        for (row, record) in manifest.records.iter().enumerate() {
            if record.success {
                negatives.push(adversarial.row(row)?);
            }
        }
        if negatives.is_empty() {
            eprintln!("warning: no successful {kind} examples, skipping source");
            continue;
        }
        // Per-source fuser negatives: the same attack crafted on the
        // validation split.
        let attack = manifest.params.clone();
        let mut val_items = data.val.items().to_vec();
        if let Some(cap) = config.attack_sample_cap {
            val_items.truncate(cap);
        }
        let fuser_batch = craft_batch(model, &val_items, &attack)?;
        sources.push(EvalSource {
            display: display_source(kind),
            negatives,
            fuser_negatives: batch_rows(&fuser_batch)?,
        });
    }
    Ok(sources)
}

fn scored(pos: &[f64], neg: &[f64]) -> Vec<ScoredSample> {
    pos.iter()
        .map(|&s| ScoredSample::new(s, true))
        .chain(neg.iter().map(|&s| ScoredSample::new(s, false)))
        .collect()
}

pub fn cmd_evaluate(
    config: &RunConfig,
    base: &Path,
    checkpoint_path: Option<&Path>,
    detector_path: Option<&Path>,
) -> Result<(PathBuf, PathBuf), CliError> {
    let paths = Paths::new(config, base);
    let ckpt = checkpoint_path.map(Path::to_path_buf).unwrap_or_else(|| paths.checkpoint());
    let det_path = detector_path.map(Path::to_path_buf).unwrap_or_else(|| paths.detector());
    if !det_path.exists() {
        return Err(CliError::usage(format!("detector not found: {}", det_path.display())));
    }
    let (model, _) = load_model(&ckpt)?;
    let stored = detect::load(&det_path)?;
    let data = load_pipeline_data(config, base)?;
    let model_name = model.descriptor();

    let test_pos = images_of(data.test.items());
    let val_pos = images_of(data.val.items());
    let sources = collect_sources(config, &paths, &model, &data)?;
    if sources.is_empty() {
        return Err(CliError::usage(
            "nothing to evaluate: no OOD source configured and no attack batches found",
        ));
    }

    // LID reference activations from the training split.
    let mut train_images = images_of(data.train.items());
    {
        let mut rng = seeded(derive_seed(config.seed, "lid-ref"));
        sentinel_core::rng::shuffle(&mut train_images, &mut rng);
        train_images.truncate(config.detector.lid_reference);
    }
    if train_images.len() <= config.detector.lid_k {
        return Err(CliError::usage(format!(
            "lid reference batch ({}) must exceed lid_k ({})",
            train_images.len(),
            config.detector.lid_k
        )));
    }
    let lid_reference = tap_features(&model, &train_images)?;

    let lid_of = |images: &[Tensor]| -> Result<Vec<Vec<f64>>, CliError> {
        let acts = tap_features(&model, images)?;
        let n = images.len();
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let per_layer: Vec<Vec<f64>> = acts.iter().map(|layer| layer[i].clone()).collect();
            rows.push(lid_features(&lid_reference, &per_layer, config.detector.lid_k)?);
        }
        Ok(rows)
    };

    let msp_of = |images: &[Tensor]| -> Result<Vec<f64>, CliError> {
        images
            .iter()
            .map(|img| {
                let b = Tensor::stack(std::slice::from_ref(img))?;
                Ok(msp_score(&model, &b)?)
            })
            .collect()
    };
    let odin_of = |images: &[Tensor]| -> Result<Vec<f64>, CliError> {
        images
            .iter()
            .map(|img| {
                let b = Tensor::stack(std::slice::from_ref(img))?;
                Ok(odin_score(
                    &model,
                    &b,
                    config.detector.odin_temperature,
                    config.detector.odin_eps,
                )?)
            })
            .collect()
    };

    let msp_test = msp_of(&test_pos)?;
    let odin_test = odin_of(&test_pos)?;
    let lid_test = lid_of(&test_pos)?;
    let lid_val_pos = lid_of(&val_pos)?;

    let mut rows = Vec::new();
    for source in &sources {
        // MSP and ODIN need no fitting.
        let msp_neg = msp_of(&source.negatives)?;
        rows.push(EvalRow {
            model: model_name.clone(),
            detector: "MSP".to_string(),
            source: source.display.clone(),
            n_positive: test_pos.len(),
            n_negative: source.negatives.len(),
            metrics: MetricSet::compute(&scored(&msp_test, &msp_neg))?,
        });
        let odin_neg = odin_of(&source.negatives)?;
        rows.push(EvalRow {
            model: model_name.clone(),
            detector: "ODIN".to_string(),
            source: source.display.clone(),
            n_positive: test_pos.len(),
            n_negative: source.negatives.len(),
            metrics: MetricSet::compute(&scored(&odin_test, &odin_neg))?,
        });

        // LID: per-source logistic fuser over per-layer estimates.
        let lid_fuser_neg = lid_of(&source.fuser_negatives)?;
        let mut features = lid_val_pos.clone();
        features.extend(lid_fuser_neg.iter().cloned());
        let mut labels = vec![true; lid_val_pos.len()];
        labels.extend(std::iter::repeat(false).take(lid_fuser_neg.len()));
        let lid_fit = detect::fit_logistic(&features, &labels)?;
        let lid_pos_scores: Vec<f64> = lid_test.iter().map(|f| lid_fit.score(f)).collect();
        let lid_neg_rows = lid_of(&source.negatives)?;
        let lid_neg_scores: Vec<f64> = lid_neg_rows.iter().map(|f| lid_fit.score(f)).collect();
        rows.push(EvalRow {
            model: model_name.clone(),
            detector: "LID".to_string(),
            source: source.display.clone(),
            n_positive: test_pos.len(),
            n_negative: source.negatives.len(),
            metrics: MetricSet::compute(&scored(&lid_pos_scores, &lid_neg_scores))?,
        });

        // Mahalanobis: refit the layer ensemble per abnormality regime on
        // the stored per-layer statistics, then recalibrate the threshold.
        let ensemble = fit_ensemble(
            &model,
            stored.stats(),
            &val_pos,
            &source.fuser_negatives,
            &config.detector.eps_grid,
        )?;
        let provenance = Provenance {
            model_digest: stored.provenance().model_digest.clone(),
            fit_seed: config.seed,
            validation_positives: val_pos.len(),
            validation_negatives: source.fuser_negatives.len(),
            negative_source: source.display.to_lowercase(),
        };
        let mut detector = DetectorModel::assemble(
            stored.stats().to_vec(),
            &ensemble,
            0.0,
            stored.tap_manifest().to_vec(),
            provenance,
        )?;
        let cal_scores = detector.ensemble_scores(&model, &val_pos)?;
        detector.set_threshold(calibrate_threshold(&cal_scores)?);
        let maha_pos = detector.ensemble_scores(&model, &test_pos)?;
        let maha_neg = detector.ensemble_scores(&model, &source.negatives)?;
        rows.push(EvalRow {
            model: model_name.clone(),
            detector: "Mahalanobis".to_string(),
            source: source.display.clone(),
            n_positive: test_pos.len(),
            n_negative: source.negatives.len(),
            metrics: MetricSet::compute(&scored(&maha_pos, &maha_neg))?,
        });
    }

    let report = make_report(rows, config.digest(), config.seed, config.canonical_json());
    atomic_write(&paths.report_json(), report.to_json().as_bytes())?;
    atomic_write(&paths.report_csv(), report.to_csv().as_bytes())?;
    println!("{}", report.to_csv());

    check_floors(config, &report)?;
    Ok((paths.report_json(), paths.report_csv()))
}

fn check_floors(config: &RunConfig, report: &EvalReport) -> Result<(), CliError> {
    let mut violations = Vec::new();
    for floor in &config.floors {
        for row in &report.rows {
            if floor.detector.as_deref().map(|d| d == row.detector).unwrap_or(true)
                && floor.source.as_deref().map(|s| s == row.source).unwrap_or(true)
            {
                match row.metrics.get(&floor.metric) {
                    Some(v) if v < floor.min => violations.push(format!(
                        "{} / {} / {}: {:.4} < {:.4}",
                        row.detector, row.source, floor.metric, v, floor.min
                    )),
                    Some(_) => {}
                    None => {
                        return Err(CliError::usage(format!(
                            "unknown metric {:?} in floors",
                            floor.metric
                        )))
                    }
                }
            }
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(CliError::Floor(violations.join("; ")))
    }
}

// ── report ───────────────────────────────────────────────────────────

pub fn cmd_report(json_path: &Path, csv_path: Option<&Path>) -> Result<String, CliError> {
    let text = std::fs::read_to_string(json_path)
        .map_err(|e| CliError::usage(format!("cannot read {}: {e}", json_path.display())))?;
    let report = EvalReport::from_json(&text)
        .map_err(|e| CliError::usage(format!("invalid report: {e}")))?;
    let csv = report.to_csv();
    if let Some(path) = csv_path {
        atomic_write(path, csv.as_bytes())?;
    }
    Ok(csv)
}

// ── synth-data ───────────────────────────────────────────────────────

pub fn cmd_synth_data(
    n_per_class: usize,
    img_size: usize,
    seed: u64,
    ood: bool,
    out: &Path,
) -> Result<usize, CliError> {
    if n_per_class == 0 {
        return Err(CliError::usage("--n must be at least 1"));
    }
    let ds = sentinel_core::data::synth_cells(&sentinel_core::data::SynthConfig {
        n_per_class,
        img_size,
        seed,
        ood,
    });
    let mut count = 0usize;
    let mut per_class = vec![0usize; ds.num_classes()];
    for (img, label) in ds.items() {
        let name = format!("cell_{:04}.ppm", per_class[*label]);
        per_class[*label] += 1;
        let path = out.join(&ds.class_names()[*label]).join(name);
        atomic_write(&path, &ppm::encode(img)?)?;
        count += 1;
    }
    println!("wrote {count} images under {}", out.display());
    Ok(count)
}
