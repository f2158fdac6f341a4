//! Five-fold cross-validation protocol: deterministic fold assignment,
//! per-fold predictor fitting, full tiling/TTA prediction of the validation
//! cases for every configured model, pairwise softmax ensembling, mean-dice
//! model selection, and connected-component postprocessing of the winner.
//!
//! Real network training is stood in for by the toy predictors; the
//! learning-rate scheduler still runs live in a simulated-epoch mode that
//! replays each predictor's loss on held-out batches, so the training
//! control logic is exercised end to end.
//!
//! Outputs under the run directory: `predictions/<candidate>/*.mvox`
//! (argmax labelmaps on the preprocessed grid), `scheduler/<model>.jsonl`,
//! `metrics.json`, `manifest.json`, and `timings.json`. Everything except
//! `timings.json` is byte-deterministic for a fixed dataset, plan, and
//! seed; timings are kept out of the manifest for exactly that reason.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{corrupt_labels, sample_batch, SampleOptions, TrainingCase, TrainingSample};
use crate::augment::{COMPONENT_DROP_PROB, MORPH_PROB};
use crate::descriptor::DatasetDescriptor;
use crate::error::{Error, Result};
use crate::inference::{
    argmax_labels, candidate_order, dice_score, ensemble, predict_slicewise, predict_volume,
    select_best, Candidate,
};
use crate::interp::resample_nearest_to_shape;
use crate::losskit::{
    total_loss_and_grad, EpochLog, LossInput, SchedulerAction, SchedulerConfig, SchedulerState,
};
use crate::planner::{AugmentationConfig, ModelId, PipelinePlan};
use crate::postprocess::apply_postprocessing;
use crate::predictors::{FittedPredictor, PredictorKind};
use crate::preprocess::{PreprocessedCase, Resolution};
use crate::volume::Volume;

pub const NUM_FOLDS: usize = 5;
pub const METRICS_SCHEMA: &str = "segplan-metrics-1";
pub const MANIFEST_SCHEMA: &str = "segplan-manifest-1";
/// Hard ceiling on simulated epochs (the scheduler stops far earlier).
pub const SIM_EPOCH_CAP: usize = 1000;

#[derive(Debug, Clone)]
pub struct CvOptions {
    pub seed: u64,
    pub predictor: PredictorKind,
    pub tta: bool,
    /// Replay predictor losses through the learning-rate scheduler and
    /// write per-model epoch logs.
    pub simulate_scheduler: bool,
}

impl Default for CvOptions {
    fn default() -> Self {
        CvOptions {
            seed: 7,
            predictor: PredictorKind::Threshold,
            tta: true,
            simulate_scheduler: true,
        }
    }
}

/// Deterministic, platform-independent fold assignment: case ids sorted,
/// Fisher-Yates-shuffled by the seeded generator, then dealt round-robin.
pub fn assign_folds(case_ids: &[String], seed: u64) -> BTreeMap<String, usize> {
    let mut ids: Vec<String> = case_ids.to_vec();
    ids.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..ids.len()).rev() {
        // draw as u64 so 32-bit platforms shuffle identically
        let j = rng.gen_range(0..=i as u64) as usize;
        ids.swap(i, j);
    }
    ids.into_iter().enumerate().map(|(k, id)| (id, k % NUM_FOLDS)).collect()
}

/// Everything fitted on one fold's training split.
pub struct FittedModelSet {
    /// Predictor for the single-stage models (2D slice-wise and 3D).
    pub fullres: FittedPredictor,
    /// Stage-1 predictor of the two-stage model, fitted on the coarse grid.
    pub lowres: Option<FittedPredictor>,
    /// Stage-2 predictor; consumes the one-hot coarse mask as extra input.
    pub cascade_fullres: Option<FittedPredictor>,
}

pub fn fit_models(
    kind: PredictorKind,
    plan: &PipelinePlan,
    fullres_train: &[(&Volume, &Volume)],
    lowres_train: Option<&[(&Volume, &Volume)]>,
    num_classes: usize,
) -> Result<FittedModelSet> {
    let fullres = FittedPredictor::fit(kind, fullres_train, num_classes, false)?;
    let (lowres, cascade_fullres) = if plan.models.contains(&ModelId::Cascade) {
        let lowres_train = lowres_train.ok_or_else(|| {
            Error::validation(
                "the plan has a two-stage model but no coarse-resolution training data \
                 was provided; run preprocessing first",
            )
        })?;
        (
            Some(FittedPredictor::fit(kind, lowres_train, num_classes, false)?),
            Some(FittedPredictor::fit(kind, fullres_train, num_classes, true)?),
        )
    } else {
        (None, None)
    };
    Ok(FittedModelSet { fullres, lowres, cascade_fullres })
}

/// One-hot encode a labelmap into a K-channel image-kind volume.
pub fn one_hot_volume(labels: &[u8], dims: &[usize], spacing: &[f64], k: usize) -> Result<Volume> {
    let n: usize = dims.iter().product();
    let mut data = vec![0.0f32; k * n];
    for (v, &l) in labels.iter().enumerate() {
        let c = l as usize;
        if c >= k {
            return Err(Error::validation(format!(
                "label {l} exceeds the one-hot channel count {k}"
            )));
        }
        data[c * n + v] = 1.0;
    }
    Volume::new_image(k, dims.to_vec(), spacing.to_vec(), data)
}

/// Predict one case with one model; returns softmax on the fullres grid.
/// The two-stage model predicts the coarse grid first, upsamples the argmax
/// to the fine grid, and feeds it one-hot as extra input channels.
pub fn predict_case_with_model(
    model: ModelId,
    plan: &PipelinePlan,
    set: &FittedModelSet,
    fullres: &PreprocessedCase,
    lowres: Option<&PreprocessedCase>,
    num_classes: usize,
    tta: bool,
) -> Result<Volume> {
    let image = &fullres.image;
    let label_hint = fullres.label.as_ref();
    match model {
        ModelId::U2d => predict_slicewise(
            &set.fullres,
            image,
            label_hint,
            None,
            plan.slice_axis,
            &plan.topology_2d.patch_size,
            tta,
        ),
        ModelId::U3d => predict_volume(
            &set.fullres,
            image,
            label_hint,
            None,
            &plan.topology_3d.patch_size,
            &plan.augmentation_3d.mirror_axes,
            tta,
        ),
        ModelId::Cascade => {
            let cascade = plan.cascade.as_ref().ok_or_else(|| {
                Error::validation("plan has no two-stage section but CASCADE was requested")
            })?;
            let stage1_pred = set.lowres.as_ref().ok_or_else(|| {
                Error::validation("two-stage prediction requires the coarse-stage predictor")
            })?;
            let stage2_pred = set.cascade_fullres.as_ref().ok_or_else(|| {
                Error::validation("two-stage prediction requires the fine-stage predictor")
            })?;
            let low = lowres.ok_or_else(|| {
                Error::validation(
                    "two-stage prediction requires the coarse-resolution preprocessed case",
                )
            })?;
            let stage1 = predict_volume(
                stage1_pred,
                &low.image,
                low.label.as_ref(),
                None,
                &cascade.topology_lowres.patch_size,
                &plan.augmentation_3d.mirror_axes,
                tta,
            )?;
            let coarse_mask = argmax_labels(&stage1);
            let upsampled = resample_nearest_to_shape(
                coarse_mask.as_u8(),
                1,
                coarse_mask.shape(),
                image.shape(),
            );
            let prior =
                one_hot_volume(&upsampled, image.shape(), image.spacing(), num_classes)?;
            predict_volume(
                stage2_pred,
                image,
                label_hint,
                Some(&prior),
                &plan.topology_3d.patch_size,
                &plan.augmentation_3d.mirror_axes,
                tta,
            )
        }
    }
}

// ---------------------------------------------------------------------------
// Metrics / manifest structures
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseDice {
    pub case: String,
    pub fold: usize,
    /// Foreground class id (decimal string) to dice.
    pub dice: BTreeMap<String, f64>,
    pub mean_foreground: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateMetrics {
    pub name: String,
    pub per_case: Vec<CaseDice>,
    pub mean_per_class: BTreeMap<String, f64>,
    /// Mean of the per-class means; the model-selection score.
    pub mean_foreground_dice: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PostprocessReport {
    /// Classes eligible for largest-component filtering.
    pub classes: Vec<u8>,
    pub before_mean_foreground: f64,
    pub after_mean_foreground: f64,
    pub per_class_before: BTreeMap<String, f64>,
    pub per_class_after: BTreeMap<String, f64>,
    pub per_case_after: Vec<CaseDice>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub schema: String,
    pub dataset: String,
    pub num_classes: usize,
    pub seed: u64,
    pub predictor: String,
    pub tta: bool,
    pub folds: BTreeMap<String, usize>,
    pub candidates: Vec<CandidateMetrics>,
    pub selected: String,
    pub selected_mean_foreground_dice: f64,
    pub postprocessing: PostprocessReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub tool_version: String,
    pub dataset_dir: String,
    pub preprocessed_dir: String,
    pub plan_path: String,
    pub seed: u64,
    pub predictor: String,
    pub tta: bool,
    pub num_folds: usize,
    pub folds: BTreeMap<String, usize>,
    pub models: Vec<String>,
    pub candidates: Vec<String>,
    pub selected: String,
    /// Paths relative to the run directory, sorted; all exist on completion.
    pub artifacts: Vec<String>,
}

/// Directory-safe name for a candidate ("u3d", "ens_u2d_u3d", ...).
pub fn candidate_dir_name(c: &Candidate) -> String {
    match c {
        Candidate::Single(m) => m.to_string().to_lowercase(),
        Candidate::Pair(a, b) => format!(
            "ens_{}_{}",
            a.to_string().to_lowercase(),
            b.to_string().to_lowercase()
        ),
    }
}

fn write_json_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io_at(path, e))
}

// ---------------------------------------------------------------------------
// The CV protocol
// ---------------------------------------------------------------------------

struct LoadedCase {
    id: String,
    fold: usize,
    fullres: PreprocessedCase,
    lowres: Option<PreprocessedCase>,
}

fn load_cases(
    preprocessed_dir: &Path,
    ids: &[String],
    folds: &BTreeMap<String, usize>,
    need_lowres: bool,
) -> Result<Vec<LoadedCase>> {
    let fullres_dir = preprocessed_dir.join(Resolution::Fullres.dir_name());
    let lowres_dir = preprocessed_dir.join(Resolution::Lowres.dir_name());
    if need_lowres && !lowres_dir.is_dir() {
        return Err(Error::validation(format!(
            "the plan has a two-stage model but {} does not exist; \
             rerun preprocessing with this plan",
            lowres_dir.display()
        )));
    }
    ids.par_iter()
        .map(|id| {
            let fullres = PreprocessedCase::read_from(&fullres_dir, id)?;
            if fullres.label.is_none() {
                return Err(Error::validation(format!(
                    "case {id}: cross-validation requires preprocessed labels"
                )));
            }
            let lowres = if need_lowres {
                let case = PreprocessedCase::read_from(&lowres_dir, id)?;
                if case.label.is_none() {
                    return Err(Error::validation(format!(
                        "case {id}: the coarse-resolution tree is missing labels"
                    )));
                }
                Some(case)
            } else {
                None
            };
            Ok(LoadedCase { id: id.clone(), fold: folds[id], fullres, lowres })
        })
        .collect()
}

/// Run the full protocol. Returns the metrics; all artifacts are written
/// under `out_dir`.
pub fn run_cv(
    dataset_dir: &Path,
    preprocessed_dir: &Path,
    plan_path: &Path,
    out_dir: &Path,
    options: &CvOptions,
) -> Result<Metrics> {
    let total_start = Instant::now();
    let mut timings: Vec<(String, f64)> = Vec::new();

    let desc = DatasetDescriptor::read(dataset_dir)?;
    let plan = PipelinePlan::read_json(plan_path)?;
    let num_classes = desc.num_classes();
    let fg_classes = desc.foreground_classes();
    let mut ids: Vec<String> =
        desc.training.iter().map(DatasetDescriptor::case_id).collect();
    ids.sort();
    let folds = assign_folds(&ids, options.seed);
    let candidates = candidate_order(&plan.models);

    let load_start = Instant::now();
    let need_lowres = plan.models.contains(&ModelId::Cascade);
    let cases = load_cases(preprocessed_dir, &ids, &folds, need_lowres)?;
    timings.push(("load".to_string(), load_start.elapsed().as_secs_f64()));

    fs::create_dir_all(out_dir).map_err(|e| Error::io_at(out_dir, e))?;
    let pred_root = out_dir.join("predictions");
    let mut artifacts: Vec<String> = Vec::new();
    for cand in &candidates {
        let dir = pred_root.join(candidate_dir_name(cand));
        fs::create_dir_all(&dir).map_err(|e| Error::io_at(&dir, e))?;
    }

    // fold loop: fit on train, predict validation with every candidate
    let predict_start = Instant::now();
    let mut case_rows: Vec<(String, usize, Vec<(Candidate, BTreeMap<u8, f64>)>)> = Vec::new();
    for fold in 0..NUM_FOLDS {
        let train: Vec<&LoadedCase> = cases.iter().filter(|c| c.fold != fold).collect();
        let val: Vec<&LoadedCase> = cases.iter().filter(|c| c.fold == fold).collect();
        if val.is_empty() {
            continue;
        }
        if train.is_empty() {
            return Err(Error::validation(format!(
                "fold {fold} has no training cases; need more cases than folds"
            )));
        }
        let fullres_train: Vec<(&Volume, &Volume)> = train
            .iter()
            .map(|c| (&c.fullres.image, c.fullres.label.as_ref().expect("checked on load")))
            .collect();
        let lowres_train: Option<Vec<(&Volume, &Volume)>> = need_lowres.then(|| {
            train
                .iter()
                .map(|c| {
                    let low = c.lowres.as_ref().expect("loaded with the two-stage plan");
                    (&low.image, low.label.as_ref().expect("checked on load"))
                })
                .collect()
        });
        let set = fit_models(
            options.predictor,
            &plan,
            &fullres_train,
            lowres_train.as_deref(),
            num_classes,
        )?;

        let fold_rows: Vec<(String, usize, Vec<(Candidate, BTreeMap<u8, f64>)>)> = val
            .par_iter()
            .map(|case| {
                let gt = case.fullres.label.as_ref().expect("checked on load");
                let mut model_softmax: BTreeMap<String, Volume> = BTreeMap::new();
                for &model in &plan.models {
                    let sm = predict_case_with_model(
                        model,
                        &plan,
                        &set,
                        &case.fullres,
                        case.lowres.as_ref(),
                        num_classes,
                        options.tta,
                    )?;
                    model_softmax.insert(model.to_string(), sm);
                }
                let mut rows = Vec::with_capacity(candidates.len());
                for cand in &candidates {
                    let stored;
                    let sm: &Volume = match cand {
                        Candidate::Single(m) => &model_softmax[&m.to_string()],
                        Candidate::Pair(a, b) => {
                            stored = ensemble(&[
                                &model_softmax[&a.to_string()],
                                &model_softmax[&b.to_string()],
                            ])?;
                            &stored
                        }
                    };
                    let labels = argmax_labels(sm);
                    labels.write_mvox(
                        &pred_root
                            .join(candidate_dir_name(cand))
                            .join(format!("{}.mvox", case.id)),
                    )?;
                    let mut dice = BTreeMap::new();
                    for &class in &fg_classes {
                        dice.insert(class, dice_score(&labels, gt, class)?);
                    }
                    rows.push((*cand, dice));
                }
                Ok((case.id.clone(), case.fold, rows))
            })
            .collect::<Result<Vec<_>>>()?;
        case_rows.extend(fold_rows);
    }
    case_rows.sort_by(|a, b| a.0.cmp(&b.0));
    timings.push(("fit_and_predict".to_string(), predict_start.elapsed().as_secs_f64()));

    for cand in &candidates {
        for (id, _, _) in &case_rows {
            artifacts.push(format!("predictions/{}/{id}.mvox", candidate_dir_name(cand)));
        }
    }

    // aggregate per candidate, score, select
    let mut candidate_metrics = Vec::with_capacity(candidates.len());
    let mut scored: Vec<(Candidate, f64)> = Vec::with_capacity(candidates.len());
    for (ci, cand) in candidates.iter().enumerate() {
        let mut per_case = Vec::with_capacity(case_rows.len());
        let mut class_sums: BTreeMap<u8, f64> = BTreeMap::new();
        for (id, fold, rows) in &case_rows {
            let (row_cand, dice) = &rows[ci];
            debug_assert_eq!(row_cand, cand);
            let mean_fg =
                dice.values().sum::<f64>() / dice.len().max(1) as f64;
            for (&class, &d) in dice {
                *class_sums.entry(class).or_insert(0.0) += d;
            }
            per_case.push(CaseDice {
                case: id.clone(),
                fold: *fold,
                dice: dice.iter().map(|(c, d)| (c.to_string(), *d)).collect(),
                mean_foreground: mean_fg,
            });
        }
        let n_cases = case_rows.len().max(1) as f64;
        let mean_per_class: BTreeMap<String, f64> =
            class_sums.iter().map(|(c, s)| (c.to_string(), s / n_cases)).collect();
        let score = if mean_per_class.is_empty() {
            0.0
        } else {
            mean_per_class.values().sum::<f64>() / mean_per_class.len() as f64
        };
        candidate_metrics.push(CandidateMetrics {
            name: cand.to_string(),
            per_case,
            mean_per_class,
            mean_foreground_dice: score,
        });
        scored.push((*cand, score));
    }
    let selected = select_best(&scored)?;
    let selected_metrics = &candidate_metrics
        [candidates.iter().position(|c| c == &selected).expect("selected from candidates")];
    let selected_score = selected_metrics.mean_foreground_dice;

    // postprocess the winner's predictions
    let post_start = Instant::now();
    let post_dir = pred_root.join(format!("{}_post", candidate_dir_name(&selected)));
    fs::create_dir_all(&post_dir).map_err(|e| Error::io_at(&post_dir, e))?;
    let case_by_id: BTreeMap<&str, &LoadedCase> =
        cases.iter().map(|c| (c.id.as_str(), c)).collect();
    let post_rows: Vec<CaseDice> = case_rows
        .par_iter()
        .map(|(id, fold, _)| {
            let case = case_by_id[id.as_str()];
            let gt = case.fullres.label.as_ref().expect("checked on load");
            let pred_path = pred_root
                .join(candidate_dir_name(&selected))
                .join(format!("{id}.mvox"));
            let pred = Volume::read_mvox(&pred_path)?;
            let post = apply_postprocessing(&pred, &plan.postprocess_classes)?;
            post.write_mvox(&post_dir.join(format!("{id}.mvox")))?;
            let mut dice = BTreeMap::new();
            for &class in &fg_classes {
                dice.insert(class.to_string(), dice_score(&post, gt, class)?);
            }
            let mean_fg = dice.values().sum::<f64>() / dice.len().max(1) as f64;
            Ok(CaseDice { case: id.clone(), fold: *fold, dice, mean_foreground: mean_fg })
        })
        .collect::<Result<Vec<_>>>()?;
    for (id, _, _) in &case_rows {
        artifacts.push(format!(
            "predictions/{}_post/{id}.mvox",
            candidate_dir_name(&selected)
        ));
    }
    let mut post_class_sums: BTreeMap<String, f64> = BTreeMap::new();
    for row in &post_rows {
        for (c, d) in &row.dice {
            *post_class_sums.entry(c.clone()).or_insert(0.0) += d;
        }
    }
    let n_cases = post_rows.len().max(1) as f64;
    let per_class_after: BTreeMap<String, f64> =
        post_class_sums.iter().map(|(c, s)| (c.clone(), s / n_cases)).collect();
    let after_score = if per_class_after.is_empty() {
        0.0
    } else {
        per_class_after.values().sum::<f64>() / per_class_after.len() as f64
    };
    let postprocessing = PostprocessReport {
        classes: plan.postprocess_classes.clone(),
        before_mean_foreground: selected_score,
        after_mean_foreground: after_score,
        per_class_before: selected_metrics.mean_per_class.clone(),
        per_class_after,
        per_case_after: post_rows,
    };
    timings.push(("postprocess".to_string(), post_start.elapsed().as_secs_f64()));

    // simulated training epochs: replay each model's loss through the
    // learning-rate schedule on fold-0 batches
    if options.simulate_scheduler {
        let sim_start = Instant::now();
        let sched_dir = out_dir.join("scheduler");
        fs::create_dir_all(&sched_dir).map_err(|e| Error::io_at(&sched_dir, e))?;
        let train: Vec<&LoadedCase> = cases.iter().filter(|c| c.fold != 0).collect();
        let val: Vec<&LoadedCase> = cases.iter().filter(|c| c.fold == 0).collect();
        if !train.is_empty() && !val.is_empty() {
            let fullres_train: Vec<(&Volume, &Volume)> = train
                .iter()
                .map(|c| (&c.fullres.image, c.fullres.label.as_ref().expect("checked")))
                .collect();
            let lowres_train: Option<Vec<(&Volume, &Volume)>> = need_lowres.then(|| {
                train
                    .iter()
                    .map(|c| {
                        let low = c.lowres.as_ref().expect("loaded");
                        (&low.image, low.label.as_ref().expect("checked"))
                    })
                    .collect()
            });
            let set = fit_models(
                options.predictor,
                &plan,
                &fullres_train,
                lowres_train.as_deref(),
                num_classes,
            )?;
            for (midx, &model) in plan.models.iter().enumerate() {
                let name = model.to_string().to_lowercase();
                let path = sched_dir.join(format!("{name}.jsonl"));
                let logs = simulate_training(
                    &plan,
                    model,
                    &set,
                    &train,
                    &val,
                    num_classes,
                    options.seed.wrapping_add(1000 + midx as u64),
                )?;
                let mut text = String::new();
                for log in &logs {
                    text.push_str(&log.to_json_line());
                    text.push('\n');
                }
                write_json_file(&path, &text)?;
                artifacts.push(format!("scheduler/{name}.jsonl"));
            }
        }
        timings.push(("scheduler_sim".to_string(), sim_start.elapsed().as_secs_f64()));
    }

    // metrics, manifest, timings
    let metrics = Metrics {
        schema: METRICS_SCHEMA.to_string(),
        dataset: desc.name.clone(),
        num_classes,
        seed: options.seed,
        predictor: options.predictor.to_string(),
        tta: options.tta,
        folds: folds.clone(),
        candidates: candidate_metrics,
        selected: selected.to_string(),
        selected_mean_foreground_dice: selected_score,
        postprocessing,
    };
    let metrics_text = serde_json::to_string_pretty(&metrics)
        .map_err(|e| Error::validation(format!("metrics serialization: {e}")))?
        + "\n";
    write_json_file(&out_dir.join("metrics.json"), &metrics_text)?;
    artifacts.push("metrics.json".to_string());
    artifacts.push("timings.json".to_string());
    artifacts.sort();

    let manifest = RunManifest {
        schema: MANIFEST_SCHEMA.to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        dataset_dir: dataset_dir.display().to_string(),
        preprocessed_dir: preprocessed_dir.display().to_string(),
        plan_path: plan_path.display().to_string(),
        seed: options.seed,
        predictor: options.predictor.to_string(),
        tta: options.tta,
        num_folds: NUM_FOLDS,
        folds,
        models: plan.models.iter().map(|m| m.to_string()).collect(),
        candidates: candidates.iter().map(|c| c.to_string()).collect(),
        selected: selected.to_string(),
        artifacts,
    };
    let manifest_text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::validation(format!("manifest serialization: {e}")))?
        + "\n";
    write_json_file(&out_dir.join("manifest.json"), &manifest_text)?;

    timings.push(("total".to_string(), total_start.elapsed().as_secs_f64()));
    let mut timing_map = serde_json::Map::new();
    for (stage, secs) in &timings {
        timing_map.insert(stage.clone(), serde_json::json!(secs));
    }
    let timings_text = serde_json::to_string_pretty(&serde_json::Value::Object(timing_map))
        .map_err(|e| Error::validation(format!("timings serialization: {e}")))?
        + "\n";
    write_json_file(&out_dir.join("timings.json"), &timings_text)?;

    Ok(metrics)
}

// ---------------------------------------------------------------------------
// Tree evaluation
// ---------------------------------------------------------------------------

pub const EVAL_SCHEMA: &str = "segplan-eval-1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalCase {
    pub case: String,
    pub dice: BTreeMap<String, f64>,
    pub mean_foreground: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub num_cases: usize,
    /// Foreground classes present in any reference labelmap.
    pub classes: Vec<u8>,
    pub per_case: Vec<EvalCase>,
    pub mean_per_class: BTreeMap<String, f64>,
    pub mean_foreground_dice: f64,
}

fn labelmap_or_err(path: &Path) -> Result<Volume> {
    let vol = Volume::read_mvox(path)?;
    if vol.kind() != crate::volume::VolumeKind::Labelmap {
        return Err(Error::validation(format!(
            "{} is not a labelmap volume",
            path.display()
        )));
    }
    Ok(vol)
}

/// Dice between same-named labelmaps in a prediction tree and a reference
/// tree. Classes are everything foreground in the reference set.
pub fn evaluate_trees(pred_dir: &Path, gt_dir: &Path) -> Result<EvalReport> {
    let mut names: Vec<String> = Vec::new();
    for entry in fs::read_dir(gt_dir).map_err(|e| Error::io_at(gt_dir, e))? {
        let entry = entry.map_err(|e| Error::io_at(gt_dir, e))?;
        let path = entry.path();
        if path.extension().is_some_and(|e| e == "mvox") {
            names.push(
                path.file_name().expect("file entries have names").to_string_lossy().into_owned(),
            );
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(Error::validation(format!(
            "no reference labelmaps (*.mvox) in {}",
            gt_dir.display()
        )));
    }
    let pairs: Vec<(String, Volume, Volume)> = names
        .par_iter()
        .map(|name| {
            let gt = labelmap_or_err(&gt_dir.join(name))?;
            let pred_path = pred_dir.join(name);
            if !pred_path.is_file() {
                return Err(Error::validation(format!(
                    "missing prediction for {name}: {} does not exist",
                    pred_path.display()
                )));
            }
            let pred = labelmap_or_err(&pred_path)?;
            let stem = name.trim_end_matches(".mvox").to_string();
            Ok((stem, pred, gt))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut classes: std::collections::BTreeSet<u8> = std::collections::BTreeSet::new();
    for (_, _, gt) in &pairs {
        for &l in gt.as_u8() {
            if l > 0 {
                classes.insert(l);
            }
        }
    }
    let classes: Vec<u8> = classes.into_iter().collect();
    let mut per_case = Vec::with_capacity(pairs.len());
    let mut class_sums: BTreeMap<String, f64> = BTreeMap::new();
    for (case, pred, gt) in &pairs {
        let mut dice = BTreeMap::new();
        for &class in &classes {
            let d = dice_score(pred, gt, class)?;
            *class_sums.entry(class.to_string()).or_insert(0.0) += d;
            dice.insert(class.to_string(), d);
        }
        let mean_fg = if dice.is_empty() {
            0.0
        } else {
            dice.values().sum::<f64>() / dice.len() as f64
        };
        per_case.push(EvalCase { case: case.clone(), dice, mean_foreground: mean_fg });
    }
    let n = pairs.len() as f64;
    let mean_per_class: BTreeMap<String, f64> =
        class_sums.iter().map(|(c, s)| (c.clone(), s / n)).collect();
    let mean_foreground_dice = if mean_per_class.is_empty() {
        0.0
    } else {
        mean_per_class.values().sum::<f64>() / mean_per_class.len() as f64
    };
    Ok(EvalReport {
        schema: EVAL_SCHEMA.to_string(),
        num_cases: pairs.len(),
        classes,
        per_case,
        mean_per_class,
        mean_foreground_dice,
    })
}

// ---------------------------------------------------------------------------
// Simulated training epochs
// ---------------------------------------------------------------------------

fn identity_augmentation() -> AugmentationConfig {
    AugmentationConfig {
        rotation_deg: 0.0,
        scale_range: (1.0, 1.0),
        elastic_prob: 0.0,
        elastic_max_disp_mm: 0.0,
        elastic_sigma_mm: 1.0,
        gamma_range: (1.0, 1.0),
        mirror_axes: vec![],
    }
}

/// In-plane spatial augmentation for strongly anisotropic 3D patches:
/// planar rotation/scale/elastic parameters with volumetric mirroring.
fn in_plane_config(plan: &PipelinePlan) -> AugmentationConfig {
    AugmentationConfig {
        mirror_axes: plan.augmentation_3d.mirror_axes.clone(),
        ..plan.augmentation_2d.clone()
    }
}

fn batch_loss(
    predictor: &FittedPredictor,
    samples: &[TrainingSample],
    num_classes: usize,
    with_prior: bool,
    batch_dice: bool,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    use crate::inference::{PatchInput, Predictor};
    let batch = samples.len();
    let n: usize = samples[0].dims.iter().product();
    let mut logits = vec![0.0f64; batch * num_classes * n];
    let mut targets = vec![0u8; batch * n];
    for (b, sample) in samples.iter().enumerate() {
        let mut channels = sample.channels;
        let mut data = sample.image.clone();
        if with_prior {
            // stage-2 input: one-hot of a corrupted reference mask
            let corrupted = corrupt_labels(
                &sample.label,
                &sample.dims,
                num_classes,
                MORPH_PROB,
                COMPONENT_DROP_PROB,
                rng,
            );
            let mut onehot = vec![0.0f32; num_classes * n];
            for (v, &l) in corrupted.iter().enumerate() {
                onehot[(l as usize) * n + v] = 1.0;
            }
            data.extend_from_slice(&onehot);
            channels += num_classes;
        }
        if predictor.needs_label_channel() {
            data.extend(sample.label.iter().map(|&l| l as f32));
            channels += 1;
        }
        let patch = PatchInput {
            data,
            channels,
            dims: sample.dims.clone(),
            offset: vec![0; sample.dims.len()],
        };
        let probs = predictor.predict(&patch)?;
        if probs.len() != num_classes * n {
            return Err(Error::validation("predictor output has the wrong size"));
        }
        for (i, &p) in probs.iter().enumerate() {
            logits[b * num_classes * n + i] = f64::from(p.max(1e-12)).ln();
        }
        targets[b * n..(b + 1) * n].copy_from_slice(&sample.label);
    }
    let input = LossInput {
        logits: &logits,
        targets: &targets,
        batch,
        num_classes,
        spatial_len: n,
    };
    Ok(total_loss_and_grad(&input, batch_dice)?.total)
}

/// Draw one augmented training batch and one untouched validation batch for
/// the model, compute the (constant) toy-predictor loss on each, and replay
/// it through the learning-rate schedule until it stops.
fn simulate_training(
    plan: &PipelinePlan,
    model: ModelId,
    set: &FittedModelSet,
    train: &[&LoadedCase],
    val: &[&LoadedCase],
    num_classes: usize,
    seed: u64,
) -> Result<Vec<EpochLog>> {
    let train_cases: Vec<TrainingCase> = train
        .iter()
        .map(|c| TrainingCase {
            image: &c.fullres.image,
            label: c.fullres.label.as_ref().expect("checked on load"),
        })
        .collect();
    let val_cases: Vec<TrainingCase> = val
        .iter()
        .map(|c| TrainingCase {
            image: &c.fullres.image,
            label: c.fullres.label.as_ref().expect("checked on load"),
        })
        .collect();

    let topo = plan.topology(model);
    let (patch, cfg, opts) = match model {
        ModelId::U2d => (
            plan.topology_2d.patch_size.clone(),
            plan.augmentation_2d.clone(),
            SampleOptions { slice_axis: plan.slice_axis, in_plane_only: false },
        ),
        _ => {
            let cfg = if plan.use_2d_augmentation_for_3d {
                in_plane_config(plan)
            } else {
                plan.augmentation_3d.clone()
            };
            (
                topo.patch_size.clone(),
                cfg,
                SampleOptions {
                    slice_axis: plan.slice_axis,
                    in_plane_only: plan.use_2d_augmentation_for_3d,
                },
            )
        }
    };
    let batch = match model {
        ModelId::U2d => plan.topology_2d.batch_size,
        _ => topo.batch_size,
    };

    let mut train_rng = ChaCha8Rng::seed_from_u64(seed);
    let train_batch = sample_batch(
        &train_cases,
        &patch,
        batch,
        num_classes,
        &cfg,
        &opts,
        &mut train_rng,
    )?;
    let mut val_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5a5a));
    let val_batch = sample_batch(
        &val_cases,
        &patch,
        batch,
        num_classes,
        &identity_augmentation(),
        &opts,
        &mut val_rng,
    )?;

    let (predictor, with_prior) = match model {
        ModelId::Cascade => (
            set.cascade_fullres.as_ref().ok_or_else(|| {
                Error::validation("two-stage simulation requires the fine-stage predictor")
            })?,
            true,
        ),
        _ => (&set.fullres, false),
    };
    let batch_dice = model == ModelId::U3d && plan.batch_dice_3d_fullvolume;
    let mut corrupt_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0xc0));
    let train_loss = batch_loss(
        predictor,
        &train_batch,
        num_classes,
        with_prior,
        batch_dice,
        &mut corrupt_rng,
    )?;
    let val_loss = batch_loss(
        predictor,
        &val_batch,
        num_classes,
        with_prior,
        batch_dice,
        &mut corrupt_rng,
    )?;

    let mut state = SchedulerState::new(SchedulerConfig::default());
    let mut logs = Vec::new();
    for _ in 0..SIM_EPOCH_CAP {
        let log = state.step(train_loss, val_loss)?;
        let stop = log.action == SchedulerAction::Stop;
        logs.push(log);
        if stop {
            break;
        }
    }
    Ok(logs)
}
