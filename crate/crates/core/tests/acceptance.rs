//! Acceptance gate: one test per numbered requirement on the project's
//! acceptance checklist, in order. Every check verifies the library against
//! an independent in-test oracle (brute force, flood fill, finite
//! differences, analytic evaluation), a recorded reference value, or a
//! byte-stable golden file; tolerances are stated inline. The libtest
//! summary therefore prints one pass/fail line per requirement.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use segplan::cv::{run_cv, CvOptions};
use segplan::descriptor::DatasetDescriptor;
use segplan::fingerprint::{fingerprint_dataset, DatasetFingerprint};
use segplan::inference::{
    argmax_labels, candidate_order, dice_score, mean_foreground_dice, predict_slicewise,
    predict_volume, prediction_count_at, select_best, tile_positions, Candidate, PatchInput,
    Predictor,
};
use segplan::losskit::{
    dice_loss, total_loss_and_grad, LossInput, SchedulerAction, SchedulerConfig, SchedulerState,
    DICE_EPS,
};
use segplan::planner::{make_plan, ModelId, PipelinePlan};
use segplan::postprocess::apply_postprocessing;
use segplan::predictors::{OraclePredictor, PredictorKind};
use segplan::preprocess::preprocess_dataset;
use segplan::report::render_topology_table;
use segplan::synth::{generate_case, generate_dataset, SynthSpec};
use segplan::volume::Volume;

/// The bundled reference fingerprints, in report order.
const FIXTURE_DATASETS: [&str; 7] = [
    "brain_tumour",
    "heart",
    "liver",
    "hippocampus",
    "prostate",
    "lung",
    "pancreas",
];

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn fixture_fingerprint(name: &str) -> DatasetFingerprint {
    let path = fixture_dir().join("fingerprints").join(format!("{name}.json"));
    DatasetFingerprint::read_json(&path).expect("fingerprint fixture parses")
}

fn fixture_plans() -> Vec<PipelinePlan> {
    FIXTURE_DATASETS
        .iter()
        .map(|name| make_plan(&fixture_fingerprint(name)).expect("fixture plans"))
        .collect()
}

fn plan_by_name<'a>(plans: &'a [PipelinePlan], name: &str) -> &'a PipelinePlan {
    plans
        .iter()
        .find(|p| p.dataset_name.as_deref() == Some(name))
        .unwrap_or_else(|| panic!("no plan for dataset {name}"))
}

// ---------------------------------------------------------------------------
// 1. In-plane (2D) topologies
// ---------------------------------------------------------------------------

#[test]
fn a01_in_plane_topologies_match_the_reference_rows() {
    let fps: Vec<DatasetFingerprint> =
        FIXTURE_DATASETS.iter().map(|n| fixture_fingerprint(n)).collect();

    let started = Instant::now();
    let plans: Vec<PipelinePlan> =
        fps.iter().map(|fp| make_plan(fp).expect("plans")).collect();
    let elapsed = started.elapsed();

    let rows: [(&str, [usize; 2], [usize; 2], usize); 6] = [
        ("BrainTumour", [192, 160], [5, 5], 89),
        ("Heart", [320, 256], [6, 6], 33),
        ("Liver", [512, 512], [6, 6], 10),
        ("Prostate", [320, 320], [6, 6], 26),
        ("Lung", [512, 512], [6, 6], 10),
        ("Pancreas", [512, 512], [6, 6], 10),
    ];
    for (name, patch, pools, batch) in rows {
        let t = &plan_by_name(&plans, name).topology_2d;
        assert_eq!(t.patch_size, patch, "{name}: in-plane patch size");
        assert_eq!(t.pools_per_axis, pools, "{name}: in-plane pools per axis");
        assert_eq!(t.batch_size, batch, "{name}: in-plane batch size");
    }

    // Hippocampus: patch and pools exact; batch within +/-1 of 366 (the
    // dataset-fraction cap rounds differently depending on convention).
    let hip = &plan_by_name(&plans, "Hippocampus").topology_2d;
    assert_eq!(hip.patch_size, vec![56, 40], "Hippocampus: in-plane patch size");
    assert_eq!(hip.pools_per_axis, vec![3, 3], "Hippocampus: in-plane pools");
    assert!(
        (hip.batch_size as i64 - 366).abs() <= 1,
        "Hippocampus: batch {} not within 1 of 366",
        hip.batch_size
    );

    // Planning is pure arithmetic on the fingerprint: milliseconds, not
    // seconds, for all seven datasets together.
    assert!(
        elapsed < Duration::from_millis(100),
        "planning all seven datasets took {elapsed:?}; required: milliseconds"
    );
}

// ---------------------------------------------------------------------------
// 2. Volumetric (3D) topologies, including the two pinned deviations
// ---------------------------------------------------------------------------

#[test]
fn a02_volumetric_topologies_match_reference_rows_or_pinned_deviations() {
    let plans = fixture_plans();

    let exact: [(&str, [usize; 3], [usize; 3], usize); 5] = [
        ("BrainTumour", [128, 128, 128], [5, 5, 5], 2),
        ("Liver", [128, 128, 128], [5, 5, 5], 2),
        ("Hippocampus", [40, 56, 40], [3, 3, 3], 9),
        ("Heart", [80, 192, 128], [4, 5, 5], 2),
        ("Pancreas", [96, 160, 128], [4, 5, 5], 2),
    ];
    // Prostate and Lung are pinned golden values that differ from the
    // reference tabulation; the deviation fixture must carry a written note
    // for each, and the note's pinned values must equal the planner output.
    let pinned: [(&str, [usize; 3], [usize; 3], usize); 2] = [
        ("Prostate", [20, 320, 320], [2, 5, 5], 2),
        ("Lung", [80, 160, 160], [4, 5, 5], 2),
    ];

    for (name, patch, pools, batch) in exact.iter().chain(pinned.iter()) {
        let t = &plan_by_name(&plans, name).topology_3d;
        assert_eq!(t.patch_size, patch.to_vec(), "{name}: volumetric patch size");
        assert_eq!(t.pools_per_axis, pools.to_vec(), "{name}: volumetric pools");
        assert_eq!(t.batch_size, *batch, "{name}: volumetric batch size");
    }

    let text = fs::read_to_string(fixture_dir().join("planner_deviations.json"))
        .expect("deviation fixture present");
    let notes: serde_json::Value = serde_json::from_str(&text).expect("deviation fixture parses");
    let deviations = notes["deviations"].as_array().expect("deviations array");
    for (name, patch, pools, batch) in &pinned {
        let entry = deviations
            .iter()
            .find(|d| d["dataset"] == *name && d["model"] == "U3D")
            .unwrap_or_else(|| panic!("no deviation note for {name} U3D"));
        let note = entry["note"].as_str().expect("note is a string");
        assert!(!note.trim().is_empty(), "{name}: deviation note must explain itself");
        let noted_patch: Vec<usize> = entry["produced"]["patch"]
            .as_array()
            .expect("produced.patch")
            .iter()
            .map(|v| v.as_u64().unwrap() as usize)
            .collect();
        let noted_pools: Vec<usize> = entry["produced"]["pools"]
            .as_array()
            .expect("produced.pools")
            .iter()
            .map(|v| v.as_u64().unwrap() as usize)
            .collect();
        assert_eq!(noted_patch, patch.to_vec(), "{name}: note pins the produced patch");
        assert_eq!(noted_pools, pools.to_vec(), "{name}: note pins the produced pools");
        assert_eq!(
            entry["produced"]["batch"].as_u64().unwrap() as usize,
            *batch,
            "{name}: note pins the produced batch"
        );
    }
}

// ---------------------------------------------------------------------------
// 3. Two-stage (cascade) trigger set
// ---------------------------------------------------------------------------

#[test]
fn a03_two_stage_trigger_matches_the_reference_set() {
    let plans = fixture_plans();
    let expected: [(&str, bool); 7] = [
        ("BrainTumour", false),
        ("Heart", true),
        ("Liver", true),
        ("Hippocampus", false),
        ("Prostate", false),
        ("Lung", true),
        ("Pancreas", true),
    ];
    for (name, required) in expected {
        let plan = plan_by_name(&plans, name);
        assert_eq!(
            plan.models.contains(&ModelId::Cascade),
            required,
            "{name}: two-stage model in the ladder"
        );
        assert_eq!(plan.cascade.is_some(), required, "{name}: coarse-stage plan present");
        assert_eq!(
            plan.models.len(),
            if required { 3 } else { 2 },
            "{name}: model ladder size"
        );
    }
}

// ---------------------------------------------------------------------------
// 4. Coarse-stage median shapes
// ---------------------------------------------------------------------------

#[test]
fn a04_coarse_stage_median_shapes_match_the_reference_rows() {
    let plans = fixture_plans();
    let rows: [(&str, [usize; 3]); 4] = [
        ("Heart", [58, 160, 116]),
        ("Liver", [121, 128, 128]),
        ("Lung", [126, 256, 256]),
        ("Pancreas", [96, 256, 256]),
    ];
    for (name, shape) in rows {
        let cascade = plan_by_name(&plans, name)
            .cascade
            .as_ref()
            .unwrap_or_else(|| panic!("{name} has a coarse stage"));
        assert_eq!(cascade.lowres_median_shape, shape.to_vec(), "{name}: coarse median shape");
    }
}

// ---------------------------------------------------------------------------
// 5. Loss kernels: gradients vs finite differences, dice vs brute force
// ---------------------------------------------------------------------------

/// Direct transcription of the soft-dice definition, materializing the
/// one-hot target and the region masses separately — an independent oracle
/// for the production kernel.
fn brute_force_dice(
    probs: &[f64],
    targets: &[u8],
    bsz: usize,
    k: usize,
    n: usize,
    pooled: bool,
) -> f64 {
    let mut onehot = vec![0.0f64; bsz * k * n];
    for b in 0..bsz {
        for x in 0..n {
            onehot[(b * k + targets[b * n + x] as usize) * n + x] = 1.0;
        }
    }
    let groups: Vec<Vec<usize>> = if pooled {
        vec![(0..bsz).collect()]
    } else {
        (0..bsz).map(|b| vec![b]).collect()
    };
    let mut acc = 0.0;
    let mut terms = 0usize;
    for g in &groups {
        for class in 0..k {
            let mut inter = 0.0;
            let mut umass = 0.0;
            let mut vmass = 0.0;
            for &b in g {
                for x in 0..n {
                    let u = probs[(b * k + class) * n + x];
                    let v = onehot[(b * k + class) * n + x];
                    inter += u * v;
                    umass += u;
                    vmass += v;
                }
            }
            acc += (2.0 * inter + DICE_EPS) / (umass + vmass + DICE_EPS);
            terms += 1;
        }
    }
    -(acc / terms as f64)
}

#[test]
fn a05_loss_gradients_match_finite_differences_and_dice_matches_brute_force() {
    // (a) analytic gradient vs central finite differences over 100 random
    // 64-bit tensors; max relative error < 1e-5. Components below 1e-4 in
    // both views are measured against that scale — a bare ratio is
    // ill-conditioned at gradient zero crossings.
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE5);
    let mut max_rel = 0.0f64;
    for t in 0..100 {
        let bsz = rng.gen_range(1..=3usize);
        let k = rng.gen_range(2..=4usize);
        let n = rng.gen_range(2..=6usize);
        let logits: Vec<f64> = (0..bsz * k * n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let targets: Vec<u8> = (0..bsz * n).map(|_| rng.gen_range(0..k as u8)).collect();
        let batch_dice = t % 2 == 0;
        let input = LossInput {
            logits: &logits,
            targets: &targets,
            batch: bsz,
            num_classes: k,
            spatial_len: n,
        };
        let grad = total_loss_and_grad(&input, batch_dice).expect("valid input").grad;
        let h = 1e-4;
        for i in 0..logits.len() {
            let mut plus = logits.clone();
            plus[i] += h;
            let mut minus = logits.clone();
            minus[i] -= h;
            let lp = total_loss_and_grad(&LossInput { logits: &plus, ..input }, batch_dice)
                .unwrap()
                .total;
            let lm = total_loss_and_grad(&LossInput { logits: &minus, ..input }, batch_dice)
                .unwrap()
                .total;
            let fd = (lp - lm) / (2.0 * h);
            let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-4);
            max_rel = max_rel.max(rel);
        }
    }
    assert!(max_rel < 1e-5, "max relative gradient error {max_rel:e} (required < 1e-5)");

    // (b) a perfect one-hot prediction scores dice -1.0 within 1e-9, in both
    // per-sample and pooled modes.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let bsz = rng.gen_range(1..=3usize);
        let k = rng.gen_range(2..=4usize);
        let n = rng.gen_range(1..=12usize);
        let targets: Vec<u8> = (0..bsz * n).map(|_| rng.gen_range(0..k as u8)).collect();
        let mut probs = vec![0.0f64; bsz * k * n];
        for b in 0..bsz {
            for x in 0..n {
                probs[(b * k + targets[b * n + x] as usize) * n + x] = 1.0;
            }
        }
        for pooled in [false, true] {
            let d = dice_loss(&probs, &targets, bsz, k, n, pooled);
            assert!(
                (d + 1.0).abs() <= 1e-9,
                "perfect prediction scored {d} (pooled: {pooled}); required -1.0 +/- 1e-9"
            );
        }
    }

    // (c) pooled and per-sample dice both match the brute-force oracle
    // within 1e-10 on random probability fields.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let bsz = rng.gen_range(1..=3usize);
        let k = rng.gen_range(2..=4usize);
        let n = rng.gen_range(1..=9usize);
        let targets: Vec<u8> = (0..bsz * n).map(|_| rng.gen_range(0..k as u8)).collect();
        let mut probs = vec![0.0f64; bsz * k * n];
        for b in 0..bsz {
            for x in 0..n {
                let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
                let sum: f64 = raw.iter().sum();
                for (c, r) in raw.iter().enumerate() {
                    probs[(b * k + c) * n + x] = r / sum;
                }
            }
        }
        for pooled in [false, true] {
            let got = dice_loss(&probs, &targets, bsz, k, n, pooled);
            let want = brute_force_dice(&probs, &targets, bsz, k, n, pooled);
            assert!(
                (got - want).abs() < 1e-10,
                "dice {got} vs oracle {want} (pooled: {pooled})"
            );
        }
    }
}

// ---------------------------------------------------------------------------
// 6. Learning-rate schedule
// ---------------------------------------------------------------------------

#[test]
fn a06_scheduler_reduces_on_plateau_and_stops_after_validation_patience() {
    // Constant losses: regenerate the full trace and compare byte-for-byte
    // against the golden file.
    let mut state = SchedulerState::new(SchedulerConfig::default());
    let mut lines = String::new();
    let mut logs = Vec::new();
    for _ in 0..10_000 {
        let log = state.step(1.0, 1.0).expect("finite losses");
        lines.push_str(&log.to_json_line());
        lines.push('\n');
        let stop = log.action == SchedulerAction::Stop;
        logs.push(log);
        if stop {
            break;
        }
    }
    let golden = fs::read_to_string(fixture_dir().join("scheduler_constant_trace.jsonl"))
        .expect("scheduler golden present");
    assert_eq!(lines, golden, "constant-loss trace is byte-stable");

    // Rate reductions fire exactly at epochs 30, 60, 90, 120, 150 (the
    // epoch-180 reduction is folded into the stop line below).
    let reduce_epochs: Vec<usize> = logs
        .iter()
        .filter(|l| l.action == SchedulerAction::Reduce)
        .map(|l| l.epoch)
        .collect();
    assert_eq!(reduce_epochs, vec![30, 60, 90, 120, 150], "reductions at every 30th epoch");

    // Every logged rate equals the initial rate divided by the factor once
    // per 30-epoch plateau — bit-for-bit, same division chain.
    let mut expect_lr = 3e-4;
    for l in &logs {
        if l.epoch > 0 && l.epoch % 30 == 0 {
            expect_lr /= 5.0;
        }
        assert!(l.lr == expect_lr, "epoch {}: lr {} expected {expect_lr}", l.epoch, l.lr);
    }

    // The stop is unique, last, and fires only once the rate has been below
    // 1e-6 for the full 60-epoch validation patience.
    assert_eq!(logs.iter().filter(|l| l.action == SchedulerAction::Stop).count(), 1);
    let stop = logs.last().expect("nonempty trace");
    assert_eq!(stop.epoch, 180, "stop epoch");
    assert!(stop.lr < 1e-6, "rate below threshold at stop");
    assert_eq!(state.lr_low_since, Some(120), "rate first fell below 1e-6 at epoch 120");
    assert_eq!(stop.epoch, 120 + 60, "stop = rate-low epoch + validation patience");
    for l in logs.iter().filter(|l| l.epoch >= 120 && l.epoch < 180) {
        assert!(
            l.lr < 1e-6 && l.action != SchedulerAction::Stop,
            "epoch {}: low rate alone must not stop training",
            l.epoch
        );
    }

    // An improving validation loss defers the stop beyond the rate
    // threshold: training may stop only after the later of the two anchors.
    let mut state = SchedulerState::new(SchedulerConfig::default());
    let mut stop_epoch = None;
    for e in 0..1000usize {
        let val = 10.0 - 0.01 * e.min(200) as f64;
        let log = state.step(1.0, val).expect("finite losses");
        if log.action == SchedulerAction::Stop {
            stop_epoch = Some(log.epoch);
            break;
        }
    }
    let stop_epoch = stop_epoch.expect("training eventually stops");
    assert_eq!(state.lr_low_since, Some(120), "train plateau timing unchanged");
    assert!(
        state.best_val_epoch > 200,
        "smoothed validation kept improving past the raw freeze point"
    );
    assert_eq!(
        stop_epoch,
        state.best_val_epoch + 60,
        "stop waits out the validation patience, not just the rate threshold"
    );
    assert!(stop_epoch > 180, "later than the constant-validation stop");
}

// ---------------------------------------------------------------------------
// 7. Tiled inference with mirror averaging
// ---------------------------------------------------------------------------

/// Emits fixed per-class probabilities and counts its invocations.
struct ConstantProbs {
    probs: Vec<f32>,
    calls: AtomicUsize,
}

impl Predictor for ConstantProbs {
    fn num_classes(&self) -> usize {
        self.probs.len()
    }
    fn predict(&self, patch: &PatchInput) -> segplan::Result<Vec<f32>> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let n: usize = patch.dims.iter().product();
        let mut out = Vec::with_capacity(self.probs.len() * n);
        for &p in &self.probs {
            out.extend(std::iter::repeat(p).take(n));
        }
        Ok(out)
    }
}

#[test]
fn a07_tiled_inference_is_exact_for_constants_and_counts_mirror_predictions() {
    // (a) Aggregating a constant prediction returns the constant exactly
    // (bit-for-bit), including when an axis must be padded to the patch and
    // when slices are predicted one by one. Dyadic constants make every
    // weighted sum an exact scaling of the weight sum.
    let volumetric: [(Vec<usize>, Vec<f32>); 2] = [
        (vec![37, 29, 23], vec![0.5, 0.25, 0.25]),
        (vec![12, 29, 23], vec![0.5, 0.5]), // axis 0 shorter than the patch
    ];
    for (dims, probs) in volumetric {
        let n: usize = dims.iter().product();
        let img = Volume::new_image(1, dims.clone(), vec![1.0; 3], vec![0.0; n])
            .expect("image volume");
        let pred = ConstantProbs { probs: probs.clone(), calls: AtomicUsize::new(0) };
        let out = predict_volume(&pred, &img, None, None, &[16, 16, 16], &[0, 1, 2], true)
            .expect("tiled prediction");
        for (c, &want) in probs.iter().enumerate() {
            let chan = &out.as_f32()[c * n..(c + 1) * n];
            assert!(
                chan.iter().all(|&v| v == want),
                "dims {dims:?}: class {c} must equal {want} exactly everywhere"
            );
        }
    }
    let dims = vec![3usize, 40, 40];
    let n: usize = dims.iter().product();
    let img =
        Volume::new_image(1, dims.clone(), vec![1.0; 3], vec![0.0; n]).expect("image volume");
    let pred = ConstantProbs { probs: vec![0.5, 0.5], calls: AtomicUsize::new(0) };
    let out =
        predict_slicewise(&pred, &img, None, None, 0, &[32, 32], true).expect("slice prediction");
    assert!(
        out.as_f32().iter().all(|&v| v == 0.5),
        "slice-wise constant aggregation is exact"
    );

    // (b) A 192-cube predicted with a 128-cube patch: half-patch tiling puts
    // tiles at offsets 0 and 64 per axis, so coverage peaks at 2 per axis in
    // the central band; with all three axes mirrored that is 2^3 tiles x 8
    // variants = 64 predictions at the center, and the real inference path
    // makes exactly 64 patch predictions in total.
    let dims = vec![192usize; 3];
    let patch = vec![128usize; 3];
    assert_eq!(tile_positions(192, 128), vec![0, 64], "half-patch stride, end-clamped");
    let cover = |x: usize| [0usize, 64].iter().filter(|&&p| p <= x && x < p + 128).count() as u64;
    let max_axis_cover = (0..192).map(cover).max().expect("nonempty");
    assert_eq!(max_axis_cover, 2, "an axis is covered at most twice");
    assert_eq!(cover(96), 2, "the center voxel sits in the overlap band");
    assert_eq!(max_axis_cover.pow(3) * 8, 64, "peak prediction count");
    assert_eq!(prediction_count_at(&dims, &patch, &[96, 96, 96], 8), 64);
    assert_eq!(prediction_count_at(&dims, &patch, &[0, 0, 0], 8), 8, "corners see one tile");

    let n: usize = dims.iter().product();
    let img =
        Volume::new_image(1, dims.clone(), vec![1.0; 3], vec![0.0; n]).expect("image volume");
    let pred = ConstantProbs { probs: vec![1.0, 0.0], calls: AtomicUsize::new(0) };
    let out = predict_volume(&pred, &img, None, None, &patch, &[0, 1, 2], true)
        .expect("tiled prediction");
    assert_eq!(pred.calls.load(Ordering::Relaxed), 64, "8 tiles x 8 mirror variants");
    assert!(out.as_f32()[..n].iter().all(|&v| v == 1.0), "one-hot constant survives exactly");
    assert!(out.as_f32()[n..].iter().all(|&v| v == 0.0));

    // (c) The label-echo predictor drives the whole tiled+mirrored path to a
    // perfect segmentation: dice exactly 1.0 for every class.
    let dims = vec![96usize, 80, 72];
    let n: usize = dims.iter().product();
    let mut labels = vec![0u8; n];
    let center = |i: usize, c: f64, r: f64| (i as f64 - c) / r;
    let mut idx = 0usize;
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let a = center(z, 30.0, 18.0).powi(2)
                    + center(y, 40.0, 22.0).powi(2)
                    + center(x, 36.0, 20.0).powi(2);
                let b = center(z, 70.0, 12.0).powi(2)
                    + center(y, 32.0, 10.0).powi(2)
                    + center(x, 30.0, 11.0).powi(2);
                labels[idx] = if b <= 1.0 {
                    2
                } else if a <= 1.0 {
                    1
                } else {
                    0
                };
                idx += 1;
            }
        }
    }
    let image: Vec<f32> = (0..n).map(|v| (v % 97) as f32 * 0.01).collect();
    let img = Volume::new_image(1, dims.clone(), vec![1.0; 3], image).expect("image volume");
    let truth = Volume::new_labelmap(dims.clone(), vec![1.0; 3], labels).expect("labels");
    let oracle = OraclePredictor { num_classes: 3 };
    let soft = predict_volume(&oracle, &img, Some(&truth), None, &[64, 64, 64], &[0, 1, 2], true)
        .expect("tiled prediction");
    let pred = argmax_labels(&soft);
    assert_eq!(pred.as_u8(), truth.as_u8(), "label echo round-trips the volume");
    for class in [1u8, 2] {
        assert_eq!(dice_score(&pred, &truth, class).expect("dice"), 1.0, "class {class}");
    }
    assert_eq!(mean_foreground_dice(&pred, &truth, 3).expect("dice"), 1.0);
}

// ---------------------------------------------------------------------------
// 8. Largest-component filtering
// ---------------------------------------------------------------------------

/// Independent flood-fill oracle: for each class, keep only the component
/// with the most voxels (ties: smallest minimum linear index), relabeling
/// the rest to background. 26-connectivity, matching the production filter.
fn flood_fill_filter(labels: &[u8], dims: &[usize], classes: &[u8]) -> Vec<u8> {
    let (dz, dy, dx) = (dims[0] as i64, dims[1] as i64, dims[2] as i64);
    let mut out = labels.to_vec();
    for &class in classes {
        let mut seen = vec![false; labels.len()];
        let mut best: Option<(usize, usize, Vec<usize>)> = None; // (size, min index, voxels)
        for start in 0..labels.len() {
            if labels[start] != class || seen[start] {
                continue;
            }
            let mut member = Vec::new();
            let mut queue = VecDeque::new();
            seen[start] = true;
            queue.push_back(start);
            while let Some(v) = queue.pop_front() {
                member.push(v);
                let z = (v / (dims[1] * dims[2])) as i64;
                let y = ((v / dims[2]) % dims[1]) as i64;
                let x = (v % dims[2]) as i64;
                for sz in -1..=1i64 {
                    for sy in -1..=1i64 {
                        for sx in -1..=1i64 {
                            if sz == 0 && sy == 0 && sx == 0 {
                                continue;
                            }
                            let (nz, ny, nx) = (z + sz, y + sy, x + sx);
                            if nz < 0 || nz >= dz || ny < 0 || ny >= dy || nx < 0 || nx >= dx {
                                continue;
                            }
                            let w = ((nz * dy + ny) * dx + nx) as usize;
                            if labels[w] == class && !seen[w] {
                                seen[w] = true;
                                queue.push_back(w);
                            }
                        }
                    }
                }
            }
            let min_index = *member.iter().min().expect("nonempty component");
            let better = match &best {
                None => true,
                Some((size, min0, _)) => {
                    member.len() > *size || (member.len() == *size && min_index < *min0)
                }
            };
            if better {
                best = Some((member.len(), min_index, member));
            }
        }
        if let Some((_, _, keep)) = best {
            let keep: BTreeSet<usize> = keep.into_iter().collect();
            for v in 0..out.len() {
                if labels[v] == class && !keep.contains(&v) {
                    out[v] = 0;
                }
            }
        }
    }
    out
}

#[test]
fn a08_largest_component_filter_matches_a_flood_fill_oracle() {
    let dims = vec![20usize, 20, 20];
    let n: usize = dims.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(0x9A57);
    for case in 0..200 {
        let labels: Vec<u8> = if case % 5 == 4 {
            // structured case: two class-1 balls of different sizes plus
            // class-2 satellites, so the kept component is unambiguous
            let mut lab = vec![0u8; n];
            let (cz, cy, cx) = (
                rng.gen_range(5..15) as f64,
                rng.gen_range(5..15) as f64,
                rng.gen_range(5..15) as f64,
            );
            let r1 = rng.gen_range(3.0..5.0);
            for z in 0..20usize {
                for y in 0..20usize {
                    for x in 0..20usize {
                        let d = (z as f64 - cz).powi(2)
                            + (y as f64 - cy).powi(2)
                            + (x as f64 - cx).powi(2);
                        if d <= r1 * r1 {
                            lab[(z * 20 + y) * 20 + x] = 1;
                        }
                    }
                }
            }
            for _ in 0..6 {
                let v = rng.gen_range(0..n);
                lab[v] = if rng.gen_bool(0.5) { 1 } else { 2 };
            }
            lab
        } else {
            let p1 = rng.gen_range(0.02..0.25);
            let p2 = rng.gen_range(0.02..0.25);
            (0..n)
                .map(|_| {
                    let r: f64 = rng.gen();
                    if r < p1 {
                        1
                    } else if r < p1 + p2 {
                        2
                    } else {
                        0
                    }
                })
                .collect()
        };
        let vol =
            Volume::new_labelmap(dims.clone(), vec![1.0; 3], labels.clone()).expect("labelmap");
        let got = apply_postprocessing(&vol, &[1, 2]).expect("filter");
        let want = flood_fill_filter(&labels, &dims, &[1, 2]);
        assert_eq!(got.as_u8(), &want[..], "case {case}: filter matches the flood-fill oracle");

        let again = apply_postprocessing(&got, &[1, 2]).expect("filter");
        assert_eq!(again.as_u8(), got.as_u8(), "case {case}: filtering is idempotent");
    }

    // idempotence also holds on the bundled synthetic labels
    for idx in 0..3 {
        let case = generate_case(&SynthSpec::rigged_mini(7), idx).expect("synthetic case");
        let once = apply_postprocessing(&case.label, &[1]).expect("filter");
        let twice = apply_postprocessing(&once, &[1]).expect("filter");
        assert_eq!(once.as_u8(), twice.as_u8(), "case {idx}: idempotent on synthetic labels");
    }
}

// ---------------------------------------------------------------------------
// 9. Resampling kernels
// ---------------------------------------------------------------------------

#[test]
fn a09_cubic_resampling_reproduces_cubics_and_nearest_preserves_labels() {
    // (a) Random trivariate polynomials of total degree <= 3, sampled on an
    // anisotropic grid and resampled to a different spacing, match analytic
    // evaluation to < 1e-6 at every voxel whose source coordinate is at
    // least 2 voxels from the line ends (the clamped border is excluded by
    // construction).
    let monomials: Vec<(i32, i32, i32)> = {
        let mut m = Vec::new();
        for i in 0..=3i32 {
            for j in 0..=3i32 {
                for k in 0..=3i32 {
                    if i + j + k <= 3 {
                        m.push((i, j, k));
                    }
                }
            }
        }
        m
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0B1C);
    let mut max_err = 0.0f64;
    let mut checked = 0usize;
    for _ in 0..10 {
        let dims: Vec<usize> = (0..3).map(|_| rng.gen_range(14..26)).collect();
        let src: Vec<f64> = (0..3).map(|_| rng.gen_range(0.6..2.4)).collect();
        let tgt: Vec<f64> = (0..3).map(|_| rng.gen_range(0.6..2.4)).collect();
        let span: Vec<f64> = dims.iter().zip(&src).map(|(&d, &s)| d as f64 * s).collect();
        let coeffs: Vec<f64> = monomials.iter().map(|_| rng.gen_range(-0.1..0.1)).collect();
        let poly = |t: [f64; 3]| -> f64 {
            monomials
                .iter()
                .zip(&coeffs)
                .map(|(&(i, j, k), &c)| c * t[0].powi(i) * t[1].powi(j) * t[2].powi(k))
                .sum()
        };
        // normalized physical coordinate of sample `idx` along axis `a`
        let t_of = |idx: f64, a: usize, spacing: &[f64]| (idx + 0.5) * spacing[a] / span[a];

        let mut data = vec![0.0f32; dims.iter().product()];
        let mut v = 0usize;
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    data[v] = poly([
                        t_of(z as f64, 0, &src),
                        t_of(y as f64, 1, &src),
                        t_of(x as f64, 2, &src),
                    ]) as f32;
                    v += 1;
                }
            }
        }
        let (out, odims) = segplan::interp::resample_cubic(&data, 1, &dims, &src, &tgt);
        let interior = |k: usize, a: usize| {
            // source-grid coordinate of target sample k (centers align in
            // physical space): at least 2 voxels from either end
            let u = (k as f64 + 0.5) * tgt[a] / src[a] - 0.5;
            u >= 2.0 && u <= (dims[a] - 3) as f64
        };
        let mut w = 0usize;
        for z in 0..odims[0] {
            for y in 0..odims[1] {
                for x in 0..odims[2] {
                    if interior(z, 0) && interior(y, 1) && interior(x, 2) {
                        let want = poly([
                            t_of(z as f64, 0, &tgt),
                            t_of(y as f64, 1, &tgt),
                            t_of(x as f64, 2, &tgt),
                        ]);
                        max_err = max_err.max((out[w] as f64 - want).abs());
                        checked += 1;
                    }
                    w += 1;
                }
            }
        }
    }
    assert!(checked > 1_000, "interior sample count {checked}");
    assert!(max_err < 1e-6, "max abs error {max_err:e} over {checked} voxels (required < 1e-6)");

    // (b) Nearest-neighbor label resampling preserves the value set: exact
    // set equality when refining (every source voxel is sampled), and never
    // an invented value in any direction; chunky labels survive coarsening.
    let mut rng = ChaCha8Rng::seed_from_u64(0x1ABE15);
    for _ in 0..30 {
        let dims: Vec<usize> = (0..3).map(|_| rng.gen_range(7..20)).collect();
        let src: Vec<f64> = (0..3).map(|_| rng.gen_range(0.7..2.0)).collect();
        let tgt: Vec<f64> = src.iter().map(|&s| s * rng.gen_range(0.35..0.95)).collect();
        let alphabet: Vec<u8> = (0..=rng.gen_range(1..6u8)).collect();
        let data: Vec<u8> = (0..dims.iter().product::<usize>())
            .map(|_| *alphabet.choose(&mut rng).expect("nonempty"))
            .collect();
        let (out, _) = segplan::interp::resample_nearest(&data, 1, &dims, &src, &tgt);
        let input_set: BTreeSet<u8> = data.iter().copied().collect();
        let output_set: BTreeSet<u8> = out.iter().copied().collect();
        assert_eq!(input_set, output_set, "refinement keeps the exact value set");
    }
    for _ in 0..30 {
        let dims = vec![16usize, 16, 16];
        let src: Vec<f64> = (0..3).map(|_| rng.gen_range(0.7..2.0)).collect();
        // coarsening by < 3x: every 4-wide block still catches a sample
        let tgt: Vec<f64> = src.iter().map(|&s| s * rng.gen_range(1.05..2.6)).collect();
        let mut data = vec![0u8; 16 * 16 * 16];
        for (value, offset) in [(1u8, 0usize), (2, 6), (3, 12)] {
            for z in offset..(offset + 4).min(16) {
                for y in 0..4usize {
                    for x in 0..4usize {
                        data[(z * 16 + y) * 16 + x] = value;
                    }
                }
            }
        }
        let (out, _) = segplan::interp::resample_nearest(&data, 1, &dims, &src, &tgt);
        let input_set: BTreeSet<u8> = data.iter().copied().collect();
        let output_set: BTreeSet<u8> = out.iter().copied().collect();
        assert_eq!(input_set, output_set, "block labels survive coarsening");

        let salt: Vec<u8> =
            (0..dims.iter().product::<usize>()).map(|_| rng.gen_range(0..4u8)).collect();
        let (out, _) = segplan::interp::resample_nearest(&salt, 1, &dims, &src, &tgt);
        let input_set: BTreeSet<u8> = salt.iter().copied().collect();
        assert!(
            out.iter().all(|v| input_set.contains(v)),
            "coarsening never invents a value"
        );
    }
}

// ---------------------------------------------------------------------------
// 10. End-to-end determinism and wall time
// ---------------------------------------------------------------------------

#[test]
fn a10_cross_validation_runs_are_byte_identical_and_fast() {
    fs::create_dir_all(env!("CARGO_TARGET_TMPDIR")).expect("target tmp dir");
    let tmp = tempfile::Builder::new()
        .prefix("acceptance-cv")
        .tempdir_in(env!("CARGO_TARGET_TMPDIR"))
        .expect("temp dir");
    let root = tmp.path();

    let data_dir = root.join("dataset");
    generate_dataset(&SynthSpec::standard(7), &data_dir).expect("synthetic dataset");
    let desc = DatasetDescriptor::read(&data_dir).expect("descriptor");
    let fp = fingerprint_dataset(&desc).expect("fingerprint");
    let plan = make_plan(&fp).expect("plan");
    assert_eq!(
        plan.models,
        vec![ModelId::U2d, ModelId::U3d, ModelId::Cascade],
        "the bundled 10-case dataset triggers all three models"
    );
    let plan_path = root.join("plan.json");
    plan.write_json(&plan_path).expect("write plan");
    let prep_dir = root.join("prep");
    preprocess_dataset(&desc, &fp, &plan, &prep_dir).expect("preprocess");

    // Mirror averaging is disabled so the wall-clock bound stays honest on a
    // single-core machine; byte-level determinism is what this requirement
    // pins, and the mirrored path is exercised by the inference checks.
    let options = CvOptions {
        seed: 7,
        predictor: PredictorKind::Threshold,
        tta: false,
        simulate_scheduler: true,
    };
    let mut payloads: Vec<(Vec<u8>, Vec<u8>)> = Vec::new();
    for run in ["run_a", "run_b"] {
        let out = root.join(run);
        let started = Instant::now();
        let metrics = run_cv(&data_dir, &prep_dir, &plan_path, &out, &options).expect("run");
        let elapsed = started.elapsed();
        assert!(
            elapsed < Duration::from_secs(120),
            "{run} took {elapsed:?} (required < 2 minutes)"
        );
        assert_eq!(metrics.candidates.len(), 6, "three singles plus three pairwise ensembles");
        assert!(
            metrics.selected_mean_foreground_dice > 0.25,
            "the fitted predictor must beat chance (got {})",
            metrics.selected_mean_foreground_dice
        );
        payloads.push((
            fs::read(out.join("metrics.json")).expect("metrics.json"),
            fs::read(out.join("manifest.json")).expect("manifest.json"),
        ));
    }
    assert_eq!(payloads[0].0, payloads[1].0, "metrics.json byte-identical across runs");
    assert_eq!(payloads[0].1, payloads[1].1, "manifest.json byte-identical across runs");
}

// ---------------------------------------------------------------------------
// 11. Model selection on recorded reference dice
// ---------------------------------------------------------------------------

#[test]
fn a11_model_selection_reproduces_the_recorded_argmax() {
    // Absolute dice from full network training is out of scope by design;
    // the protocol substitute is the byte-identical run above plus this
    // check that candidate scoring and argmax selection reproduce the known
    // winner from recorded reference values.
    let text = fs::read_to_string(fixture_dir().join("model_selection_reference.json"))
        .expect("selection fixture present");
    let fixture: serde_json::Value = serde_json::from_str(&text).expect("fixture parses");

    let mut scores: BTreeMap<String, f64> = BTreeMap::new();
    for entry in fixture["candidates"].as_array().expect("candidates") {
        let per_class = entry["per_class"].as_object().expect("per-class dice");
        let mean = per_class.values().map(|v| v.as_f64().unwrap()).sum::<f64>()
            / per_class.len() as f64;
        scores.insert(entry["name"].as_str().expect("name").to_string(), mean);
    }

    let order = candidate_order(&[ModelId::U2d, ModelId::U3d, ModelId::Cascade]);
    assert_eq!(order.len(), 6, "full candidate ladder");
    let scored: Vec<(Candidate, f64)> =
        order.iter().map(|c| (*c, scores[&c.to_string()])).collect();
    let best = select_best(&scored).expect("nonempty");
    assert_eq!(
        best.to_string(),
        fixture["expected_selected"].as_str().expect("expected_selected"),
        "argmax candidate"
    );
    let expected_mean = fixture["expected_selected_mean"].as_f64().expect("expected mean");
    let best_score = scored.iter().find(|(c, _)| *c == best).expect("winner scored").1;
    assert!(
        (best_score - expected_mean).abs() < 1e-9,
        "winner mean {best_score} vs recorded {expected_mean}"
    );
    for (c, s) in &scored {
        if *c != best {
            assert!(*s < best_score, "{c} must score strictly below the winner");
        }
    }
}

// ---------------------------------------------------------------------------
// 12. Topology report golden (diffable reproduction of the reference table)
// ---------------------------------------------------------------------------

#[test]
fn a12_topology_report_matches_the_golden_snapshot() {
    let plans = fixture_plans();
    let table = render_topology_table(&plans);
    let golden = fs::read_to_string(fixture_dir().join("topology_reference.txt"))
        .expect("topology golden present");
    assert_eq!(table, golden, "rendered topology table is byte-stable");
}
