//! Rule-based pipeline planning: derive network topology (patch size, batch
//! size, pooling counts) and global switches from the dataset fingerprint.
//!
//! The heuristics balance a fixed memory budget between patch volume and
//! batch size, prefer patches that cover the median case, and respect voxel
//! anisotropy when shrinking.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint::DatasetFingerprint;
use crate::preprocess::NormalizationScheme;

/// Feature maps at the highest resolution; doubled per pooling step.
pub const BASE_FEATURE_MAPS: usize = 30;
pub const CONVS_PER_LEVEL: usize = 2;
pub const MAX_POOLS_2D: usize = 6;
pub const MAX_POOLS_3D: usize = 5;
/// Voxel budget for a single 3D patch.
pub const PATCH_VOXEL_BUDGET_3D: u64 = 1 << 21;
/// Total voxels per 3D batch (two budget-sized patches).
pub const BATCH_VOXEL_BUDGET_3D: u64 = 2 * PATCH_VOXEL_BUDGET_3D;
/// Total voxels per 2D batch (reference: 42 patches of 256x256).
pub const BATCH_VOXEL_BUDGET_2D: u64 = 42 * 256 * 256;
/// An axis stops being pooled once its extent falls below this.
pub const MIN_POOLED_EXTENT: f64 = 8.0;
/// Cap on the batch fraction of the dataset: batch*patch <= voxels/20,
/// unless that would push the batch below the floor of 2.
pub const DATASET_FRACTION_DENOM: u64 = 20;
/// Exceeding the patch budget by this factor (on the median case) triggers
/// the two-stage coarse-to-fine model.
pub const CASCADE_TRIGGER_FACTOR: u64 = 4;
/// Per-axis candidate clamp when deriving the coarse-stage patch.
pub const LOWRES_CANDIDATE_CLAMP: f64 = 128.0;

pub const PLAN_SCHEMA: &str = "segplan-1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelId {
    #[serde(rename = "U2D")]
    U2d,
    #[serde(rename = "U3D")]
    U3d,
    #[serde(rename = "CASCADE")]
    Cascade,
}

impl ModelId {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelId::U2d => "U2D",
            ModelId::U3d => "U3D",
            ModelId::Cascade => "CASCADE",
        }
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "U2D" | "2D" => Ok(ModelId::U2d),
            "U3D" | "3D" => Ok(ModelId::U3d),
            "CASCADE" => Ok(ModelId::Cascade),
            other => Err(Error::validation(format!("unknown model id: {other}"))),
        }
    }
}

/// Network topology for one encoder-decoder model variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologySpec {
    pub dims: usize,
    pub patch_size: Vec<usize>,
    pub batch_size: usize,
    pub pools_per_axis: Vec<usize>,
    pub base_feature_maps: usize,
    pub convs_per_level: usize,
    pub nonlinearity: String,
    pub normalization: String,
    pub upsampling: String,
}

impl TopologySpec {
    fn build(dims: usize, patch_size: Vec<usize>, pools_per_axis: Vec<usize>, batch_size: usize) -> Self {
        TopologySpec {
            dims,
            patch_size,
            batch_size,
            pools_per_axis,
            base_feature_maps: BASE_FEATURE_MAPS,
            convs_per_level: CONVS_PER_LEVEL,
            nonlinearity: "leaky_relu(1e-2)".to_string(),
            normalization: "instance".to_string(),
            upsampling: "transposed_conv".to_string(),
        }
    }

    pub fn patch_voxels(&self) -> u64 {
        self.patch_size.iter().map(|&d| d as u64).product()
    }
}

/// Coarse-stage configuration of the two-stage cascade.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadePlan {
    pub lowres_spacing: Vec<f64>,
    pub lowres_median_shape: Vec<usize>,
    pub topology_lowres: TopologySpec,
}

/// Spatial augmentation parameters carried by the plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    /// Maximum absolute rotation per rotation axis, degrees.
    pub rotation_deg: f64,
    pub scale_range: (f64, f64),
    pub elastic_prob: f64,
    pub elastic_max_disp_mm: f64,
    pub elastic_sigma_mm: f64,
    pub gamma_range: (f64, f64),
    /// Spatial axes eligible for mirroring.
    pub mirror_axes: Vec<usize>,
}

impl AugmentationConfig {
    pub fn default_2d() -> Self {
        AugmentationConfig {
            rotation_deg: 180.0,
            scale_range: (0.85, 1.25),
            elastic_prob: 0.2,
            elastic_max_disp_mm: 10.0,
            elastic_sigma_mm: 12.0,
            gamma_range: (0.7, 1.5),
            mirror_axes: vec![0, 1],
        }
    }

    pub fn default_3d() -> Self {
        AugmentationConfig {
            rotation_deg: 15.0,
            scale_range: (0.85, 1.25),
            elastic_prob: 0.2,
            elastic_max_disp_mm: 10.0,
            elastic_sigma_mm: 12.0,
            gamma_range: (0.7, 1.5),
            mirror_axes: vec![0, 1, 2],
        }
    }
}

/// The complete self-configured pipeline description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelinePlan {
    pub schema: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_name: Option<String>,
    pub target_spacing: Vec<f64>,
    /// Median case shape at the target spacing.
    pub median_shape: Vec<usize>,
    /// Models to train and consider during selection.
    pub models: Vec<ModelId>,
    /// Axis dropped to form 2D slices (the most coarsely spaced one).
    pub slice_axis: usize,
    pub topology_2d: TopologySpec,
    pub topology_3d: TopologySpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cascade: Option<CascadePlan>,
    pub normalization_scheme: NormalizationScheme,
    pub normalize_within_mask: bool,
    /// Strongly anisotropic 3D patches are augmented slice-wise.
    pub use_2d_augmentation_for_3d: bool,
    /// When the full-resolution model sees (nearly) whole cases per patch,
    /// dice is pooled over the batch instead of averaged per sample.
    pub batch_dice_3d_fullvolume: bool,
    pub postprocess_classes: Vec<u8>,
    pub augmentation_2d: AugmentationConfig,
    pub augmentation_3d: AugmentationConfig,
}

impl PipelinePlan {
    pub fn topology(&self, model: ModelId) -> &TopologySpec {
        match model {
            ModelId::U2d => &self.topology_2d,
            ModelId::U3d => &self.topology_3d,
            ModelId::Cascade => {
                // the cascade's refinement stage shares the 3D topology
                &self.topology_3d
            }
        }
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plan always serializes");
        s.push('\n');
        s
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json_string()).map_err(|e| Error::io_at(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        let plan: PipelinePlan = serde_json::from_str(&text)?;
        if plan.schema != PLAN_SCHEMA {
            return Err(Error::validation(format!(
                "unsupported plan schema {:?} (expected {PLAN_SCHEMA:?})",
                plan.schema
            )));
        }
        Ok(plan)
    }
}

/// Smallest pooling count p <= cap such that extent / 2^p drops below the
/// minimum pooled extent.
pub fn pools_for_axis(extent: f64, cap: usize) -> usize {
    let mut p = 0;
    while p < cap && extent / f64::powi(2.0, p as i32) >= MIN_POOLED_EXTENT {
        p += 1;
    }
    p
}

/// Round up to the next multiple of 2^pools (at least one multiple).
pub fn round_to_multiple(extent: f64, pools: usize) -> usize {
    let m = 1usize << pools;
    ((extent / m as f64).ceil() as usize).max(1) * m
}

/// Axis to drop when forming 2D slices: the most coarsely spaced one, first
/// axis winning ties.
pub fn slice_axis(spacing: &[f64]) -> usize {
    let mut best = 0;
    for (a, &sp) in spacing.iter().enumerate() {
        if sp > spacing[best] {
            best = a;
        }
    }
    best
}

/// Turn per-axis real-valued candidate extents into a patch: derive pooling
/// per axis, round up to the pooling multiple, then shave the axis with the
/// largest overshoot (one pooling multiple at a time, later axes winning
/// ties) until the patch fits the voxel budget. Pooling counts are
/// re-derived from the final extents; the rounding scheme guarantees they
/// still divide the patch.
fn patch_from_candidate(candidate: &[f64], cap: usize, budget: u64) -> (Vec<usize>, Vec<usize>) {
    let mut patch: Vec<usize> = candidate
        .iter()
        .map(|&c| round_to_multiple(c, pools_for_axis(c, cap)))
        .collect();
    loop {
        let pp: u64 = patch.iter().map(|&d| d as u64).product();
        if pp <= budget {
            break;
        }
        let mut axis = None;
        let mut best = f64::NEG_INFINITY;
        for a in 0..patch.len() {
            let step = 1usize << pools_for_axis(patch[a] as f64, cap);
            if patch[a] <= step {
                continue; // cannot shrink without vanishing
            }
            let overshoot = patch[a] as f64 - candidate[a];
            if overshoot >= best {
                best = overshoot;
                axis = Some(a);
            }
        }
        let Some(axis) = axis else { break };
        patch[axis] -= 1usize << pools_for_axis(patch[axis] as f64, cap);
    }
    let pools: Vec<usize> = patch.iter().map(|&e| pools_for_axis(e as f64, cap)).collect();
    debug_assert!(patch.iter().zip(&pools).all(|(&e, &p)| e % (1usize << p) == 0));
    (patch, pools)
}

/// Batch size: fill the voxel budget with patches, capped so one batch is at
/// most 1/20th of the dataset, with a hard floor of 2.
fn batch_size(patch_voxels: u64, batch_budget: u64, dataset_voxels: u64) -> usize {
    let by_budget = batch_budget / patch_voxels;
    let by_dataset = dataset_voxels / (DATASET_FRACTION_DENOM * patch_voxels);
    by_budget.min(by_dataset).max(2) as usize
}

/// Plan the 2D topology: slices orthogonal to the most coarsely spaced axis,
/// patch covering the median in-plane shape.
pub fn plan_2d(fp: &DatasetFingerprint) -> Result<TopologySpec> {
    let axis = slice_axis(&fp.median_spacing);
    let plane: Vec<f64> = (0..3)
        .filter(|&a| a != axis)
        .map(|a| fp.median_shape_resampled[a] as f64)
        .collect();
    let (patch, pools) = patch_from_candidate(&plane, MAX_POOLS_2D, u64::MAX);
    let pp: u64 = patch.iter().map(|&d| d as u64).product();
    let batch = batch_size(pp, BATCH_VOXEL_BUDGET_2D, fp.dataset_voxels);
    Ok(TopologySpec::build(2, patch, pools, batch))
}

/// Real-valued candidate extents for the 3D patch: the median shape if it
/// fits the budget; otherwise scaled down, either isotropically or (for
/// strongly anisotropic spacing) only along the finely spaced axes.
fn candidate_3d(shape: &[usize], spacing: &[f64], budget: u64) -> Vec<f64> {
    let product: f64 = shape.iter().map(|&d| d as f64).product();
    if product <= budget as f64 {
        return shape.iter().map(|&d| d as f64).collect();
    }
    let max_sp = spacing.iter().cloned().fold(f64::MIN, f64::max);
    let min_sp = spacing.iter().cloned().fold(f64::MAX, f64::min);
    let fine: Vec<usize> =
        (0..3).filter(|&a| max_sp / spacing[a] > 2.0).collect();
    if max_sp / min_sp > 2.0 && !fine.is_empty() {
        let factor = (budget as f64 / product).powf(1.0 / fine.len() as f64);
        (0..3)
            .map(|a| {
                let e = shape[a] as f64;
                if fine.contains(&a) {
                    e * factor
                } else {
                    e
                }
            })
            .collect()
    } else {
        let factor = (budget as f64 / product).powf(1.0 / 3.0);
        shape.iter().map(|&d| d as f64 * factor).collect()
    }
}

pub fn plan_3d(fp: &DatasetFingerprint) -> Result<TopologySpec> {
    let candidate = candidate_3d(
        &fp.median_shape_resampled,
        &fp.median_spacing,
        PATCH_VOXEL_BUDGET_3D,
    );
    let (patch, pools) = patch_from_candidate(&candidate, MAX_POOLS_3D, PATCH_VOXEL_BUDGET_3D);
    let pp: u64 = patch.iter().map(|&d| d as u64).product();
    let batch = batch_size(pp, BATCH_VOXEL_BUDGET_3D, fp.dataset_voxels);
    Ok(TopologySpec::build(3, patch, pools, batch))
}

/// The cascade is warranted when the median case dwarfs the 3D patch.
pub fn cascade_required(fp: &DatasetFingerprint, topo_3d: &TopologySpec) -> bool {
    let shape_voxels: u64 = fp.median_shape_resampled.iter().map(|&d| d as u64).product();
    shape_voxels > CASCADE_TRIGGER_FACTOR * topo_3d.patch_voxels()
}

/// Patch for one coarse-stage iteration: candidate extents are the current
/// shape, clamped per axis when the shape exceeds the budget.
fn lowres_patch(shape: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let product: u64 = shape.iter().map(|&d| d as u64).product();
    let candidate: Vec<f64> = if product > PATCH_VOXEL_BUDGET_3D {
        shape.iter().map(|&d| (d as f64).min(LOWRES_CANDIDATE_CLAMP)).collect()
    } else {
        shape.iter().map(|&d| d as f64).collect()
    };
    patch_from_candidate(&candidate, MAX_POOLS_3D, PATCH_VOXEL_BUDGET_3D)
}

/// Derive the coarse stage: repeatedly halve the target resolution (only the
/// finely spaced axes while spacing is strongly anisotropic) until the
/// median shape fits four patches.
pub fn plan_lowres(fp: &DatasetFingerprint) -> Result<CascadePlan> {
    let mut shape = fp.median_shape_resampled.clone();
    let mut spacing = fp.median_spacing.clone();
    loop {
        let (patch, pools) = lowres_patch(&shape);
        let shape_voxels: u64 = shape.iter().map(|&d| d as u64).product();
        let patch_voxels: u64 = patch.iter().map(|&d| d as u64).product();
        if shape_voxels <= CASCADE_TRIGGER_FACTOR * patch_voxels {
            let batch = batch_size(
                patch_voxels,
                BATCH_VOXEL_BUDGET_3D,
                fp.num_cases as u64 * shape_voxels,
            );
            return Ok(CascadePlan {
                lowres_spacing: spacing,
                lowres_median_shape: shape,
                topology_lowres: TopologySpec::build(3, patch, pools, batch),
            });
        }
        let max_sp = spacing.iter().cloned().fold(f64::MIN, f64::max);
        let min_sp = spacing.iter().cloned().fold(f64::MAX, f64::min);
        let halve_fine_only = max_sp / min_sp > 2.0;
        for a in 0..3 {
            let is_fine = max_sp / spacing[a] > 2.0;
            if halve_fine_only && !is_fine {
                continue;
            }
            shape[a] = (shape[a] + 1) / 2; // round half up
            spacing[a] *= 2.0;
        }
    }
}

/// Assemble the full plan from a fingerprint.
pub fn make_plan(fp: &DatasetFingerprint) -> Result<PipelinePlan> {
    if fp.median_shape_resampled.len() != 3 || fp.median_spacing.len() != 3 {
        return Err(Error::validation("planning requires a 3D dataset fingerprint"));
    }
    if fp.median_spacing.iter().any(|&s| !s.is_finite() || s <= 0.0) {
        return Err(Error::validation("median spacing must be positive and finite"));
    }
    if fp.median_shape_resampled.iter().any(|&d| d == 0) {
        return Err(Error::validation("median shape must be nonzero"));
    }
    let topology_2d = plan_2d(fp)?;
    let topology_3d = plan_3d(fp)?;
    let cascade = if cascade_required(fp, &topology_3d) {
        Some(plan_lowres(fp)?)
    } else {
        None
    };
    let mut models = vec![ModelId::U2d, ModelId::U3d];
    if cascade.is_some() {
        models.push(ModelId::Cascade);
    }
    let max_patch = *topology_3d.patch_size.iter().max().unwrap() as f64;
    let min_patch = *topology_3d.patch_size.iter().min().unwrap() as f64;
    Ok(PipelinePlan {
        schema: PLAN_SCHEMA.to_string(),
        dataset_name: fp.name.clone(),
        target_spacing: fp.median_spacing.clone(),
        median_shape: fp.median_shape_resampled.clone(),
        models,
        slice_axis: slice_axis(&fp.median_spacing),
        topology_2d,
        batch_dice_3d_fullvolume: cascade.is_none(),
        cascade,
        normalization_scheme: if fp.is_ct {
            NormalizationScheme::CtGlobal
        } else {
            NormalizationScheme::ZscorePerCase
        },
        normalize_within_mask: fp.crop_reduction <= 0.75,
        use_2d_augmentation_for_3d: max_patch > 2.0 * min_patch,
        postprocess_classes: fp.single_component_classes.clone(),
        augmentation_2d: AugmentationConfig::default_2d(),
        augmentation_3d: AugmentationConfig::default_3d(),
        topology_3d,
    })
}
