//! Deterministic per-case preprocessing: crop to the nonzero region,
//! resample to the plan's target spacing, normalize intensities.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::descriptor::DatasetDescriptor;
use crate::error::{Error, Result};
use crate::fingerprint::{CtStats, DatasetFingerprint};
use crate::interp;
use crate::planner::PipelinePlan;
use crate::volume::{Volume, VolumeKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resolution {
    Fullres,
    Lowres,
}

impl Resolution {
    pub fn dir_name(self) -> &'static str {
        match self {
            Resolution::Fullres => "fullres",
            Resolution::Lowres => "lowres",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelNorm {
    pub mean: f64,
    pub sd: f64,
    /// Constant input: sd was 0 and replaced by 1.
    pub degenerate_sd: bool,
}

/// Everything needed to trace a preprocessed case back to its original grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub resolution: Resolution,
    /// Per-axis (start, end) of the nonzero crop, end exclusive, in original
    /// voxel indices.
    pub crop_bbox: Vec<(usize, usize)>,
    pub original_shape: Vec<usize>,
    pub original_spacing: Vec<f64>,
    pub cropped_shape: Vec<usize>,
    pub target_spacing: Vec<f64>,
    pub resampled_shape: Vec<usize>,
    pub normalization: Vec<ChannelNorm>,
    pub all_zero_input: bool,
}

pub struct CroppedCase {
    pub image: Volume,
    pub label: Option<Volume>,
    pub bbox: Vec<(usize, usize)>,
    /// True at voxels (within the crop) where any channel is nonzero.
    pub nonzero_mask: Vec<bool>,
    pub all_zero: bool,
}

/// Tight bounding box of `|value| > 0` over the union of all channels.
/// An all-zero volume yields the full extent.
pub fn nonzero_bbox(image: &Volume) -> (Vec<(usize, usize)>, bool) {
    let dims = image.shape();
    let n = image.spatial_len();
    let data = image.as_f32();
    let mut lo = dims.to_vec();
    let mut hi = vec![0usize; dims.len()];
    let mut any = false;
    for v in 0..n {
        let nonzero = (0..image.num_channels()).any(|c| data[c * n + v] != 0.0);
        if !nonzero {
            continue;
        }
        any = true;
        let mut idx = v;
        for a in (0..dims.len()).rev() {
            let coord = idx % dims[a];
            idx /= dims[a];
            lo[a] = lo[a].min(coord);
            hi[a] = hi[a].max(coord + 1);
        }
    }
    if !any {
        return (dims.iter().map(|&d| (0, d)).collect(), true);
    }
    (lo.into_iter().zip(hi).collect(), false)
}

fn crop_channelwise_f32(vol: &Volume, bbox: &[(usize, usize)]) -> Volume {
    let dims = vol.shape();
    let out_dims: Vec<usize> = bbox.iter().map(|&(a, b)| b - a).collect();
    let n_out: usize = out_dims.iter().product();
    let n_in = vol.spatial_len();
    let data = vol.as_f32();
    let mut out = Vec::with_capacity(vol.num_channels() * n_out);
    for c in 0..vol.num_channels() {
        copy_box(&data[c * n_in..(c + 1) * n_in], dims, bbox, &mut out);
    }
    Volume::new(vol.kind(), vol.num_channels(), out_dims, vol.spacing().to_vec(), out.into())
        .expect("crop of a valid volume is valid")
}

fn crop_u8(vol: &Volume, bbox: &[(usize, usize)]) -> Volume {
    let out_dims: Vec<usize> = bbox.iter().map(|&(a, b)| b - a).collect();
    let mut out = Vec::with_capacity(out_dims.iter().product());
    copy_box(vol.as_u8(), vol.shape(), bbox, &mut out);
    Volume::new_labelmap(out_dims, vol.spacing().to_vec(), out)
        .expect("crop of a valid labelmap is valid")
}

/// Append the sub-box of one channel to `out` (C-order walk of the box).
fn copy_box<T: Copy>(chan: &[T], dims: &[usize], bbox: &[(usize, usize)], out: &mut Vec<T>) {
    match dims.len() {
        2 => {
            for y in bbox[0].0..bbox[0].1 {
                let row = y * dims[1];
                out.extend_from_slice(&chan[row + bbox[1].0..row + bbox[1].1]);
            }
        }
        3 => {
            for z in bbox[0].0..bbox[0].1 {
                for y in bbox[1].0..bbox[1].1 {
                    let row = (z * dims[1] + y) * dims[2];
                    out.extend_from_slice(&chan[row + bbox[2].0..row + bbox[2].1]);
                }
            }
        }
        _ => unreachable!("volumes are 2- or 3-dimensional"),
    }
}

/// Crop image (and label) to the union bounding box of nonzero image values.
pub fn crop_to_nonzero(image: &Volume, label: Option<&Volume>) -> Result<CroppedCase> {
    if let Some(lab) = label {
        if lab.shape() != image.shape() {
            return Err(Error::validation(format!(
                "image shape {:?} and label shape {:?} disagree",
                image.shape(),
                lab.shape()
            )));
        }
    }
    let (bbox, all_zero) = nonzero_bbox(image);
    let cropped = crop_channelwise_f32(image, &bbox);
    let cropped_label = label.map(|lab| crop_u8(lab, &bbox));
    let n = cropped.spatial_len();
    let data = cropped.as_f32();
    let mask: Vec<bool> = (0..n)
        .map(|v| (0..cropped.num_channels()).any(|c| data[c * n + v] != 0.0))
        .collect();
    Ok(CroppedCase { image: cropped, label: cropped_label, bbox, nonzero_mask: mask, all_zero })
}

/// Resample a volume to `target_spacing`: cubic splines for images, nearest
/// neighbor for labelmaps, per-channel cubic plus per-voxel renormalization
/// for softmax volumes.
pub fn resample(vol: &Volume, target_spacing: &[f64]) -> Result<Volume> {
    if target_spacing.len() != vol.ndim() {
        return Err(Error::validation("target spacing length must match spatial axes"));
    }
    if target_spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return Err(Error::validation("target spacing must be positive and finite"));
    }
    match vol.kind() {
        VolumeKind::Labelmap => {
            let (data, dims) = interp::resample_nearest(
                vol.as_u8(),
                1,
                vol.shape(),
                vol.spacing(),
                target_spacing,
            );
            Volume::new_labelmap(dims, target_spacing.to_vec(), data)
        }
        VolumeKind::Image => {
            let (data, dims) = interp::resample_cubic(
                vol.as_f32(),
                vol.num_channels(),
                vol.shape(),
                vol.spacing(),
                target_spacing,
            );
            Volume::new(VolumeKind::Image, vol.num_channels(), dims, target_spacing.to_vec(), data.into())
        }
        VolumeKind::Softmax => {
            let (mut data, dims) = interp::resample_cubic(
                vol.as_f32(),
                vol.num_channels(),
                vol.shape(),
                vol.spacing(),
                target_spacing,
            );
            // Spline overshoot can nudge probabilities outside [0,1];
            // clamp then renormalize so the softmax invariant survives.
            let k = vol.num_channels();
            let n: usize = dims.iter().product();
            for v in data.iter_mut() {
                *v = v.max(0.0);
            }
            for i in 0..n {
                let sum: f32 = (0..k).map(|c| data[c * n + i]).sum();
                if sum > 1e-12 {
                    for c in 0..k {
                        data[c * n + i] /= sum;
                    }
                } else {
                    for c in 0..k {
                        data[c * n + i] = 1.0 / k as f32;
                    }
                }
            }
            Volume::new(VolumeKind::Softmax, k, dims, target_spacing.to_vec(), data.into())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationScheme {
    CtGlobal,
    ZscorePerCase,
}

/// Normalize an image in place per the plan's scheme. `mask` (aligned with
/// the image grid) restricts per-case statistics when `within_mask` is set;
/// voxels outside it end up exactly 0.
pub fn normalize(
    image: &mut Volume,
    scheme: NormalizationScheme,
    ct_stats: Option<&CtStats>,
    mask: Option<&[bool]>,
    within_mask: bool,
) -> Result<Vec<ChannelNorm>> {
    let n = image.spatial_len();
    let channels = image.num_channels();
    let data = image.as_f32_mut();
    let mut records = Vec::with_capacity(channels);
    match scheme {
        NormalizationScheme::CtGlobal => {
            let stats = ct_stats.ok_or_else(|| {
                Error::validation("ct_global normalization requires dataset CT statistics")
            })?;
            let sd = if stats.sd == 0.0 { 1.0 } else { stats.sd };
            for c in 0..channels {
                for v in data[c * n..(c + 1) * n].iter_mut() {
                    let clipped = (*v as f64).clamp(stats.p0_5, stats.p99_5);
                    *v = ((clipped - stats.mean) / sd) as f32;
                }
                records.push(ChannelNorm { mean: stats.mean, sd, degenerate_sd: stats.sd == 0.0 });
            }
        }
        NormalizationScheme::ZscorePerCase => {
            for c in 0..channels {
                let chan = &mut data[c * n..(c + 1) * n];
                let selected = |i: usize| -> bool {
                    if !within_mask {
                        return true;
                    }
                    mask.map(|m| m[i]).unwrap_or(true)
                };
                let mut sum = 0.0f64;
                let mut count = 0u64;
                for (i, &v) in chan.iter().enumerate() {
                    if selected(i) {
                        sum += v as f64;
                        count += 1;
                    }
                }
                if count == 0 {
                    // nothing inside the mask: leave zeros, flag degenerate
                    records.push(ChannelNorm { mean: 0.0, sd: 1.0, degenerate_sd: true });
                    chan.fill(0.0);
                    continue;
                }
                let mean = sum / count as f64;
                let mut ss = 0.0f64;
                for (i, &v) in chan.iter().enumerate() {
                    if selected(i) {
                        let d = v as f64 - mean;
                        ss += d * d;
                    }
                }
                let sd_raw = (ss / count as f64).sqrt();
                let degenerate = sd_raw == 0.0;
                let sd = if degenerate { 1.0 } else { sd_raw };
                for (i, v) in chan.iter_mut().enumerate() {
                    if within_mask && !selected(i) {
                        *v = 0.0;
                    } else {
                        *v = ((*v as f64 - mean) / sd) as f32;
                    }
                }
                records.push(ChannelNorm { mean, sd, degenerate_sd: degenerate });
            }
        }
    }
    Ok(records)
}

pub struct PreprocessedCase {
    pub image: Volume,
    pub label: Option<Volume>,
    pub record: CaseRecord,
}

/// Full crop -> resample -> normalize pipeline for one case.
#[allow(clippy::too_many_arguments)]
pub fn preprocess_case(
    case_id: &str,
    image: &Volume,
    label: Option<&Volume>,
    target_spacing: &[f64],
    resolution: Resolution,
    scheme: NormalizationScheme,
    ct_stats: Option<&CtStats>,
    within_mask: bool,
) -> Result<PreprocessedCase> {
    let cropped = crop_to_nonzero(image, label)?;
    let mut resampled = resample(&cropped.image, target_spacing)?;
    let resampled_label = match &cropped.label {
        Some(lab) => Some(resample(lab, target_spacing)?),
        None => None,
    };
    let mask_resampled: Option<Vec<bool>> =
        if scheme == NormalizationScheme::ZscorePerCase && within_mask {
            let mask_u8: Vec<u8> = cropped.nonzero_mask.iter().map(|&b| b as u8).collect();
            let mask_vol = Volume::new_labelmap(
                cropped.image.shape().to_vec(),
                cropped.image.spacing().to_vec(),
                mask_u8,
            )?;
            let res = resample(&mask_vol, target_spacing)?;
            Some(res.as_u8().iter().map(|&v| v != 0).collect())
        } else {
            None
        };
    let normalization = normalize(
        &mut resampled,
        scheme,
        ct_stats,
        mask_resampled.as_deref(),
        within_mask,
    )?;
    let record = CaseRecord {
        case_id: case_id.to_string(),
        resolution,
        crop_bbox: cropped.bbox.clone(),
        original_shape: image.shape().to_vec(),
        original_spacing: image.spacing().to_vec(),
        cropped_shape: cropped.image.shape().to_vec(),
        target_spacing: target_spacing.to_vec(),
        resampled_shape: resampled.shape().to_vec(),
        normalization,
        all_zero_input: cropped.all_zero,
    };
    Ok(PreprocessedCase { image: resampled, label: resampled_label, record })
}

impl PreprocessedCase {
    /// Write `<id>_img.mvox`, `<id>_lab.mvox`, `<id>.json` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
        let id = &self.record.case_id;
        self.image.write_mvox(&dir.join(format!("{id}_img.mvox")))?;
        if let Some(lab) = &self.label {
            lab.write_mvox(&dir.join(format!("{id}_lab.mvox")))?;
        }
        let json = serde_json::to_string_pretty(&self.record)
            .map_err(|e| Error::validation(format!("serializing case record: {e}")))?;
        let path = dir.join(format!("{id}.json"));
        fs::write(&path, json).map_err(|e| Error::io_at(&path, e))?;
        Ok(())
    }

    pub fn read_from(dir: &Path, case_id: &str) -> Result<Self> {
        let rec_path = dir.join(format!("{case_id}.json"));
        let text = fs::read_to_string(&rec_path).map_err(|e| Error::io_at(&rec_path, e))?;
        let record: CaseRecord = serde_json::from_str(&text)?;
        let image = Volume::read_mvox(&dir.join(format!("{case_id}_img.mvox")))?;
        let lab_path = dir.join(format!("{case_id}_lab.mvox"));
        let label = if lab_path.exists() { Some(Volume::read_mvox(&lab_path)?) } else { None };
        Ok(PreprocessedCase { image, label, record })
    }
}

/// Preprocess every case of a dataset per the plan: a `fullres/` tree at the
/// plan's target spacing, plus a `lowres/` tree when the plan has a
/// two-stage model. Returns the case ids in descriptor order.
pub fn preprocess_dataset(
    desc: &DatasetDescriptor,
    fingerprint: &DatasetFingerprint,
    plan: &PipelinePlan,
    out_dir: &Path,
) -> Result<Vec<String>> {
    let fullres_dir = out_dir.join(Resolution::Fullres.dir_name());
    fs::create_dir_all(&fullres_dir).map_err(|e| Error::io_at(&fullres_dir, e))?;
    let lowres_dir = out_dir.join(Resolution::Lowres.dir_name());
    if plan.cascade.is_some() {
        fs::create_dir_all(&lowres_dir).map_err(|e| Error::io_at(&lowres_dir, e))?;
    }
    desc.training
        .par_iter()
        .map(|paths| {
            let id = DatasetDescriptor::case_id(paths);
            let image = Volume::read_mvox(&desc.image_path(paths))?;
            let label = Volume::read_mvox(&desc.label_path(paths))?;
            preprocess_case(
                &id,
                &image,
                Some(&label),
                &plan.target_spacing,
                Resolution::Fullres,
                plan.normalization_scheme,
                fingerprint.ct_stats.as_ref(),
                plan.normalize_within_mask,
            )?
            .write_to(&fullres_dir)?;
            if let Some(cascade) = &plan.cascade {
                preprocess_case(
                    &id,
                    &image,
                    Some(&label),
                    &cascade.lowres_spacing,
                    Resolution::Lowres,
                    plan.normalization_scheme,
                    fingerprint.ct_stats.as_ref(),
                    plan.normalize_within_mask,
                )?
                .write_to(&lowres_dir)?;
            }
            Ok(id)
        })
        .collect()
}
