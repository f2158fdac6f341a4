//! Training-time augmentation: oversampled foreground patch extraction, a
//! single composed spatial warp (rotation, scaling, elastic deformation,
//! mirroring), gamma intensity shifts, and the label corruption used to
//! train the refinement stage of the cascade.
//!
//! Geometry runs in voxel coordinates; elastic magnitudes are specified in
//! millimetres and converted per axis through the voxel spacing.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::interp::{flip_axes, gaussian_smooth, sample_catmull_rom, sample_nearest};
use crate::planner::AugmentationConfig;
use crate::postprocess::connected_components;
use crate::volume::Volume;

/// Fraction of each batch guaranteed to contain foreground: ceil(batch / 3).
pub const FORCED_FOREGROUND_DENOM: usize = 3;
pub const MORPH_PROB: f64 = 0.4;
pub const COMPONENT_DROP_PROB: f64 = 0.2;

pub struct TrainingCase<'a> {
    pub image: &'a Volume,
    pub label: &'a Volume,
}

pub struct TrainingSample {
    /// `[channel][voxel]` over the patch.
    pub image: Vec<f32>,
    pub label: Vec<u8>,
    pub channels: usize,
    pub dims: Vec<usize>,
    pub case_index: usize,
    pub forced_foreground: bool,
    /// Foreground was requested but the chosen case contains none.
    pub foreground_missing: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct SampleOptions {
    /// For 2D patches cut from 3D cases: the stacking axis.
    pub slice_axis: usize,
    /// For 3D patches: restrict the warp to in-plane transforms
    /// (slice-wise augmentation of strongly anisotropic patches).
    pub in_plane_only: bool,
}

/// A drawn spatial transform. The source location of an output voxel x is
/// `R^-1 (x - c) / s + c + d(x)` with patch center c, applied in-plane only
/// when the slice mode is active; mirror flips are applied afterwards.
pub struct SpatialTransform {
    pub angles: Vec<f64>,
    pub scale: f64,
    /// Per-axis displacement fields in voxel units, indexed by output voxel
    /// (over the plane only, in slice mode).
    pub elastic: Option<Vec<Vec<f32>>>,
    pub mirror: Vec<usize>,
    /// Some(axis): transform acts within planes orthogonal to this axis.
    pub slice_axis: Option<usize>,
}

impl SpatialTransform {
    pub fn identity(nd: usize) -> Self {
        SpatialTransform {
            angles: vec![0.0; if nd == 2 { 1 } else { 3 }],
            scale: 1.0,
            elastic: None,
            mirror: Vec::new(),
            slice_axis: None,
        }
    }

    /// True when resampling would reproduce the input exactly (mirroring,
    /// which is cheap and lossless, may still be present).
    pub fn is_resample_identity(&self) -> bool {
        self.angles.iter().all(|&a| a == 0.0) && self.scale == 1.0 && self.elastic.is_none()
    }
}

/// Draw transform parameters. In slice mode (2D patch or in-plane-only 3D
/// augmentation) a single in-plane angle is used and the elastic field is
/// two-dimensional, shared by all slices.
pub fn draw_spatial(
    cfg: &AugmentationConfig,
    dims: &[usize],
    spacing: &[f64],
    slice_axis: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> SpatialTransform {
    let nd = dims.len();
    let planar = nd == 2 || slice_axis.is_some();
    let n_angles = if planar { 1 } else { 3 };
    let max_rad = cfg.rotation_deg.to_radians();
    let angles: Vec<f64> = (0..n_angles)
        .map(|_| if max_rad > 0.0 { rng.gen_range(-max_rad..=max_rad) } else { 0.0 })
        .collect();
    let scale = if cfg.scale_range.0 < cfg.scale_range.1 {
        rng.gen_range(cfg.scale_range.0..=cfg.scale_range.1)
    } else {
        cfg.scale_range.0
    };
    let field_axes: Vec<usize> = match slice_axis {
        Some(a) if nd == 3 => (0..3).filter(|&x| x != a).collect(),
        _ => (0..nd).collect(),
    };
    let field_dims: Vec<usize> = field_axes.iter().map(|&a| dims[a]).collect();
    let elastic = if rng.gen_range(0.0..1.0) < cfg.elastic_prob {
        Some(elastic_field(cfg, &field_dims, &field_axes, spacing, rng))
    } else {
        None
    };
    let mirror: Vec<usize> =
        cfg.mirror_axes.iter().copied().filter(|_| rng.gen_range(0.0..1.0) < 0.5).collect();
    SpatialTransform { angles, scale, elastic, mirror, slice_axis }
}

/// Smoothed white noise, peak-normalized, scaled to the configured maximum
/// displacement (converted from mm to voxels per axis).
fn elastic_field(
    cfg: &AugmentationConfig,
    field_dims: &[usize],
    field_axes: &[usize],
    spacing: &[f64],
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f32>> {
    let n: usize = field_dims.iter().product();
    let sigma_vox: Vec<f64> =
        field_axes.iter().map(|&a| cfg.elastic_sigma_mm / spacing[a]).collect();
    field_axes
        .iter()
        .map(|&a| {
            let mut field: Vec<f32> =
                (0..n).map(|_| rng.gen_range(-1.0f32..=1.0)).collect();
            gaussian_smooth(&mut field, field_dims, &sigma_vox);
            let max = field.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
            let amp = (cfg.elastic_max_disp_mm / spacing[a]) as f32;
            if max > 0.0 {
                for v in field.iter_mut() {
                    *v = *v / max * amp;
                }
            }
            field
        })
        .collect()
}

fn rot2(theta: f64) -> [[f64; 2]; 2] {
    let (s, c) = theta.sin_cos();
    [[c, -s], [s, c]]
}

/// Rotation about each coordinate axis in turn: R = R0(a0) R1(a1) R2(a2),
/// where Rk rotates the plane orthogonal to axis k.
fn rot3(angles: &[f64]) -> [[f64; 3]; 3] {
    let planes = [(1usize, 2usize), (0, 2), (0, 1)];
    let mut m = [[0.0; 3]; 3];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for (axis, &(p, q)) in planes.iter().enumerate() {
        let r2 = rot2(angles[axis]);
        let mut elem = [[0.0; 3]; 3];
        for (i, row) in elem.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        elem[p][p] = r2[0][0];
        elem[p][q] = r2[0][1];
        elem[q][p] = r2[1][0];
        elem[q][q] = r2[1][1];
        let mut next = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                next[i][j] = (0..3).map(|k| m[i][k] * elem[k][j]).sum();
            }
        }
        m = next;
    }
    m
}

/// Source coordinates for every output voxel under the transform.
fn source_positions(dims: &[usize], t: &SpatialTransform) -> Vec<Vec<f64>> {
    let nd = dims.len();
    let n: usize = dims.iter().product();
    let center: Vec<f64> = dims.iter().map(|&d| (d as f64 - 1.0) / 2.0).collect();
    let plane_axes: Vec<usize> = match t.slice_axis {
        Some(a) if nd == 3 => (0..3).filter(|&x| x != a).collect(),
        _ => (0..nd).collect(),
    };
    let planar = plane_axes.len() == 2;
    let r2 = if planar { Some(rot2(t.angles[0])) } else { None };
    let r3 = if !planar { Some(rot3(&t.angles)) } else { None };
    let mut out = Vec::with_capacity(n);
    let mut coords = vec![0usize; nd];
    for v in 0..n {
        let mut idx = v;
        for a in (0..nd).rev() {
            coords[a] = idx % dims[a];
            idx /= dims[a];
        }
        let mut src: Vec<f64> = coords.iter().map(|&c| c as f64).collect();
        if let Some(r) = r2 {
            let (p, q) = (plane_axes[0], plane_axes[1]);
            let dp = (coords[p] as f64 - center[p]) / t.scale;
            let dq = (coords[q] as f64 - center[q]) / t.scale;
            // inverse rotation = transpose
            src[p] = r[0][0] * dp + r[1][0] * dq + center[p];
            src[q] = r[0][1] * dp + r[1][1] * dq + center[q];
        } else if let Some(r) = r3 {
            let d: Vec<f64> =
                (0..3).map(|a| (coords[a] as f64 - center[a]) / t.scale).collect();
            for a in 0..3 {
                src[a] = r[0][a] * d[0] + r[1][a] * d[1] + r[2][a] * d[2] + center[a];
            }
        }
        if let Some(fields) = &t.elastic {
            // field index: output position, over the plane in slice mode
            let fi = if planar && nd == 3 {
                coords[plane_axes[0]] * dims[plane_axes[1]] + coords[plane_axes[1]]
            } else {
                v
            };
            for (ai, &a) in plane_axes.iter().enumerate() {
                src[a] += fields[ai][fi] as f64;
            }
        }
        out.push(src);
    }
    out
}

/// Warp multi-channel f32 data (Catmull-Rom sampling, zero outside).
pub fn warp_f32(data: &[f32], channels: usize, dims: &[usize], t: &SpatialTransform) -> Vec<f32> {
    if t.is_resample_identity() {
        let mut out = data.to_vec();
        flip_axes(&mut out, channels, dims, &t.mirror);
        return out;
    }
    let n: usize = dims.iter().product();
    let positions = source_positions(dims, t);
    let mut out = vec![0.0f32; channels * n];
    for c in 0..channels {
        let chan = &data[c * n..(c + 1) * n];
        let dst = &mut out[c * n..(c + 1) * n];
        for (v, pos) in positions.iter().enumerate() {
            dst[v] = sample_catmull_rom(chan, dims, pos);
        }
    }
    flip_axes(&mut out, channels, dims, &t.mirror);
    out
}

/// Warp a labelmap (nearest-neighbor sampling, zero outside).
pub fn warp_u8(data: &[u8], dims: &[usize], t: &SpatialTransform) -> Vec<u8> {
    if t.is_resample_identity() {
        let mut out = data.to_vec();
        flip_axes(&mut out, 1, dims, &t.mirror);
        return out;
    }
    let positions = source_positions(dims, t);
    let mut out: Vec<u8> =
        positions.iter().map(|pos| sample_nearest(data, dims, pos)).collect();
    flip_axes(&mut out, 1, dims, &t.mirror);
    out
}

/// Monotone intensity shift: rescale the channel to [0,1], raise to gamma,
/// rescale back. Minimum and maximum are preserved; constant channels are
/// left untouched.
pub fn apply_gamma(chan: &mut [f32], gamma: f64) {
    let mut mn = f32::INFINITY;
    let mut mx = f32::NEG_INFINITY;
    for &v in chan.iter() {
        mn = mn.min(v);
        mx = mx.max(v);
    }
    let range = mx - mn;
    if !(range > 0.0) {
        return;
    }
    for v in chan.iter_mut() {
        let t = ((*v - mn) / range) as f64;
        *v = mn + range * t.powf(gamma) as f32;
    }
}

/// Extract a patch whose origin may lie (partly) outside the volume; voxels
/// without source data are zero.
pub fn extract_patch_padded(
    image: &Volume,
    label: &Volume,
    origin: &[isize],
    patch: &[usize],
) -> (Vec<f32>, Vec<u8>) {
    let dims = image.shape();
    let nd = dims.len();
    let n_src = image.spatial_len();
    let n_patch: usize = patch.iter().product();
    let channels = image.num_channels();
    let img = image.as_f32();
    let lab = label.as_u8();
    let mut out_img = vec![0.0f32; channels * n_patch];
    let mut out_lab = vec![0u8; n_patch];
    let mut coords = vec![0usize; nd];
    for v in 0..n_patch {
        let mut idx = v;
        for a in (0..nd).rev() {
            coords[a] = idx % patch[a];
            idx /= patch[a];
        }
        let mut src = 0usize;
        let mut inside = true;
        for a in 0..nd {
            let s = origin[a] + coords[a] as isize;
            if s < 0 || s >= dims[a] as isize {
                inside = false;
                break;
            }
            src = src * dims[a] + s as usize;
        }
        if inside {
            for c in 0..channels {
                out_img[c * n_patch + v] = img[c * n_src + src];
            }
            out_lab[v] = lab[src];
        }
    }
    (out_img, out_lab)
}

/// Foreground classes present in a label volume, ascending.
pub fn present_classes(label: &Volume, num_classes: usize) -> Vec<u8> {
    let mut seen = vec![false; num_classes];
    for &l in label.as_u8() {
        if (l as usize) < num_classes {
            seen[l as usize] = true;
        }
    }
    (1..num_classes).filter(|&c| seen[c]).map(|c| c as u8).collect()
}

fn origin_range(dim: usize, patch: usize) -> (isize, isize) {
    let d = dim as isize - patch as isize;
    (d.min(0), d.max(0))
}

/// Draw one augmented training batch. The first ceil(batch/3) samples are
/// centered (up to clamping) on a uniformly chosen voxel of a uniformly
/// chosen foreground class of their case. 2D patches are cut from slices
/// along `opts.slice_axis`.
pub fn sample_batch(
    cases: &[TrainingCase<'_>],
    patch: &[usize],
    batch: usize,
    num_classes: usize,
    cfg: &AugmentationConfig,
    opts: &SampleOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TrainingSample>> {
    if cases.is_empty() {
        return Err(Error::validation("cannot sample from zero cases"));
    }
    let forced = batch.div_ceil(FORCED_FOREGROUND_DENOM);
    let mut out = Vec::with_capacity(batch);
    for i in 0..batch {
        out.push(sample_one(cases, patch, i < forced, num_classes, cfg, opts, rng)?);
    }
    Ok(out)
}

fn sample_one(
    cases: &[TrainingCase<'_>],
    patch: &[usize],
    force_fg: bool,
    num_classes: usize,
    cfg: &AugmentationConfig,
    opts: &SampleOptions,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingSample> {
    let case_index = rng.gen_range(0..cases.len());
    let case = &cases[case_index];
    let dims = case.image.shape().to_vec();
    let nd = dims.len();
    let slicing_2d = patch.len() == 2 && nd == 3;
    if !slicing_2d && patch.len() != nd {
        return Err(Error::validation("patch rank does not match case rank"));
    }

    // choose the patch window (in 3D case coordinates)
    let window_axes: Vec<usize> = if slicing_2d {
        (0..3).filter(|&a| a != opts.slice_axis).collect()
    } else {
        (0..nd).collect()
    };
    let mut origin3 = vec![0isize; nd];
    let mut fg_center: Option<Vec<usize>> = None;
    if force_fg {
        let classes = present_classes(case.label, num_classes);
        if !classes.is_empty() {
            let class = classes[rng.gen_range(0..classes.len())];
            let lab = case.label.as_u8();
            let count = lab.iter().filter(|&&l| l == class).count();
            let target = rng.gen_range(0..count);
            let flat = lab
                .iter()
                .enumerate()
                .filter(|(_, &l)| l == class)
                .nth(target)
                .map(|(i, _)| i)
                .expect("counted above");
            let mut coords = vec![0usize; nd];
            let mut idx = flat;
            for a in (0..nd).rev() {
                coords[a] = idx % dims[a];
                idx /= dims[a];
            }
            fg_center = Some(coords);
        }
    }
    match &fg_center {
        Some(center) => {
            for (pi, &a) in window_axes.iter().enumerate() {
                let (lo, hi) = origin_range(dims[a], patch[pi]);
                origin3[a] =
                    (center[a] as isize - patch[pi] as isize / 2).clamp(lo, hi);
            }
            if slicing_2d {
                origin3[opts.slice_axis] = center[opts.slice_axis] as isize;
            }
        }
        None => {
            for (pi, &a) in window_axes.iter().enumerate() {
                let (lo, hi) = origin_range(dims[a], patch[pi]);
                origin3[a] = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
            }
            if slicing_2d {
                origin3[opts.slice_axis] = rng.gen_range(0..dims[opts.slice_axis]) as isize;
            }
        }
    }

    // extract (2D patches are a one-voxel-thick 3D window, then flattened)
    let extract_patch3: Vec<usize> = if slicing_2d {
        let mut p = vec![1usize; 3];
        for (pi, &a) in window_axes.iter().enumerate() {
            p[a] = patch[pi];
        }
        p
    } else {
        patch.to_vec()
    };
    let (image, label) =
        extract_patch_padded(case.image, case.label, &origin3, &extract_patch3);
    let channels = case.image.num_channels();

    // augment
    let spacing: Vec<f64> = if slicing_2d {
        window_axes.iter().map(|&a| case.image.spacing()[a]).collect()
    } else {
        case.image.spacing().to_vec()
    };
    let slice_axis = (!slicing_2d && patch.len() == 3 && opts.in_plane_only)
        .then_some(opts.slice_axis);
    let t = draw_spatial(cfg, patch, &spacing, slice_axis, rng);
    let mut image_w = warp_f32(&image, channels, patch, &t);
    let label_w = warp_u8(&label, patch, &t);
    let n_patch: usize = patch.iter().product();
    for c in 0..channels {
        let gamma = if cfg.gamma_range.0 < cfg.gamma_range.1 {
            rng.gen_range(cfg.gamma_range.0..=cfg.gamma_range.1)
        } else {
            cfg.gamma_range.0
        };
        apply_gamma(&mut image_w[c * n_patch..(c + 1) * n_patch], gamma);
    }
    Ok(TrainingSample {
        image: image_w,
        label: label_w,
        channels,
        dims: patch.to_vec(),
        case_index,
        forced_foreground: force_fg && fg_center.is_some(),
        foreground_missing: force_fg && fg_center.is_none(),
    })
}

// ---------------------------------------------------------------------------
// Label corruption for the cascade's refinement stage
// ---------------------------------------------------------------------------

/// Separable Chebyshev-ball morphology (window radius r per axis). Outside
/// the volume counts as background, so erosion eats borders.
pub fn chebyshev_morph(mask: &mut Vec<bool>, dims: &[usize], r: usize, dilate: bool) {
    let nd = dims.len();
    let n: usize = dims.iter().product();
    for a in 0..nd {
        let stride: usize = dims[a + 1..].iter().product();
        let extent = dims[a];
        let mut out = vec![false; n];
        for base in 0..n {
            let coord = (base / stride) % extent;
            let line_start = base - coord * stride;
            let lo = coord.saturating_sub(r);
            let hi = (coord + r).min(extent - 1);
            let mut acc = !dilate;
            for k in lo..=hi {
                let v = mask[line_start + k * stride];
                acc = if dilate { acc || v } else { acc && v };
            }
            if !dilate && (coord < r || coord + r > extent - 1) {
                acc = false; // window clipped: outside is background
            }
            out[base] = acc;
        }
        *mask = out;
    }
}

/// Remove one uniformly chosen connected component, unless it is the only
/// one.
pub fn drop_random_component(mask: &mut [bool], dims: &[usize], rng: &mut ChaCha8Rng) {
    let comps = connected_components(mask, dims);
    if comps.len() < 2 {
        return;
    }
    let victim = rng.gen_range(0..comps.len());
    for &v in &comps[victim] {
        mask[v] = false;
    }
}

/// Simulate coarse-stage mistakes on a reference label: per present class,
/// with probability `morph_prob` one random morphological operation (erode,
/// dilate, open, close; radius 1-3), and with probability `drop_prob` one
/// dropped connected component. Classes are composited back in ascending
/// order, later classes overwriting earlier ones where dilation made them
/// overlap, so the result is always a valid labelmap (one-hot per voxel
/// once encoded).
pub fn corrupt_labels(
    label: &[u8],
    dims: &[usize],
    num_classes: usize,
    morph_prob: f64,
    drop_prob: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<u8> {
    let n: usize = dims.iter().product();
    let mut out = vec![0u8; n];
    for class in 1..num_classes as u8 {
        let mut mask: Vec<bool> = label.iter().map(|&l| l == class).collect();
        if !mask.iter().any(|&m| m) {
            continue;
        }
        if rng.gen_range(0.0..1.0) < morph_prob {
            let op = rng.gen_range(0..4u8);
            let r = rng.gen_range(1..=3usize);
            match op {
                0 => chebyshev_morph(&mut mask, dims, r, false),
                1 => chebyshev_morph(&mut mask, dims, r, true),
                2 => {
                    // open: erode then dilate
                    chebyshev_morph(&mut mask, dims, r, false);
                    chebyshev_morph(&mut mask, dims, r, true);
                }
                _ => {
                    // close: dilate then erode
                    chebyshev_morph(&mut mask, dims, r, true);
                    chebyshev_morph(&mut mask, dims, r, false);
                }
            }
        }
        if rng.gen_range(0.0..1.0) < drop_prob {
            drop_random_component(&mut mask, dims, rng);
        }
        for (o, &m) in out.iter_mut().zip(&mask) {
            if m {
                *o = class;
            }
        }
    }
    out
}
