//! Sliding-window inference with Gaussian patch blending and mirror
//! test-time augmentation, plus the ensembling, dice, and model-selection
//! machinery built on top of it.

use std::fmt;

use crate::error::{Error, Result};
use crate::interp::flip_axes;
use crate::planner::ModelId;
use crate::volume::Volume;

/// Patch weights fall off with distance from the center; this is the
/// standard deviation as a fraction of the patch extent.
pub const WEIGHT_SIGMA_FRACTION: f64 = 1.0 / 8.0;
/// Weights are normalized to peak 1 and floored here so border voxels
/// never drown in the division.
pub const WEIGHT_FLOOR: f64 = 1e-3;

/// One network input: image channels (plus any extra channels such as a
/// coarse-stage prior or an oracle's label), in `[channel][voxel]` layout.
pub struct PatchInput {
    pub data: Vec<f32>,
    pub channels: usize,
    pub dims: Vec<usize>,
    /// Patch origin in original-volume coordinates (negative inside the
    /// zero padding).
    pub offset: Vec<isize>,
}

/// A segmentation model: maps a patch to per-class probabilities
/// (`[class][voxel]`, same spatial dims as the input).
pub trait Predictor: Sync {
    fn num_classes(&self) -> usize;
    /// Oracle-style predictors receive the reference label as one extra
    /// trailing input channel so that tiling and mirroring stay transparent.
    fn needs_label_channel(&self) -> bool {
        false
    }
    fn predict(&self, patch: &PatchInput) -> Result<Vec<f32>>;
}

/// Tile origins along one axis: stride of half a patch, clamped flush to the
/// far edge. `extent >= patch` is the caller's responsibility (padding).
pub fn tile_positions(extent: usize, patch: usize) -> Vec<usize> {
    debug_assert!(extent >= patch && patch > 0);
    let step = (patch / 2).max(1);
    let last = extent - patch;
    let mut out = Vec::new();
    let mut k = 0;
    loop {
        let pos = (k * step).min(last);
        out.push(pos);
        if pos == last {
            break;
        }
        k += 1;
    }
    out
}

/// Separable Gaussian importance map over a patch, peak-normalized to 1 and
/// floored at `WEIGHT_FLOOR`.
pub fn gaussian_weights(patch: &[usize]) -> Vec<f64> {
    let axis_weights: Vec<Vec<f64>> = patch
        .iter()
        .map(|&n| {
            let sigma = (n as f64 * WEIGHT_SIGMA_FRACTION).max(f64::MIN_POSITIVE);
            let center = (n as f64 - 1.0) / 2.0;
            (0..n)
                .map(|i| {
                    let d = (i as f64 - center) / sigma;
                    (-0.5 * d * d).exp()
                })
                .collect()
        })
        .collect();
    let n_total: usize = patch.iter().product();
    let mut out = vec![0.0f64; n_total];
    for (v, w) in out.iter_mut().enumerate() {
        let mut idx = v;
        let mut acc = 1.0;
        for a in (0..patch.len()).rev() {
            acc *= axis_weights[a][idx % patch[a]];
            idx /= patch[a];
        }
        *w = acc;
    }
    let max = out.iter().cloned().fold(f64::MIN, f64::max);
    for w in out.iter_mut() {
        *w = (*w / max).max(WEIGHT_FLOOR);
    }
    out
}

/// The 2^n mirror variants of the given axes, in deterministic order:
/// variant m flips axis `axes[i]` iff bit i of m is set.
pub fn mirror_variants(axes: &[usize]) -> Vec<Vec<usize>> {
    let n = axes.len();
    (0..(1usize << n))
        .map(|m| (0..n).filter(|&i| m >> i & 1 == 1).map(|i| axes[i]).collect())
        .collect()
}

/// How many (tile, mirror-variant) predictions cover `voxel`.
pub fn prediction_count_at(
    dims: &[usize],
    patch: &[usize],
    voxel: &[usize],
    num_variants: usize,
) -> u64 {
    let mut tiles = 1u64;
    for a in 0..dims.len() {
        let extent = dims[a].max(patch[a]);
        let cover = tile_positions(extent, patch[a])
            .into_iter()
            .filter(|&p| p <= voxel[a] && voxel[a] < p + patch[a])
            .count() as u64;
        tiles *= cover;
    }
    tiles * num_variants as u64
}

struct Padded {
    data: Vec<f32>,
    channels: usize,
    dims: Vec<usize>,
    pad_before: Vec<usize>,
}

/// Zero-pad spatially (centered, extra voxel goes to the far side) so every
/// axis reaches at least the patch extent.
fn pad_to_patch(data: &[f32], channels: usize, dims: &[usize], patch: &[usize]) -> Padded {
    let out_dims: Vec<usize> = dims.iter().zip(patch).map(|(&d, &p)| d.max(p)).collect();
    let pad_before: Vec<usize> =
        dims.iter().zip(&out_dims).map(|(&d, &o)| (o - d) / 2).collect();
    if out_dims == dims {
        return Padded { data: data.to_vec(), channels, dims: out_dims, pad_before };
    }
    let n_in: usize = dims.iter().product();
    let n_out: usize = out_dims.iter().product();
    let mut out = vec![0.0f32; channels * n_out];
    // walk source voxels, scatter into padded layout
    for c in 0..channels {
        for v in 0..n_in {
            let mut idx = v;
            let mut coords = vec![0usize; dims.len()];
            for a in (0..dims.len()).rev() {
                coords[a] = idx % dims[a];
                idx /= dims[a];
            }
            let mut dst = 0usize;
            for a in 0..dims.len() {
                dst = dst * out_dims[a] + coords[a] + pad_before[a];
            }
            out[c * n_out + dst] = data[c * n_in + v];
        }
    }
    Padded { data: out, channels, dims: out_dims, pad_before }
}

fn extract_patch(
    src: &Padded,
    pos: &[usize],
    patch: &[usize],
) -> Vec<f32> {
    let n_src: usize = src.dims.iter().product();
    let n_patch: usize = patch.iter().product();
    let mut out = Vec::with_capacity(src.channels * n_patch);
    match src.dims.len() {
        2 => {
            for c in 0..src.channels {
                let chan = &src.data[c * n_src..(c + 1) * n_src];
                for y in 0..patch[0] {
                    let row = (pos[0] + y) * src.dims[1] + pos[1];
                    out.extend_from_slice(&chan[row..row + patch[1]]);
                }
            }
        }
        3 => {
            for c in 0..src.channels {
                let chan = &src.data[c * n_src..(c + 1) * n_src];
                for z in 0..patch[0] {
                    for y in 0..patch[1] {
                        let row =
                            ((pos[0] + z) * src.dims[1] + pos[1] + y) * src.dims[2] + pos[2];
                        out.extend_from_slice(&chan[row..row + patch[2]]);
                    }
                }
            }
        }
        _ => unreachable!(),
    }
    out
}

/// Predict a whole volume by tiling patches (stride half a patch), weighting
/// each prediction with a Gaussian importance map, optionally averaging over
/// all mirror variants, and renormalizing per voxel.
pub fn predict_volume(
    predictor: &dyn Predictor,
    image: &Volume,
    label_hint: Option<&Volume>,
    extra_channels: Option<&Volume>,
    patch: &[usize],
    mirror_axes: &[usize],
    tta: bool,
) -> Result<Volume> {
    let nd = image.ndim();
    if patch.len() != nd {
        return Err(Error::validation("patch rank does not match volume rank"));
    }
    let k = predictor.num_classes();
    let n_orig = image.spatial_len();

    // assemble the network input: image channels, then any prior channels,
    // then (for oracle predictors) the reference label as f32
    let mut channels = image.num_channels();
    let mut data = image.as_f32().to_vec();
    if let Some(extra) = extra_channels {
        if extra.shape() != image.shape() {
            return Err(Error::validation("extra channel shape mismatch"));
        }
        data.extend_from_slice(extra.as_f32());
        channels += extra.num_channels();
    }
    if predictor.needs_label_channel() {
        let hint = label_hint.ok_or_else(|| {
            Error::validation("this predictor requires a reference label volume")
        })?;
        if hint.shape() != image.shape() {
            return Err(Error::validation("label hint shape mismatch"));
        }
        data.extend(hint.as_u8().iter().map(|&v| v as f32));
        channels += 1;
    }

    let padded = pad_to_patch(&data, channels, image.shape(), patch);
    let n_pad: usize = padded.dims.iter().product();
    let n_patch: usize = patch.iter().product();
    let weights = gaussian_weights(patch);
    let variants: Vec<Vec<usize>> =
        if tta { mirror_variants(mirror_axes) } else { vec![Vec::new()] };

    let axis_positions: Vec<Vec<usize>> = (0..nd)
        .map(|a| tile_positions(padded.dims[a], patch[a]))
        .collect();
    let mut tiles: Vec<Vec<usize>> = vec![Vec::new()];
    for positions in &axis_positions {
        let mut next = Vec::with_capacity(tiles.len() * positions.len());
        for t in &tiles {
            for &p in positions {
                let mut t2 = t.clone();
                t2.push(p);
                next.push(t2);
            }
        }
        tiles = next;
    }

    let mut num = vec![0.0f64; k * n_pad];
    let mut den = vec![0.0f64; n_pad];
    for pos in &tiles {
        let base_patch = extract_patch(&padded, pos, patch);
        for flip in &variants {
            let mut input = base_patch.clone();
            flip_axes(&mut input, channels, patch, flip);
            let probs = predictor.predict(&PatchInput {
                data: input,
                channels,
                dims: patch.to_vec(),
                offset: pos
                    .iter()
                    .zip(&padded.pad_before)
                    .map(|(&p, &b)| p as isize - b as isize)
                    .collect(),
            })?;
            if probs.len() != k * n_patch {
                return Err(Error::validation(format!(
                    "predictor returned {} values, expected {} classes x {} voxels",
                    probs.len(),
                    k,
                    n_patch
                )));
            }
            let mut probs = probs;
            flip_axes(&mut probs, k, patch, flip);
            // scatter-accumulate into the padded accumulators
            accumulate(&mut num, &mut den, &probs, &weights, &padded.dims, pos, patch, k);
        }
    }

    // normalize, strip padding, renormalize the class simplex
    let mut out = vec![0.0f32; k * n_orig];
    let dims = image.shape();
    for v in 0..n_orig {
        // map original-volume voxel v to its padded-volume index
        let mut coords = vec![0usize; nd];
        let mut idx = v;
        for a in (0..nd).rev() {
            coords[a] = idx % dims[a];
            idx /= dims[a];
        }
        let mut dst = 0usize;
        for a in 0..nd {
            dst = dst * padded.dims[a] + coords[a] + padded.pad_before[a];
        }
        let d = den[dst];
        let mut sum = 0.0f64;
        let mut vals = vec![0.0f64; k];
        for c in 0..k {
            let p = if d > 0.0 { num[c * n_pad + dst] / d } else { 0.0 };
            vals[c] = p.max(0.0);
            sum += vals[c];
        }
        for c in 0..k {
            out[c * n_orig + v] =
                if sum > 0.0 { (vals[c] / sum) as f32 } else { 1.0 / k as f32 };
        }
    }
    Volume::new_softmax(k, dims.to_vec(), image.spacing().to_vec(), out)
}

#[allow(clippy::too_many_arguments)]
fn accumulate(
    num: &mut [f64],
    den: &mut [f64],
    probs: &[f32],
    weights: &[f64],
    padded_dims: &[usize],
    pos: &[usize],
    patch: &[usize],
    k: usize,
) {
    let n_pad: usize = padded_dims.iter().product();
    let n_patch: usize = patch.iter().product();
    match padded_dims.len() {
        2 => {
            let mut local = 0usize;
            for y in 0..patch[0] {
                let row = (pos[0] + y) * padded_dims[1] + pos[1];
                for x in 0..patch[1] {
                    let g = row + x;
                    let w = weights[local];
                    den[g] += w;
                    for c in 0..k {
                        num[c * n_pad + g] += w * probs[c * n_patch + local] as f64;
                    }
                    local += 1;
                }
            }
        }
        3 => {
            let mut local = 0usize;
            for z in 0..patch[0] {
                for y in 0..patch[1] {
                    let row = ((pos[0] + z) * padded_dims[1] + pos[1] + y) * padded_dims[2]
                        + pos[2];
                    for x in 0..patch[2] {
                        let g = row + x;
                        let w = weights[local];
                        den[g] += w;
                        for c in 0..k {
                            num[c * n_pad + g] += w * probs[c * n_patch + local] as f64;
                        }
                        local += 1;
                    }
                }
            }
        }
        _ => unreachable!(),
    }
}

/// Run a 2D predictor over a 3D volume slice by slice along `slice_axis`.
pub fn predict_slicewise(
    predictor: &dyn Predictor,
    image: &Volume,
    label_hint: Option<&Volume>,
    extra_channels: Option<&Volume>,
    slice_axis: usize,
    patch_2d: &[usize],
    tta: bool,
) -> Result<Volume> {
    if image.ndim() != 3 {
        return Err(Error::validation("slice-wise prediction requires a 3D volume"));
    }
    let k = predictor.num_classes();
    let dims = image.shape().to_vec();
    let n = image.spatial_len();
    let plane_axes: Vec<usize> = (0..3).filter(|&a| a != slice_axis).collect();
    let plane_dims = [dims[plane_axes[0]], dims[plane_axes[1]]];
    let plane_spacing =
        vec![image.spacing()[plane_axes[0]], image.spacing()[plane_axes[1]]];
    let mut out = vec![0.0f32; k * n];
    for s in 0..dims[slice_axis] {
        let slice_img = extract_slice_f32(image, slice_axis, s, &plane_dims)?;
        let img2d = Volume::new_image(
            image.num_channels(),
            plane_dims.to_vec(),
            plane_spacing.clone(),
            slice_img,
        )?;
        let lab2d = match label_hint {
            Some(lab) => {
                let data = extract_slice_u8(lab, slice_axis, s, &plane_dims)?;
                Some(Volume::new_labelmap(plane_dims.to_vec(), plane_spacing.clone(), data)?)
            }
            None => None,
        };
        let extra2d = match extra_channels {
            Some(extra) => {
                let data = extract_slice_f32(extra, slice_axis, s, &plane_dims)?;
                Some(Volume::new_image(
                    extra.num_channels(),
                    plane_dims.to_vec(),
                    plane_spacing.clone(),
                    data,
                )?)
            }
            None => None,
        };
        let probs = predict_volume(
            predictor,
            &img2d,
            lab2d.as_ref(),
            extra2d.as_ref(),
            patch_2d,
            &[0, 1],
            tta,
        )?;
        insert_slice(&mut out, &dims, k, slice_axis, s, probs.as_f32());
    }
    Volume::new_softmax(k, dims, image.spacing().to_vec(), out)
}

fn slice_index_iter(
    dims: &[usize],
    slice_axis: usize,
    s: usize,
) -> impl Iterator<Item = usize> + '_ {
    let plane_axes: Vec<usize> = (0..3).filter(|&a| a != slice_axis).collect();
    let (p0, p1) = (plane_axes[0], plane_axes[1]);
    let (n0, n1) = (dims[p0], dims[p1]);
    (0..n0 * n1).map(move |i| {
        let c0 = i / n1;
        let c1 = i % n1;
        let mut coords = [0usize; 3];
        coords[slice_axis] = s;
        coords[p0] = c0;
        coords[p1] = c1;
        (coords[0] * dims[1] + coords[1]) * dims[2] + coords[2]
    })
}

fn extract_slice_f32(
    vol: &Volume,
    slice_axis: usize,
    s: usize,
    plane_dims: &[usize; 2],
) -> Result<Vec<f32>> {
    let n = vol.spatial_len();
    let plane_n = plane_dims[0] * plane_dims[1];
    let data = vol.as_f32();
    let mut out = Vec::with_capacity(vol.num_channels() * plane_n);
    for c in 0..vol.num_channels() {
        let chan = &data[c * n..(c + 1) * n];
        out.extend(slice_index_iter(vol.shape(), slice_axis, s).map(|i| chan[i]));
    }
    Ok(out)
}

fn extract_slice_u8(
    vol: &Volume,
    slice_axis: usize,
    s: usize,
    plane_dims: &[usize; 2],
) -> Result<Vec<u8>> {
    let plane_n = plane_dims[0] * plane_dims[1];
    let data = vol.as_u8();
    let mut out = Vec::with_capacity(plane_n);
    out.extend(slice_index_iter(vol.shape(), slice_axis, s).map(|i| data[i]));
    Ok(out)
}

fn insert_slice(
    out: &mut [f32],
    dims: &[usize],
    k: usize,
    slice_axis: usize,
    s: usize,
    slice_probs: &[f32],
) {
    let n: usize = dims.iter().product();
    let plane_n = slice_probs.len() / k;
    for c in 0..k {
        for (i, global) in slice_index_iter(dims, slice_axis, s).enumerate() {
            out[c * n + global] = slice_probs[c * plane_n + i];
        }
    }
}

/// Voxel-wise mean of softmax volumes.
pub fn ensemble(volumes: &[&Volume]) -> Result<Volume> {
    let first = volumes.first().ok_or_else(|| Error::validation("empty ensemble"))?;
    for v in volumes {
        if v.shape() != first.shape() || v.num_channels() != first.num_channels() {
            return Err(Error::validation("ensemble members disagree in shape"));
        }
    }
    let len = first.as_f32().len();
    let mut acc = vec![0.0f64; len];
    for v in volumes {
        for (a, &x) in acc.iter_mut().zip(v.as_f32()) {
            *a += x as f64;
        }
    }
    let scale = 1.0 / volumes.len() as f64;
    let data: Vec<f32> = acc.into_iter().map(|a| (a * scale) as f32).collect();
    Volume::new_softmax(
        first.num_channels(),
        first.shape().to_vec(),
        first.spacing().to_vec(),
        data,
    )
}

/// Hard labels from softmax: highest probability wins, lowest class index
/// breaking ties.
pub fn argmax_labels(softmax: &Volume) -> Volume {
    let k = softmax.num_channels();
    let n = softmax.spatial_len();
    let data = softmax.as_f32();
    let mut labels = vec![0u8; n];
    for (v, lab) in labels.iter_mut().enumerate() {
        let mut best = 0usize;
        let mut best_p = data[v];
        for c in 1..k {
            let p = data[c * n + v];
            if p > best_p {
                best_p = p;
                best = c;
            }
        }
        *lab = best as u8;
    }
    Volume::new_labelmap(softmax.shape().to_vec(), softmax.spacing().to_vec(), labels)
        .expect("argmax of a valid softmax is a valid labelmap")
}

/// Dice overlap of one class between two labelmaps; 1.0 when the class is
/// absent from both.
pub fn dice_score(a: &Volume, b: &Volume, class: u8) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::validation("dice requires equal shapes"));
    }
    let mut inter = 0u64;
    let mut total = 0u64;
    for (&x, &y) in a.as_u8().iter().zip(b.as_u8()) {
        let xa = (x == class) as u64;
        let yb = (y == class) as u64;
        inter += xa & yb;
        total += xa + yb;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Mean dice over all foreground classes.
pub fn mean_foreground_dice(pred: &Volume, truth: &Volume, num_classes: usize) -> Result<f64> {
    let mut sum = 0.0;
    for class in 1..num_classes {
        sum += dice_score(pred, truth, class as u8)?;
    }
    Ok(sum / (num_classes - 1).max(1) as f64)
}

/// A model-selection candidate: one model or an equal-weight pair ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Candidate {
    Single(ModelId),
    Pair(ModelId, ModelId),
}

impl fmt::Display for Candidate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Candidate::Single(m) => write!(f, "{m}"),
            Candidate::Pair(a, b) => write!(f, "ENS({a},{b})"),
        }
    }
}

impl Candidate {
    pub fn parse(s: &str) -> Result<Self> {
        if let Some(inner) = s.strip_prefix("ENS(").and_then(|r| r.strip_suffix(')')) {
            let mut parts = inner.splitn(2, ',');
            let a = parts.next().unwrap_or("").trim().parse()?;
            let b = parts
                .next()
                .ok_or_else(|| Error::validation(format!("malformed candidate: {s}")))?
                .trim()
                .parse()?;
            Ok(Candidate::Pair(a, b))
        } else {
            Ok(Candidate::Single(s.trim().parse()?))
        }
    }
}

/// All candidates for the given trained models, in canonical order. The
/// order is the tie-break: earlier entries win equal scores.
pub fn candidate_order(models: &[ModelId]) -> Vec<Candidate> {
    let has = |m: ModelId| models.contains(&m);
    let mut out = Vec::new();
    for m in [ModelId::U3d, ModelId::Cascade, ModelId::U2d] {
        if has(m) {
            out.push(Candidate::Single(m));
        }
    }
    for (a, b) in [
        (ModelId::U2d, ModelId::U3d),
        (ModelId::U2d, ModelId::Cascade),
        (ModelId::U3d, ModelId::Cascade),
    ] {
        if has(a) && has(b) {
            out.push(Candidate::Pair(a, b));
        }
    }
    out
}

/// Pick the candidate with the highest score; on ties the earliest stays.
pub fn select_best(scored: &[(Candidate, f64)]) -> Result<Candidate> {
    let mut best: Option<(Candidate, f64)> = None;
    for &(c, s) in scored {
        match best {
            None => best = Some((c, s)),
            Some((_, bs)) if s > bs => best = Some((c, s)),
            _ => {}
        }
    }
    best.map(|(c, _)| c).ok_or_else(|| Error::validation("no candidates to select from"))
}
