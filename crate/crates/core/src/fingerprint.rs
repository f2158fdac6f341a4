//! Dataset fingerprint: the statistics extracted from a training corpus that
//! drive every downstream configuration decision. Built case by case so a
//! large corpus never has to be resident at once (pooled CT foreground
//! intensities are the one per-voxel quantity kept).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::descriptor::DatasetDescriptor;
use crate::error::{Error, Result};
use crate::postprocess::count_components;
use crate::preprocess::crop_to_nonzero;
use crate::volume::Volume;

/// Pooled foreground intensity statistics for CT datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtStats {
    pub mean: f64,
    pub sd: f64,
    pub p0_5: f64,
    pub p99_5: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFingerprint {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub num_cases: usize,
    pub median_spacing: Vec<f64>,
    /// Per-axis median of the per-case crop shapes after (virtual) resampling
    /// to the median spacing.
    pub median_shape_resampled: Vec<usize>,
    /// Total cropped voxels over total original voxels, pooled across cases.
    pub crop_reduction: f64,
    pub is_ct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ct_stats: Option<CtStats>,
    /// Foreground classes that form exactly one connected component in every
    /// training case that contains them (full neighborhood connectivity).
    pub single_component_classes: Vec<u8>,
    /// num_cases times the voxel count of the median resampled shape.
    pub dataset_voxels: u64,
}

/// Streaming accumulator: feed every training case once, then `finish`.
pub struct FingerprintBuilder {
    num_classes: usize,
    is_ct: bool,
    ndim: Option<usize>,
    spacings: Vec<Vec<f64>>,
    cropped_shapes: Vec<Vec<usize>>,
    original_voxels: u64,
    cropped_voxels: u64,
    fg_values: Vec<f32>,
    /// Index c-1 for class c: (cases containing c, still single-component).
    class_seen: Vec<(u64, bool)>,
    num_cases: usize,
}

impl FingerprintBuilder {
    pub fn new(num_classes: usize, is_ct: bool) -> Self {
        let fg = num_classes.saturating_sub(1);
        FingerprintBuilder {
            num_classes,
            is_ct,
            ndim: None,
            spacings: Vec::new(),
            cropped_shapes: Vec::new(),
            original_voxels: 0,
            cropped_voxels: 0,
            fg_values: Vec::new(),
            class_seen: vec![(0, true); fg],
            num_cases: 0,
        }
    }

    pub fn add_case(&mut self, image: &Volume, label: &Volume) -> Result<()> {
        if image.shape() != label.shape() {
            return Err(Error::validation(format!(
                "image shape {:?} and label shape {:?} disagree",
                image.shape(),
                label.shape()
            )));
        }
        if image.spacing() != label.spacing() {
            return Err(Error::validation("image and label spacing disagree"));
        }
        match self.ndim {
            None => self.ndim = Some(image.ndim()),
            Some(d) if d != image.ndim() => {
                return Err(Error::validation("cases mix 2D and 3D volumes"))
            }
            _ => {}
        }
        label.validate_labels(self.num_classes)?;

        let cropped = crop_to_nonzero(image, None)?;
        self.spacings.push(image.spacing().to_vec());
        self.cropped_shapes.push(cropped.image.shape().to_vec());
        self.original_voxels += image.spatial_len() as u64;
        self.cropped_voxels += cropped.image.spatial_len() as u64;

        if self.is_ct {
            let n = image.spatial_len();
            let data = image.as_f32();
            let labels = label.as_u8();
            for c in 0..image.num_channels() {
                let chan = &data[c * n..(c + 1) * n];
                for (v, &l) in labels.iter().enumerate() {
                    if l > 0 {
                        let x = chan[v];
                        if !x.is_finite() {
                            return Err(Error::validation(
                                "non-finite intensity at a foreground voxel",
                            ));
                        }
                        self.fg_values.push(x);
                    }
                }
            }
        }

        for class in 1..self.num_classes as u8 {
            let comps = count_components(label, class);
            if comps > 0 {
                let slot = &mut self.class_seen[class as usize - 1];
                slot.0 += 1;
                if comps != 1 {
                    slot.1 = false;
                }
            }
        }

        self.num_cases += 1;
        Ok(())
    }

    pub fn finish(self, name: Option<String>) -> Result<DatasetFingerprint> {
        if self.num_cases == 0 {
            return Err(Error::validation("fingerprint requires at least one case"));
        }
        let ndim = self.ndim.unwrap();
        let median_spacing: Vec<f64> = (0..ndim)
            .map(|a| {
                let mut vals: Vec<f64> = self.spacings.iter().map(|s| s[a]).collect();
                vals.sort_by(|x, y| x.partial_cmp(y).unwrap());
                vals[(vals.len() - 1) / 2]
            })
            .collect();
        let resampled: Vec<Vec<usize>> = self
            .cropped_shapes
            .iter()
            .zip(&self.spacings)
            .map(|(shape, sp)| {
                (0..ndim)
                    .map(|a| {
                        let e = shape[a] as f64 * sp[a] / median_spacing[a];
                        (e.round() as usize).max(1)
                    })
                    .collect()
            })
            .collect();
        let median_shape_resampled: Vec<usize> = (0..ndim)
            .map(|a| {
                let mut vals: Vec<usize> = resampled.iter().map(|s| s[a]).collect();
                vals.sort_unstable();
                vals[(vals.len() - 1) / 2]
            })
            .collect();
        let crop_reduction = self.cropped_voxels as f64 / self.original_voxels as f64;
        let ct_stats = if self.is_ct {
            let mut vals = self.fg_values;
            if vals.is_empty() {
                return Err(Error::validation(
                    "CT dataset has no foreground voxels to derive intensity statistics from",
                ));
            }
            // Sort first: the statistics then cannot depend on case order.
            vals.sort_by(|x, y| x.partial_cmp(y).unwrap());
            let n = vals.len();
            let sum: f64 = vals.iter().map(|&v| v as f64).sum();
            let mean = sum / n as f64;
            let ss: f64 = vals.iter().map(|&v| (v as f64 - mean).powi(2)).sum();
            let sd = (ss / n as f64).sqrt();
            Some(CtStats {
                mean,
                sd,
                p0_5: quantile_sorted(&vals, 0.005),
                p99_5: quantile_sorted(&vals, 0.995),
            })
        } else {
            None
        };
        let single_component_classes: Vec<u8> = self
            .class_seen
            .iter()
            .enumerate()
            .filter(|(_, (cases, single))| *cases > 0 && *single)
            .map(|(i, _)| (i + 1) as u8)
            .collect();
        let voxels: u64 = median_shape_resampled.iter().map(|&d| d as u64).product();
        Ok(DatasetFingerprint {
            name,
            num_cases: self.num_cases,
            median_spacing,
            median_shape_resampled,
            crop_reduction,
            is_ct: self.is_ct,
            ct_stats,
            single_component_classes,
            dataset_voxels: self.num_cases as u64 * voxels,
        })
    }
}

/// Linear-interpolation quantile of an ascending-sorted slice:
/// position q*(n-1), interpolated between the bracketing order statistics.
pub fn quantile_sorted(sorted: &[f32], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] as f64 * (1.0 - frac) + sorted[hi] as f64 * frac
}

/// Build the fingerprint for a dataset on disk (descriptor plus `.mvox`
/// volumes). Cases are processed in the descriptor's order; the result is
/// order-independent by construction.
pub fn fingerprint_dataset(desc: &DatasetDescriptor) -> Result<DatasetFingerprint> {
    let mut builder = FingerprintBuilder::new(desc.num_classes(), desc.is_ct());
    for case in &desc.training {
        let image = Volume::read_mvox(&desc.root.join(&case.image))?;
        let label = Volume::read_mvox(&desc.root.join(&case.label))?;
        builder.add_case(&image, &label).map_err(|e| match e {
            Error::Validation(msg) => {
                Error::validation(format!("case {}: {msg}", case.image))
            }
            other => other,
        })?;
    }
    builder.finish(Some(desc.name.clone()))
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_f64_list(vals: &[f64]) -> String {
    let parts: Vec<String> = vals.iter().map(|&v| fmt_f64(v)).collect();
    format!("[{}]", parts.join(", "))
}

fn fmt_usize_list(vals: &[usize]) -> String {
    let parts: Vec<String> = vals.iter().map(|v| v.to_string()).collect();
    format!("[{}]", parts.join(", "))
}

impl DatasetFingerprint {
    /// Canonical JSON encoding: fixed key order, floats printed with 17
    /// significant digits so the value round-trips bit-exactly and the byte
    /// output is stable across runs and platforms.
    pub fn to_json_string(&self) -> String {
        let mut s = String::from("{\n");
        if let Some(name) = &self.name {
            s.push_str(&format!(
                "  \"name\": {},\n",
                serde_json::to_string(name).expect("strings always serialize")
            ));
        }
        s.push_str(&format!("  \"num_cases\": {},\n", self.num_cases));
        s.push_str(&format!("  \"median_spacing\": {},\n", fmt_f64_list(&self.median_spacing)));
        s.push_str(&format!(
            "  \"median_shape_resampled\": {},\n",
            fmt_usize_list(&self.median_shape_resampled)
        ));
        s.push_str(&format!("  \"crop_reduction\": {},\n", fmt_f64(self.crop_reduction)));
        s.push_str(&format!("  \"is_ct\": {},\n", self.is_ct));
        match &self.ct_stats {
            Some(st) => {
                s.push_str("  \"ct_stats\": {\n");
                s.push_str(&format!("    \"mean\": {},\n", fmt_f64(st.mean)));
                s.push_str(&format!("    \"sd\": {},\n", fmt_f64(st.sd)));
                s.push_str(&format!("    \"p0_5\": {},\n", fmt_f64(st.p0_5)));
                s.push_str(&format!("    \"p99_5\": {}\n", fmt_f64(st.p99_5)));
                s.push_str("  },\n");
            }
            None => s.push_str("  \"ct_stats\": null,\n"),
        }
        let classes: Vec<String> =
            self.single_component_classes.iter().map(|c| c.to_string()).collect();
        s.push_str(&format!("  \"single_component_classes\": [{}],\n", classes.join(", ")));
        s.push_str(&format!("  \"dataset_voxels\": {}\n", self.dataset_voxels));
        s.push_str("}\n");
        s
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json_string()).map_err(|e| Error::io_at(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        Self::from_json_str(&text)
    }
}
