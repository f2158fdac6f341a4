//! Reference predictors used to exercise the pipeline end to end without a
//! neural network: an oracle that echoes the reference segmentation, a
//! constant (uniform) predictor, and a simple fitted intensity-window model.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fingerprint::quantile_sorted;
use crate::inference::{PatchInput, Predictor};
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictorKind {
    Oracle,
    Constant,
    Threshold,
}

impl FromStr for PredictorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "oracle" => Ok(PredictorKind::Oracle),
            "constant" => Ok(PredictorKind::Constant),
            "threshold" => Ok(PredictorKind::Threshold),
            other => Err(Error::validation(format!("unknown predictor: {other}"))),
        }
    }
}

impl std::fmt::Display for PredictorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PredictorKind::Oracle => "oracle",
            PredictorKind::Constant => "constant",
            PredictorKind::Threshold => "threshold",
        })
    }
}

/// Emits the one-hot encoding of the reference label it receives as its
/// trailing input channel. Round-trips the pipeline exactly.
pub struct OraclePredictor {
    pub num_classes: usize,
}

impl Predictor for OraclePredictor {
    fn num_classes(&self) -> usize {
        self.num_classes
    }
    fn needs_label_channel(&self) -> bool {
        true
    }
    fn predict(&self, patch: &PatchInput) -> Result<Vec<f32>> {
        let n: usize = patch.dims.iter().product();
        let labels = &patch.data[(patch.channels - 1) * n..];
        let mut out = vec![0.0f32; self.num_classes * n];
        for (v, &l) in labels.iter().enumerate() {
            let c = (l.round().max(0.0) as usize).min(self.num_classes - 1);
            out[c * n + v] = 1.0;
        }
        Ok(out)
    }
}

/// Uniform probabilities everywhere; a lower bound for sanity checks.
pub struct ConstantPredictor {
    pub num_classes: usize,
}

impl Predictor for ConstantPredictor {
    fn num_classes(&self) -> usize {
        self.num_classes
    }
    fn predict(&self, patch: &PatchInput) -> Result<Vec<f32>> {
        let n: usize = patch.dims.iter().product();
        Ok(vec![1.0 / self.num_classes as f32; self.num_classes * n])
    }
}

/// Fitted intensity-window model: a voxel scores 1 for class k when its
/// first-channel intensity lies within the class's interquartile foreground
/// window from training. The coarse-stage prior, when present, adds half a
/// vote. Scores are normalized into probabilities against a fixed
/// background base score.
#[derive(Debug, Clone)]
pub struct ThresholdPredictor {
    pub num_classes: usize,
    pub image_channels: usize,
    /// Per foreground class (index class-1): (low, high) window, or None if
    /// the class never appeared in training.
    pub windows: Vec<Option<(f32, f32)>>,
    /// Expect `num_classes` prior channels after the image channels.
    pub uses_prior: bool,
}

pub const BACKGROUND_BASE_SCORE: f32 = 0.25;
pub const PRIOR_WEIGHT: f32 = 0.5;

impl ThresholdPredictor {
    /// Pool foreground intensities per class over the training cases and
    /// window them between the 25th and 75th percentile.
    pub fn fit(
        cases: &[(&Volume, &Volume)],
        num_classes: usize,
        uses_prior: bool,
    ) -> Result<Self> {
        if cases.is_empty() {
            return Err(Error::validation("cannot fit a predictor on zero cases"));
        }
        let image_channels = cases[0].0.num_channels();
        let mut pooled: Vec<Vec<f32>> = vec![Vec::new(); num_classes.saturating_sub(1)];
        for (image, label) in cases {
            let n = image.spatial_len();
            let chan = &image.as_f32()[0..n];
            for (v, &l) in label.as_u8().iter().enumerate() {
                if l > 0 && (l as usize) < num_classes {
                    pooled[l as usize - 1].push(chan[v]);
                }
            }
        }
        let windows = pooled
            .into_iter()
            .map(|mut vals| {
                if vals.is_empty() {
                    return None;
                }
                vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                Some((
                    quantile_sorted(&vals, 0.25) as f32,
                    quantile_sorted(&vals, 0.75) as f32,
                ))
            })
            .collect();
        Ok(ThresholdPredictor { num_classes, image_channels, windows, uses_prior })
    }
}

impl Predictor for ThresholdPredictor {
    fn num_classes(&self) -> usize {
        self.num_classes
    }
    fn predict(&self, patch: &PatchInput) -> Result<Vec<f32>> {
        let n: usize = patch.dims.iter().product();
        let expected =
            self.image_channels + if self.uses_prior { self.num_classes } else { 0 };
        if patch.channels != expected {
            return Err(Error::validation(format!(
                "threshold predictor expected {expected} channels, got {}",
                patch.channels
            )));
        }
        let intensity = &patch.data[0..n];
        let prior = self.uses_prior.then(|| &patch.data[self.image_channels * n..]);
        let mut out = vec![0.0f32; self.num_classes * n];
        for v in 0..n {
            let mut sum = 0.0f32;
            for k in 0..self.num_classes {
                let mut s = if k == 0 {
                    BACKGROUND_BASE_SCORE
                } else {
                    match self.windows[k - 1] {
                        Some((lo, hi)) if intensity[v] >= lo && intensity[v] <= hi => 1.0,
                        _ => 0.0,
                    }
                };
                if let Some(prior) = prior {
                    s += PRIOR_WEIGHT * prior[k * n + v];
                }
                out[k * n + v] = s;
                sum += s;
            }
            for k in 0..self.num_classes {
                out[k * n + v] /= sum;
            }
        }
        Ok(out)
    }
}

/// A predictor of any kind, fitted where fitting applies.
pub enum FittedPredictor {
    Oracle(OraclePredictor),
    Constant(ConstantPredictor),
    Threshold(ThresholdPredictor),
}

impl FittedPredictor {
    pub fn fit(
        kind: PredictorKind,
        train_cases: &[(&Volume, &Volume)],
        num_classes: usize,
        uses_prior: bool,
    ) -> Result<Self> {
        Ok(match kind {
            PredictorKind::Oracle => FittedPredictor::Oracle(OraclePredictor { num_classes }),
            PredictorKind::Constant => {
                FittedPredictor::Constant(ConstantPredictor { num_classes })
            }
            PredictorKind::Threshold => FittedPredictor::Threshold(ThresholdPredictor::fit(
                train_cases,
                num_classes,
                uses_prior,
            )?),
        })
    }
}

impl Predictor for FittedPredictor {
    fn num_classes(&self) -> usize {
        match self {
            FittedPredictor::Oracle(p) => p.num_classes(),
            FittedPredictor::Constant(p) => p.num_classes(),
            FittedPredictor::Threshold(p) => p.num_classes(),
        }
    }
    fn needs_label_channel(&self) -> bool {
        match self {
            FittedPredictor::Oracle(p) => p.needs_label_channel(),
            FittedPredictor::Constant(p) => p.needs_label_channel(),
            FittedPredictor::Threshold(p) => p.needs_label_channel(),
        }
    }
    fn predict(&self, patch: &PatchInput) -> Result<Vec<f32>> {
        match self {
            FittedPredictor::Oracle(p) => p.predict(patch),
            FittedPredictor::Constant(p) => p.predict(patch),
            FittedPredictor::Threshold(p) => p.predict(patch),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patch(data: Vec<f32>, channels: usize, dims: &[usize]) -> PatchInput {
        PatchInput { data, channels, dims: dims.to_vec(), offset: vec![0; dims.len()] }
    }

    #[test]
    fn oracle_one_hot() {
        let p = OraclePredictor { num_classes: 3 };
        let input = patch(vec![9.0, 9.0, 0.0, 2.0], 2, &[1, 2]); // ch0 image, ch1 labels
        let probs = p.predict(&input).unwrap();
        assert_eq!(probs, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn threshold_windows_from_quartiles() {
        // class-1 foreground intensities 0..=8: p25 = 2, p75 = 6
        let img = Volume::new_image(
            1,
            vec![1, 9],
            vec![1.0, 1.0],
            (0..9).map(|i| i as f32).collect(),
        )
        .unwrap();
        let lab = Volume::new_labelmap(vec![1, 9], vec![1.0, 1.0], vec![1; 9]).unwrap();
        let t = ThresholdPredictor::fit(&[(&img, &lab)], 2, false).unwrap();
        assert_eq!(t.windows, vec![Some((2.0, 6.0))]);
    }

    #[test]
    fn threshold_separates_two_classes() {
        let img = Volume::new_image(
            1,
            vec![1, 8],
            vec![1.0, 1.0],
            vec![10.0, 10.5, 11.0, 10.2, -10.0, -10.5, -11.0, -10.2],
        )
        .unwrap();
        let lab =
            Volume::new_labelmap(vec![1, 8], vec![1.0, 1.0], vec![1, 1, 1, 1, 2, 2, 2, 2])
                .unwrap();
        let t = ThresholdPredictor::fit(&[(&img, &lab)], 3, false).unwrap();
        let probs = t
            .predict(&patch(vec![10.3, -10.3, 100.0], 1, &[1, 3]))
            .unwrap();
        let n = 3;
        // voxel 0: class 1 window hit -> argmax 1
        assert!(probs[n] > probs[0] && probs[n] > probs[2 * n]);
        // voxel 1: class 2 window hit
        assert!(probs[2 * n + 1] > probs[1] && probs[2 * n + 1] > probs[n + 1]);
        // voxel 2: no window hit: background base score wins
        assert!(probs[2] > probs[n + 2] && probs[2] > probs[2 * n + 2]);
        // probabilities normalized
        for v in 0..3 {
            let s: f32 = (0..3).map(|k| probs[k * n + v]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn prior_breaks_ties_and_defers_to_intensity() {
        let t = ThresholdPredictor {
            num_classes: 2,
            image_channels: 1,
            windows: vec![Some((5.0, 6.0))],
            uses_prior: true,
        };
        // voxel 0: intensity misses window, prior says class 1:
        //   s0 = 0.25, s1 = 0.5 -> class 1
        // voxel 1: intensity misses window, prior says background:
        //   s0 = 0.25 + 0.5 = 0.75, s1 = 0 -> background
        // voxel 2: window hit beats background even with background prior
        let data = vec![
            0.0, 0.0, 5.5, // intensity channel
            0.0, 1.0, 1.0, // prior class 0
            1.0, 0.0, 0.0, // prior class 1
        ];
        let probs = t.predict(&patch(data, 3, &[1, 3])).unwrap();
        let n = 3;
        assert!(probs[n] > probs[0]);
        assert!(probs[1] > probs[n + 1]);
        assert!(probs[n + 2] > probs[2]);
    }

    #[test]
    fn channel_count_is_validated() {
        let t = ThresholdPredictor {
            num_classes: 2,
            image_channels: 1,
            windows: vec![None],
            uses_prior: true,
        };
        assert!(t.predict(&patch(vec![0.0], 1, &[1, 1])).is_err());
    }

    #[test]
    fn missing_class_window_scores_zero() {
        let t = ThresholdPredictor {
            num_classes: 2,
            image_channels: 1,
            windows: vec![None],
            uses_prior: false,
        };
        let probs = t.predict(&patch(vec![42.0], 1, &[1, 1])).unwrap();
        assert_eq!(probs[1], 0.0);
        assert_eq!(probs[0], 1.0);
    }
}
