//! Training-side numerics: softmax, soft dice + cross-entropy loss with
//! analytic gradients, and the plateau-driven learning-rate schedule.
//!
//! Losses run in f64. Dice is averaged over all classes including
//! background; with `batch_dice` the whole batch is pooled into a single
//! region per class, otherwise per-sample losses are averaged.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DICE_EPS: f64 = 1e-5;
pub const CE_PROB_FLOOR: f64 = 1e-12;

pub struct LossInput<'a> {
    /// Logits, layout `[batch][class][voxel]`.
    pub logits: &'a [f64],
    /// Class indices, layout `[batch][voxel]`.
    pub targets: &'a [u8],
    pub batch: usize,
    pub num_classes: usize,
    pub spatial_len: usize,
}

impl LossInput<'_> {
    fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.num_classes == 0 || self.spatial_len == 0 {
            return Err(Error::validation("loss input dimensions must be nonzero"));
        }
        if self.logits.len() != self.batch * self.num_classes * self.spatial_len {
            return Err(Error::validation(format!(
                "logits length {} does not match batch {} x classes {} x voxels {}",
                self.logits.len(),
                self.batch,
                self.num_classes,
                self.spatial_len
            )));
        }
        if self.targets.len() != self.batch * self.spatial_len {
            return Err(Error::validation("targets length does not match batch x voxels"));
        }
        if self.logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("logits contain non-finite values"));
        }
        if let Some(&t) = self.targets.iter().find(|&&t| t as usize >= self.num_classes) {
            return Err(Error::validation(format!(
                "target class {t} out of range (num_classes {})",
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// Numerically stable softmax over the class axis, layout preserved.
pub fn softmax(logits: &[f64], batch: usize, num_classes: usize, spatial_len: usize) -> Vec<f64> {
    let mut probs = vec![0.0; logits.len()];
    let n = spatial_len;
    for b in 0..batch {
        for x in 0..n {
            let idx = |k: usize| (b * num_classes + k) * n + x;
            let mut m = f64::NEG_INFINITY;
            for k in 0..num_classes {
                m = m.max(logits[idx(k)]);
            }
            let mut sum = 0.0;
            for k in 0..num_classes {
                let e = (logits[idx(k)] - m).exp();
                probs[idx(k)] = e;
                sum += e;
            }
            for k in 0..num_classes {
                probs[idx(k)] /= sum;
            }
        }
    }
    probs
}

/// Soft dice loss on probabilities: -(mean over classes and regions of)
/// (2*overlap + eps) / (prediction mass + target mass + eps).
/// A class absent from both prediction and target scores a perfect 1.
pub fn dice_loss(
    probs: &[f64],
    targets: &[u8],
    batch: usize,
    num_classes: usize,
    spatial_len: usize,
    batch_dice: bool,
) -> f64 {
    let n = spatial_len;
    let regions: Vec<Vec<usize>> = if batch_dice {
        vec![(0..batch).collect()]
    } else {
        (0..batch).map(|b| vec![b]).collect()
    };
    let mut total = 0.0;
    for region in &regions {
        for k in 0..num_classes {
            let mut a = 0.0; // overlap
            let mut bsum = 0.0; // u mass + v mass
            for &b in region {
                for x in 0..n {
                    let u = probs[(b * num_classes + k) * n + x];
                    let v = (targets[b * n + x] as usize == k) as usize as f64;
                    a += u * v;
                    bsum += u + v;
                }
            }
            total += (2.0 * a + DICE_EPS) / (bsum + DICE_EPS);
        }
    }
    -(total / (num_classes as f64 * regions.len() as f64))
}

/// Mean cross-entropy over every voxel, probabilities floored to avoid
/// infinite penalties.
pub fn ce_loss(
    probs: &[f64],
    targets: &[u8],
    batch: usize,
    num_classes: usize,
    spatial_len: usize,
) -> f64 {
    let n = spatial_len;
    let mut total = 0.0;
    for b in 0..batch {
        for x in 0..n {
            let t = targets[b * n + x] as usize;
            let u = probs[(b * num_classes + t) * n + x];
            total -= u.max(CE_PROB_FLOOR).ln();
        }
    }
    total / (batch * n) as f64
}

pub struct LossValue {
    pub total: f64,
    pub dice: f64,
    pub cross_entropy: f64,
    /// d(total)/d(logit), same layout as the logits.
    pub grad: Vec<f64>,
}

/// Combined loss (dice + cross-entropy) and its exact gradient with respect
/// to the logits.
pub fn total_loss_and_grad(input: &LossInput, batch_dice: bool) -> Result<LossValue> {
    input.validate()?;
    let (bsz, k_num, n) = (input.batch, input.num_classes, input.spatial_len);
    let probs = softmax(input.logits, bsz, k_num, n);
    let dice = dice_loss(&probs, input.targets, bsz, k_num, n, batch_dice);
    let ce = ce_loss(&probs, input.targets, bsz, k_num, n);

    // dL/du: dice part per region/class, CE part per voxel.
    let mut g = vec![0.0f64; probs.len()];
    let regions: Vec<Vec<usize>> = if batch_dice {
        vec![(0..bsz).collect()]
    } else {
        (0..bsz).map(|b| vec![b]).collect()
    };
    let norm = -1.0 / (k_num as f64 * regions.len() as f64);
    for region in &regions {
        for k in 0..k_num {
            let mut a = 0.0;
            let mut bsum = 0.0;
            for &b in region {
                for x in 0..n {
                    let u = probs[(b * k_num + k) * n + x];
                    let v = (input.targets[b * n + x] as usize == k) as usize as f64;
                    a += u * v;
                    bsum += u + v;
                }
            }
            let denom = bsum + DICE_EPS;
            let numer = 2.0 * a + DICE_EPS;
            for &b in region {
                for x in 0..n {
                    let v = (input.targets[b * n + x] as usize == k) as usize as f64;
                    // d/du of (2A+eps)/(B+eps): (2v*(B+eps) - (2A+eps)) / (B+eps)^2
                    g[(b * k_num + k) * n + x] +=
                        norm * (2.0 * v * denom - numer) / (denom * denom);
                }
            }
        }
    }
    let ce_norm = 1.0 / (bsz * n) as f64;
    for b in 0..bsz {
        for x in 0..n {
            let t = input.targets[b * n + x] as usize;
            let u = probs[(b * k_num + t) * n + x];
            if u > CE_PROB_FLOOR {
                g[(b * k_num + t) * n + x] -= ce_norm / u;
            }
        }
    }

    // chain rule through softmax: dL/dz_j = u_j * (g_j - sum_k g_k u_k)
    let mut grad = vec![0.0f64; probs.len()];
    for b in 0..bsz {
        for x in 0..n {
            let idx = |k: usize| (b * k_num + k) * n + x;
            let mut dot = 0.0;
            for k in 0..k_num {
                dot += g[idx(k)] * probs[idx(k)];
            }
            for j in 0..k_num {
                grad[idx(j)] = probs[idx(j)] * (g[idx(j)] - dot);
            }
        }
    }
    Ok(LossValue { total: dice + ce, dice, cross_entropy: ce, grad })
}

// ---------------------------------------------------------------------------
// Learning-rate schedule
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub initial_lr: f64,
    pub reduce_factor: f64,
    /// Epochs without exponential-moving-average train improvement before
    /// the learning rate drops.
    pub reduce_patience: usize,
    /// Epochs past the later of (best validation epoch, learning rate
    /// falling below `min_lr`) before training stops.
    pub stop_patience: usize,
    pub min_lr: f64,
    pub ema_decay: f64,
    /// An EMA must undercut the previous best by more than this to count.
    pub improvement_margin: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            initial_lr: 3e-4,
            reduce_factor: 5.0,
            reduce_patience: 30,
            stop_patience: 60,
            min_lr: 1e-6,
            ema_decay: 0.9,
            improvement_margin: 5e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchedulerAction {
    Continue,
    Reduce,
    Stop,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchedulerState {
    pub config: SchedulerConfig,
    pub next_epoch: usize,
    pub lr: f64,
    pub train_ema: Option<f64>,
    pub val_ema: Option<f64>,
    pub best_train_ema: f64,
    /// Anchor for the reduce timer; reset by improvements and by reductions.
    pub best_train_epoch: usize,
    pub best_val_ema: f64,
    pub best_val_epoch: usize,
    /// Epoch at which the learning rate first fell below `min_lr`.
    pub lr_low_since: Option<usize>,
}

/// One line of the per-epoch training log (serialized as JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_ema: f64,
    pub val_ema: f64,
    pub action: SchedulerAction,
}

impl SchedulerState {
    pub fn new(config: SchedulerConfig) -> Self {
        let lr = config.initial_lr;
        SchedulerState {
            config,
            next_epoch: 0,
            lr,
            train_ema: None,
            val_ema: None,
            best_train_ema: f64::INFINITY,
            best_train_epoch: 0,
            best_val_ema: f64::INFINITY,
            best_val_epoch: 0,
            lr_low_since: None,
        }
    }

    /// Advance one epoch. The returned log line reflects the state after any
    /// learning-rate action taken this epoch.
    pub fn step(&mut self, train_loss: f64, val_loss: f64) -> Result<EpochLog> {
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::validation(format!(
                "non-finite loss at epoch {}: train {train_loss}, val {val_loss}",
                self.next_epoch
            )));
        }
        let epoch = self.next_epoch;
        self.next_epoch += 1;
        let d = self.config.ema_decay;
        let train_ema = match self.train_ema {
            None => train_loss,
            Some(prev) => d * prev + (1.0 - d) * train_loss,
        };
        let val_ema = match self.val_ema {
            None => val_loss,
            Some(prev) => d * prev + (1.0 - d) * val_loss,
        };
        self.train_ema = Some(train_ema);
        self.val_ema = Some(val_ema);

        if self.best_train_ema - train_ema > self.config.improvement_margin {
            self.best_train_ema = train_ema;
            self.best_train_epoch = epoch;
        }
        if self.best_val_ema - val_ema > self.config.improvement_margin {
            self.best_val_ema = val_ema;
            self.best_val_epoch = epoch;
        }

        let mut action = SchedulerAction::Continue;
        if epoch - self.best_train_epoch >= self.config.reduce_patience {
            self.lr /= self.config.reduce_factor;
            self.best_train_epoch = epoch; // restart the timer, keep the best value
            action = SchedulerAction::Reduce;
            if self.lr < self.config.min_lr && self.lr_low_since.is_none() {
                self.lr_low_since = Some(epoch);
            }
        }
        if self.lr < self.config.min_lr {
            let anchor = self.best_val_epoch.max(self.lr_low_since.unwrap_or(epoch));
            if epoch - anchor >= self.config.stop_patience {
                action = SchedulerAction::Stop;
            }
        }
        Ok(EpochLog { epoch, lr: self.lr, train_ema, val_ema, action })
    }
}

impl EpochLog {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("epoch log always serializes")
    }
}
