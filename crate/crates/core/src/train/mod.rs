//! Teacher training and mono/multi-teacher distillation.
//!
//! All three entry points share one loop: shuffle, per-sample forward and
//! backward with gradients accumulated over the batch, Adam under a cyclic
//! learning rate, validation dice after every epoch and best-epoch
//! selection. Teachers are only ever borrowed immutably.

mod engine;
mod history;
mod schedule;

pub use engine::{distill_mono, distill_multi, resolve_pairings, train_teacher};
pub use history::{read_steps_csv, EpochRecord, RunHistory, StepRecord, HISTORY_CSV, STEPS_CSV};
pub use schedule::{cyclic_lr, Adam};

use serde::{Deserialize, Serialize};

use crate::ensemble::WeightingMode;
use crate::error::{Error, Result};
use crate::features::LayerPairing;
use crate::losses::LossWeights;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Peak of the cyclic schedule.
    pub lr_max: f64,
    /// Trough of the cyclic schedule and the rate at step 0.
    pub lr_min: f64,
    /// Steps from trough to peak.
    pub cyclic_step_size: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weighting_mode: WeightingMode,
    /// Student/teacher tap pairs applied to every teacher; nearest depth
    /// when absent.
    pub pairing: Option<LayerPairing>,
    /// Keep teacher outputs for every training slice in memory instead of
    /// recomputing them each epoch.
    pub cache_teacher_outputs: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 0.01,
            lr_min: 1e-6,
            cyclic_step_size: 2000,
            epochs: 100,
            batch_size: 8,
            seed: 0,
            loss_weights: LossWeights::default(),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weighting_mode: WeightingMode::AsWritten,
            pairing: None,
            cache_teacher_outputs: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr_min.is_finite() && self.lr_max.is_finite() && 0.0 <= self.lr_min && self.lr_min < self.lr_max) {
            return bad(format!(
                "need 0 <= lr_min < lr_max, got {} and {}",
                self.lr_min, self.lr_max
            ));
        }
        if self.cyclic_step_size == 0 {
            return bad("cyclic_step_size must be >= 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be > 0, got {}", self.adam_eps));
        }
        self.loss_weights.validate().map_err(|e| Error::Config(e.to_string()))
    }
}
