//! Class-incremental engine: stage schedule, overlapped relabeling,
//! pseudo-labeling, exemplar memory, the combined objective and the training
//! loop.
//!
//! Inside a run classes carry *internal* ids: internal id `i >= 1` is the
//! dataset class `class_order[i - 1]`, so the classes learned at stage `t` are
//! always a contiguous id range and the classifier grows by appending columns.

mod loss;
mod memory;
mod run;

use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

pub use loss::{combined_loss, prepare_image, LossConfig, LossTerms, PreparedImage, StageContext};
pub use memory::{quotas, MemoryBuffer};
pub use run::{
    config_hash, evaluate, run_protocol, run_dir_name, RunConfig, RunOptions, RunResult, StageRecord,
};

use crate::error::{Error, Result};
use crate::tensor::{ops, Scalar};
use crate::IGNORE_ID;

/// Which rule [`relabel_for_stage`] applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    /// Only the current stage's classes stay foreground.
    Train,
    /// Every class learned so far stays foreground.
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolPlan {
    /// Foreground classes learned at stage 0.
    pub m: usize,
    /// Foreground classes added at each later stage.
    pub n: usize,
    pub stage_count: usize,
    /// Dataset class ids in learning order; a permutation of `1..=K`.
    pub class_order: Vec<usize>,
    pub epochs_initial: usize,
    pub epochs_incremental: usize,
    pub lr_initial: f64,
    pub lr_incremental: f64,
    /// Per-epoch multiplicative decay.
    pub lr_decay: f64,
    /// Multiplies both base rates.
    pub lr_scale: f64,
    pub batch_size: usize,
}

impl Default for ProtocolPlan {
    fn default() -> Self {
        Self::preset("synth-4-2").unwrap()
    }
}

pub const PRESETS: [&str; 3] = ["synth-4-1", "synth-4-2", "synth-2-2"];

impl ProtocolPlan {
    fn base(m: usize, n: usize, stage_count: usize) -> Self {
        let k = m + n * (stage_count - 1);
        Self {
            m,
            n,
            stage_count,
            class_order: (1..=k).collect(),
            epochs_initial: 20,
            epochs_incremental: 10,
            lr_initial: 0.01,
            lr_incremental: 0.001,
            lr_decay: 0.9,
            lr_scale: 2.5,
            batch_size: 4,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "synth-4-1" => Some(Self::base(4, 1, 6)),
            "synth-4-2" => Some(Self::base(4, 2, 2)),
            "synth-2-2" => Some(Self::base(2, 2, 3)),
            _ => None,
        }
    }

    /// Single-stage plan learning all `k` classes at once.
    pub fn joint(k: usize) -> Self {
        Self::base(k, 0, 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.m == 0 || self.stage_count == 0 {
            return bad("plan needs m >= 1 and at least one stage".into());
        }
        if self.stage_count > 1 && self.n == 0 {
            return bad("incremental stages need n >= 1".into());
        }
        let k = self.class_order.len();
        if self.m + self.n * (self.stage_count - 1) > k {
            return bad(format!(
                "m + n*(stages-1) = {} exceeds the {k} classes in class_order",
                self.m + self.n * (self.stage_count - 1)
            ));
        }
        let mut sorted = self.class_order.clone();
        sorted.sort_unstable();
        if sorted != (1..=k).collect::<Vec<_>>() {
            return bad(format!("class_order {:?} is not a permutation of 1..={k}", self.class_order));
        }
        if k >= IGNORE_ID as usize {
            return bad(format!("{k} classes do not fit in u8 labels"));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        for (name, v) in [
            ("lr_initial", self.lr_initial),
            ("lr_incremental", self.lr_incremental),
            ("lr_decay", self.lr_decay),
            ("lr_scale", self.lr_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be a nonnegative number"));
            }
        }
        Ok(())
    }

    /// Foreground classes in the dataset.
    pub fn total_classes(&self) -> usize {
        self.class_order.len()
    }

    /// Foreground classes learned by the end of stage `t`.
    pub fn learned_after(&self, t: usize) -> usize {
        self.m + self.n * t
    }

    /// Internal ids introduced at stage `t`.
    pub fn stage_classes(&self, t: usize) -> RangeInclusive<usize> {
        if t == 0 {
            1..=self.m
        } else {
            self.learned_after(t - 1) + 1..=self.learned_after(t)
        }
    }

    /// Classifier width at stage `t`, background included.
    pub fn output_classes(&self, t: usize) -> usize {
        self.learned_after(t) + 1
    }

    pub fn epochs(&self, t: usize) -> usize {
        if t == 0 {
            self.epochs_initial
        } else {
            self.epochs_incremental
        }
    }

    pub fn learning_rate(&self, t: usize, epoch: usize) -> f64 {
        let base = if t == 0 { self.lr_initial } else { self.lr_incremental };
        base * self.lr_scale * self.lr_decay.powi(epoch as i32)
    }

    /// Dataset class id of internal id `internal` (0 stays 0).
    pub fn dataset_class(&self, internal: usize) -> usize {
        if internal == 0 {
            0
        } else {
            self.class_order[internal - 1]
        }
    }

    /// Lookup from dataset label value to internal id; `None` marks unknown
    /// labels.
    pub fn internal_table(&self) -> [Option<u8>; 256] {
        let mut table = [None; 256];
        table[0] = Some(0);
        table[IGNORE_ID as usize] = Some(IGNORE_ID);
        for (i, &c) in self.class_order.iter().enumerate() {
            if c < IGNORE_ID as usize {
                table[c] = Some(i as u8 + 1);
            }
        }
        table
    }

    /// Ids that a stage-`t` training map may contain once pseudo-labels are
    /// added: background, every learned class and the ignore id.
    pub fn permitted_train_ids(&self, t: usize) -> Vec<u8> {
        let mut ids: Vec<u8> = (0..=self.learned_after(t) as u8).collect();
        ids.push(IGNORE_ID);
        ids
    }
}

/// Effective label map of a dataset label map at stage `t`, in internal ids.
pub fn relabel_for_stage(labels: &[u8], t: usize, plan: &ProtocolPlan, split: Split) -> Result<Vec<u8>> {
    let table = plan.internal_table();
    let keep = match split {
        Split::Train => plan.stage_classes(t),
        Split::Eval => 1..=plan.learned_after(t),
    };
    labels
        .iter()
        .map(|&l| match table[l as usize] {
            None => Err(Error::Data(format!("label {l} is not a class of this protocol"))),
            Some(IGNORE_ID) => Ok(IGNORE_ID),
            Some(i) if keep.contains(&(i as usize)) => Ok(i),
            Some(_) => Ok(0),
        })
        .collect()
}

/// Relabels confident background pixels with the old model's class.
///
/// `old_logits` is `(pixels, old_count)`. A background pixel whose old-model
/// argmax is a foreground class takes that class when its probability is at
/// least `tau` and becomes [`IGNORE_ID`] otherwise. Other pixels are kept.
pub fn pseudo_label<T: Scalar>(labels: &[u8], old_logits: &[T], old_count: usize, tau: f64) -> Vec<u8> {
    labels
        .iter()
        .enumerate()
        .map(|(p, &l)| {
            if l != 0 {
                return l;
            }
            let probs = ops::softmax_rows(&old_logits[p * old_count..(p + 1) * old_count], old_count);
            let (best, pmax) = probs
                .iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |acc, (c, &v)| if v > acc.1 { (c, v) } else { acc });
            match best {
                0 => 0,
                c if pmax.f64() >= tau => c as u8,
                _ => IGNORE_ID,
            }
        })
        .collect()
}
