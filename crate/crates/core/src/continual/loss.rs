use serde::{Deserialize, Serialize};

use super::{pseudo_label, relabel_for_stage, ProtocolPlan, Split};
use crate::data::Sample;
use crate::distill::{
    self, BlockSubset, ClassRegionIndex, DistillSource, LabelMapping, PoolingVariant,
};
use crate::error::{Error, Result};
use crate::model::{FrozenModel, SegModel, SegOutput};
use crate::tensor::{Scalar, Tape, Tensor};
use crate::IGNORE_ID;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the attention (and feature) transfer term.
    pub lambda_a: f64,
    /// Weight of the unbiased output distillation term.
    pub lambda_d: f64,
    pub use_pseudo_labeling: bool,
    pub use_attention_loss: bool,
    pub use_output_kd: bool,
    pub pooling: PoolingVariant,
    pub distill_source: DistillSource,
    pub block_subset: BlockSubset,
    /// Minimum old-model probability for a pseudo-label.
    pub pseudo_threshold: f64,
    /// Whether pseudo-labeled pixels join the pooling regions.
    pub pseudo_in_regions: bool,
    pub label_mapping: LabelMapping,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_a: 20.0,
            lambda_d: 20.0,
            use_pseudo_labeling: true,
            use_attention_loss: true,
            use_output_kd: true,
            pooling: PoolingVariant::Crp,
            distill_source: DistillSource::Attention,
            block_subset: BlockSubset::All,
            pseudo_threshold: 0.7,
            pseudo_in_regions: true,
            label_mapping: LabelMapping::Nearest,
        }
    }
}

impl LossConfig {
    /// Plain fine-tuning: cross-entropy only.
    pub fn fine_tune() -> Self {
        Self {
            lambda_a: 0.0,
            lambda_d: 0.0,
            use_pseudo_labeling: false,
            use_attention_loss: false,
            use_output_kd: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_a", self.lambda_a), ("lambda_d", self.lambda_d)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        if !(self.pseudo_threshold > 0.0 && self.pseudo_threshold < 1.0) {
            return Err(Error::Config(format!(
                "pseudo_threshold must lie in (0, 1), got {}",
                self.pseudo_threshold
            )));
        }
        if self.block_subset == BlockSubset::Last(0) {
            return Err(Error::Config("block_subset last(0) selects no block".into()));
        }
        Ok(())
    }

    /// Whether any term needs the previous-stage model.
    pub fn needs_old_model(&self) -> bool {
        self.use_pseudo_labeling || self.use_attention_loss || self.use_output_kd
    }
}

/// What a batch needs to know about the current stage.
#[derive(Clone, Copy)]
pub struct StageContext<'a, T> {
    pub stage: usize,
    pub plan: &'a ProtocolPlan,
    pub loss: &'a LossConfig,
    /// Previous-stage model, present from stage 1 on.
    pub old: Option<&'a FrozenModel<T>>,
}

/// One training image with everything the loss needs precomputed.
#[derive(Clone, Debug)]
pub struct PreparedImage<T> {
    pub image: Tensor<T>,
    /// Effective labels in internal ids, pseudo-labels included.
    pub labels: Vec<u8>,
    pub index: ClassRegionIndex,
    pub old: Option<SegOutput<T>>,
}

/// Relabels a sample for training at `ctx.stage`, runs the old model and adds
/// pseudo-labels. Memory samples use the evaluation rule and receive no
/// pseudo-labels.
pub fn prepare_image<T: Scalar>(
    sample: &Sample,
    from_memory: bool,
    ctx: &StageContext<'_, T>,
    model: &SegModel<T>,
) -> Result<PreparedImage<T>> {
    let split = if from_memory { Split::Eval } else { Split::Train };
    let relabeled = relabel_for_stage(&sample.labels, ctx.stage, ctx.plan, split)?;
    let image: Tensor<T> = sample.image.cast();
    let old = match ctx.old {
        Some(m) if ctx.loss.needs_old_model() => Some(m.forward(&image)?),
        _ => None,
    };
    let labels = match (&old, ctx.loss.use_pseudo_labeling && !from_memory) {
        (Some(o), true) => {
            let k = o.logits.shape()[2];
            pseudo_label(&relabeled, o.logits.data(), k, ctx.loss.pseudo_threshold)
        }
        _ => relabeled.clone(),
    };
    let region_labels = if ctx.loss.pseudo_in_regions { &labels } else { &relabeled };
    let index = ClassRegionIndex::build(
        region_labels,
        model.config(),
        model.num_classes(),
        ctx.loss.label_mapping,
    )?;
    Ok(PreparedImage {
        image,
        labels,
        index,
        old,
    })
}

/// Unweighted batch-level components of the objective and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    /// Mean cross-entropy over non-ignored batch pixels.
    pub ce: f64,
    /// Attention transfer, averaged over images with pooled classes.
    pub attention: f64,
    /// Feature transfer, same normalization.
    pub feature: f64,
    /// Unbiased output distillation, mean over non-ignored batch pixels.
    pub kd: f64,
}

fn has_pooled_terms(pooling: PoolingVariant, index: &ClassRegionIndex) -> bool {
    pooling != PoolingVariant::Crp || !index.is_empty()
}

/// `L_c + lambda_a L_a + lambda_d L_d` over `batch`.
///
/// Distillation terms need `old` outputs on the images and are skipped when
/// they are absent. Every image is differentiated on its own tape with the
/// batch-level normalizers already applied, so with `backward` set the
/// accumulated parameter gradients are exactly those of the batch loss.
pub fn combined_loss<T: Scalar>(
    model: &mut SegModel<T>,
    batch: &[PreparedImage<T>],
    cfg: &LossConfig,
    backward: bool,
) -> Result<LossTerms> {
    let pixels: usize = batch
        .iter()
        .map(|b| b.labels.iter().filter(|&&l| l != IGNORE_ID).count())
        .sum();
    let pooled_images = batch
        .iter()
        .filter(|b| b.old.is_some() && has_pooled_terms(cfg.pooling, &b.index))
        .count();
    let mut terms = LossTerms::default();
    for item in batch {
        let mut tape = Tape::new();
        let binding = model.params().bind(&mut tape, backward);
        let out = model.forward_tape(&mut tape, &binding, &item.image)?;
        let mut parts = Vec::new();
        let valid = distill::valid_rows(&item.labels);
        if !valid.is_empty() {
            let targets = item.labels.iter().map(|&l| l as usize).collect();
            let ce = tape.cross_entropy(out.logits, targets, IGNORE_ID as usize)?;
            let ce = tape.scale(ce, valid.len() as f64 / pixels as f64);
            terms.ce += tape.scalar(ce).f64();
            parts.push(ce);
        }
        if let Some(old) = &item.old {
            if cfg.use_attention_loss {
                let it = distill::image_terms(
                    &mut tape,
                    &out,
                    old,
                    &item.index,
                    cfg.pooling,
                    cfg.distill_source,
                    cfg.block_subset,
                )?;
                for (v, slot) in [(it.attention, &mut terms.attention), (it.feature, &mut terms.feature)] {
                    if let Some(v) = v {
                        let v = tape.scale(v, 1.0 / pooled_images as f64);
                        *slot += tape.scalar(v).f64();
                        parts.push(tape.scale(v, cfg.lambda_a));
                    }
                }
            }
            if cfg.use_output_kd {
                let old_count = old.logits.shape()[2];
                if let Some(kd) = distill::unbiased_kd_tape(&mut tape, out.logits, old.logits.data(), old_count, &valid)? {
                    let kd = tape.scale(kd, 1.0 / pixels as f64);
                    terms.kd += tape.scalar(kd).f64();
                    parts.push(tape.scale(kd, cfg.lambda_d));
                }
            }
        }
        if let Some(loss) = tape.add_all(&parts)? {
            terms.total += tape.scalar(loss).f64();
            if backward && tape.requires_grad(loss) {
                let grads = tape.backward(loss)?;
                model.params_mut().accumulate(&binding, &grads)?;
            }
        }
    }
    Ok(terms)
}
