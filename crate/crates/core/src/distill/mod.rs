//! Distillation from the previous-stage model.
//!
//! * class-specific region pooling (CRP) of self-attention maps and the
//!   attention transfer loss built on it,
//! * the global-pooling (GP) and no-pooling (NP) variants and region-pooled
//!   feature distillation used for ablations,
//! * unbiased output distillation, which folds the new model's probabilities
//!   of background and all new classes into one background probability before
//!   comparing with the old model.
//!
//! Value-level functions in [`pool`] work on detached tensors; the `*_tape`
//! functions here build the same quantities on a [`Tape`] so gradients flow
//! into the new model. The old model only ever contributes constants.

pub mod pool;
pub mod region;

use serde::{Deserialize, Serialize};

pub use pool::{
    attention_transfer_loss, crp_pool, feature_distill_loss, gp_pool, np_distill_variant, PooledAttention,
    PooledVector,
};
pub use region::{ClassRegionIndex, LabelMapping, RegionGroup};

use crate::error::{Error, Result};
use crate::model::{SegOutput, TapeOutput};
use crate::tensor::{ops, Scalar, Tape, Tensor, Var};
use crate::IGNORE_ID;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingVariant {
    #[default]
    Crp,
    Gp,
    Np,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillSource {
    #[default]
    Attention,
    Feature,
    Both,
}

/// Blocks whose attention (or features) are distilled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockSubset {
    #[default]
    All,
    /// The deepest `k` blocks.
    Last(usize),
}

impl BlockSubset {
    pub fn contains(self, block: usize, num_blocks: usize) -> bool {
        match self {
            BlockSubset::All => true,
            BlockSubset::Last(k) => block + k >= num_blocks,
        }
    }
}

/// Per-image distillation terms, already normalized by the image's class
/// count and head count. `None` means the image is excluded from the batch
/// average (no foreground class to pool).
#[derive(Clone, Copy, Debug, Default)]
pub struct ImageTerms {
    pub attention: Option<Var>,
    pub feature: Option<Var>,
}

/// Shared core of all pooled/unpooled distances.
///
/// `new[j][h]` are `(rows_j, cols_j)` vars of the new model, `old[j][h]` the
/// matching old values. With `groups` the distance is between region means,
/// divided by `|groups| * heads`; without, it is the NP mean over locations of
/// row distances divided by `heads`.
fn map_term<T: Scalar>(
    tape: &mut Tape<T>,
    new: &[Vec<Var>],
    old: &[Vec<&[T]>],
    groups: Option<&[RegionGroup]>,
    blocks: BlockSubset,
) -> Result<Option<Var>> {
    if new.len() != old.len() {
        return Err(Error::Internal("old and new models differ in block count".into()));
    }
    let nb = new.len();
    let heads = new.first().map_or(0, Vec::len);
    let mut parts = Vec::new();
    match groups {
        Some(groups) => {
            if groups.is_empty() {
                return Ok(None);
            }
            for g in groups {
                for h in 0..heads {
                    for j in (0..nb).filter(|&j| blocks.contains(j, nb)) {
                        let Some(rows) = g.rows.get(j).and_then(Option::as_ref) else {
                            continue;
                        };
                        let cols = *tape.shape(new[j][h]).last().unwrap();
                        let pn = tape.masked_mean_rows(new[j][h], rows.clone())?;
                        let po = tape.constant_from(&[1, cols], ops::masked_mean_rows(old[j][h], cols, rows))?;
                        let d = tape.mse(pn, po)?;
                        parts.push(tape.scale(d, cols as f64));
                    }
                }
            }
            let total = sum_or_zero(tape, &parts)?;
            Ok(Some(tape.scale(total, 1.0 / (groups.len() * heads) as f64)))
        }
        None => {
            for j in (0..nb).filter(|&j| blocks.contains(j, nb)) {
                for h in 0..heads {
                    let shape = tape.shape(new[j][h]).to_vec();
                    let cols = *shape.last().unwrap();
                    let po = tape.constant_from(&shape, old[j][h].to_vec())?;
                    let d = tape.mse(new[j][h], po)?;
                    parts.push(tape.scale(d, cols as f64));
                }
            }
            let total = sum_or_zero(tape, &parts)?;
            Ok(Some(tape.scale(total, 1.0 / heads.max(1) as f64)))
        }
    }
}

fn sum_or_zero<T: Scalar>(tape: &mut Tape<T>, parts: &[Var]) -> Result<Var> {
    match tape.add_all(parts)? {
        Some(v) => Ok(v),
        None => tape.constant_from(&[1], vec![T::zero()]),
    }
}

/// Distillation terms of one image for the configured pooling, source and
/// block subset.
pub fn image_terms<T: Scalar>(
    tape: &mut Tape<T>,
    new: &TapeOutput,
    old: &SegOutput<T>,
    index: &ClassRegionIndex,
    pooling: PoolingVariant,
    source: DistillSource,
    blocks: BlockSubset,
) -> Result<ImageTerms> {
    let groups = match pooling {
        PoolingVariant::Crp => Some(index.class_groups()),
        PoolingVariant::Gp => Some(vec![index.global_group()]),
        PoolingVariant::Np => None,
    };
    let mut terms = ImageTerms::default();
    if matches!(source, DistillSource::Attention | DistillSource::Both) {
        let old_maps: Vec<Vec<&[T]>> = old
            .attention
            .blocks
            .iter()
            .map(|b| b.heads.iter().map(Tensor::data).collect())
            .collect();
        terms.attention = map_term(tape, &new.attention, &old_maps, groups.as_deref(), blocks)?;
    }
    if matches!(source, DistillSource::Feature | DistillSource::Both) {
        let new_f: Vec<Vec<Var>> = new.features.iter().map(|&f| vec![f]).collect();
        let old_f: Vec<Vec<&[T]>> = old.block_features.iter().map(|f| vec![f.data()]).collect();
        terms.feature = map_term(tape, &new_f, &old_f, groups.as_deref(), blocks)?;
    }
    Ok(terms)
}

/// Column groups that fold background and every class at or beyond
/// `old_count` into output 0 and keep old foreground classes as they are.
pub fn unbiased_groups(old_count: usize, new_count: usize) -> Vec<Vec<usize>> {
    let mut groups = Vec::with_capacity(old_count);
    let mut bg = vec![0];
    bg.extend(old_count..new_count);
    groups.push(bg);
    groups.extend((1..old_count).map(|c| vec![c]));
    groups
}

/// Unbiased output distillation summed (not averaged) over `rows` of one
/// image: `-sum_rows sum_c p_old(c) log q'(c)`. Returns `None` when `rows`
/// is empty.
pub fn unbiased_kd_tape<T: Scalar>(
    tape: &mut Tape<T>,
    new_logits: Var,
    old_logits: &[T],
    old_count: usize,
    rows: &[usize],
) -> Result<Option<Var>> {
    let new_count = *tape.shape(new_logits).last().unwrap();
    if old_count > new_count || old_count == 0 {
        return Err(Error::Usage(format!(
            "old class count {old_count} exceeds new class count {new_count}"
        )));
    }
    if old_logits.len() != (tape.value(new_logits).len() / new_count) * old_count {
        return Err(Error::Config("old and new logits cover different pixel counts".into()));
    }
    if rows.is_empty() {
        return Ok(None);
    }
    let all = tape.value(new_logits).len() / new_count;
    let selected = if rows.len() == all {
        new_logits
    } else {
        tape.gather_rows(new_logits, rows.to_vec())?
    };
    let lq = tape.grouped_log_softmax(selected, unbiased_groups(old_count, new_count))?;
    let mut p_old = Vec::with_capacity(rows.len() * old_count);
    for &r in rows {
        p_old.extend(ops::softmax_rows(&old_logits[r * old_count..(r + 1) * old_count], old_count));
    }
    let p_old = tape.constant_from(&[rows.len(), old_count], p_old)?;
    let prod = tape.mul(lq, p_old)?;
    let s = tape.sum(prod);
    Ok(Some(tape.scale(s, -1.0)))
}

/// Rows of an effective label map that are not ignored.
pub fn valid_rows(labels: &[u8]) -> Vec<usize> {
    labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l != IGNORE_ID)
        .map(|(i, _)| i)
        .collect()
}

/// Mean unbiased distillation loss between detached logits, each
/// `(..., classes)`. Pixels whose label is [`IGNORE_ID`] are skipped.
pub fn unbiased_kd_loss<T: Scalar>(
    old_logits: &Tensor<T>,
    new_logits: &Tensor<T>,
    old_count: usize,
    labels: Option<&[u8]>,
) -> Result<f64> {
    if old_logits.cols() != old_count {
        return Err(Error::Config(format!(
            "old logits have {} classes, expected {old_count}",
            old_logits.cols()
        )));
    }
    let rows = match labels {
        Some(l) => valid_rows(l),
        None => (0..new_logits.rows()).collect(),
    };
    let mut tape = Tape::new();
    let z = tape.constant_from(&[new_logits.rows(), new_logits.cols()], new_logits.data().to_vec())?;
    let n = rows.len();
    Ok(match unbiased_kd_tape(&mut tape, z, old_logits.data(), old_count, &rows)? {
        Some(v) => tape.scalar(v).f64() / n as f64,
        None => 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AttentionStack, BlockAttention};

    #[test]
    fn block_subset_membership() {
        assert!(BlockSubset::All.contains(0, 4));
        assert!(BlockSubset::Last(1).contains(3, 4));
        assert!(!BlockSubset::Last(1).contains(2, 4));
        assert!(BlockSubset::Last(3).contains(1, 4));
        assert!(!BlockSubset::Last(3).contains(0, 4));
    }

    #[test]
    fn unbiased_groups_layout() {
        assert_eq!(unbiased_groups(2, 4), vec![vec![0, 2, 3], vec![1]]);
        assert_eq!(unbiased_groups(3, 3), vec![vec![0], vec![1], vec![2]]);
    }

    #[test]
    fn kd_worked_example() {
        // old probs [0.6, 0.4], new probs [0.3, 0.4, 0.3] -> q' = [0.6, 0.4]
        let old = Tensor::<f64>::from_f64(&[1, 2], &[0.6f64.ln(), 0.4f64.ln()]).unwrap();
        let new = Tensor::<f64>::from_f64(&[1, 3], &[0.3f64.ln(), 0.4f64.ln(), 0.3f64.ln()]).unwrap();
        let l = unbiased_kd_loss(&old, &new, 2, None).unwrap();
        let oracle = -(0.6f64 * 0.6f64.ln() + 0.4 * 0.4f64.ln());
        assert!((l - oracle).abs() < 1e-12);
        assert!((l - 0.67301).abs() < 1e-5);
    }

    #[test]
    fn kd_rejects_shrinking() {
        let old = Tensor::<f64>::zeros(&[1, 3]);
        let new = Tensor::<f64>::zeros(&[1, 2]);
        assert!(matches!(unbiased_kd_loss(&old, &new, 3, None), Err(Error::Usage(_))));
    }

    #[test]
    fn kd_skips_ignored_pixels() {
        let old = Tensor::<f64>::from_f64(&[2, 2], &[0.0, 1.0, 3.0, -1.0]).unwrap();
        let new = Tensor::<f64>::from_f64(&[2, 2], &[0.5, 0.5, -2.0, 2.0]).unwrap();
        let only_first = unbiased_kd_loss(&old, &new, 2, Some(&[0, IGNORE_ID])).unwrap();
        let first_old = Tensor::<f64>::from_f64(&[1, 2], &[0.0, 1.0]).unwrap();
        let first_new = Tensor::<f64>::from_f64(&[1, 2], &[0.5, 0.5]).unwrap();
        let direct = unbiased_kd_loss(&first_old, &first_new, 2, None).unwrap();
        assert!((only_first - direct).abs() < 1e-15);
    }

    fn uniform_stack(grid: usize, heads: usize) -> AttentionStack<f64> {
        let k = grid * grid;
        AttentionStack {
            blocks: vec![BlockAttention {
                grid,
                keys: k,
                heads: (0..heads)
                    .map(|_| Tensor::from_fn(&[grid, grid, k], |_| 1.0 / k as f64))
                    .collect(),
            }],
        }
    }

    #[test]
    fn gp_on_uniform_attention() {
        let p = gp_pool(&uniform_stack(2, 2));
        assert_eq!(p.vectors.len(), 2);
        for v in &p.vectors {
            assert!(v.concatenated().iter().all(|&x| (x - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn np_identical_is_zero() {
        let s = uniform_stack(2, 2);
        assert_eq!(np_distill_variant(&s, &s).unwrap(), 0.0);
    }
}
