//! Value-level pooling and distillation distances on detached tensors.

use super::region::{ClassRegionIndex, RegionGroup};
use super::BlockSubset;
use crate::error::{Error, Result};
use crate::model::AttentionStack;
use crate::tensor::{ops, Scalar, Tensor};

/// Pooled attention of one class and head, one segment per block. A block
/// where the class region is empty has no segment.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledVector<T> {
    pub class: usize,
    pub head: usize,
    pub segments: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> PooledVector<T> {
    /// Concatenation of the present block segments.
    pub fn concatenated(&self) -> Vec<T> {
        self.segments.iter().flatten().flatten().copied().collect()
    }
}

/// All pooled vectors of one image, ordered by class then head.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledAttention<T> {
    pub heads: usize,
    pub vectors: Vec<PooledVector<T>>,
}

impl<T: Scalar> PooledAttention<T> {
    pub fn classes(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.vectors.iter().map(|v| v.class).collect();
        c.dedup();
        c
    }

    pub fn get(&self, class: usize, head: usize) -> Option<&PooledVector<T>> {
        self.vectors.iter().find(|v| v.class == class && v.head == head)
    }
}

fn check_resolution<T: Scalar>(attn: &AttentionStack<T>, index: &ClassRegionIndex) -> Result<()> {
    if attn.blocks.len() != index.num_blocks() {
        return Err(Error::Internal(format!(
            "attention has {} blocks, region index {}",
            attn.blocks.len(),
            index.num_blocks()
        )));
    }
    for (j, b) in attn.blocks.iter().enumerate() {
        if b.grid != index.grid(j) {
            return Err(Error::Internal(format!(
                "block {j}: attention grid {} vs region grid {}",
                b.grid,
                index.grid(j)
            )));
        }
    }
    Ok(())
}

pub fn pool_groups<T: Scalar>(attn: &AttentionStack<T>, groups: &[RegionGroup]) -> PooledAttention<T> {
    let heads = attn.num_heads();
    let mut vectors = Vec::with_capacity(groups.len() * heads);
    for g in groups {
        for h in 0..heads {
            let segments = attn
                .blocks
                .iter()
                .zip(&g.rows)
                .map(|(b, rows)| {
                    rows.as_ref()
                        .map(|rows| ops::masked_mean_rows(b.heads[h].data(), b.keys, rows))
                })
                .collect();
            vectors.push(PooledVector {
                class: g.class,
                head: h,
                segments,
            });
        }
    }
    PooledAttention { heads, vectors }
}

/// Class-specific region pooling: per block, head and present foreground
/// class, the mean attention row over the class's token region.
pub fn crp_pool<T: Scalar>(attn: &AttentionStack<T>, index: &ClassRegionIndex) -> Result<PooledAttention<T>> {
    check_resolution(attn, index)?;
    Ok(pool_groups(attn, &index.class_groups()))
}

/// Global pooling over every location, background included. The single group
/// carries class id 0.
pub fn gp_pool<T: Scalar>(attn: &AttentionStack<T>) -> PooledAttention<T> {
    let group = RegionGroup {
        class: 0,
        rows: attn
            .blocks
            .iter()
            .map(|b| Some((0..b.grid * b.grid).collect()))
            .collect(),
    };
    pool_groups(attn, &[group])
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x.f64() - y.f64();
            d * d
        })
        .sum()
}

/// `sum_c sum_h ||f_new - f_old||^2 / |C_i|` for one image, or `None` when
/// the image has no pooled classes.
pub fn image_transfer_term<T: Scalar>(
    old: &PooledAttention<T>,
    new: &PooledAttention<T>,
    blocks: BlockSubset,
) -> Result<Option<f64>> {
    if old.vectors.len() != new.vectors.len() || old.heads != new.heads {
        return Err(Error::Internal("pooled vectors differ in class/head structure".into()));
    }
    if new.vectors.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for (o, n) in old.vectors.iter().zip(&new.vectors) {
        if o.class != n.class || o.head != n.head || o.segments.len() != n.segments.len() {
            return Err(Error::Internal("pooled vectors differ in class/head structure".into()));
        }
        let nb = n.segments.len();
        for (j, (so, sn)) in o.segments.iter().zip(&n.segments).enumerate() {
            if !blocks.contains(j, nb) {
                continue;
            }
            match (so, sn) {
                (Some(a), Some(b)) if a.len() == b.len() => total += sq_dist(a, b),
                (None, None) => {}
                _ => return Err(Error::Internal(format!("block {j} segment mismatch"))),
            }
        }
    }
    Ok(Some(total / new.classes().len() as f64))
}

/// Self-attention transfer loss over a set of images:
/// `1/(N H) sum_i 1/|C_i| sum_{c in C_i} sum_h ||f_new - f_old||^2`, where the
/// concatenation over blocks becomes a sum of per-block squared distances and
/// `N` counts only images with at least one pooled class.
pub fn attention_transfer_loss<T: Scalar>(
    old: &[PooledAttention<T>],
    new: &[PooledAttention<T>],
    heads: usize,
) -> Result<f64> {
    if old.len() != new.len() {
        return Err(Error::Internal(format!("{} old vs {} new images", old.len(), new.len())));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (o, nw) in old.iter().zip(new) {
        if let Some(t) = image_transfer_term(o, nw, BlockSubset::All)? {
            sum += t;
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / (n * heads) as f64 })
}

/// No-pooling variant for one image: per block and head, the mean over
/// locations of the squared distance between attention rows, summed over
/// blocks and divided by the head count.
pub fn np_distill_variant<T: Scalar>(old: &AttentionStack<T>, new: &AttentionStack<T>) -> Result<f64> {
    if old.blocks.len() != new.blocks.len() {
        return Err(Error::Internal("attention stacks differ in block count".into()));
    }
    let heads = new.num_heads();
    let mut total = 0.0;
    for (bo, bn) in old.blocks.iter().zip(&new.blocks) {
        if bo.grid != bn.grid || bo.keys != bn.keys || bo.heads.len() != bn.heads.len() {
            return Err(Error::Internal("attention stacks differ in resolution".into()));
        }
        let locations = (bn.grid * bn.grid) as f64;
        for (ho, hn) in bo.heads.iter().zip(&bn.heads) {
            total += sq_dist(ho.data(), hn.data()) / locations;
        }
    }
    Ok(total / heads as f64)
}

/// Class-region pooled feature distillation for one image:
/// `1/|C_i| sum_c sum_j ||mean_R F_new - mean_R F_old||^2`, zero without
/// foreground classes.
pub fn feature_distill_loss<T: Scalar>(
    old: &[Tensor<T>],
    new: &[Tensor<T>],
    index: &ClassRegionIndex,
) -> Result<f64> {
    if old.len() != new.len() || new.len() != index.num_blocks() {
        return Err(Error::Config("feature_distill: block counts differ".into()));
    }
    for (o, n) in old.iter().zip(new) {
        if o.shape() != n.shape() {
            return Err(Error::shape("feature_distill", o.shape(), n.shape()));
        }
    }
    let groups = index.class_groups();
    if groups.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for g in &groups {
        for ((o, n), rows) in old.iter().zip(new).zip(&g.rows) {
            if let Some(rows) = rows {
                let c = n.cols();
                total += sq_dist(
                    &ops::masked_mean_rows(o.data(), c, rows),
                    &ops::masked_mean_rows(n.data(), c, rows),
                );
            }
        }
    }
    Ok(total / groups.len() as f64)
}
