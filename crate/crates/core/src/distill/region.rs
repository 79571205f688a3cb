use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::IGNORE_ID;

/// How a pixel label map is reduced to a block's token grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMapping {
    /// Label of the cell's center pixel (index `floor(cell/2)` on each axis).
    #[default]
    Nearest,
    /// Most frequent non-ignored label in the cell; ties go to the smaller id.
    Majority,
}

/// Token rows belonging to each foreground class, per block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassRegionIndex {
    grids: Vec<usize>,
    /// `blocks[j][class]` = sorted rows `u * grid + v`. Only nonempty regions
    /// are stored and background never appears.
    blocks: Vec<BTreeMap<usize, Vec<usize>>>,
}

/// Pooling region of one class (or of the whole image) across blocks. `None`
/// marks a block where the region vanished after downsampling.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionGroup {
    pub class: usize,
    pub rows: Vec<Option<Vec<usize>>>,
}

impl ClassRegionIndex {
    /// Builds the index from an `(image, image)` map of class ids (or
    /// [`IGNORE_ID`]). Ignored pixels never join a region.
    pub fn build(
        labels: &[u8],
        config: &ModelConfig,
        num_classes: usize,
        mapping: LabelMapping,
    ) -> Result<Self> {
        let s = config.image_size;
        if labels.len() != s * s {
            return Err(Error::Data(format!(
                "label map has {} pixels, expected {}",
                labels.len(),
                s * s
            )));
        }
        if let Some(&bad) = labels
            .iter()
            .find(|&&l| l != IGNORE_ID && l as usize >= num_classes)
        {
            return Err(Error::Data(format!(
                "label {bad} outside the {num_classes} current classes"
            )));
        }
        let grids: Vec<usize> = (0..config.num_blocks).map(|j| config.block_grid(j)).collect();
        let blocks = grids
            .iter()
            .map(|&g| {
                let mut regions: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
                let cell = s / g;
                for u in 0..g {
                    for v in 0..g {
                        let label = match mapping {
                            LabelMapping::Nearest => labels[(u * cell + cell / 2) * s + v * cell + cell / 2],
                            LabelMapping::Majority => majority(labels, s, u * cell, v * cell, cell),
                        };
                        if label != 0 && label != IGNORE_ID {
                            regions.entry(label as usize).or_default().push(u * g + v);
                        }
                    }
                }
                regions
            })
            .collect();
        Ok(Self { grids, blocks })
    }

    pub fn num_blocks(&self) -> usize {
        self.grids.len()
    }

    pub fn grid(&self, block: usize) -> usize {
        self.grids[block]
    }

    pub fn region(&self, block: usize, class: usize) -> Option<&[usize]> {
        self.blocks[block].get(&class).map(Vec::as_slice)
    }

    /// Classes with a nonempty region in at least one block.
    pub fn present_classes(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.blocks.iter().flat_map(|b| b.keys().copied()).collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.iter().all(BTreeMap::is_empty)
    }

    /// One group per present class.
    pub fn class_groups(&self) -> Vec<RegionGroup> {
        self.present_classes()
            .into_iter()
            .map(|c| RegionGroup {
                class: c,
                rows: self.blocks.iter().map(|b| b.get(&c).cloned()).collect(),
            })
            .collect()
    }

    /// A single group covering every location of every block, background
    /// included.
    pub fn global_group(&self) -> RegionGroup {
        RegionGroup {
            class: 0,
            rows: self.grids.iter().map(|&g| Some((0..g * g).collect())).collect(),
        }
    }
}

fn majority(labels: &[u8], s: usize, y0: usize, x0: usize, cell: usize) -> u8 {
    let mut counts = [0u32; 256];
    for y in y0..y0 + cell {
        for x in x0..x0 + cell {
            counts[labels[y * s + x] as usize] += 1;
        }
    }
    let mut best = IGNORE_ID;
    let mut best_n = 0;
    for (id, &n) in counts.iter().enumerate().take(IGNORE_ID as usize) {
        if n > best_n {
            best = id as u8;
            best_n = n;
        }
    }
    best
}
