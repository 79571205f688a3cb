//! Micro pyramid transformer for per-pixel classification.
//!
//! The encoder has `num_blocks` blocks. Block 1 embeds non-overlapping patches
//! with a linear map plus a learned position embedding; each later block first
//! merges 2x2 token neighborhoods (halving the grid side). Every block runs
//! `layers_per_block` pre-norm transformer layers and a closing layer norm. The
//! post-softmax attention of each block's last layer is exposed per head.
//!
//! The decoder is a per-pixel linear classifier over the nearest-neighbor
//! upsampled concatenation of all block features. It is evaluated as a sum of
//! per-block projections upsampled afterwards, which is the same linear map.

pub mod grid;

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{io, ParamStore, Scalar, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;
/// Fixed pixel standardization applied before the patch embedding.
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_STD: f64 = 0.25;
/// Standard deviation of freshly added classifier columns.
pub const NEW_HEAD_STD: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub num_blocks: usize,
    /// Heads per attention layer, identical for all blocks.
    pub heads: usize,
    /// Embedding width of each block.
    pub embed_dims: Vec<usize>,
    pub layers_per_block: usize,
    /// Key/value pooling factor of each block; 1 is full attention.
    pub key_reduction: Vec<usize>,
    pub mlp_ratio: usize,
    /// Output classes including background.
    pub num_classes: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 2,
            channels: 3,
            num_blocks: 4,
            heads: 2,
            embed_dims: vec![24, 32, 48, 48],
            layers_per_block: 1,
            key_reduction: vec![4, 2, 1, 1],
            mlp_ratio: 2,
            num_classes: 5,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_blocks == 0 || self.heads == 0 || self.layers_per_block == 0 || self.mlp_ratio == 0 {
            return bad("num_blocks, heads, layers_per_block and mlp_ratio must be positive".into());
        }
        if self.channels == 0 || self.num_classes < 1 {
            return bad("channels and num_classes must be positive".into());
        }
        if self.embed_dims.len() != self.num_blocks || self.key_reduction.len() != self.num_blocks {
            return bad(format!(
                "embed_dims and key_reduction need {} entries",
                self.num_blocks
            ));
        }
        let grid = self.grid_size();
        if grid % (1 << (self.num_blocks - 1)) != 0 {
            return bad(format!(
                "grid side {grid} cannot be halved {} times",
                self.num_blocks - 1
            ));
        }
        for j in 0..self.num_blocks {
            let d = self.embed_dims[j];
            if d == 0 || d % self.heads != 0 {
                return bad(format!("embed_dims[{j}] = {d} must be a positive multiple of heads"));
            }
            let r = self.key_reduction[j];
            if r == 0 || self.block_grid(j) % r != 0 {
                return bad(format!(
                    "key_reduction[{j}] = {r} must divide the block grid {}",
                    self.block_grid(j)
                ));
            }
        }
        Ok(())
    }

    /// Token grid side of block 1.
    pub fn grid_size(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Token grid side of block `j` (0-based).
    pub fn block_grid(&self, j: usize) -> usize {
        self.grid_size() >> j
    }

    /// Number of attention keys of block `j`.
    pub fn block_keys(&self, j: usize) -> usize {
        let g = self.block_grid(j) / self.key_reduction[j];
        g * g
    }

    pub fn head_dim(&self, j: usize) -> usize {
        self.embed_dims[j] / self.heads
    }

    fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// Post-softmax attention of one block's last layer, one `(U, V, K)` map per head.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockAttention<T> {
    pub grid: usize,
    pub keys: usize,
    pub heads: Vec<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStack<T> {
    pub blocks: Vec<BlockAttention<T>>,
}

impl<T: Scalar> AttentionStack<T> {
    pub fn num_maps(&self) -> usize {
        self.blocks.iter().map(|b| b.heads.len()).sum()
    }

    pub fn num_heads(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.heads.len())
    }

    /// Largest deviation of any attention row sum from 1, and whether every
    /// entry lies in `[0, 1]`.
    pub fn row_sum_error(&self) -> (f64, bool) {
        let mut worst = 0.0f64;
        let mut in_range = true;
        for b in &self.blocks {
            for h in &b.heads {
                for row in h.data().chunks(b.keys) {
                    let s: f64 = row.iter().map(|v| v.f64()).sum();
                    worst = worst.max((s - 1.0).abs());
                    in_range &= row.iter().all(|v| (0.0..=1.0).contains(&v.f64()));
                }
            }
        }
        (worst, in_range)
    }
}

/// Model outputs as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct SegOutput<T> {
    /// `(image, image, classes)` per-pixel scores.
    pub logits: Tensor<T>,
    pub attention: AttentionStack<T>,
    /// `(U_j, U_j, d_j)` output of each block.
    pub block_features: Vec<Tensor<T>>,
}

/// Model outputs recorded on a tape.
#[derive(Clone, Debug)]
pub struct TapeOutput {
    /// `(image^2, classes)` per-pixel scores.
    pub logits: Var,
    /// `[block][head]`, each `(U_j^2, K_j)`.
    pub attention: Vec<Vec<Var>>,
    /// `(U_j^2, d_j)` per block.
    pub features: Vec<Var>,
}

impl TapeOutput {
    pub fn to_output<T: Scalar>(&self, tape: &Tape<T>, config: &ModelConfig) -> SegOutput<T> {
        let s = config.image_size;
        let logits = tape.tensor(self.logits).reshape(&[s, s, config.num_classes]).unwrap();
        let blocks = self
            .attention
            .iter()
            .enumerate()
            .map(|(j, heads)| {
                let g = config.block_grid(j);
                let k = config.block_keys(j);
                BlockAttention {
                    grid: g,
                    keys: k,
                    heads: heads
                        .iter()
                        .map(|&v| tape.tensor(v).reshape(&[g, g, k]).unwrap())
                        .collect(),
                }
            })
            .collect();
        let block_features = self
            .features
            .iter()
            .enumerate()
            .map(|(j, &v)| {
                let g = config.block_grid(j);
                tape.tensor(v).reshape(&[g, g, config.embed_dims[j]]).unwrap()
            })
            .collect();
        SegOutput {
            logits,
            attention: AttentionStack { blocks },
            block_features,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegModel<T> {
    config: ModelConfig,
    params: ParamStore<T>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).unwrap();
        Tensor::from_fn(shape, |_| T::of(dist.sample(&mut self.rng)))
    }

    fn linear<T: Scalar>(&mut self, fan_in: usize, fan_out: usize) -> Tensor<T> {
        self.normal(&[fan_in, fan_out], (1.0 / fan_in as f64).sqrt())
    }
}

fn ones<T: Scalar>(n: usize) -> Tensor<T> {
    Tensor::from_fn(&[n], |_| T::one())
}

impl<T: Scalar> SegModel<T> {
    /// Builds a randomly initialized model from `config.init_seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.init_seed),
        };
        let mut p = ParamStore::new();
        let d0 = config.embed_dims[0];
        let t0 = config.grid_size() * config.grid_size();
        p.insert("patch.w", init.linear(config.patch_dim(), d0))?;
        p.insert("patch.b", Tensor::zeros(&[d0]))?;
        p.insert("pos", init.normal(&[t0, d0], 0.1))?;
        for j in 0..config.num_blocks {
            let d = config.embed_dims[j];
            if j > 0 {
                let prev = config.embed_dims[j - 1];
                p.insert(&format!("b{j}.merge.w"), init.linear(4 * prev, d))?;
                p.insert(&format!("b{j}.merge.b"), Tensor::zeros(&[d]))?;
            }
            for l in 0..config.layers_per_block {
                let pre = format!("b{j}.l{l}");
                let hidden = d * config.mlp_ratio;
                p.insert(&format!("{pre}.ln1.g"), ones(d))?;
                p.insert(&format!("{pre}.ln1.b"), Tensor::zeros(&[d]))?;
                for name in ["q", "k", "v", "o"] {
                    p.insert(&format!("{pre}.{name}.w"), init.linear(d, d))?;
                    p.insert(&format!("{pre}.{name}.b"), Tensor::zeros(&[d]))?;
                }
                p.insert(&format!("{pre}.ln2.g"), ones(d))?;
                p.insert(&format!("{pre}.ln2.b"), Tensor::zeros(&[d]))?;
                p.insert(&format!("{pre}.fc1.w"), init.linear(d, hidden))?;
                p.insert(&format!("{pre}.fc1.b"), Tensor::zeros(&[hidden]))?;
                p.insert(&format!("{pre}.fc2.w"), init.linear(hidden, d))?;
                p.insert(&format!("{pre}.fc2.b"), Tensor::zeros(&[d]))?;
            }
            p.insert(&format!("b{j}.norm.g"), ones(d))?;
            p.insert(&format!("b{j}.norm.b"), Tensor::zeros(&[d]))?;
        }
        let fused: usize = config.embed_dims.iter().sum();
        for j in 0..config.num_blocks {
            let d = config.embed_dims[j];
            p.insert(
                &format!("head.w{j}"),
                init.normal(&[d, config.num_classes], (1.0 / fused as f64).sqrt()),
            )?;
        }
        p.insert("head.b", Tensor::zeros(&[config.num_classes]))?;
        Ok(Self { config, params: p })
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let reference = SegModel::<T>::new(config.clone())?;
        if reference.params.names() != params.names() {
            return Err(Error::Data("parameter names do not match the model config".into()));
        }
        for (i, (name, t)) in params.iter().enumerate() {
            if t.shape() != reference.params.get(i).shape() {
                return Err(Error::Data(format!(
                    "parameter {name} has shape {:?}, config expects {:?}",
                    t.shape(),
                    reference.params.get(i).shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> SegModel<U> {
        SegModel {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    fn check_image(&self, image: &Tensor<T>) -> Result<()> {
        let c = &self.config;
        let want = [c.image_size, c.image_size, c.channels];
        if image.shape() != want {
            return Err(Error::Config(format!(
                "image shape {:?} does not match model input {want:?}",
                image.shape()
            )));
        }
        Ok(())
    }

    /// Records a forward pass of `image` on `tape`. `binding` comes from
    /// `self.params().bind(tape, ..)`.
    pub fn forward_tape(&self, tape: &mut Tape<T>, binding: &[Var], image: &Tensor<T>) -> Result<TapeOutput> {
        self.check_image(image)?;
        let c = &self.config;
        let p = |name: &str| -> Result<Var> {
            self.params
                .index_of(name)
                .map(|i| binding[i])
                .ok_or_else(|| Error::Internal(format!("missing parameter {name}")))
        };
        let g0 = c.grid_size();
        let patches = grid::patchify(image.data(), c.image_size, c.channels, c.patch_size)
            .into_iter()
            .map(|v| (v - T::of(INPUT_MEAN)) / T::of(INPUT_STD))
            .collect();
        let patches = tape.constant_from(&[g0 * g0, c.patch_dim()], patches)?;
        let mut x = tape.matmul(patches, p("patch.w")?)?;
        x = tape.add_row(x, p("patch.b")?)?;
        x = tape.add(x, p("pos")?)?;

        let mut attention = Vec::with_capacity(c.num_blocks);
        let mut features = Vec::with_capacity(c.num_blocks);
        for j in 0..c.num_blocks {
            if j > 0 {
                let prev_grid = c.block_grid(j - 1);
                let parts = (0..4)
                    .map(|o| tape.gather_rows(x, grid::merge_index(prev_grid, o / 2, o % 2)))
                    .collect::<Result<Vec<_>>>()?;
                let merged = tape.concat_cols(&parts)?;
                x = tape.matmul(merged, p(&format!("b{j}.merge.w"))?)?;
                x = tape.add_row(x, p(&format!("b{j}.merge.b"))?)?;
            }
            let mut last_maps = Vec::new();
            for l in 0..c.layers_per_block {
                let (next, maps) = self.layer(tape, &p, j, l, x)?;
                x = next;
                last_maps = maps;
            }
            attention.push(last_maps);
            x = tape.layer_norm(x, p(&format!("b{j}.norm.g"))?, p(&format!("b{j}.norm.b"))?, LN_EPS)?;
            features.push(x);
        }

        let s = c.image_size;
        let mut logits: Option<Var> = None;
        for (j, &f) in features.iter().enumerate() {
            let proj = tape.matmul(f, p(&format!("head.w{j}"))?)?;
            let up = tape.gather_rows(proj, grid::upsample_index(s, c.block_grid(j)))?;
            logits = Some(match logits {
                None => up,
                Some(acc) => tape.add(acc, up)?,
            });
        }
        let logits = tape.add_row(logits.unwrap(), p("head.b")?)?;
        Ok(TapeOutput {
            logits,
            attention,
            features,
        })
    }

    fn layer(
        &self,
        tape: &mut Tape<T>,
        p: &dyn Fn(&str) -> Result<Var>,
        j: usize,
        l: usize,
        x: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let c = &self.config;
        let pre = format!("b{j}.l{l}");
        let pn = |s: &str| p(&format!("{pre}.{s}"));
        let linear = |tape: &mut Tape<T>, x: Var, name: &str| -> Result<Var> {
            let y = tape.matmul(x, pn(&format!("{name}.w"))?)?;
            tape.add_row(y, pn(&format!("{name}.b"))?)
        };

        let h = tape.layer_norm(x, pn("ln1.g")?, pn("ln1.b")?, LN_EPS)?;
        let q = linear(tape, h, "q")?;
        let r = c.key_reduction[j];
        let kv_src = if r > 1 {
            let g = c.block_grid(j);
            let pool: Vec<T> = grid::pool_matrix(g, r).into_iter().map(T::of).collect();
            let pool = tape.constant_from(&[c.block_keys(j), g * g], pool)?;
            tape.matmul(pool, h)?
        } else {
            h
        };
        let k = linear(tape, kv_src, "k")?;
        let v = linear(tape, kv_src, "v")?;
        let dh = c.head_dim(j);
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut maps = Vec::with_capacity(c.heads);
        let mut outs = Vec::with_capacity(c.heads);
        for head in 0..c.heads {
            let qh = tape.slice_cols(q, head * dh, dh)?;
            let kh = tape.slice_cols(k, head * dh, dh)?;
            let vh = tape.slice_cols(v, head * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, inv_sqrt);
            let a = tape.softmax(scores);
            maps.push(a);
            outs.push(tape.matmul(a, vh)?);
        }
        let o = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        let o = linear(tape, o, "o")?;
        let x = tape.add(x, o)?;

        let h2 = tape.layer_norm(x, pn("ln2.g")?, pn("ln2.b")?, LN_EPS)?;
        let m = linear(tape, h2, "fc1")?;
        let m = tape.gelu(m);
        let m = linear(tape, m, "fc2")?;
        let x = tape.add(x, m)?;
        Ok((x, maps))
    }

    /// Inference forward without gradient recording.
    pub fn forward(&self, image: &Tensor<T>) -> Result<SegOutput<T>> {
        let mut tape = Tape::new();
        let binding = self.params.bind(&mut tape, false);
        let out = self.forward_tape(&mut tape, &binding, image)?;
        Ok(out.to_output(&tape, &self.config))
    }

    /// Per-pixel logits only, `(image^2, classes)` row-major.
    pub fn logits(&self, image: &Tensor<T>) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let binding = self.params.bind(&mut tape, false);
        let out = self.forward_tape(&mut tape, &binding, image)?;
        Ok(tape.value(out.logits).to_vec())
    }

    /// Grows the classifier to `new_count` classes. Existing columns are kept
    /// bit-for-bit; new columns are drawn from `N(0, 0.01^2)` under `seed`.
    pub fn expand_head(&mut self, new_count: usize, seed: u64) -> Result<()> {
        let old = self.config.num_classes;
        if new_count <= old {
            return Err(Error::Usage(format!(
                "head expansion must grow the class count ({old} -> {new_count})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, NEW_HEAD_STD).unwrap();
        for j in 0..self.config.num_blocks {
            let i = self.params.index_of(&format!("head.w{j}")).unwrap();
            let w = self.params.get(i);
            let d = w.shape()[0];
            let mut data = Vec::with_capacity(d * new_count);
            for r in 0..d {
                data.extend_from_slice(w.row(r));
                for _ in old..new_count {
                    data.push(T::of(dist.sample(&mut rng)));
                }
            }
            self.params.replace(i, Tensor::new(&[d, new_count], data)?);
        }
        let i = self.params.index_of("head.b").unwrap();
        let mut b = self.params.get(i).data().to_vec();
        b.resize(new_count, T::zero());
        self.params.replace(i, Tensor::new(&[new_count], b)?);
        self.config.num_classes = new_count;
        Ok(())
    }

    /// Frozen deep copy for use as the previous-stage model.
    pub fn snapshot(&self) -> FrozenModel<T> {
        let mut model = self.clone();
        model.params.zero_grad();
        FrozenModel { model }
    }

    /// Writes `<stem>.bin` (parameters) and `<stem>.json` (model config).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        io::save(&self.params, &dir.join(format!("{stem}.bin")))?;
        let json = serde_json::to_string_pretty(&self.config).expect("config serializes");
        let path = dir.join(format!("{stem}.json"));
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let path = dir.join(format!("{stem}.json"));
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let config: ModelConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let params = io::load(&dir.join(format!("{stem}.bin")))?;
        Self::from_parts(config, params)
    }
}

/// Read-only previous-stage model. Forward passes need no tape from the caller.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenModel<T> {
    model: SegModel<T>,
}

impl<T: Scalar> FrozenModel<T> {
    pub fn forward(&self, image: &Tensor<T>) -> Result<SegOutput<T>> {
        self.model.forward(image)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    pub fn num_classes(&self) -> usize {
        self.model.config.num_classes
    }

    pub fn model(&self) -> &SegModel<T> {
        &self.model
    }

    /// A trainable copy.
    pub fn thaw(&self) -> SegModel<T> {
        self.model.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            patch_size: 1,
            num_blocks: 2,
            embed_dims: vec![4, 6],
            key_reduction: vec![1, 1],
            num_classes: 3,
            ..ModelConfig::default()
        }
    }

    fn image(cfg: &ModelConfig) -> Tensor<f32> {
        Tensor::from_fn(&[cfg.image_size, cfg.image_size, cfg.channels], |i| {
            ((i * 37 % 101) as f32) / 101.0
        })
    }

    #[test]
    fn default_config_attention_count_and_shapes() {
        let cfg = ModelConfig {
            image_size: 16,
            patch_size: 1,
            ..ModelConfig::default()
        };
        let m = SegModel::<f32>::new(cfg.clone()).unwrap();
        let out = m.forward(&image(&cfg)).unwrap();
        assert_eq!(out.attention.num_maps(), 8);
        assert_eq!(out.attention.blocks[0].heads[0].shape(), &[16, 16, 16]);
        assert_eq!(out.attention.blocks[1].heads[0].shape(), &[8, 8, 16]);
        assert_eq!(out.logits.shape(), &[16, 16, cfg.num_classes]);
        let (err, in_range) = out.attention.row_sum_error();
        assert!(err < 1e-5 && in_range);
    }

    #[test]
    fn key_reduction_shrinks_keys() {
        let cfg = ModelConfig {
            key_reduction: vec![2, 1],
            ..small()
        };
        let m = SegModel::<f32>::new(cfg.clone()).unwrap();
        let out = m.forward(&image(&cfg)).unwrap();
        assert_eq!(out.attention.blocks[0].heads[0].shape(), &[8, 8, 16]);
        assert!(out.attention.row_sum_error().0 < 1e-5);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = small();
        let m = SegModel::<f32>::new(cfg.clone()).unwrap();
        let a = m.forward(&image(&cfg)).unwrap();
        let b = m.forward(&image(&cfg)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_image_shape_is_config_error() {
        let m = SegModel::<f32>::new(small()).unwrap();
        let img = Tensor::<f32>::zeros(&[4, 4, 3]);
        assert!(matches!(m.forward(&img), Err(Error::Config(_))));
    }

    #[test]
    fn bad_configs_rejected() {
        let mut c = small();
        c.image_size = 9;
        assert!(c.validate().is_err());
        let mut c = small();
        c.embed_dims = vec![5, 6];
        assert!(c.validate().is_err());
        let mut c = small();
        c.num_blocks = 5;
        c.embed_dims = vec![4; 5];
        c.key_reduction = vec![1; 5];
        assert!(c.validate().is_err());
    }

    #[test]
    fn expand_head_keeps_old_logits() {
        let cfg = small();
        let img = image(&cfg);
        let mut m = SegModel::<f32>::new(cfg.clone()).unwrap();
        let before = m.logits(&img).unwrap();
        assert!(matches!(m.expand_head(3, 1), Err(Error::Usage(_))));
        m.expand_head(5, 1).unwrap();
        let after = m.logits(&img).unwrap();
        for (r_old, r_new) in before.chunks(3).zip(after.chunks(5)) {
            assert_eq!(r_old, &r_new[..3]);
        }
    }

    #[test]
    fn expand_head_is_seed_deterministic() {
        let base = SegModel::<f32>::new(small()).unwrap();
        let mut a = base.clone();
        let mut b = base.clone();
        a.expand_head(6, 42).unwrap();
        b.expand_head(6, 42).unwrap();
        assert_eq!(a.params(), b.params());
        let mut c = base;
        c.expand_head(6, 43).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let m = SegModel::<f32>::new(cfg.clone()).unwrap();
        m.save(dir.path(), "model").unwrap();
        let back = SegModel::<f32>::load(dir.path(), "model").unwrap();
        assert_eq!(back.forward(&image(&cfg)).unwrap(), m.forward(&image(&cfg)).unwrap());
    }
}
