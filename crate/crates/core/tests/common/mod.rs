#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use satslab::continual::{combined_loss, LossConfig, PreparedImage};
use satslab::distill::{
    self, attention_transfer_loss, crp_pool, BlockSubset, ClassRegionIndex, DistillSource, LabelMapping,
    PoolingVariant,
};
use satslab::model::{AttentionStack, BlockAttention, ModelConfig, SegModel};
use satslab::tensor::{ops, Tape, Tensor, Var};
use satslab::IGNORE_ID;

pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

pub fn normal(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect()
}

fn tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_f64(shape, &normal(rng, n, 1.0)).unwrap()
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
    Tensor::from_f64(shape, &v).unwrap()
}

fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> satslab::Result<Var>>;

/// Relative error between tape and central-difference gradients of
/// `sum(f(inputs) * w)` for a random weight tensor `w`.
fn check_op(rng: &mut ChaCha8Rng, inputs: &[Tensor<f64>], f: &OpFn) -> f64 {
    let eval = |xs: &[Tensor<f64>], grad: bool| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs
            .iter()
            .map(|x| if grad { tape.leaf(&x.clone().with_grad()) } else { tape.constant(x) })
            .collect();
        let out = f(&mut tape, &vars).unwrap();
        (tape, vars, out)
    };
    let weighted = |tape: &mut Tape<f64>, out: Var, w: &[f64]| {
        let shape = tape.shape(out).to_vec();
        let wc = tape.constant_from(&shape, w.to_vec()).unwrap();
        let p = tape.mul(out, wc).unwrap();
        let l = tape.sum(p);
        (tape.scalar(l), l)
    };
    let (tape0, _, out0) = eval(inputs, false);
    let w = normal(rng, tape0.value(out0).len(), 1.0);
    let (mut tape, vars, out) = eval(inputs, true);
    let (_, l) = weighted(&mut tape, out, &w);
    let grads = tape.backward(l).unwrap();
    let h = 1e-6;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (i, v) in vars.iter().enumerate() {
        let g = grads.get(*v).map_or_else(|| vec![0.0; inputs[i].numel()], <[f64]>::to_vec);
        for k in 0..inputs[i].numel() {
            let probe = |delta: f64| {
                let mut xs = inputs.to_vec();
                xs[i].data_mut()[k] += delta;
                let (mut t, _, o) = eval(&xs, false);
                weighted(&mut t, o, &w).0
            };
            numeric.push((probe(h) - probe(-h)) / (2.0 * h));
            analytic.push(g[k]);
        }
    }
    rel_error(&analytic, &numeric)
}

fn op_case(rng: &mut ChaCha8Rng, which: usize) -> (&'static str, Vec<Tensor<f64>>, OpFn) {
    let r = rng.random_range(2..5);
    let c = rng.random_range(2..5);
    match which {
        0 => {
            let k = rng.random_range(2..4);
            ("matmul", vec![tensor(rng, &[r, k]), tensor(rng, &[k, c])], Box::new(|t, v| t.matmul(v[0], v[1])))
        }
        1 => ("add_row", vec![tensor(rng, &[r, c]), tensor(rng, &[c])], Box::new(|t, v| t.add_row(v[0], v[1]))),
        2 => ("add", vec![tensor(rng, &[r, c]), tensor(rng, &[r, c])], Box::new(|t, v| t.add(v[0], v[1]))),
        3 => ("sub", vec![tensor(rng, &[r, c]), tensor(rng, &[r, c])], Box::new(|t, v| t.sub(v[0], v[1]))),
        4 => ("mul", vec![tensor(rng, &[r, c]), tensor(rng, &[r, c])], Box::new(|t, v| t.mul(v[0], v[1]))),
        5 => {
            let s = rng.random_range(-2.0..2.0);
            ("scale", vec![tensor(rng, &[r, c])], Box::new(move |t, v| Ok(t.scale(v[0], s))))
        }
        6 => ("gelu", vec![tensor(rng, &[r, c])], Box::new(|t, v| Ok(t.gelu(v[0])))),
        7 => ("log", vec![positive(rng, &[r, c])], Box::new(|t, v| Ok(t.log(v[0])))),
        8 => ("exp", vec![tensor(rng, &[r, c])], Box::new(|t, v| Ok(t.exp(v[0])))),
        9 => ("softmax", vec![tensor(rng, &[r, c])], Box::new(|t, v| Ok(t.softmax(v[0])))),
        10 => (
            "layer_norm",
            vec![tensor(rng, &[r, c + 1]), tensor(rng, &[c + 1]), tensor(rng, &[c + 1])],
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
        11 => ("transpose", vec![tensor(rng, &[r, c])], Box::new(|t, v| t.transpose(v[0]))),
        12 => ("reshape", vec![tensor(rng, &[r, c])], Box::new(move |t, v| t.reshape(v[0], &[c, r]))),
        13 => {
            let index: Vec<usize> = (0..r + 2).map(|_| rng.random_range(0..r)).collect();
            ("gather_rows", vec![tensor(rng, &[r, c])], Box::new(move |t, v| t.gather_rows(v[0], index.clone())))
        }
        14 => (
            "concat_cols",
            vec![tensor(rng, &[r, c]), tensor(rng, &[r, 2])],
            Box::new(|t, v| t.concat_cols(&[v[0], v[1]])),
        ),
        15 => {
            let start = rng.random_range(0..c);
            let len = rng.random_range(1..=c - start);
            ("slice_cols", vec![tensor(rng, &[r, c])], Box::new(move |t, v| t.slice_cols(v[0], start, len)))
        }
        16 => (
            "concat_rows",
            vec![tensor(rng, &[r, c]), tensor(rng, &[2, c])],
            Box::new(|t, v| t.concat_rows(&[v[0], v[1]])),
        ),
        17 => {
            let mut rows: Vec<usize> = (0..r).filter(|_| rng.random_bool(0.6)).collect();
            if rows.is_empty() {
                rows.push(0);
            }
            (
                "masked_mean_rows",
                vec![tensor(rng, &[r, c])],
                Box::new(move |t, v| t.masked_mean_rows(v[0], rows.clone())),
            )
        }
        18 => ("mse", vec![tensor(rng, &[r, c]), tensor(rng, &[r, c])], Box::new(|t, v| t.mse(v[0], v[1]))),
        19 => {
            let mut targets: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
            targets[0] = 99;
            (
                "cross_entropy",
                vec![tensor(rng, &[r, c])],
                Box::new(move |t, v| t.cross_entropy(v[0], targets.clone(), 99)),
            )
        }
        20 => {
            let c = c + 2;
            let groups = distill::unbiased_groups(c - 2, c);
            (
                "grouped_log_softmax",
                vec![tensor(rng, &[r, c])],
                Box::new(move |t, v| t.grouped_log_softmax(v[0], groups.clone())),
            )
        }
        21 => ("sum", vec![tensor(rng, &[r, c])], Box::new(|t, v| Ok(t.sum(v[0])))),
        _ => ("mean", vec![tensor(rng, &[r, c])], Box::new(|t, v| Ok(t.mean(v[0])))),
    }
}

pub const OP_KINDS: usize = 23;

pub fn tiny_model_config(num_classes: usize) -> ModelConfig {
    ModelConfig {
        image_size: 8,
        patch_size: 1,
        channels: 3,
        num_blocks: 2,
        heads: 2,
        embed_dims: vec![4, 8],
        layers_per_block: 1,
        key_reduction: vec![2, 1],
        mlp_ratio: 2,
        num_classes,
        init_seed: 0,
    }
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize, classes: usize, ignore_rate: f64) -> Vec<u8> {
    (0..n)
        .map(|_| {
            if rng.random_bool(ignore_rate) {
                IGNORE_ID
            } else {
                rng.random_range(0..classes) as u8
            }
        })
        .collect()
}

/// A batch of images for a `new_count`-class model distilled from a
/// perturbed `old_count`-class model, all at 64-bit.
pub fn distill_batch(
    rng: &mut ChaCha8Rng,
    images: usize,
    old_count: usize,
    new_count: usize,
) -> (SegModel<f64>, Vec<PreparedImage<f64>>) {
    let mut cfg = tiny_model_config(old_count);
    cfg.init_seed = rng.random();
    let old = SegModel::<f64>::new(cfg.clone()).unwrap().snapshot();
    let mut model = old.thaw();
    if new_count > old_count {
        model.expand_head(new_count, rng.random()).unwrap();
    }
    for t in model.params_mut().tensors_mut() {
        let noise = normal(rng, t.numel(), 0.05);
        t.data_mut().iter_mut().zip(noise).for_each(|(v, n)| *v += n);
    }
    let s = cfg.image_size;
    let batch = (0..images)
        .map(|_| {
            let image = Tensor::from_f64(&[s, s, 3], &(0..s * s * 3).map(|_| rng.random()).collect::<Vec<_>>()).unwrap();
            let labels = random_labels(rng, s * s, new_count, 0.1);
            let index = ClassRegionIndex::build(&labels, model.config(), new_count, LabelMapping::Nearest).unwrap();
            PreparedImage {
                old: Some(old.forward(&image).unwrap()),
                image,
                labels,
                index,
            }
        })
        .collect();
    (model, batch)
}

pub fn loss_variant(i: usize) -> LossConfig {
    let pooling = [PoolingVariant::Crp, PoolingVariant::Gp, PoolingVariant::Np][i % 3];
    let source = [DistillSource::Attention, DistillSource::Feature, DistillSource::Both][(i / 3) % 3];
    let blocks = if i % 2 == 0 { BlockSubset::All } else { BlockSubset::Last(1) };
    LossConfig {
        lambda_a: 3.0,
        lambda_d: 2.0,
        pooling,
        distill_source: source,
        block_subset: blocks,
        ..LossConfig::default()
    }
}

/// Relative error of the combined-loss parameter gradient against central
/// differences on `probes` random parameter entries.
fn check_end_to_end(rng: &mut ChaCha8Rng, case: usize, probes: usize) -> f64 {
    let (mut model, batch) = distill_batch(rng, 2, 3, 5);
    let cfg = loss_variant(case);
    model.params_mut().zero_grad();
    combined_loss(&mut model, &batch, &cfg, true).unwrap();
    let counts: Vec<usize> = (0..model.params().len()).map(|i| model.params().get(i).numel()).collect();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let h = 1e-6;
    for _ in 0..probes {
        let p = rng.random_range(0..counts.len());
        let k = rng.random_range(0..counts[p]);
        analytic.push(model.params().get(p).grad().unwrap()[k]);
        let base = model.params().get(p).data()[k];
        let mut at = |v: f64| {
            model.params_mut().get_mut(p).data_mut()[k] = v;
            combined_loss(&mut model, &batch, &cfg, false).unwrap().total
        };
        let d = (at(base + h) - at(base - h)) / (2.0 * h);
        at(base);
        numeric.push(d);
    }
    rel_error(&analytic, &numeric)
}

pub const OP_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

/// 100 random cases: 90 single-op checks cycling through every op kind and
/// 10 end-to-end combined-loss checks over pooling, source and block
/// variants.
pub fn gradient_suite(seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_op = (0.0, "");
    let mut failures = Vec::new();
    for case in 0..90 {
        let (name, inputs, f) = op_case(&mut rng, case % OP_KINDS);
        let e = check_op(&mut rng, &inputs, &f);
        if e > worst_op.0 {
            worst_op = (e, name);
        }
        if !(e < OP_TOLERANCE) {
            failures.push(format!("{name} case {case}: {e:.2e}"));
        }
    }
    let mut worst_e2e: f64 = 0.0;
    for case in 0..10 {
        let e = check_end_to_end(&mut rng, case, 12);
        worst_e2e = worst_e2e.max(e);
        if !(e < END_TO_END_TOLERANCE) {
            failures.push(format!("end-to-end case {case}: {e:.2e}"));
        }
    }
    Outcome {
        passed: failures.is_empty(),
        detail: format!(
            "worst op rel err {:.2e} ({}), worst end-to-end {:.2e}{}",
            worst_op.0,
            worst_op.1,
            worst_e2e,
            if failures.is_empty() { String::new() } else { format!("; failed: {}", failures.join(", ")) }
        ),
    }
}

pub fn random_stack(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> AttentionStack<f64> {
    let blocks = (0..cfg.num_blocks)
        .map(|j| {
            let g = cfg.block_grid(j);
            let k = cfg.block_keys(j);
            let heads = (0..cfg.heads)
                .map(|_| {
                    let logits = normal(rng, g * g * k, 2.0);
                    Tensor::new(&[g, g, k], ops::softmax_rows(&logits, k)).unwrap()
                })
                .collect();
            BlockAttention { grid: g, keys: k, heads }
        })
        .collect();
    AttentionStack { blocks }
}

/// Token label of cell `(u, v)` of a `g x g` grid over an `s x s` map.
fn naive_token_label(labels: &[u8], s: usize, g: usize, u: usize, v: usize, mapping: LabelMapping) -> u8 {
    let cell = s / g;
    match mapping {
        LabelMapping::Nearest => labels[(u * cell + cell / 2) * s + v * cell + cell / 2],
        LabelMapping::Majority => {
            let mut best = (0usize, IGNORE_ID);
            for label in 0..=255u8 {
                if label == IGNORE_ID {
                    continue;
                }
                let mut n = 0;
                for y in u * cell..(u + 1) * cell {
                    for x in v * cell..(v + 1) * cell {
                        if labels[y * s + x] == label {
                            n += 1;
                        }
                    }
                }
                if n > best.0 {
                    best = (n, label);
                }
            }
            best.1
        }
    }
}

/// Loop oracle: `oracle[class][head][block]` is the mean attention row over
/// the class's tokens, `None` for an empty region.
pub fn naive_crp(
    attn: &AttentionStack<f64>,
    labels: &[u8],
    s: usize,
    classes: usize,
    mapping: LabelMapping,
) -> Vec<(usize, Vec<Vec<Option<Vec<f64>>>>)> {
    let mut out = Vec::new();
    for c in 1..classes {
        let mut per_head = Vec::new();
        let mut present = false;
        for h in 0..attn.num_heads() {
            let mut per_block = Vec::new();
            for b in &attn.blocks {
                let g = b.grid;
                let data = b.heads[h].data();
                let mut acc = vec![0.0; b.keys];
                let mut n = 0usize;
                for u in 0..g {
                    for v in 0..g {
                        if naive_token_label(labels, s, g, u, v, mapping) as usize == c {
                            for k in 0..b.keys {
                                acc[k] += data[(u * g + v) * b.keys + k];
                            }
                            n += 1;
                        }
                    }
                }
                if n == 0 {
                    per_block.push(None);
                } else {
                    present = true;
                    per_block.push(Some(acc.iter().map(|a| a / n as f64).collect()));
                }
            }
            per_head.push(per_block);
        }
        if present {
            out.push((c, per_head));
        }
    }
    out
}

pub const CRP_TOLERANCE: f64 = 1e-12;

/// 200 random (attention, label) instances against the loop oracle. Every
/// instance uses key reduction 2 in at least one block; one in eight label
/// maps is pure background and others contain classes that vanish at coarse
/// blocks.
pub fn crp_oracle(seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut mismatches = 0;
    let mut empty_cases = 0;
    let mut vanished = 0;
    for case in 0..200 {
        let num_blocks = rng.random_range(2..4);
        let heads = rng.random_range(1..4);
        let cfg = ModelConfig {
            image_size: 16,
            patch_size: [1, 2][case % 2],
            num_blocks,
            heads,
            embed_dims: vec![2 * heads; num_blocks],
            key_reduction: (0..num_blocks).map(|j| if j == 0 { 2 } else { [1, 2][rng.random_range(0..2)] }).collect(),
            num_classes: 5,
            ..ModelConfig::default()
        };
        let cfg = ModelConfig {
            key_reduction: cfg
                .key_reduction
                .iter()
                .enumerate()
                .map(|(j, &r)| if cfg.block_grid(j) % r == 0 { r } else { 1 })
                .collect(),
            ..cfg
        };
        cfg.validate().unwrap();
        let s = cfg.image_size;
        let mapping = if case % 3 == 0 { LabelMapping::Majority } else { LabelMapping::Nearest };
        let labels: Vec<u8> = if case % 8 == 0 {
            empty_cases += 1;
            vec![0; s * s]
        } else {
            let mut l = vec![0u8; s * s];
            for _ in 0..rng.random_range(1..5) {
                let c = rng.random_range(1..5) as u8;
                let (h, w) = (rng.random_range(1..8), rng.random_range(1..8));
                let (y0, x0) = (rng.random_range(0..s - h), rng.random_range(0..s - w));
                for y in y0..y0 + h {
                    for x in x0..x0 + w {
                        l[y * s + x] = c;
                    }
                }
            }
            for _ in 0..rng.random_range(0..6) {
                let p = rng.random_range(0..s * s);
                l[p] = IGNORE_ID;
            }
            l
        };
        let attn = random_stack(&mut rng, &cfg);
        let index = ClassRegionIndex::build(&labels, &cfg, 5, mapping).unwrap();
        let pooled = crp_pool(&attn, &index).unwrap();
        let oracle = naive_crp(&attn, &labels, s, 5, mapping);
        let classes: Vec<usize> = oracle.iter().map(|(c, _)| *c).collect();
        if pooled.classes() != classes {
            mismatches += 1;
            continue;
        }
        for (c, heads) in &oracle {
            for (h, blocks) in heads.iter().enumerate() {
                let got = pooled.get(*c, h).unwrap();
                for (j, want) in blocks.iter().enumerate() {
                    match (&got.segments[j], want) {
                        (Some(a), Some(b)) => {
                            for (x, y) in a.iter().zip(b) {
                                worst = worst.max((x - y).abs());
                            }
                        }
                        (None, None) => vanished += usize::from(j > 0),
                        _ => mismatches += 1,
                    }
                }
            }
        }
    }
    Outcome {
        passed: mismatches == 0 && worst <= CRP_TOLERANCE && empty_cases > 0 && vanished > 0,
        detail: format!(
            "max abs diff {worst:.1e}, {mismatches} structural mismatches, {empty_cases} all-background maps, {vanished} vanished block regions"
        ),
    }
}

/// Plain-loop attention transfer loss over pooled oracle vectors.
pub fn naive_transfer(
    old: &[Vec<(usize, Vec<Vec<Option<Vec<f64>>>>)>],
    new: &[Vec<(usize, Vec<Vec<Option<Vec<f64>>>>)>],
    heads: usize,
) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for (o, nw) in old.iter().zip(new) {
        if nw.is_empty() {
            continue;
        }
        n += 1;
        let mut per_image = 0.0;
        for ((_, oh), (_, nh)) in o.iter().zip(nw) {
            for (ob, nb) in oh.iter().zip(nh) {
                for (a, b) in ob.iter().zip(nb) {
                    if let (Some(a), Some(b)) = (a, b) {
                        per_image += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
                    }
                }
            }
        }
        sum += per_image / nw.len() as f64;
    }
    if n == 0 {
        0.0
    } else {
        sum / (n * heads) as f64
    }
}

pub fn duplicate_heads(attn: &AttentionStack<f64>) -> AttentionStack<f64> {
    AttentionStack {
        blocks: attn
            .blocks
            .iter()
            .map(|b| BlockAttention {
                grid: b.grid,
                keys: b.keys,
                heads: b.heads.iter().chain(&b.heads).cloned().collect(),
            })
            .collect(),
    }
}

pub const IDENTITY_TOLERANCE: f64 = 1e-9;

/// Attention transfer of an image set at `heads` heads per block.
pub fn transfer(old: &[AttentionStack<f64>], new: &[AttentionStack<f64>], index: &[ClassRegionIndex]) -> f64 {
    let po: Vec<_> = old.iter().zip(index).map(|(a, i)| crp_pool(a, i).unwrap()).collect();
    let pn: Vec<_> = new.iter().zip(index).map(|(a, i)| crp_pool(a, i).unwrap()).collect();
    attention_transfer_loss(&po, &pn, new[0].num_heads()).unwrap()
}

/// The four loss identities, each on random 64-bit instances.
pub fn loss_identities(seed: u64) -> Vec<(&'static str, Outcome)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    // old = new
    let mut nonzero = 0;
    for _ in 0..20 {
        let (mut model, mut batch) = distill_batch(&mut rng, 2, 4, 4);
        for item in &mut batch {
            item.old = Some(model.forward(&item.image).unwrap());
        }
        let terms = combined_loss(&mut model, &batch, &LossConfig::default(), false).unwrap();
        if terms.attention != 0.0 {
            nonzero += 1;
        }
    }
    out.push((
        "attention transfer with old = new is exactly 0",
        Outcome {
            passed: nonzero == 0,
            detail: format!("{nonzero} of 20 batches nonzero"),
        },
    ));

    // unbiased KD without new classes
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let rows = rng.random_range(1..20);
        let c = rng.random_range(2..6);
        let old = Tensor::<f64>::from_f64(&[rows, c], &normal(&mut rng, rows * c, 2.0)).unwrap();
        let new = Tensor::<f64>::from_f64(&[rows, c], &normal(&mut rng, rows * c, 2.0)).unwrap();
        let kd = distill::unbiased_kd_loss(&old, &new, c, None).unwrap();
        let mut ce = 0.0;
        for r in 0..rows {
            let p = ops::softmax_rows(old.row(r), c);
            let lq = ops::log_softmax_rows(new.row(r), c);
            ce -= p.iter().zip(&lq).map(|(a, b)| a * b).sum::<f64>();
        }
        worst = worst.max((kd - ce / rows as f64).abs());
    }
    out.push((
        "unbiased KD with no new classes equals distillation cross-entropy",
        Outcome {
            passed: worst < IDENTITY_TOLERANCE,
            detail: format!("max abs diff {worst:.1e}"),
        },
    ));

    // additivity
    let mut worst: f64 = 0.0;
    for case in 0..20 {
        let (mut model, batch) = distill_batch(&mut rng, 3, 3, 5);
        let cfg = loss_variant(case);
        let full = combined_loss(&mut model, &batch, &cfg, false).unwrap();
        let weighted = full.ce + cfg.lambda_a * (full.attention + full.feature) + cfg.lambda_d * full.kd;
        let only = |m: &mut SegModel<f64>, att: bool, kd: bool| {
            let c = LossConfig {
                use_attention_loss: att,
                use_output_kd: kd,
                ..cfg.clone()
            };
            combined_loss(m, &batch, &c, false).unwrap().total
        };
        let ce = only(&mut model, false, false);
        let with_att = only(&mut model, true, false);
        let with_kd = only(&mut model, false, true);
        let parts = ce + (with_att - ce) + (with_kd - ce);
        worst = worst.max((full.total - weighted).abs()).max((full.total - parts).abs());
    }
    out.push((
        "combined loss equals the weighted sum of its terms",
        Outcome {
            passed: worst < IDENTITY_TOLERANCE,
            detail: format!("max abs diff {worst:.1e}"),
        },
    ));

    // duplicated heads
    let mut worst: f64 = 0.0;
    for _ in 0..30 {
        let cfg = ModelConfig {
            image_size: 16,
            patch_size: 2,
            num_blocks: 2,
            heads: rng.random_range(1..4),
            embed_dims: vec![6, 6],
            key_reduction: vec![2, 1],
            num_classes: 4,
            ..ModelConfig::default()
        };
        let images = 3;
        let old: Vec<_> = (0..images).map(|_| random_stack(&mut rng, &cfg)).collect();
        let new: Vec<_> = (0..images).map(|_| random_stack(&mut rng, &cfg)).collect();
        let index: Vec<_> = (0..images)
            .map(|_| {
                let labels = random_labels(&mut rng, 256, 4, 0.0);
                ClassRegionIndex::build(&labels, &cfg, 4, LabelMapping::Nearest).unwrap()
            })
            .collect();
        let base = transfer(&old, &new, &index);
        let dup_old: Vec<_> = old.iter().map(duplicate_heads).collect();
        let dup_new: Vec<_> = new.iter().map(duplicate_heads).collect();
        let dup = transfer(&dup_old, &dup_new, &index);
        worst = worst.max((base - dup).abs() / base.abs().max(1e-300));
    }
    out.push((
        "attention transfer is invariant to duplicated heads",
        Outcome {
            passed: worst < IDENTITY_TOLERANCE,
            detail: format!("max rel diff {worst:.1e}"),
        },
    ));
    out
}

pub fn small_protocol(preset: &str, memory: usize) -> (satslab::continual::RunConfig, satslab::data::Dataset) {
    let mut cfg = satslab::continual::RunConfig::preset(preset).unwrap();
    cfg.plan.epochs_initial = 2;
    cfg.plan.epochs_incremental = 1;
    cfg.memory_capacity = memory;
    let spec = satslab::data::SceneSpec {
        class_count: cfg.plan.total_classes(),
        train_size: 60,
        eval_size: 20,
        seed: 4,
        ..Default::default()
    };
    (cfg, satslab::data::generate(&spec).unwrap())
}

/// Memory bounds, relabeling ids and byte-identical metrics across two runs
/// of a reduced synth-4-1 protocol with a 20-image memory.
pub fn protocol_invariants(root: &std::path::Path) -> Outcome {
    use satslab::continual::{run_dir_name, run_protocol, RunOptions};
    let (cfg, ds) = small_protocol("synth-4-1", 20);
    let mut problems = Vec::new();
    let mut runs = Vec::new();
    for rep in 0..2 {
        let opts = RunOptions {
            out_root: Some(root.join(format!("rep{rep}"))),
            ..Default::default()
        };
        runs.push(run_protocol(&cfg, &ds, 9, &opts).unwrap());
    }
    let run = &runs[0];
    for s in &run.stages {
        let counts: Vec<usize> = s.memory_counts.values().copied().collect();
        let total: usize = counts.iter().sum();
        if total > cfg.memory_capacity {
            problems.push(format!("stage {}: {total} stored", s.stage));
        }
        if let (Some(lo), Some(hi)) = (counts.iter().min(), counts.iter().max()) {
            if hi - lo > 1 && s.memory_warnings.is_empty() {
                problems.push(format!("stage {}: unbalanced {counts:?}", s.stage));
            }
        }
        let permitted = cfg.plan.permitted_train_ids(s.stage);
        if let Some(bad) = s.train_label_ids.iter().find(|l| !permitted.contains(l)) {
            problems.push(format!("stage {}: label id {bad} in training maps", s.stage));
        }
    }
    let name = run_dir_name(9, &cfg);
    let mut compared = 0;
    for t in 0..cfg.plan.stage_count {
        let read = |rep: usize| std::fs::read(root.join(format!("rep{rep}")).join(&name).join(format!("stage-{t}/metrics.json"))).unwrap();
        if read(0) != read(1) {
            problems.push(format!("stage {t}: metrics.json differs"));
        }
        compared += 1;
    }
    Outcome {
        passed: problems.is_empty() && run.stages.len() == 6,
        detail: if problems.is_empty() {
            format!("{} stages checked, {compared} metrics files identical", run.stages.len())
        } else {
            problems.join("; ")
        },
    }
}
