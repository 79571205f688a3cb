use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::loss::{combined_loss, prepare_image, LossConfig, LossTerms, StageContext};
use super::memory::MemoryBuffer;
use super::{relabel_for_stage, ProtocolPlan, Split};
use crate::data::{self, Dataset, Sample};
use crate::error::{Error, Result};
use crate::metrics::{self, ConfusionMatrix, MetricsReport};
use crate::model::{ModelConfig, SegModel};
use crate::tensor::{ops, Sgd};

const MOMENTUM: f64 = 0.9;

// rng stream ids
const STREAM_SHUFFLE: u64 = 1;
const STREAM_HEAD: u64 = 2;
const STREAM_MEMORY: u64 = 3;

/// Everything a protocol run depends on besides the seed and the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Method label used by plot aggregation.
    pub name: String,
    /// `num_classes` and `init_seed` are replaced by the plan and run seed.
    pub model: ModelConfig,
    pub plan: ProtocolPlan,
    pub loss: LossConfig,
    pub memory_capacity: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "sats".into(),
            model: ModelConfig::default(),
            plan: ProtocolPlan::default(),
            loss: LossConfig::default(),
            memory_capacity: 0,
        }
    }
}

impl RunConfig {
    /// Full method on a named protocol preset.
    pub fn preset(name: &str) -> Option<Self> {
        Some(Self {
            plan: ProtocolPlan::preset(name)?,
            ..Self::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.plan.validate()?;
        self.loss.validate()?;
        let mut m = self.model.clone();
        m.num_classes = self.plan.output_classes(0);
        m.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// First 12 hex digits of the SHA-256 of the compact config JSON.
pub fn config_hash(cfg: &RunConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    hex::encode(Sha256::digest(json.as_bytes()))[..12].to_string()
}

pub fn run_dir_name(seed: u64, cfg: &RunConfig) -> String {
    format!("run-{seed}-{}", config_hash(cfg))
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Parent of the run directory; nothing is written without it.
    pub out_root: Option<PathBuf>,
    /// Reuse an existing non-empty run directory.
    pub force: bool,
    pub save_snapshots: bool,
    /// Directory holding trained stage-0 models keyed by everything stage 0
    /// depends on. Loss and memory settings do not affect stage 0, so runs
    /// that differ only there share the entry.
    pub stage0_cache: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub report: MetricsReport,
    /// Epoch whose parameters were kept (best all-class mIoU on eval).
    pub best_epoch: usize,
    pub epoch_miou: Vec<f64>,
    pub train_images: usize,
    pub memory_images: usize,
    /// Label ids seen in training maps, pseudo-labels included.
    pub train_label_ids: Vec<u8>,
    /// Loss of the last batch of the kept epoch's stage.
    pub last_loss: LossTerms,
    /// Buffer contents after the end-of-stage update, by internal class.
    pub memory_counts: BTreeMap<usize, usize>,
    pub memory_warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub name: String,
    pub seed: u64,
    pub config_hash: String,
    pub stages: Vec<StageRecord>,
}

fn stage_rng(seed: u64, stage: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stage as u64) << 8) | stream);
    rng
}

fn class_names(plan: &ProtocolPlan, t: usize) -> Vec<String> {
    (0..plan.output_classes(t))
        .map(|i| data::class_name(plan.dataset_class(i)))
        .collect()
}

/// Confusion matrix of `model` on `samples` under the stage-`t` evaluation
/// labels.
pub fn evaluate(model: &SegModel<f32>, samples: &[Sample], t: usize, plan: &ProtocolPlan) -> Result<ConfusionMatrix> {
    let k = model.num_classes();
    let mut cm = ConfusionMatrix::new(k);
    for s in samples {
        let labels = relabel_for_stage(&s.labels, t, plan, Split::Eval)?;
        let logits = model.logits(&s.image)?;
        cm.accumulate(&ops::argmax_rows(&logits, k), &labels)?;
    }
    Ok(cm)
}

fn stage_report(model: &SegModel<f32>, ds: &Dataset, t: usize, cfg: &RunConfig, seed: u64, hash: &str) -> Result<MetricsReport> {
    let cm = evaluate(model, &ds.eval, t, &cfg.plan)?;
    let mut r = metrics::report(&cm, cfg.plan.m, t, &class_names(&cfg.plan, t))?;
    r.seed = seed;
    r.config_hash = hash.to_string();
    Ok(r)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn prepare_run_dir(root: &Path, name: &str, force: bool) -> Result<PathBuf> {
    let dir = root.join(name);
    if dir.exists() && !force {
        let nonempty = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?.next().is_some();
        if nonempty {
            return Err(Error::Usage(format!(
                "{} already holds a run for this config and seed (use --force to overwrite)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

#[derive(Serialize, Deserialize)]
struct CacheMeta {
    best_epoch: usize,
    epoch_miou: Vec<f64>,
    last_loss: LossTerms,
}

fn stage0_key(model: &ModelConfig, plan: &ProtocolPlan, seed: u64, ds: &Dataset) -> String {
    let key = serde_json::json!({
        "model": model,
        "m": plan.m,
        "classes": &plan.class_order[..plan.m],
        "epochs": plan.epochs_initial,
        "lr": plan.lr_initial,
        "decay": plan.lr_decay,
        "scale": plan.lr_scale,
        "batch": plan.batch_size,
        "seed": seed,
        "data": data::io::fingerprint(ds),
    });
    hex::encode(Sha256::digest(key.to_string().as_bytes()))[..16].to_string()
}

/// Writes a cache entry under temporary names and renames the `.bin` last,
/// so a concurrent reader never sees a partial entry.
fn store_cached(dir: &Path, stem: &str, model: &SegModel<f32>, meta: &CacheMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    static WRITES: AtomicUsize = AtomicUsize::new(0);
    let tmp = format!("{stem}.tmp-{}-{}", std::process::id(), WRITES.fetch_add(1, Ordering::Relaxed));
    model.save(dir, &tmp)?;
    write_file(&dir.join(format!("{stem}.meta.json")), &serde_json::to_string(meta).unwrap())?;
    for ext in ["json", "bin"] {
        let from = dir.join(format!("{tmp}.{ext}"));
        fs::rename(&from, dir.join(format!("{stem}.{ext}"))).map_err(|e| Error::io(&from, e))?;
    }
    Ok(())
}

struct Trained {
    model: SegModel<f32>,
    best_epoch: usize,
    epoch_miou: Vec<f64>,
    last_loss: LossTerms,
    label_ids: BTreeSet<u8>,
}

struct Stage<'a> {
    t: usize,
    cfg: &'a RunConfig,
    ds: &'a Dataset,
    seed: u64,
    hash: &'a str,
    run_dir: Option<&'a Path>,
}

impl Stage<'_> {
    fn train(&self, mut model: SegModel<f32>, items: &[(&Sample, bool)], old: Option<&crate::model::FrozenModel<f32>>) -> Result<Trained> {
        let plan = &self.cfg.plan;
        let ctx = StageContext {
            stage: self.t,
            plan,
            loss: &self.cfg.loss,
            old,
        };
        let mut sgd = Sgd::new(MOMENTUM);
        let mut rng = stage_rng(self.seed, self.t, STREAM_SHUFFLE);
        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut best: Option<(f64, usize, SegModel<f32>, LossTerms)> = None;
        let mut epoch_miou = Vec::new();
        let mut label_ids = BTreeSet::new();
        for epoch in 0..plan.epochs(self.t) {
            let lr = plan.learning_rate(self.t, epoch);
            order.shuffle(&mut rng);
            let mut last = LossTerms::default();
            for (b, chunk) in order.chunks(plan.batch_size).enumerate() {
                let batch = chunk
                    .iter()
                    .map(|&i| prepare_image(items[i].0, items[i].1, &ctx, &model))
                    .collect::<Result<Vec<_>>>()?;
                for p in &batch {
                    label_ids.extend(p.labels.iter().copied());
                }
                last = combined_loss(&mut model, &batch, &self.cfg.loss, true)?;
                if !last.total.is_finite() {
                    let ids: Vec<u32> = chunk.iter().map(|&i| items[i].0.id).collect();
                    return Err(self.numerical_abort(epoch, b, lr, &ids, &last, &model));
                }
                sgd.step(model.params_mut(), lr)?;
            }
            let miou = stage_report(&model, self.ds, self.t, self.cfg, self.seed, self.hash)?
                .miou_all
                .unwrap_or(0.0);
            log::info!(
                "seed {} stage {} epoch {epoch}: lr {lr:.5} loss {:.4} (ce {:.4} att {:.5} kd {:.4}) eval mIoU {miou:.4}",
                self.seed, self.t, last.total, last.ce, last.attention, last.kd
            );
            epoch_miou.push(miou);
            if best.as_ref().is_none_or(|b| miou > b.0) {
                best = Some((miou, epoch, model.clone(), last));
            }
        }
        Ok(match best {
            Some((_, best_epoch, model, last_loss)) => Trained {
                model,
                best_epoch,
                epoch_miou,
                last_loss,
                label_ids,
            },
            None => Trained {
                model,
                best_epoch: 0,
                epoch_miou,
                last_loss: LossTerms::default(),
                label_ids,
            },
        })
    }

    fn numerical_abort(&self, epoch: usize, batch: usize, lr: f64, ids: &[u32], terms: &LossTerms, model: &SegModel<f32>) -> Error {
        let params: BTreeMap<&str, serde_json::Value> = model
            .params()
            .iter()
            .map(|(name, t)| {
                let finite = t.data().iter().all(|v| v.is_finite());
                let max = t.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
                (name, serde_json::json!({ "finite": finite, "max_abs": max }))
            })
            .collect();
        let dump = serde_json::json!({
            "stage": self.t,
            "epoch": epoch,
            "batch": batch,
            "learning_rate": lr,
            "sample_ids": ids,
            "loss": terms,
            "parameters": params,
        });
        let mut msg = format!(
            "non-finite loss at stage {} epoch {epoch} batch {batch} (samples {ids:?}, terms {terms:?})",
            self.t
        );
        if let Some(dir) = self.run_dir {
            let path = dir.join("diagnostics.json");
            if write_file(&path, &serde_json::to_string_pretty(&dump).unwrap()).is_ok() {
                msg.push_str(&format!("; diagnostics in {}", path.display()));
            }
        }
        Error::Numerical(msg)
    }
}

/// Runs every stage of `cfg.plan` on `ds` under `seed` and returns one record
/// per stage. With `opts.out_root` set, writes `config.json`, per-stage
/// `metrics.json`/`metrics.csv` (and snapshots on request) and `summary.json`
/// under `run-<seed>-<hash>`.
pub fn run_protocol(cfg: &RunConfig, ds: &Dataset, seed: u64, opts: &RunOptions) -> Result<RunResult> {
    cfg.validate()?;
    let plan = &cfg.plan;
    if plan.total_classes() != ds.class_count() {
        return Err(Error::Data(format!(
            "dataset has {} classes, the protocol orders {}",
            ds.class_count(),
            plan.total_classes()
        )));
    }
    if cfg.model.image_size != ds.image_size() {
        return Err(Error::Config(format!(
            "model image_size {} differs from dataset image size {}",
            cfg.model.image_size,
            ds.image_size()
        )));
    }
    let hash = config_hash(cfg);
    let run_dir = match &opts.out_root {
        Some(root) => {
            let dir = prepare_run_dir(root, &run_dir_name(seed, cfg), opts.force)?;
            write_file(&dir.join("config.json"), &cfg.to_json())?;
            Some(dir)
        }
        None => None,
    };
    let mut mcfg = cfg.model.clone();
    mcfg.num_classes = plan.output_classes(0);
    mcfg.init_seed = seed;
    let mut model = SegModel::<f32>::new(mcfg.clone())?;
    let mut memory = MemoryBuffer::new(cfg.memory_capacity);
    let table = plan.internal_table();
    let mut stages = Vec::with_capacity(plan.stage_count);
    if cfg.loss.needs_old_model() {
        log::info!("distillation and pseudo-labeling are inactive at stage 0 (no previous model)");
    }
    for t in 0..plan.stage_count {
        let stage = Stage {
            t,
            cfg,
            ds,
            seed,
            hash: &hash,
            run_dir: run_dir.as_deref(),
        };
        let result = (|| -> Result<StageRecord> {
            let old = if t > 0 {
                let old = model.snapshot();
                model.expand_head(plan.output_classes(t), {
                    use rand::RngCore;
                    stage_rng(seed, t, STREAM_HEAD).next_u64()
                })?;
                Some(old)
            } else {
                None
            };
            let current = plan.stage_classes(t);
            let has_current = |s: &Sample| {
                s.labels
                    .iter()
                    .any(|&l| table[l as usize].is_some_and(|i| current.contains(&(i as usize))))
            };
            let stage_samples: Vec<&Sample> = ds.train.iter().filter(|s| has_current(s)).collect();
            let mut items: Vec<(&Sample, bool)> = stage_samples.iter().map(|&s| (s, false)).collect();
            if t > 0 {
                items.extend(memory.entries().map(|(_, s)| (s, true)));
            }

            let cache = match (&opts.stage0_cache, t) {
                (Some(dir), 0) => Some((dir.clone(), format!("stage0-{}", stage0_key(&mcfg, plan, seed, ds)))),
                _ => None,
            };
            let cached = match &cache {
                Some((dir, stem)) if dir.join(format!("{stem}.bin")).exists() => {
                    let meta_path = dir.join(format!("{stem}.meta.json"));
                    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
                    let meta: CacheMeta = serde_json::from_str(&text)
                        .map_err(|e| Error::Data(format!("{}: {e}", meta_path.display())))?;
                    let mut label_ids = BTreeSet::new();
                    for (s, mem) in &items {
                        let split = if *mem { Split::Eval } else { Split::Train };
                        label_ids.extend(relabel_for_stage(&s.labels, t, plan, split)?);
                    }
                    log::info!("seed {seed}: stage 0 loaded from cache {stem}");
                    Some(Trained {
                        model: SegModel::load(dir, stem)?,
                        best_epoch: meta.best_epoch,
                        epoch_miou: meta.epoch_miou,
                        last_loss: meta.last_loss,
                        label_ids,
                    })
                }
                _ => None,
            };
            let trained = match cached {
                Some(c) => c,
                None => {
                    let tr = stage.train(model.clone(), &items, old.as_ref())?;
                    if let Some((dir, stem)) = &cache {
                        let meta = CacheMeta {
                            best_epoch: tr.best_epoch,
                            epoch_miou: tr.epoch_miou.clone(),
                            last_loss: tr.last_loss,
                        };
                        store_cached(dir, stem, &tr.model, &meta)?;
                    }
                    tr
                }
            };
            model = trained.model;
            let report = stage_report(&model, ds, t, cfg, seed, &hash)?;

            let memory_images = items.len() - stage_samples.len();
            drop(items);
            let mut mem_rng = stage_rng(seed, t, STREAM_MEMORY);
            let finished: Vec<usize> = current.clone().collect();
            let memory_warnings = memory.update(
                &finished,
                |c| {
                    let original = plan.dataset_class(c) as u8;
                    stage_samples.iter().copied().filter(|s| s.contains(original)).collect()
                },
                &mut mem_rng,
            );

            let record = StageRecord {
                stage: t,
                report,
                best_epoch: trained.best_epoch,
                epoch_miou: trained.epoch_miou,
                train_images: stage_samples.len(),
                memory_images,
                train_label_ids: trained.label_ids.into_iter().collect(),
                last_loss: trained.last_loss,
                memory_counts: memory.counts(),
                memory_warnings,
            };
            if let Some(dir) = &run_dir {
                let sdir = dir.join(format!("stage-{t}"));
                fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
                write_file(&sdir.join("metrics.json"), &record.report.to_json())?;
                write_file(&sdir.join("metrics.csv"), &record.report.to_csv())?;
                if opts.save_snapshots {
                    model.save(&sdir, "model")?;
                }
            }
            Ok(record)
        })();
        let record = result.map_err(|e| e.in_stage(t))?;
        log::info!(
            "seed {seed} stage {t}: mIoU all {:.4} initial {:.4} incremental {}",
            record.report.miou_all.unwrap_or(f64::NAN),
            record.report.miou_initial.unwrap_or(f64::NAN),
            record
                .report
                .miou_incremental
                .map_or("-".to_string(), |v| format!("{v:.4}"))
        );
        stages.push(record);
    }
    let result = RunResult {
        name: cfg.name.clone(),
        seed,
        config_hash: hash,
        stages,
    };
    if let Some(dir) = &run_dir {
        write_file(&dir.join("summary.json"), &serde_json::to_string_pretty(&result).unwrap())?;
    }
    Ok(result)
}
