//! The two-phase trainer: statistics collection, then the optimization
//! loop with checkpointing, resumption, and early stopping.
//!
//! Output directory layout:
//!
//! ```text
//! out_dir/
//!   config.resolved      fully-resolved TOML config
//!   stats/               shape files, feats_stats.json, meta.json
//!   checkpoints/last     written after every epoch
//!   checkpoints/best     written when the tracked metric improves
//!   metrics.jsonl        one JSON object per epoch
//! ```

pub mod checkpoint;
pub mod config;
pub mod optim;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_pcg::Pcg64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::batching::{self, hash_words, BatchPlan};
use crate::dataset::{Array, Dataset, FieldValue, Item};
use crate::error::{Error, Result};
use crate::finetune::{self, AugmentationSpec};
use crate::model::TrainableModel;
use crate::stats::{self, ShapeLines, ShapeRecord, StatsMap};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, EpochRecord};
pub use config::{BatchingConfig, ModelConfig, TrainConfig};
pub use optim::{adamw_step, clip_grad_norm, lr_at, noam_lr, AdamState, AdamWParams};

pub const STATS_DIR: &str = "stats";
pub const STATS_FILE: &str = "feats_stats.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LAST: &str = "last";
pub const BEST: &str = "best";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const RESOLVED_CONFIG: &str = "config.resolved";
const STATS_META: &str = "meta.json";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub epochs_run: u32,
    pub history: Vec<EpochRecord>,
    pub best_epoch: u32,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatsArtifacts {
    pub shapes: Vec<ShapeRecord>,
    pub stats: StatsMap,
    /// False when up-to-date artifacts were reused.
    pub recomputed: bool,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct StatsMeta {
    config_hash: String,
    num_items: usize,
    fields: Vec<String>,
}

fn stats_key(fields: &[String], ds: &dyn Dataset) -> String {
    let mut h = Sha256::new();
    for f in fields {
        h.update(f.as_bytes());
        h.update([0]);
    }
    h.update((ds.len() as u64).to_le_bytes());
    for i in 0..ds.len() {
        h.update(ds.id(i).as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

fn shape_file_name(field: &str) -> String {
    format!("{field}_shape")
}

fn read_fresh_stats(dir: &Path, key: &str, num_items: usize) -> Option<StatsArtifacts> {
    let meta: StatsMeta = serde_json::from_slice(&fs::read(dir.join(STATS_META)).ok()?).ok()?;
    if meta.config_hash != key || meta.num_items != num_items {
        return None;
    }
    let mut per_field = BTreeMap::new();
    for field in &meta.fields {
        let lines: ShapeLines = stats::read_shape_file(dir.join(shape_file_name(field))).ok()?;
        per_field.insert(field.clone(), lines);
    }
    let stats = stats::read_stats_file(dir.join(STATS_FILE)).ok()?;
    Some(StatsArtifacts {
        shapes: stats::records_from_fields(&per_field),
        stats,
        recomputed: false,
    })
}

/// Records shapes and feature statistics of `ds` under `out_dir/stats`.
/// Skipped when artifacts for the same fields and item ids already exist.
pub fn collect_stats_phase(cfg: &TrainConfig, ds: &dyn Dataset, out_dir: impl AsRef<Path>) -> Result<StatsArtifacts> {
    let dir = out_dir.as_ref().join(STATS_DIR);
    let key = stats_key(&cfg.stats_fields, ds);
    if let Some(fresh) = read_fresh_stats(&dir, &key, ds.len()) {
        return Ok(fresh);
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let _ = fs::remove_file(dir.join(STATS_META));

    let (shapes, stats_map) = stats::collect_stats_sharded(ds, &cfg.stats_fields, cfg.num_workers)?;
    for field in &cfg.stats_fields {
        stats::write_shape_file(
            &stats::shapes_for_field(&shapes, field),
            dir.join(shape_file_name(field)),
        )?;
    }
    stats::write_stats_file(&stats_map, dir.join(STATS_FILE))?;
    let meta = StatsMeta {
        config_hash: key,
        num_items: ds.len(),
        fields: cfg.stats_fields.clone(),
    };
    let meta_path = dir.join(STATS_META);
    fs::write(&meta_path, serde_json::to_vec_pretty(&meta).expect("meta serializes"))
        .map_err(|e| Error::io(&meta_path, e))?;
    Ok(StatsArtifacts {
        shapes,
        stats: stats_map,
        recomputed: true,
    })
}

/// Mean loss (and model metrics) over `ds`, in fixed unshuffled batches of
/// `batch_size`, weighted by batch size.
pub fn evaluate(model: &TrainableModel, ds: &dyn Dataset, batch_size: usize) -> Result<BTreeMap<String, f64>> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let plan = batching::build_fixed_sampler(&ds.ids(), batch_size, 0, 0, false);
    let mut totals: BTreeMap<String, f64> = BTreeMap::new();
    for batch_ids in &plan.batches {
        let items = batch_ids
            .iter()
            .map(|id| ds.get_by_id(id))
            .collect::<Result<Vec<_>>>()?;
        let n = items.len() as f64;
        let (loss, _) = model.loss_and_grads(&items)?;
        *totals.entry("loss".into()).or_default() += loss * n;
        for (k, v) in model.network.metrics(&model.params, &items)? {
            *totals.entry(k).or_default() += v * n;
        }
    }
    let n = ds.len() as f64;
    Ok(totals.into_iter().map(|(k, v)| (k, v / n)).collect())
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn augment_item(item: &mut Item, id: &str, spec: &AugmentationSpec, epoch_seed: u64, sample_rate: u32) {
    if let Some(FieldValue::Array(a)) = item.get("speech") {
        if a.shape().len() != 1 {
            return;
        }
        let mut rng = Pcg64::seed_from_u64(hash_words(&[epoch_seed, fnv1a(id)]));
        let (wave, _) = finetune::augment(a.data(), spec, sample_rate, &mut rng);
        if let Ok(arr) = Array::vector(wave) {
            item.insert("speech".into(), arr.into());
        }
    }
}

struct Loader<'a> {
    ds: &'a dyn Dataset,
    pool: rayon::ThreadPool,
}

impl<'a> Loader<'a> {
    fn new(ds: &'a dyn Dataset, workers: usize) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        Ok(Self { ds, pool })
    }

    /// Items of `ids` in order, built on the worker pool.
    fn load<F>(&self, ids: &[String], post: F) -> Result<Vec<Item>>
    where
        F: Fn(&mut Item, &str) + Sync,
    {
        self.pool.install(|| {
            ids.par_iter()
                .map(|id| {
                    let mut item = self.ds.get_by_id(id)?;
                    post(&mut item, id);
                    Ok(item)
                })
                .collect()
        })
    }
}

fn write_metrics(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = String::new();
    for rec in history {
        out.push_str(&serde_json::to_string(rec).expect("record serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn improved(candidate: f64, best: Option<f64>, maximize: bool) -> bool {
    match best {
        None => true,
        Some(b) if maximize => candidate > b,
        Some(b) => candidate < b,
    }
}

pub fn checkpoint_path(out_dir: impl AsRef<Path>, which: &str) -> PathBuf {
    out_dir.as_ref().join(CHECKPOINT_DIR).join(which)
}

/// Runs statistics collection (unless `plan_override` is given) and then
/// trains `model` in place, resuming from `out_dir/checkpoints/last` when
/// present. With `plan_override`, every epoch uses exactly that plan.
pub fn train(
    model: &mut TrainableModel,
    train_ds: &dyn Dataset,
    valid_ds: &dyn Dataset,
    cfg: &TrainConfig,
    out_dir: impl AsRef<Path>,
    plan_override: Option<&BatchPlan>,
) -> Result<TrainResult> {
    cfg.validate()?;
    let out = out_dir.as_ref();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let resolved = out.join(RESOLVED_CONFIG);
    fs::write(&resolved, cfg.to_toml_string()?).map_err(|e| Error::io(&resolved, e))?;

    let shapes = match (plan_override, &cfg.batching) {
        (None, BatchingConfig::Numel { .. }) => Some(collect_stats_phase(cfg, train_ds, out)?.shapes),
        _ => None,
    };

    let hash = cfg.config_hash();
    let last_path = checkpoint_path(out, LAST);
    let best_path = checkpoint_path(out, BEST);
    let metrics_path = out.join(METRICS_FILE);

    let mut state = if last_path.exists() {
        let ckpt = checkpoint::load_compatible(&last_path, &hash)?;
        model.params = ckpt.params.clone();
        ckpt
    } else {
        Checkpoint {
            epoch: 0,
            global_step: 0,
            params: model.params.clone(),
            optimizer_state: AdamState::new(&model.params),
            rng_state: Pcg64::seed_from_u64(hash_words(&[cfg.seed, 0x7261_6e64])),
            best_valid_metric: None,
            best_epoch: 0,
            epochs_since_improvement: 0,
            stopped_early: false,
            history: Vec::new(),
            config_hash: hash.clone(),
        }
    };

    let (metric, maximize) = cfg.best_metric();
    let hp = AdamWParams::from(cfg);
    let loader = Loader::new(train_ds, cfg.num_workers)?;
    let sample_rate = cfg.model.as_ref().map_or(16000, |m| m.sample_rate);

    while state.epoch < cfg.max_epoch && !state.stopped_early {
        let epoch = state.epoch + 1;
        let started = Instant::now();
        let plan = match plan_override {
            Some(p) => p.clone(),
            None => match &cfg.batching {
                BatchingConfig::Numel { batch_bins } => {
                    batching::build_numel_sampler(shapes.as_deref().unwrap_or(&[]), *batch_bins, cfg.seed, epoch as u64)
                }
                BatchingConfig::Fixed { batch_size } => {
                    batching::build_fixed_sampler(&train_ds.ids(), *batch_size, cfg.seed, epoch as u64, true)
                }
            },
        };
        let aug_seed = state.rng_state.next_u64();

        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let mut lr = 0.0;
        for batch_ids in &plan.batches {
            let items = loader.load(batch_ids, |item, id| {
                if let Some(spec) = &cfg.augmentation {
                    augment_item(item, id, spec, aug_seed, sample_rate);
                }
            })?;
            let step = state.global_step + 1;
            let (loss, mut grads) = model.loss_and_grads(&items)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteGradient {
                    param: "<loss>".into(),
                    step,
                });
            }
            grads.retain(|name, _| model.is_trainable(name));
            if let Some(max_norm) = cfg.grad_clip {
                clip_grad_norm(&mut grads, max_norm);
            }
            lr = lr_at(step, cfg);
            adamw_step(&mut model.params, &grads, &mut state.optimizer_state, lr, hp)?;
            state.global_step = step;
            loss_sum += loss * items.len() as f64;
            seen += items.len();
        }

        let valid = evaluate(model, valid_ds, cfg.valid_batch_size)?;
        let tracked = *valid
            .get(metric)
            .ok_or_else(|| Error::Config(format!("validation produced no metric `{metric}`")))?;
        let record = EpochRecord {
            epoch,
            step: state.global_step,
            train_loss: if seen > 0 { loss_sum / seen as f64 } else { f64::NAN },
            valid_loss: valid["loss"],
            lr,
            wall_time_sec: started.elapsed().as_secs_f64(),
            valid_metrics: valid.into_iter().filter(|(k, _)| k != "loss").collect(),
        };
        state.history.push(record);
        state.epoch = epoch;
        state.params = model.params.clone();

        if improved(tracked, state.best_valid_metric, maximize) {
            state.best_valid_metric = Some(tracked);
            state.best_epoch = epoch;
            state.epochs_since_improvement = 0;
            save_checkpoint(&best_path, &state)?;
        } else {
            state.epochs_since_improvement += 1;
            if state.epochs_since_improvement >= cfg.patience {
                state.stopped_early = true;
            }
        }
        save_checkpoint(&last_path, &state)?;
        write_metrics(&metrics_path, &state.history)?;
    }

    Ok(TrainResult {
        epochs_run: state.history.len() as u32,
        history: state.history,
        best_epoch: state.best_epoch,
        stopped_early: state.stopped_early,
    })
}
