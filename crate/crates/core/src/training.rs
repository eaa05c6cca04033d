//! Training loops for rotation pretraining, BoW reconstruction and
//! classifier probes, sharing one epoch driver with checkpointing and resume.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{read_json, write_atomic, write_json};
use crate::backbone::{classify, rotation_logits, Network};
use crate::checkpoint::{
    architecture_hash, build_network, load_checkpoint, save_checkpoint, BowHeadSpec, CheckpointInfo, ClassifierSpec,
    HeadSpec, LoadedCheckpoint, Stage,
};
use crate::codebook::{BowTargets, Codebook};
use crate::config::{ExperimentConfig, Monitor};
use crate::dataset::{images_to_tensor, ImageRecord, NormalizationStats};
use crate::evaluation::{bow_scores, classifier_scores, rotation_scores, Scores};
use crate::image::{make_rotation_batch, Image};
use crate::losses::{hard_cross_entropy, soft_cross_entropy};
use crate::optim::{OptimizerConfig, PlateauConfig, PlateauSchedulerState, Sgd};
use crate::perturb::{perturb_image, PerturbConfig};
use crate::{Error, Result};

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub stage: Stage,
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub eval_accuracy: Option<f64>,
    /// Learning rate used during this epoch.
    pub lr: f64,
    pub wall_seconds: f64,
    pub seed: u64,
    /// Loss of the epoch's first mini-batch, before its update.
    pub first_batch_loss: f64,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const RESUME_FILE: &str = "resume.json";

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

fn append_metrics(path: &Path, record: &MetricsRecord) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_vec(record)?;
    line.push(b'\n');
    f.write_all(&line)?;
    Ok(())
}

/// Everything needed to continue a run from its next epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResumeState {
    pub stage: Stage,
    pub next_epoch: usize,
    pub scheduler: PlateauSchedulerState,
    pub best_monitored: Option<f64>,
    pub seed: u64,
    pub architecture_hash: String,
    /// Relative to the run directory.
    pub latest_checkpoint: PathBuf,
    /// Per-epoch randomness is re-derived from `(seed, epoch)`, so the seed and
    /// the epoch counter are the complete rng state.
    pub rng_scheme: String,
    pub finished: bool,
}

const RNG_SCHEME: &str = "chacha8(splitmix(seed, stream, epoch, index))";

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent rng for `(seed, stream, epoch, index)`.
pub fn derived_rng(seed: u64, stream: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for part in [stream, epoch, index] {
        h = splitmix(h ^ part);
    }
    ChaCha8Rng::seed_from_u64(h)
}

const STREAM_ORDER: u64 = 1;
const STREAM_BATCH: u64 = 2;
const STREAM_IMAGE: u64 = 3;
const STREAM_SPLIT: u64 = 4;

/// Train/monitor image sets for one stage.
pub struct TrainData<'a> {
    pub train: Vec<&'a ImageRecord>,
    /// Images whose loss drives the scheduler and best-checkpoint choice.
    pub monitor: Vec<&'a ImageRecord>,
    /// Indices of `monitor` entries in their target table, for BowNet.
    pub monitor_target_index: Vec<usize>,
    pub train_target_index: Vec<usize>,
    pub monitor_is_test: bool,
}

impl<'a> TrainData<'a> {
    /// Splits according to `monitor`: either the whole test split, or a
    /// seeded held-out slice of the training split.
    pub fn new(train: &'a [ImageRecord], test: &'a [ImageRecord], monitor: Monitor, seed: u64) -> Result<Self> {
        match monitor {
            Monitor::Test => Ok(Self {
                train: train.iter().collect(),
                monitor: test.iter().collect(),
                train_target_index: (0..train.len()).collect(),
                monitor_target_index: (0..test.len()).collect(),
                monitor_is_test: true,
            }),
            Monitor::Validation { fraction } => {
                let mut idx: Vec<usize> = (0..train.len()).collect();
                idx.shuffle(&mut derived_rng(seed, STREAM_SPLIT, 0, 0));
                let held = ((train.len() as f64) * fraction).round() as usize;
                let (fit, val) = idx.split_at(train.len() - held);
                Ok(Self {
                    train: fit.iter().map(|&i| &train[i]).collect(),
                    monitor: val.iter().map(|&i| &train[i]).collect(),
                    train_target_index: fit.to_vec(),
                    monitor_target_index: val.to_vec(),
                    monitor_is_test: false,
                })
            }
        }
    }
}

/// Stage-specific parts of the epoch driver.
trait Task: Sync {
    /// Mean loss for the images `batch` (indices into the training list).
    fn batch_loss(&self, net: &Network, batch: &[usize], epoch: usize, batch_index: usize) -> Result<Tensor>;
    fn evaluate(&self, net: &Network) -> Result<(f64, Option<f64>)>;
}

pub struct LoopSettings {
    pub stage: Stage,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub scheduler: PlateauConfig,
    pub stop_after_epoch: Option<usize>,
    pub heads: HeadSpec,
    pub pretrained_from: Option<Stage>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<MetricsRecord>,
    pub best_checkpoint: Option<PathBuf>,
    pub final_checkpoint: Option<PathBuf>,
    pub metrics: PathBuf,
    /// False when the run stopped early via `stop_after_epoch`.
    pub completed: bool,
}

pub fn checkpoint_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("checkpoints")
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn run_loop(
    net: &mut Network,
    task: &dyn Task,
    n_train: usize,
    s: &LoopSettings,
    run_dir: &Path,
    resume: Option<ResumeState>,
) -> Result<TrainOutcome> {
    let ck_dir = checkpoint_dir(run_dir);
    fs::create_dir_all(&ck_dir)?;
    let metrics_path = run_dir.join(METRICS_FILE);
    let arch = architecture_hash(net.backbone.config(), &s.heads)?;
    let info = |epoch: usize, diagnostic: Option<String>| CheckpointInfo {
        stage: s.stage,
        epoch,
        seed: s.seed,
        heads: s.heads.clone(),
        pretrained_from: s.pretrained_from,
        diagnostic,
    };

    let mut opt = Sgd::new(net.trainable_vars(), &s.optimizer)?;
    let mut scheduler = PlateauSchedulerState::new(s.optimizer.learning_rate, s.scheduler.clone());
    let mut best: Option<f64> = None;
    let mut start = 1;
    let mut records = Vec::new();
    if let Some(state) = resume {
        if state.architecture_hash != arch {
            return Err(Error::HashMismatch {
                what: "architecture of resumed run".into(),
                expected: state.architecture_hash,
                actual: arch,
            });
        }
        let ck = load_checkpoint(&run_dir.join(&state.latest_checkpoint), net.backbone.device())?;
        net.params().load(&ck.tensors)?;
        opt.load_state(&ck.optimizer_state(net.backbone.device())?)?;
        scheduler = state.scheduler;
        opt.set_learning_rate(scheduler.lr);
        best = state.best_monitored;
        start = state.next_epoch;
        // drop records written after the state was saved
        if metrics_path.exists() {
            records = read_metrics(&metrics_path)?;
            records.retain(|r| r.epoch < start);
            let mut body = Vec::new();
            for r in &records {
                body.extend(serde_json::to_vec(r)?);
                body.push(b'\n');
            }
            write_atomic(&metrics_path, &body)?;
        }
    } else if metrics_path.exists() {
        fs::remove_file(&metrics_path)?;
    }

    let best_path = ck_dir.join("best.safetensors");
    let latest_path = ck_dir.join("latest.safetensors");
    let batch_size = s.optimizer.batch_size;
    let mut completed = true;
    for epoch in start..=s.epochs {
        let t0 = Instant::now();
        let lr = opt.learning_rate();
        let mut order: Vec<usize> = (0..n_train).collect();
        order.shuffle(&mut derived_rng(s.seed, STREAM_ORDER, epoch as u64, 0));
        let mut loss_sum = 0f64;
        let mut seen = 0usize;
        let mut first_batch_loss = f64::NAN;
        for (bi, batch) in order.chunks(batch_size).enumerate() {
            // batch norm needs two samples per channel
            if batch.len() < 2 && s.stage != Stage::Rotnet {
                continue;
            }
            let loss = task.batch_loss(net, batch, epoch, bi)?;
            let v = scalar(&loss)?;
            if !v.is_finite() {
                let diag = ck_dir.join("diagnostic.safetensors");
                save_checkpoint(
                    &diag,
                    net,
                    &info(epoch, Some(format!("non-finite loss {v} at epoch {epoch}, batch {bi}"))),
                    Some(&opt),
                )?;
                return Err(Error::NonFinite(format!(
                    "training loss {v} at epoch {epoch}, batch {bi}; diagnostic checkpoint at {}",
                    diag.display()
                )));
            }
            if bi == 0 {
                first_batch_loss = v;
            }
            opt.backward_step(&loss)?;
            loss_sum += v * batch.len() as f64;
            seen += batch.len();
        }
        let (eval_loss, eval_accuracy) = task.evaluate(net)?;
        if !eval_loss.is_finite() {
            let diag = ck_dir.join("diagnostic.safetensors");
            save_checkpoint(
                &diag,
                net,
                &info(epoch, Some(format!("non-finite eval loss at epoch {epoch}"))),
                Some(&opt),
            )?;
            return Err(Error::NonFinite(format!("eval loss at epoch {epoch}")));
        }
        let next_lr = scheduler.step(eval_loss)?;
        opt.set_learning_rate(next_lr);
        let record = MetricsRecord {
            stage: s.stage,
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            eval_loss,
            eval_accuracy,
            lr,
            wall_seconds: t0.elapsed().as_secs_f64(),
            seed: s.seed,
            first_batch_loss,
        };
        log::info!(
            "{} epoch {epoch}/{}: train {:.4} eval {:.4}{} lr {lr:.2e}",
            s.stage,
            s.epochs,
            record.train_loss,
            eval_loss,
            eval_accuracy.map_or(String::new(), |a| format!(" acc {:.2}%", a * 100.0))
        );
        if best.is_none_or(|b| eval_loss < b) {
            best = Some(eval_loss);
            save_checkpoint(&best_path, net, &info(epoch, None), None)?;
        }
        save_checkpoint(&latest_path, net, &info(epoch, None), Some(&opt))?;
        write_json(
            &run_dir.join(RESUME_FILE),
            &ResumeState {
                stage: s.stage,
                next_epoch: epoch + 1,
                scheduler: scheduler.clone(),
                best_monitored: best,
                seed: s.seed,
                architecture_hash: arch.clone(),
                latest_checkpoint: PathBuf::from("checkpoints/latest.safetensors"),
                rng_scheme: RNG_SCHEME.into(),
                finished: epoch == s.epochs,
            },
        )?;
        append_metrics(&metrics_path, &record)?;
        records.push(record);
        if s.stop_after_epoch == Some(epoch) && epoch < s.epochs {
            completed = false;
            break;
        }
    }
    let final_checkpoint = if completed {
        let p = ck_dir.join("final.safetensors");
        save_checkpoint(&p, net, &info(s.epochs, None), None)?;
        Some(p)
    } else {
        None
    };
    Ok(TrainOutcome {
        records,
        best_checkpoint: best_path.exists().then_some(best_path),
        final_checkpoint,
        metrics: metrics_path,
        completed,
    })
}

/// Reads `resume.json` from a run directory.
pub fn read_resume_state(run_dir: &Path) -> Result<ResumeState> {
    read_json(&run_dir.join(RESUME_FILE))
}

fn perturbed_batch(
    images: &[&Image],
    cfg: &PerturbConfig,
    seed: u64,
    epoch: usize,
    ids: &[usize],
) -> Result<Vec<Image>> {
    images
        .par_iter()
        .zip(ids.par_iter())
        .map(|(img, &id)| perturb_image(img, cfg, &mut derived_rng(seed, STREAM_IMAGE, epoch as u64, id as u64)))
        .collect()
}

struct RotnetTask<'a> {
    data: &'a TrainData<'a>,
    stats: NormalizationStats,
    seed: u64,
    eval_batch: usize,
}

impl Task for RotnetTask<'_> {
    fn batch_loss(&self, net: &Network, batch: &[usize], epoch: usize, bi: usize) -> Result<Tensor> {
        let images: Vec<Image> = batch.iter().map(|&i| self.data.train[i].image.clone()).collect();
        let mut rng = derived_rng(self.seed, STREAM_BATCH, epoch as u64, bi as u64);
        let (rotated, labels) = make_rotation_batch(&images, &mut rng)?;
        let labels: Vec<u32> = labels.iter().map(|l| l.index() as u32).collect();
        let x = images_to_tensor(&rotated, &self.stats, net.backbone.device())?;
        let head = net
            .rotation
            .as_ref()
            .ok_or(Error::Config("rotation head missing".into()))?;
        hard_cross_entropy(&rotation_logits(&net.backbone, head, &x, true)?, &labels)
    }

    fn evaluate(&self, net: &Network) -> Result<(f64, Option<f64>)> {
        let head = net
            .rotation
            .as_ref()
            .ok_or(Error::Config("rotation head missing".into()))?;
        let images: Vec<&Image> = self.data.monitor.iter().map(|r| &r.image).collect();
        let s = rotation_scores(&net.backbone, head, &images, &self.stats, (self.eval_batch / 4).max(1))?;
        Ok((s.mean_loss(), Some(s.accuracy())))
    }
}

struct BownetTask<'a> {
    data: &'a TrainData<'a>,
    targets: &'a BowTargets,
    monitor_targets: &'a BowTargets,
    perturb: PerturbConfig,
    tap: String,
    stats: NormalizationStats,
    seed: u64,
    eval_batch: usize,
}

impl Task for BownetTask<'_> {
    fn batch_loss(&self, net: &Network, batch: &[usize], epoch: usize, _bi: usize) -> Result<Tensor> {
        let images: Vec<&Image> = batch.iter().map(|&i| &self.data.train[i].image).collect();
        let ids: Vec<usize> = batch.iter().map(|&i| self.data.train_target_index[i]).collect();
        let perturbed = perturbed_batch(&images, &self.perturb, self.seed, epoch, &ids)?;
        let x = images_to_tensor(&perturbed, &self.stats, net.backbone.device())?;
        let head = net.bow.as_ref().ok_or(Error::Config("BoW head missing".into()))?;
        let pred = head.forward(&net.backbone.forward_to_tap(&x, &self.tap, true)?)?;
        let target = self.targets.dense_batch(&ids, net.backbone.device())?;
        soft_cross_entropy(&pred, &target)
    }

    fn evaluate(&self, net: &Network) -> Result<(f64, Option<f64>)> {
        let head = net.bow.as_ref().ok_or(Error::Config("BoW head missing".into()))?;
        let images: Vec<&Image> = self.data.monitor.iter().map(|r| &r.image).collect();
        let positions: Vec<usize> = (0..images.len()).collect();
        // bow_scores addresses images and targets with the same index, so
        // remap through a dense per-monitor target table
        let s: Scores = if self.data.monitor_is_test {
            bow_scores(
                &net.backbone,
                head,
                &self.tap,
                &images,
                &positions,
                self.monitor_targets,
                &self.stats,
                self.eval_batch,
            )?
        } else {
            let mut s = Scores::default();
            for chunk in positions.chunks(self.eval_batch.max(1)) {
                let x = images_to_tensor(chunk.iter().map(|&i| images[i]), &self.stats, net.backbone.device())?;
                let pred = head.forward(&net.backbone.forward_to_tap(&x, &self.tap, false)?)?;
                let ids: Vec<usize> = chunk.iter().map(|&i| self.data.monitor_target_index[i]).collect();
                let loss = soft_cross_entropy(&pred, &self.monitor_targets.dense_batch(&ids, net.backbone.device())?)?;
                s.loss_sum += scalar(&loss)? * chunk.len() as f64;
                s.total += chunk.len();
            }
            s
        };
        Ok((s.mean_loss(), None))
    }
}

struct ClassifierTask<'a> {
    data: &'a TrainData<'a>,
    augment: PerturbConfig,
    tap: String,
    stats: NormalizationStats,
    seed: u64,
    eval_batch: usize,
}

impl Task for ClassifierTask<'_> {
    fn batch_loss(&self, net: &Network, batch: &[usize], epoch: usize, _bi: usize) -> Result<Tensor> {
        let images: Vec<&Image> = batch.iter().map(|&i| &self.data.train[i].image).collect();
        let ids: Vec<usize> = batch.iter().map(|&i| self.data.train_target_index[i]).collect();
        let augmented = perturbed_batch(&images, &self.augment, self.seed, epoch, &ids)?;
        let labels: Vec<u32> = batch.iter().map(|&i| self.data.train[i].label as u32).collect();
        let x = images_to_tensor(&augmented, &self.stats, net.backbone.device())?;
        let head = net
            .classifier
            .as_ref()
            .ok_or(Error::Config("classifier head missing".into()))?;
        hard_cross_entropy(&classify(&net.backbone, head, &x, &self.tap, true)?, &labels)
    }

    fn evaluate(&self, net: &Network) -> Result<(f64, Option<f64>)> {
        let head = net
            .classifier
            .as_ref()
            .ok_or(Error::Config("classifier head missing".into()))?;
        let s = classifier_scores(
            &net.backbone,
            head,
            &self.tap,
            &self.data.monitor,
            &self.stats,
            self.eval_batch,
        )?;
        Ok((s.mean_loss(), Some(s.accuracy())))
    }
}

fn settings(cfg: &ExperimentConfig, stage: Stage, heads: HeadSpec, pretrained_from: Option<Stage>) -> LoopSettings {
    LoopSettings {
        stage,
        epochs: cfg.epochs,
        seed: cfg.seed,
        optimizer: cfg.optimizer.clone(),
        scheduler: cfg.scheduler.clone(),
        stop_after_epoch: cfg.stop_after_epoch,
        heads,
        pretrained_from,
    }
}

fn non_empty(data: &TrainData) -> Result<()> {
    if data.train.is_empty() {
        return Err(Error::Empty("training images"));
    }
    if data.monitor.is_empty() {
        return Err(Error::Empty("monitor images"));
    }
    Ok(())
}

pub fn rotnet_heads() -> HeadSpec {
    HeadSpec {
        rotation: true,
        ..Default::default()
    }
}

/// Rotation pretraining of a fresh backbone plus rotation head.
pub fn train_rotnet(
    cfg: &ExperimentConfig,
    data: &TrainData,
    stats: &NormalizationStats,
    run_dir: &Path,
    resume: Option<ResumeState>,
) -> Result<TrainOutcome> {
    non_empty(data)?;
    let heads = rotnet_heads();
    let mut net = build_network(&cfg.backbone, &heads, cfg.seed, &Device::Cpu)?;
    let task = RotnetTask {
        data,
        stats: *stats,
        seed: cfg.seed,
        eval_batch: cfg.eval_batch_size,
    };
    run_loop(
        &mut net,
        &task,
        data.train.len(),
        &settings(cfg, Stage::Rotnet, heads, None),
        run_dir,
        resume,
    )
}

pub fn bownet_heads(cfg: &ExperimentConfig, k: usize) -> HeadSpec {
    HeadSpec {
        rotation: false,
        bow: Some(BowHeadSpec {
            k,
            tap: cfg.bow_tap.clone(),
            pool: cfg.bow_pool,
        }),
        classifier: None,
    }
}

/// Trains a freshly initialized backbone to predict each image's BoW target
/// from a perturbed copy. `targets` covers the training split and
/// `monitor_targets` the monitor images' source split.
pub fn train_bownet(
    cfg: &ExperimentConfig,
    data: &TrainData,
    stats: &NormalizationStats,
    codebook: &Codebook,
    targets: &BowTargets,
    monitor_targets: &BowTargets,
    run_dir: &Path,
    resume: Option<ResumeState>,
) -> Result<TrainOutcome> {
    non_empty(data)?;
    for t in [targets, monitor_targets] {
        if t.k() != codebook.k() {
            return Err(Error::DimMismatch {
                what: "target table K vs codebook K",
                expected: codebook.k(),
                got: t.k(),
            });
        }
    }
    let max_train = data.train_target_index.iter().max().copied().unwrap_or(0);
    let max_monitor = data.monitor_target_index.iter().max().copied().unwrap_or(0);
    if max_train >= targets.len() || max_monitor >= monitor_targets.len() {
        return Err(Error::DimMismatch {
            what: "target table rows",
            expected: max_train.max(max_monitor) + 1,
            got: targets.len().min(monitor_targets.len()),
        });
    }
    let heads = bownet_heads(cfg, codebook.k());
    let mut net = build_network(&cfg.backbone, &heads, cfg.seed, &Device::Cpu)?;
    let task = BownetTask {
        data,
        targets,
        monitor_targets,
        perturb: cfg.perturb.clone(),
        tap: cfg.bow_tap.clone(),
        stats: *stats,
        seed: cfg.seed,
        eval_batch: cfg.eval_batch_size,
    };
    run_loop(
        &mut net,
        &task,
        data.train.len(),
        &settings(cfg, Stage::Bownet, heads, None),
        run_dir,
        resume,
    )
}

pub fn classifier_heads(cfg: &ExperimentConfig) -> HeadSpec {
    HeadSpec {
        rotation: false,
        bow: None,
        classifier: Some(ClassifierSpec::new(cfg.tap.clone(), cfg.head_mode, cfg.head_kind)),
    }
}

/// Trains a 100-way classifier at `cfg.tap`. With a `source` checkpoint the
/// backbone is copied from it and frozen through the tap (probe); without one
/// the whole network trains from scratch (supervised baseline).
pub fn train_classifier(
    cfg: &ExperimentConfig,
    data: &TrainData,
    stats: &NormalizationStats,
    source: Option<&LoadedCheckpoint>,
    run_dir: &Path,
    resume: Option<ResumeState>,
) -> Result<TrainOutcome> {
    non_empty(data)?;
    let heads = classifier_heads(cfg);
    let backbone_cfg = source.map_or(&cfg.backbone, |s| &s.manifest.backbone);
    backbone_cfg.tap_shape(&cfg.tap)?;
    let mut net = build_network(backbone_cfg, &heads, cfg.seed, &Device::Cpu)?;
    if let Some(src) = source {
        src.load_backbone_into(&net.backbone)?;
        net.backbone.freeze(&cfg.tap)?;
    }
    let task = ClassifierTask {
        data,
        augment: cfg.classifier_augment.clone(),
        tap: cfg.tap.clone(),
        stats: *stats,
        seed: cfg.seed,
        eval_batch: cfg.eval_batch_size,
    };
    let pretrained_from = source.map(|s| s.manifest.stage);
    run_loop(
        &mut net,
        &task,
        data.train.len(),
        &settings(cfg, Stage::Classifier, heads, pretrained_from),
        run_dir,
        resume,
    )
}
