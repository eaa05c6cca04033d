//! Command-line front end: one subcommand per pipeline stage.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::Device;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::artifact::{read_json, sha256_file, write_json};
use crate::backbone::{HeadKind, PoolMode};
use crate::checkpoint::{load_checkpoint, LoadedCheckpoint, Stage};
use crate::codebook::{
    minibatch_kmeans_fit, precompute_bow_targets, sample_dense_features, BowTargets, Codebook, FeatureProvenance,
    FeatureSink, FeatureStoreWriter, KMeansConfig, MappedFeatures, VectorSource,
};
use crate::config::{
    code_version, collect_inputs, create_run_dir, timestamp, write_completion, write_manifest, ArtifactRef,
    ExperimentConfig, RunManifest, StageKind, COMPLETION_FILE, DATA_ENV, MANIFEST_FILE,
};
use crate::dataset::{
    compute_normalization_stats, load_cifar100_with, resolve_binary_dir, Dataset, NormalizationStats,
};
use crate::evaluation::{
    classifier_experiment, emit_report, evaluate_bownet, evaluate_classifier, evaluate_rotation, EvaluationResult,
    Metric, BOW_LOSS_EXPERIMENT, ROTATION_EXPERIMENT,
};
use crate::fetch::{fetch_data, CIFAR100_MD5, CIFAR100_URL};
use crate::training::{
    read_metrics, read_resume_state, train_bownet, train_classifier, train_rotnet, MetricsRecord, ResumeState,
    TrainData, TrainOutcome, METRICS_FILE,
};
use crate::{Error, Result};

pub const EVALUATION_FILE: &str = "evaluation.json";

#[derive(Parser, Debug)]
#[command(
    name = "deepbow",
    version,
    about = "Rotation pretraining, visual-word codebooks and BoW reconstruction on CIFAR-100"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags accepted by every subcommand.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Run seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Small subsets and few epochs.
    #[arg(long)]
    pub smoke: bool,
    /// JSON config document; flags override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset root (contains cifar-100-binary/ or train.bin/test.bin).
    #[arg(long, env = DATA_ENV)]
    pub data: Option<PathBuf>,
    /// Directory that receives run directories.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Expected sha256 of an input, as NAME=HASH (checkpoint, codebook, targets, test_targets).
    #[arg(long = "expect-sha256", value_parser = parse_key_value)]
    pub expect_sha256: Vec<(String, String)>,
    /// Stop after this epoch, leaving state for `resume`.
    #[arg(long)]
    pub stop_after_epoch: Option<usize>,
}

fn parse_key_value(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .ok_or_else(|| format!("expected NAME=HASH, got `{s}`"))
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum HeadArg {
    Linear,
    Nonlinear,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PoolArg {
    Flatten,
    Gap,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Download and unpack the CIFAR-100 binary archive.
    FetchData {
        #[command(flatten)]
        common: Common,
        /// Target directory (defaults to the dataset root).
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long, default_value = CIFAR100_URL)]
        url: String,
        #[arg(long, default_value = CIFAR100_MD5)]
        md5: String,
    },
    /// Rotation-prediction pretraining.
    TrainRotnet {
        #[command(flatten)]
        common: Common,
    },
    /// Cluster dense features of a checkpoint into a codebook and compute
    /// BoW targets for both splits.
    BuildCodebook {
        #[command(flatten)]
        common: Common,
        /// RotNet checkpoint whose features are clustered.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of visual words.
        #[arg(long)]
        k: Option<usize>,
        /// Feature map to cluster (default resblock3_256b).
        #[arg(long)]
        tap: Option<String>,
    },
    /// Train a fresh network to reconstruct BoW targets from perturbed images.
    TrainBownet {
        #[command(flatten)]
        common: Common,
        /// Codebook written by build-codebook.
        #[arg(long)]
        codebook: Option<PathBuf>,
        /// Train-split target cache.
        #[arg(long)]
        targets: Option<PathBuf>,
        /// Test-split target cache (defaults to targets_test.bin next to --targets).
        #[arg(long)]
        test_targets: Option<PathBuf>,
    },
    /// Train a classifier probe on a frozen checkpoint, or from scratch with --supervised.
    TrainClassifier {
        #[command(flatten)]
        common: Common,
        /// Pretrained checkpoint to freeze through --tap.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Feature map the classifier reads (default resblock3_256b).
        #[arg(long)]
        tap: Option<String>,
        /// Classifier head (default linear).
        #[arg(long, value_enum)]
        head: Option<HeadArg>,
        /// How the feature map is reduced to a vector (default flatten).
        #[arg(long, value_enum)]
        pool: Option<PoolArg>,
        /// Train backbone and head from scratch instead of probing a checkpoint.
        #[arg(long)]
        supervised: bool,
    },
    /// Evaluate a checkpoint on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate; the stage is read from its manifest.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Test-split targets, needed for BowNet checkpoints.
        #[arg(long)]
        test_targets: Option<PathBuf>,
        /// Codebook the targets were built from.
        #[arg(long)]
        codebook: Option<PathBuf>,
    },
    /// Collect evaluation results under a runs directory into a report.
    Report {
        #[command(flatten)]
        common: Common,
        /// Directory searched for completed runs.
        #[arg(long)]
        runs: PathBuf,
    },
    /// Continue an interrupted training run.
    Resume {
        #[command(flatten)]
        common: Common,
        /// Run directory holding resume.json.
        run_dir: PathBuf,
    },
}

/// What a finished command produced.
#[derive(Debug)]
pub struct Outcome {
    pub run_dir: Option<PathBuf>,
    pub message: String,
}

fn resolve(stage: StageKind, common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::from_json_overlay(stage, &ExperimentConfig::load_overlay(p)?)?,
        None => ExperimentConfig::for_stage(stage),
    };
    apply_common(&mut cfg, common);
    Ok(cfg)
}

fn apply_common(cfg: &mut ExperimentConfig, common: &Common) {
    if common.smoke {
        cfg.apply_smoke();
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(e) = common.epochs {
        cfg.epochs = e;
    }
    if let Some(d) = &common.data {
        cfg.data_dir = Some(d.clone());
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    for (k, v) in &common.expect_sha256 {
        cfg.expected_hashes.insert(k.clone(), v.clone());
    }
    if common.stop_after_epoch.is_some() {
        cfg.stop_after_epoch = common.stop_after_epoch;
    }
}

/// Loads the dataset subsets named by the config and fixes the normalization
/// statistics into it.
fn load_data(cfg: &mut ExperimentConfig) -> Result<Dataset> {
    let root = cfg.data_root()?;
    let full = load_cifar100_with(&root, cfg.data_layout)?;
    let ds = full.truncated(
        cfg.train_subset.unwrap_or(full.train.len()),
        cfg.test_subset.unwrap_or(full.test.len()),
    );
    if cfg.normalization.is_none() {
        cfg.normalization = Some(compute_normalization_stats(&ds)?);
    }
    Ok(ds)
}

fn dataset_inputs(cfg: &ExperimentConfig, inputs: &mut BTreeMap<String, ArtifactRef>) -> Result<()> {
    let dir = resolve_binary_dir(&cfg.data_root()?);
    inputs.insert("dataset_train".into(), ArtifactRef::of(&dir.join("train.bin"))?);
    inputs.insert("dataset_test".into(), ArtifactRef::of(&dir.join("test.bin"))?);
    Ok(())
}

fn start_run(cfg: &ExperimentConfig, inputs: BTreeMap<String, ArtifactRef>) -> Result<PathBuf> {
    let dir = create_run_dir(&cfg.output_dir, cfg.stage, cfg.seed)?;
    write_manifest(
        &dir,
        &RunManifest {
            stage: cfg.stage,
            config: cfg.clone(),
            inputs,
            started_at: timestamp(),
            code_version: code_version(),
            resumed_from_epoch: None,
        },
    )?;
    log::info!("run directory {}", dir.display());
    Ok(dir)
}

fn stats(cfg: &ExperimentConfig) -> NormalizationStats {
    cfg.normalization.unwrap_or_default()
}

pub fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::FetchData {
            common,
            target,
            url,
            md5,
        } => {
            let target = match target.or(common.data) {
                Some(t) => t,
                None => return Err(Error::Config(format!("pass --target, --data or set {DATA_ENV}"))),
            };
            let out = fetch_data(&target, &url, &md5)?;
            Ok(Outcome {
                run_dir: None,
                message: format!(
                    "dataset ready at {} (downloaded: {}, extracted: {})",
                    out.data_dir.display(),
                    out.downloaded,
                    out.extracted
                ),
            })
        }
        Command::TrainRotnet { common } => {
            let cfg = resolve(StageKind::Rotnet, &common)?;
            training_stage(cfg, None, None)
        }
        Command::BuildCodebook {
            common,
            checkpoint,
            k,
            tap,
        } => {
            let mut cfg = resolve(StageKind::Codebook, &common)?;
            if checkpoint.is_some() {
                cfg.checkpoint = checkpoint;
            }
            if let Some(k) = k {
                cfg.kmeans.k = k;
            }
            if let Some(t) = tap {
                cfg.codebook_tap = t;
            }
            build_codebook(cfg)
        }
        Command::TrainBownet {
            common,
            codebook,
            targets,
            test_targets,
        } => {
            let mut cfg = resolve(StageKind::Bownet, &common)?;
            if codebook.is_some() {
                cfg.codebook = codebook;
            }
            if targets.is_some() {
                cfg.targets = targets;
            }
            if test_targets.is_some() {
                cfg.test_targets = test_targets;
            }
            if cfg.test_targets.is_none() {
                cfg.test_targets = cfg.targets.as_ref().map(|t| t.with_file_name("targets_test.bin"));
            }
            training_stage(cfg, None, None)
        }
        Command::TrainClassifier {
            common,
            checkpoint,
            tap,
            head,
            pool,
            supervised,
        } => {
            let mut cfg = resolve(StageKind::Classifier, &common)?;
            if checkpoint.is_some() {
                cfg.checkpoint = checkpoint;
            }
            if let Some(t) = tap {
                cfg.tap = t;
            }
            if let Some(h) = head {
                cfg.head_kind = match h {
                    HeadArg::Linear => HeadKind::Linear,
                    HeadArg::Nonlinear => HeadKind::Nonlinear,
                };
            }
            if let Some(p) = pool {
                cfg.head_mode = match p {
                    PoolArg::Flatten => PoolMode::Flatten,
                    PoolArg::Gap => PoolMode::Gap,
                };
            }
            if supervised {
                cfg.supervised = true;
                cfg.checkpoint = None;
            }
            if !cfg.supervised {
                if let Some(ck) = &cfg.checkpoint {
                    // probe the checkpoint's own architecture
                    let m: crate::checkpoint::CheckpointManifest = read_json(&crate::checkpoint::manifest_path(ck))?;
                    cfg.backbone = m.backbone;
                }
            }
            training_stage(cfg, None, None)
        }
        Command::Evaluate {
            common,
            checkpoint,
            test_targets,
            codebook,
        } => {
            let mut cfg = resolve(StageKind::Evaluate, &common)?;
            if checkpoint.is_some() {
                cfg.checkpoint = checkpoint;
            }
            if test_targets.is_some() {
                cfg.test_targets = test_targets;
            }
            if codebook.is_some() {
                cfg.codebook = codebook;
            }
            evaluate(cfg)
        }
        Command::Report { common, runs } => {
            let mut cfg = resolve(StageKind::Report, &common)?;
            if common.out.is_none() {
                cfg.output_dir = runs.clone();
            }
            report(cfg, &runs)
        }
        Command::Resume { common, run_dir } => resume(&run_dir, &common),
    }
}

fn load_codebook_and_targets(cfg: &ExperimentConfig) -> Result<(Codebook, String, BowTargets, BowTargets)> {
    let cb_path = cfg
        .codebook
        .as_ref()
        .ok_or(Error::Config("bownet stage requires a codebook".into()))?;
    let codebook = Codebook::load(cb_path)?;
    let cb_hash = sha256_file(cb_path)?;
    let source = Some(codebook.source_checkpoint_hash.as_str());
    let t = cfg
        .targets
        .as_ref()
        .ok_or(Error::Config("bownet stage requires a target cache".into()))?;
    let train_t = BowTargets::load(t, &cb_hash, source)?;
    let test_path = cfg
        .test_targets
        .clone()
        .unwrap_or_else(|| t.with_file_name("targets_test.bin"));
    let test_t = BowTargets::load(&test_path, &cb_hash, source)?;
    Ok((codebook, cb_hash, train_t, test_t))
}

/// Runs (or continues) a training stage in a run directory.
fn training_stage(
    mut cfg: ExperimentConfig,
    resume_dir: Option<&Path>,
    resume: Option<ResumeState>,
) -> Result<Outcome> {
    cfg.validate()?;
    let mut inputs = collect_inputs(&cfg)?;
    let ds = load_data(&mut cfg)?;
    dataset_inputs(&cfg, &mut inputs)?;
    let source = match (&cfg.checkpoint, cfg.stage) {
        (Some(p), StageKind::Classifier) if !cfg.supervised => Some(load_checkpoint(p, &Device::Cpu)?),
        _ => None,
    };
    let bow = if cfg.stage == StageKind::Bownet {
        Some(load_codebook_and_targets(&cfg)?)
    } else {
        None
    };

    let run_dir = match resume_dir {
        Some(d) => {
            let n = resume.as_ref().map_or(0, |s| s.next_epoch);
            write_json(
                &d.join(format!("manifest.resume-{n}.json")),
                &RunManifest {
                    stage: cfg.stage,
                    config: cfg.clone(),
                    inputs,
                    started_at: timestamp(),
                    code_version: code_version(),
                    resumed_from_epoch: Some(n.saturating_sub(1)),
                },
            )?;
            d.to_path_buf()
        }
        None => start_run(&cfg, inputs)?,
    };

    let stats = stats(&cfg);
    let data = TrainData::new(&ds.train, &ds.test, cfg.monitor, cfg.seed)?;
    let outcome = match cfg.stage {
        StageKind::Rotnet => train_rotnet(&cfg, &data, &stats, &run_dir, resume)?,
        StageKind::Bownet => {
            let (codebook, _, train_t, test_t) = bow.as_ref().expect("loaded above");
            let monitor_t = if data.monitor_is_test { test_t } else { train_t };
            train_bownet(&cfg, &data, &stats, codebook, train_t, monitor_t, &run_dir, resume)?
        }
        StageKind::Classifier => train_classifier(&cfg, &data, &stats, source.as_ref(), &run_dir, resume)?,
        other => return Err(Error::Config(format!("{} is not a training stage", other.name()))),
    };
    finish_training(&cfg, &run_dir, &outcome, source.as_ref(), &data)
}

fn finish_training(
    cfg: &ExperimentConfig,
    run_dir: &Path,
    outcome: &TrainOutcome,
    source: Option<&LoadedCheckpoint>,
    data: &TrainData,
) -> Result<Outcome> {
    if !outcome.completed {
        return Ok(Outcome {
            run_dir: Some(run_dir.to_path_buf()),
            message: format!(
                "stopped after epoch {}; continue with `deepbow resume {}`",
                outcome.records.last().map_or(0, |r| r.epoch),
                run_dir.display()
            ),
        });
    }
    let final_ck = outcome
        .final_checkpoint
        .as_ref()
        .expect("completed runs have a final checkpoint");
    let mut outputs = BTreeMap::new();
    outputs.insert("final_checkpoint".into(), ArtifactRef::of(final_ck)?);
    if let Some(b) = &outcome.best_checkpoint {
        outputs.insert("best_checkpoint".into(), ArtifactRef::of(b)?);
    }
    outputs.insert("metrics".into(), ArtifactRef::of(&outcome.metrics)?);

    // the last epoch already evaluated the final parameters on the monitor set
    if data.monitor_is_test {
        if let Some(last) = outcome.records.last() {
            let hash = sha256_file(final_ck)?;
            let n = data.monitor.len();
            let result = match cfg.stage {
                StageKind::Rotnet => EvaluationResult {
                    experiment: ROTATION_EXPERIMENT.into(),
                    tap: Some(cfg.backbone.final_tap()),
                    head_kind: None,
                    metric: Metric::Accuracy,
                    value: last.eval_accuracy.unwrap_or(f64::NAN),
                    sample_count: 4 * n,
                    checkpoint_hash: hash,
                },
                StageKind::Bownet => EvaluationResult {
                    experiment: BOW_LOSS_EXPERIMENT.into(),
                    tap: Some(cfg.bow_tap.clone()),
                    head_kind: None,
                    metric: Metric::CrossEntropy,
                    value: last.eval_loss,
                    sample_count: n,
                    checkpoint_hash: hash,
                },
                _ => EvaluationResult {
                    experiment: classifier_experiment(source.map(|s| s.manifest.stage), &cfg.tap, cfg.head_kind),
                    tap: Some(cfg.tap.clone()),
                    head_kind: Some(cfg.head_kind),
                    metric: Metric::Accuracy,
                    value: last.eval_accuracy.unwrap_or(f64::NAN),
                    sample_count: n,
                    checkpoint_hash: hash,
                },
            };
            let p = run_dir.join(EVALUATION_FILE);
            write_json(&p, &vec![result])?;
            outputs.insert("evaluation".into(), ArtifactRef::of(&p)?);
        }
    }
    write_completion(run_dir, outputs)?;
    let last = outcome.records.last();
    Ok(Outcome {
        run_dir: Some(run_dir.to_path_buf()),
        message: format!(
            "{} finished: {} epochs, final eval loss {:.4}{}",
            cfg.stage.name(),
            outcome.records.len(),
            last.map_or(f64::NAN, |r| r.eval_loss),
            last.and_then(|r| r.eval_accuracy)
                .map_or(String::new(), |a| format!(", eval accuracy {:.2}%", a * 100.0))
        ),
    })
}

/// Keeps only rows whose global index is in `keep` (sorted).
struct SubsampleSink<'a, S: FeatureSink> {
    inner: &'a mut S,
    keep: Vec<usize>,
    next: usize,
    row: usize,
    dim: usize,
}

impl<S: FeatureSink> FeatureSink for SubsampleSink<'_, S> {
    fn push_rows(&mut self, rows: &[f32]) -> Result<()> {
        for r in rows.chunks_exact(self.dim) {
            if self.keep.get(self.next) == Some(&self.row) {
                self.inner.push_rows(r)?;
                self.next += 1;
            }
            self.row += 1;
        }
        Ok(())
    }
}

fn build_codebook(mut cfg: ExperimentConfig) -> Result<Outcome> {
    cfg.validate()?;
    let mut inputs = collect_inputs(&cfg)?;
    let ck_path = cfg.checkpoint.clone().expect("validated");
    let ck = load_checkpoint(&ck_path, &Device::Cpu)?;
    cfg.backbone = ck.manifest.backbone.clone();
    let ds = load_data(&mut cfg)?;
    dataset_inputs(&cfg, &mut inputs)?;
    let run_dir = start_run(&cfg, inputs)?;
    let stats = stats(&cfg);
    let backbone = ck.network(&Device::Cpu)?.backbone;
    let tap = cfg.codebook_tap.clone();
    let (c, h, w) = backbone.tap_shape(&tap)?;

    let n_images = cfg.codebook_images.unwrap_or(ds.train.len()).min(ds.train.len());
    let images: Vec<_> = ds.train[..n_images].iter().map(|r| r.image.clone()).collect();
    let per_image = h * w * if cfg.include_rotations { 4 } else { 1 };
    let total = n_images * per_image;
    let keep: Vec<usize> = match cfg.kmeans.max_vectors {
        Some(m) if m < total => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.kmeans.seed ^ cfg.seed);
            let mut idx = rand::seq::index::sample(&mut rng, total, m).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..total).collect(),
    };
    let provenance = FeatureProvenance {
        checkpoint_hash: ck.hash().to_string(),
        tap: tap.clone(),
        include_rotations: cfg.include_rotations,
    };
    let features_path = run_dir.join("features.f32");
    let mut writer = FeatureStoreWriter::create(&features_path, c, provenance)?;
    log::info!(
        "sampling {} of {total} feature vectors from {n_images} images at {tap}",
        keep.len()
    );
    {
        let mut sink = SubsampleSink {
            inner: &mut writer,
            keep,
            next: 0,
            row: 0,
            dim: c,
        };
        sample_dense_features(&backbone, &images, &tap, cfg.include_rotations, &stats, 64, &mut sink)?;
    }
    writer.finish()?;
    let features = MappedFeatures::open(&features_path)?;
    let kcfg = KMeansConfig {
        seed: cfg.kmeans.seed ^ cfg.seed,
        max_vectors: None,
        ..cfg.kmeans.clone()
    };
    log::info!("fitting K = {} on {} vectors", kcfg.k, features.len());
    let codebook = minibatch_kmeans_fit(&features, &kcfg)?;
    drop(features);
    fs::remove_file(&features_path)?;
    fs::remove_file(features_path.with_extension("json"))?;

    let cb_path = run_dir.join("codebook.bin");
    let cb_hash = codebook.save(&cb_path)?;
    let mut outputs = BTreeMap::new();
    outputs.insert("codebook".into(), ArtifactRef::of(&cb_path)?);
    for (name, split) in [("targets_train", &ds.train), ("targets_test", &ds.test)] {
        let imgs: Vec<_> = split.iter().map(|r| r.image.clone()).collect();
        let t = precompute_bow_targets(&backbone, &codebook, &imgs, &stats, 64, ck.hash(), &cb_hash)?;
        let p = run_dir.join(format!("{name}.bin"));
        t.save(&p)?;
        outputs.insert(name.into(), ArtifactRef::of(&p)?);
    }
    write_completion(&run_dir, outputs)?;
    Ok(Outcome {
        run_dir: Some(run_dir),
        message: format!(
            "codebook K = {} at {tap}, inertia {:.4e}",
            codebook.k(),
            codebook.inertia
        ),
    })
}

fn evaluate(mut cfg: ExperimentConfig) -> Result<Outcome> {
    cfg.validate()?;
    let mut inputs = collect_inputs(&cfg)?;
    let ck = load_checkpoint(cfg.checkpoint.as_ref().expect("validated"), &Device::Cpu)?;
    cfg.backbone = ck.manifest.backbone.clone();
    let ds = load_data(&mut cfg)?;
    dataset_inputs(&cfg, &mut inputs)?;
    let run_dir = start_run(&cfg, inputs)?;
    let stats = stats(&cfg);
    let mut results = Vec::new();
    if ck.manifest.heads.rotation {
        results.push(evaluate_rotation(
            &ck,
            &ds.test,
            &stats,
            (cfg.eval_batch_size / 4).max(1),
        )?);
    }
    if ck.manifest.heads.classifier.is_some() {
        results.push(evaluate_classifier(&ck, &ds.test, &stats, cfg.eval_batch_size)?);
    }
    if ck.manifest.heads.bow.is_some() {
        let t = cfg
            .test_targets
            .as_ref()
            .ok_or(Error::Config("BowNet checkpoints need --test-targets".into()))?;
        let cb = cfg.codebook.clone().unwrap_or_else(|| t.with_file_name("codebook.bin"));
        let targets = BowTargets::load(t, &sha256_file(&cb)?, None)?;
        results.push(evaluate_bownet(&ck, &ds.test, &targets, &stats, cfg.eval_batch_size)?);
    }
    if results.is_empty() {
        return Err(Error::Config("checkpoint has no head to evaluate".into()));
    }
    let p = run_dir.join(EVALUATION_FILE);
    write_json(&p, &results)?;
    write_completion(&run_dir, [("evaluation".to_string(), ArtifactRef::of(&p)?)].into())?;
    let lines: Vec<String> = results
        .iter()
        .map(|r| match r.metric {
            Metric::Accuracy => format!("{}: {:.2}% ({} samples)", r.experiment, r.value * 100.0, r.sample_count),
            Metric::CrossEntropy => format!("{}: {:.4} ({} samples)", r.experiment, r.value, r.sample_count),
        })
        .collect();
    Ok(Outcome {
        run_dir: Some(run_dir),
        message: lines.join("\n"),
    })
}

/// Finished runs (those with a completion file) directly under `runs`, by name.
pub fn completed_runs(runs: &Path) -> Result<Vec<PathBuf>> {
    if !runs.is_dir() {
        return Err(Error::NoResults(format!("{} is not a directory", runs.display())));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(runs)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(COMPLETION_FILE).exists() && p.join(MANIFEST_FILE).exists())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn report(cfg: ExperimentConfig, runs: &Path) -> Result<Outcome> {
    let mut results: Vec<EvaluationResult> = Vec::new();
    let mut curves: Vec<(String, Vec<MetricsRecord>)> = Vec::new();
    let mut inputs = BTreeMap::new();
    for dir in completed_runs(runs)? {
        let name = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let eval = dir.join(EVALUATION_FILE);
        if eval.exists() {
            let found: Vec<EvaluationResult> = read_json(&eval)?;
            inputs.insert(format!("{name}/{EVALUATION_FILE}"), ArtifactRef::of(&eval)?);
            for r in found {
                // a training run and a later evaluate run can report the same checkpoint
                match results.iter_mut().find(|x| {
                    x.experiment == r.experiment && x.checkpoint_hash == r.checkpoint_hash && x.metric == r.metric
                }) {
                    Some(existing) if existing.sample_count < r.sample_count => *existing = r,
                    Some(_) => {}
                    None => results.push(r),
                }
            }
        }
        let metrics = dir.join(METRICS_FILE);
        if metrics.exists() {
            curves.push((name, read_metrics(&metrics)?));
        }
    }
    if results.is_empty() {
        return Err(Error::NoResults(format!(
            "no completed runs with evaluation results under {}",
            runs.display()
        )));
    }
    let run_dir = start_run(&cfg, inputs)?;
    let files = emit_report(&results, &curves, &run_dir)?;
    let mut outputs: BTreeMap<String, ArtifactRef> = BTreeMap::new();
    outputs.insert("table".into(), ArtifactRef::of(&files.table)?);
    outputs.insert("summary".into(), ArtifactRef::of(&files.summary)?);
    for c in &files.curves {
        let key = format!("curves/{}", c.file_name().unwrap_or_default().to_string_lossy());
        outputs.insert(key, ArtifactRef::of(c)?);
    }
    write_completion(&run_dir, outputs)?;
    Ok(Outcome {
        message: fs::read_to_string(&files.table)?,
        run_dir: Some(run_dir),
    })
}

fn resume(run_dir: &Path, common: &Common) -> Result<Outcome> {
    let manifest: RunManifest = read_json(&run_dir.join(MANIFEST_FILE))?;
    let state = read_resume_state(run_dir)?;
    if state.finished || run_dir.join(COMPLETION_FILE).exists() {
        return Err(Error::Config(format!("{} already finished", run_dir.display())));
    }
    let mut cfg = manifest.config;
    if let Some(p) = &common.config {
        let mut base = serde_json::to_value(&cfg)?;
        crate::config::merge(&mut base, &ExperimentConfig::load_overlay(p)?);
        cfg = serde_json::from_value(base).map_err(|e| Error::Config(format!("config file: {e}")))?;
    }
    if let Some(e) = common.epochs {
        cfg.epochs = e;
    }
    if let Some(d) = &common.data {
        cfg.data_dir = Some(d.clone());
    }
    cfg.stop_after_epoch = common.stop_after_epoch;
    let expected = match state.stage {
        Stage::Rotnet => StageKind::Rotnet,
        Stage::Bownet => StageKind::Bownet,
        Stage::Classifier => StageKind::Classifier,
    };
    if cfg.stage != expected {
        return Err(Error::Config("resume state and manifest disagree on the stage".into()));
    }
    training_stage(cfg, Some(run_dir), Some(state))
}
