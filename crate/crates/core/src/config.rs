//! Experiment configuration, run directories and provenance manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::artifact::{read_json, sha256_file, write_json};
use crate::backbone::{BackboneConfig, HeadKind, PoolMode};
use crate::codebook::KMeansConfig;
use crate::dataset::{DataLayout, NormalizationStats};
use crate::optim::{OptimizerConfig, PlateauConfig};
use crate::perturb::PerturbConfig;
use crate::{Error, Result};

/// Environment variable holding the dataset root.
pub const DATA_ENV: &str = "DEEPBOW_DATA";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Rotnet,
    Codebook,
    Bownet,
    Classifier,
    Evaluate,
    Report,
}

impl StageKind {
    pub fn name(self) -> &'static str {
        match self {
            StageKind::Rotnet => "rotnet",
            StageKind::Codebook => "codebook",
            StageKind::Bownet => "bownet",
            StageKind::Classifier => "classifier",
            StageKind::Evaluate => "evaluate",
            StageKind::Report => "report",
        }
    }
}

/// Quantity the plateau scheduler watches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "split")]
pub enum Monitor {
    /// Loss on the test split.
    Test,
    /// Loss on a held-out slice (last `fraction` of the shuffled train split).
    Validation { fraction: f64 },
}

/// Every knob of one pipeline stage. Serialized in full into the run manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub stage: StageKind,
    pub data_dir: Option<PathBuf>,
    pub data_layout: DataLayout,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub scheduler: PlateauConfig,
    pub monitor: Monitor,
    /// BowNet input perturbations.
    pub perturb: PerturbConfig,
    /// Classifier training augmentations.
    pub classifier_augment: PerturbConfig,
    pub backbone: BackboneConfig,
    /// Probe tap for classifier stages.
    pub tap: String,
    pub head_kind: HeadKind,
    pub head_mode: PoolMode,
    /// Train the whole network from scratch instead of probing a frozen one.
    pub supervised: bool,
    pub epochs: usize,
    pub smoke: bool,
    pub eval_batch_size: usize,
    pub train_subset: Option<usize>,
    pub test_subset: Option<usize>,
    /// `None` recomputes statistics from the loaded train split.
    pub normalization: Option<NormalizationStats>,
    pub codebook_tap: String,
    pub include_rotations: bool,
    /// Images whose features feed K-means; `None` uses the whole train split.
    pub codebook_images: Option<usize>,
    pub kmeans: KMeansConfig,
    pub bow_tap: String,
    pub bow_pool: PoolMode,
    pub checkpoint: Option<PathBuf>,
    pub codebook: Option<PathBuf>,
    pub targets: Option<PathBuf>,
    pub test_targets: Option<PathBuf>,
    /// Expected sha256 of the upstream artifacts, checked before running.
    pub expected_hashes: BTreeMap<String, String>,
    /// Stop cleanly after this epoch, leaving resumable state behind.
    pub stop_after_epoch: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::for_stage(StageKind::Rotnet)
    }
}

impl ExperimentConfig {
    /// Paper defaults for a stage.
    pub fn for_stage(stage: StageKind) -> Self {
        let backbone = BackboneConfig::default();
        let (optimizer, epochs) = match stage {
            StageKind::Bownet => (OptimizerConfig::bownet(), 30),
            _ => (OptimizerConfig::rotnet(), 200),
        };
        Self {
            stage,
            data_dir: None,
            data_layout: DataLayout::default(),
            output_dir: PathBuf::from("runs"),
            seed: 0,
            optimizer,
            scheduler: PlateauConfig::default(),
            monitor: Monitor::Test,
            perturb: PerturbConfig::default(),
            classifier_augment: PerturbConfig::classifier_augmentation(),
            tap: "resblock3_256b".into(),
            head_kind: HeadKind::Linear,
            head_mode: PoolMode::Flatten,
            supervised: false,
            epochs,
            smoke: false,
            eval_batch_size: 250,
            train_subset: None,
            test_subset: None,
            normalization: Some(NormalizationStats::CIFAR100_TRAIN),
            codebook_tap: "resblock3_256b".into(),
            include_rotations: true,
            codebook_images: None,
            kmeans: KMeansConfig::default(),
            bow_tap: backbone.final_tap(),
            bow_pool: PoolMode::Gap,
            backbone,
            checkpoint: None,
            codebook: None,
            targets: None,
            test_targets: None,
            expected_hashes: BTreeMap::new(),
            stop_after_epoch: None,
        }
    }

    /// Desk-scale preset: small subsets and few epochs.
    pub fn apply_smoke(&mut self) {
        self.smoke = true;
        self.train_subset = Some(5000);
        self.test_subset = Some(1000);
        self.epochs = match self.stage {
            StageKind::Classifier => 5,
            _ => 2,
        };
        self.codebook_images = Some(1000);
        self.kmeans.k = 64;
        self.kmeans.epochs = 5;
        self.kmeans.max_vectors = Some(256_000);
    }

    /// Stage defaults, overlaid by a JSON config document (partial objects
    /// merge key by key).
    pub fn from_json_overlay(stage: StageKind, overlay: &Value) -> Result<Self> {
        let mut base = serde_json::to_value(Self::for_stage(stage))?;
        merge(&mut base, overlay);
        base["stage"] = serde_json::to_value(stage)?;
        let cfg: Self = serde_json::from_value(base).map_err(|e| Error::Config(format!("config file: {e}")))?;
        Ok(cfg)
    }

    pub fn load_overlay(path: &Path) -> Result<Value> {
        read_json(path).map_err(|e| match e {
            Error::Json(j) => Error::Config(format!("{}: {j}", path.display())),
            other => other,
        })
    }

    pub fn data_root(&self) -> Result<PathBuf> {
        if let Some(d) = &self.data_dir {
            return Ok(d.clone());
        }
        std::env::var_os(DATA_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| Error::Config(format!("no dataset root: pass --data or set {DATA_ENV}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.optimizer.validate()?;
        self.perturb.validate()?;
        self.classifier_augment.validate()?;
        if self.eval_batch_size == 0 {
            return Err(Error::Config("eval_batch_size must be positive".into()));
        }
        if let Monitor::Validation { fraction } = self.monitor {
            if !(fraction > 0.0 && fraction < 1.0) {
                return Err(Error::Config(format!("validation fraction {fraction} outside (0, 1)")));
            }
        }
        let need = |field: &Option<PathBuf>, what: &str| -> Result<()> {
            if field.is_none() {
                return Err(Error::Config(format!("{} stage requires {what}", self.stage.name())));
            }
            Ok(())
        };
        match self.stage {
            StageKind::Codebook => {
                need(&self.checkpoint, "a checkpoint")?;
                self.backbone.tap_shape(&self.codebook_tap)?;
            }
            StageKind::Bownet => {
                need(&self.codebook, "a codebook")?;
                need(&self.targets, "a target cache")?;
                self.backbone.tap_shape(&self.bow_tap)?;
            }
            StageKind::Classifier => {
                if !self.supervised {
                    need(&self.checkpoint, "a checkpoint (or --supervised)")?;
                }
                self.backbone.tap_shape(&self.tap)?;
            }
            StageKind::Evaluate => need(&self.checkpoint, "a checkpoint")?,
            StageKind::Rotnet | StageKind::Report => {}
        }
        Ok(())
    }
}

/// Recursively overlays `overlay` onto `base`; objects merge key by key.
pub fn merge(base: &mut Value, overlay: &Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub path: PathBuf,
    pub sha256: String,
}

impl ArtifactRef {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        })
    }
}

/// Written once when a stage starts; never modified afterwards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: StageKind,
    pub config: ExperimentConfig,
    pub inputs: BTreeMap<String, ArtifactRef>,
    pub started_at: String,
    pub code_version: String,
    /// Set when this run continues an interrupted one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resumed_from_epoch: Option<usize>,
}

/// Written when a stage finishes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub finished_at: String,
    pub outputs: BTreeMap<String, ArtifactRef>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const COMPLETION_FILE: &str = "completion.json";

pub fn code_version() -> String {
    format!("deepbow {}", env!("CARGO_PKG_VERSION"))
}

pub fn timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Creates `<output_dir>/<stage>-<timestamp>-seed<seed>`, adding a numeric
/// suffix if that name is taken.
pub fn create_run_dir(output_dir: &Path, stage: StageKind, seed: u64) -> Result<PathBuf> {
    std::fs::create_dir_all(output_dir)?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%3fZ");
    let base = format!("{}-{stamp}-seed{seed}", stage.name());
    let mut dir = output_dir.join(&base);
    let mut n = 1;
    loop {
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                dir = output_dir.join(format!("{base}-{n}"));
                n += 1;
            }
            Err(e) => return Err(e.into()),
        }
    }
}

/// Hashes every declared upstream artifact and checks it against
/// `expected_hashes`.
pub fn collect_inputs(cfg: &ExperimentConfig) -> Result<BTreeMap<String, ArtifactRef>> {
    let mut inputs = BTreeMap::new();
    for (name, path) in [
        ("checkpoint", &cfg.checkpoint),
        ("codebook", &cfg.codebook),
        ("targets", &cfg.targets),
        ("test_targets", &cfg.test_targets),
    ] {
        if let Some(p) = path {
            let r = ArtifactRef::of(p)?;
            if let Some(expected) = cfg.expected_hashes.get(name) {
                if expected != &r.sha256 {
                    return Err(Error::HashMismatch {
                        what: format!("{name} {}", p.display()),
                        expected: expected.clone(),
                        actual: r.sha256,
                    });
                }
            }
            inputs.insert(name.to_string(), r);
        }
    }
    for name in cfg.expected_hashes.keys() {
        if !inputs.contains_key(name) {
            return Err(Error::Config(format!(
                "hash declared for `{name}` but no such input was given"
            )));
        }
    }
    Ok(inputs)
}

pub fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    if path.exists() {
        return Err(Error::Config(format!(
            "{} already exists; manifests are write-once",
            path.display()
        )));
    }
    write_json(&path, manifest)
}

pub fn write_completion(dir: &Path, outputs: BTreeMap<String, ArtifactRef>) -> Result<Completion> {
    let c = Completion {
        finished_at: timestamp(),
        outputs,
    };
    write_json(&dir.join(COMPLETION_FILE), &c)?;
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn stage_defaults() {
        let r = ExperimentConfig::for_stage(StageKind::Rotnet);
        assert_eq!(r.optimizer, OptimizerConfig::rotnet());
        assert_eq!(r.epochs, 200);
        let b = ExperimentConfig::for_stage(StageKind::Bownet);
        assert_eq!(b.optimizer, OptimizerConfig::bownet());
        assert_eq!(b.epochs, 30);
        assert_eq!(b.kmeans.k, 2048);
        assert_eq!(b.bow_tap, "resblock3_256b");
    }

    #[test]
    fn overlay_merges_nested_keys() {
        let cfg = ExperimentConfig::from_json_overlay(
            StageKind::Bownet,
            &json!({"optimizer": {"learning_rate": 0.5}, "seed": 7, "kmeans": {"k": 16}}),
        )
        .unwrap();
        assert_eq!(cfg.optimizer.learning_rate, 0.5);
        assert_eq!(cfg.optimizer.momentum, 0.9);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.kmeans.k, 16);
        assert_eq!(cfg.kmeans.batch_size, 10_000);
        assert!(ExperimentConfig::from_json_overlay(StageKind::Rotnet, &json!({"no_such_key": 1})).is_err());
    }

    #[test]
    fn required_references() {
        let cfg = ExperimentConfig::for_stage(StageKind::Bownet);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = ExperimentConfig::for_stage(StageKind::Classifier);
        assert!(cfg.validate().is_err());
        cfg.supervised = true;
        cfg.validate().unwrap();
        cfg.tap = "resblock9_1a".into();
        assert!(matches!(cfg.validate(), Err(Error::UnknownTap(_))));
    }

    #[test]
    fn declared_hash_mismatch_refuses() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        std::fs::write(&p, b"abc").unwrap();
        let mut cfg = ExperimentConfig::for_stage(StageKind::Codebook);
        cfg.checkpoint = Some(p.clone());
        let inputs = collect_inputs(&cfg).unwrap();
        assert_eq!(
            inputs["checkpoint"].sha256,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        cfg.expected_hashes.insert("checkpoint".into(), "00".into());
        assert!(matches!(collect_inputs(&cfg), Err(Error::HashMismatch { .. })));
    }

    #[test]
    fn run_dirs_are_unique_and_manifests_write_once() {
        let dir = tempfile::tempdir().unwrap();
        let a = create_run_dir(dir.path(), StageKind::Rotnet, 3).unwrap();
        let b = create_run_dir(dir.path(), StageKind::Rotnet, 3).unwrap();
        assert_ne!(a, b);
        let name = a.file_name().unwrap().to_string_lossy().into_owned();
        assert!(name.starts_with("rotnet-") && name.contains("-seed3"), "{name}");
        let m = RunManifest {
            stage: StageKind::Rotnet,
            config: ExperimentConfig::default(),
            inputs: BTreeMap::new(),
            started_at: timestamp(),
            code_version: code_version(),
            resumed_from_epoch: None,
        };
        write_manifest(&a, &m).unwrap();
        assert!(write_manifest(&a, &m).is_err());
        let back: RunManifest = read_json(&a.join(MANIFEST_FILE)).unwrap();
        assert_eq!(back, m);
    }
}
