//! Model checkpoints: a safetensors parameter archive plus a JSON manifest.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::artifact::{read_json, sha256_file, sha256_json, write_json};
use crate::backbone::{
    Backbone, BackboneConfig, BowPredictionHead, ClassifierHead, HeadKind, Network, PoolMode, RotationHead,
};
use crate::dataset::CLASS_COUNT;
use crate::optim::Sgd;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Rotnet,
    Bownet,
    Classifier,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Rotnet => "rotnet",
            Stage::Bownet => "bownet",
            Stage::Classifier => "classifier",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BowHeadSpec {
    pub k: usize,
    pub tap: String,
    pub pool: PoolMode,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub tap: String,
    pub mode: PoolMode,
    pub kind: HeadKind,
    pub classes: usize,
}

/// Which heads sit on top of the backbone.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub rotation: bool,
    pub bow: Option<BowHeadSpec>,
    pub classifier: Option<ClassifierSpec>,
}

/// Hash of everything that determines parameter names and shapes.
pub fn architecture_hash(backbone: &BackboneConfig, heads: &HeadSpec) -> Result<String> {
    sha256_json(&(backbone, heads))
}

/// Builds a network with freshly initialized parameters for `heads`.
pub fn build_network(cfg: &BackboneConfig, heads: &HeadSpec, init_seed: u64, device: &Device) -> Result<Network> {
    let backbone = Backbone::new(cfg, init_seed, device)?;
    let mut net = Network::new(backbone);
    if heads.rotation {
        net.rotation = Some(RotationHead::new(cfg, init_seed, device)?);
    }
    if let Some(b) = &heads.bow {
        let width = b.pool.input_width(cfg.tap_shape(&b.tap)?);
        net.bow = Some(BowPredictionHead::new(b.k, width, b.pool, init_seed, device)?);
    }
    if let Some(c) = &heads.classifier {
        net.classifier = Some(ClassifierHead::new(
            cfg.tap_shape(&c.tap)?,
            c.mode,
            c.kind,
            c.classes,
            init_seed,
            device,
        )?);
    }
    Ok(net)
}

impl ClassifierSpec {
    pub fn new(tap: impl Into<String>, mode: PoolMode, kind: HeadKind) -> Self {
        Self {
            tap: tap.into(),
            mode,
            kind,
            classes: CLASS_COUNT,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapInfo {
    pub name: String,
    pub shape: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub architecture_hash: String,
    pub backbone: BackboneConfig,
    pub heads: HeadSpec,
    pub taps: Vec<TapInfo>,
    pub stage: Stage,
    pub epoch: usize,
    pub seed: u64,
    pub frozen_through: Option<String>,
    /// Stage of the checkpoint the backbone was copied from, if any.
    pub pretrained_from: Option<Stage>,
    pub optimizer_state: bool,
    pub parameters_file: String,
    pub parameters_sha256: String,
    /// Set on checkpoints written when training aborted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

#[derive(Clone, Debug)]
pub struct CheckpointInfo {
    pub stage: Stage,
    pub epoch: usize,
    pub seed: u64,
    pub heads: HeadSpec,
    pub pretrained_from: Option<Stage>,
    pub diagnostic: Option<String>,
}

pub fn manifest_path(params: &Path) -> PathBuf {
    params.with_extension("json")
}

pub fn optimizer_path(params: &Path) -> PathBuf {
    params.with_extension("optim.safetensors")
}

fn save_tensors(path: &Path, tensors: &HashMap<String, Tensor>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    candle_core::safetensors::save(tensors, &tmp)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes `<path>` (parameters), `<path>.json` (manifest) and, when an
/// optimizer is given, its momentum buffers. Returns the manifest.
pub fn save_checkpoint(
    path: &Path,
    net: &Network,
    info: &CheckpointInfo,
    optimizer: Option<&Sgd>,
) -> Result<CheckpointManifest> {
    let cfg = net.backbone.config();
    save_tensors(path, &net.params().to_tensors()?)?;
    if let Some(opt) = optimizer {
        save_tensors(&optimizer_path(path), &opt.state())?;
    }
    let taps = cfg
        .unit_names()
        .into_iter()
        .map(|name| {
            let (c, h, w) = cfg.tap_shape(&name)?;
            Ok(TapInfo { name, shape: [c, h, w] })
        })
        .collect::<Result<_>>()?;
    let manifest = CheckpointManifest {
        architecture_hash: architecture_hash(cfg, &info.heads)?,
        backbone: cfg.clone(),
        heads: info.heads.clone(),
        taps,
        stage: info.stage,
        epoch: info.epoch,
        seed: info.seed,
        frozen_through: net.backbone.frozen_through().map(str::to_string),
        pretrained_from: info.pretrained_from,
        optimizer_state: optimizer.is_some(),
        parameters_file: path.file_name().unwrap_or_default().to_string_lossy().into_owned(),
        parameters_sha256: sha256_file(path)?,
        diagnostic: info.diagnostic.clone(),
    };
    write_json(&manifest_path(path), &manifest)?;
    Ok(manifest)
}

/// A checkpoint read back from disk, hash-verified.
pub struct LoadedCheckpoint {
    pub path: PathBuf,
    pub manifest: CheckpointManifest,
    pub tensors: HashMap<String, Tensor>,
}

impl LoadedCheckpoint {
    pub fn hash(&self) -> &str {
        &self.manifest.parameters_sha256
    }

    /// Rebuilds the network exactly as saved, including its heads and freeze
    /// point.
    pub fn network(&self, device: &Device) -> Result<Network> {
        let mut net = build_network(
            &self.manifest.backbone,
            &self.manifest.heads,
            self.manifest.seed,
            device,
        )?;
        net.params().load(&self.tensors)?;
        if let Some(tap) = &self.manifest.frozen_through {
            net.backbone.freeze(tap)?;
        }
        Ok(net)
    }

    /// Copies the backbone parameters (and running statistics) into
    /// `backbone`, which must have the same configuration.
    pub fn load_backbone_into(&self, backbone: &Backbone) -> Result<()> {
        if backbone.config() != &self.manifest.backbone {
            return Err(Error::HashMismatch {
                what: "backbone configuration".into(),
                expected: sha256_json(&self.manifest.backbone)?,
                actual: sha256_json(backbone.config())?,
            });
        }
        backbone.params().load(&self.tensors)
    }

    pub fn optimizer_state(&self, device: &Device) -> Result<HashMap<String, Tensor>> {
        let p = optimizer_path(&self.path);
        if !self.manifest.optimizer_state || !p.exists() {
            return Err(Error::MissingFile(p));
        }
        Ok(candle_core::safetensors::load(&p, device)?)
    }
}

/// Reads a checkpoint and checks its parameter file against the manifest hash.
pub fn load_checkpoint(path: &Path, device: &Device) -> Result<LoadedCheckpoint> {
    let manifest: CheckpointManifest = read_json(&manifest_path(path))?;
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let actual = sha256_file(path)?;
    if actual != manifest.parameters_sha256 {
        return Err(Error::HashMismatch {
            what: format!("checkpoint {}", path.display()),
            expected: manifest.parameters_sha256,
            actual,
        });
    }
    let tensors = candle_core::safetensors::load(path, device)?;
    Ok(LoadedCheckpoint {
        path: path.to_path_buf(),
        manifest,
        tensors,
    })
}
