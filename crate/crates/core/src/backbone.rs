//! Compact residual feature extractor with named tap points, and the three
//! task heads: rotation prediction, bag-of-words prediction, classification.
//!
//! Default layout: 3x3 stem (64 channels) followed by three stages of two
//! residual blocks with widths 64, 128 and 256. Stages two and three halve the
//! spatial resolution in their first block, so on 32x32 inputs the taps are
//!
//! | tap              | shape        |
//! |------------------|--------------|
//! | `resblock2_128b` | 128 x 16 x 16 |
//! | `resblock3_256b` | 256 x 8 x 8   |
//!
//! Every 3x3 convolution is followed by batch norm and ReLU; the 1x1 shortcut
//! projections are bare.

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{global_avg_pool, softmax_rows, BatchNorm, Conv2d, Initializer, Linear, ParamKind, ParamSet};
use crate::{Error, Result};

pub const STEM: &str = "stem";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub rotation_head_width: usize,
    pub rotation_head_blocks: usize,
    pub image_size: usize,
    /// Taps that must exist; checked at build time.
    pub taps: Vec<String>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stem_channels: 64,
            stage_widths: vec![64, 128, 256],
            blocks_per_stage: 2,
            rotation_head_width: 512,
            rotation_head_blocks: 1,
            image_size: 32,
            taps: vec!["resblock2_128b".into(), "resblock3_256b".into()],
        }
    }
}

fn block_letter(i: usize) -> char {
    (b'a' + i as u8) as char
}

impl BackboneConfig {
    pub fn block_name(stage: usize, width: usize, index: usize) -> String {
        format!("resblock{}_{}{}", stage + 1, width, block_letter(index))
    }

    /// Names of every unit in forward order: the stem then all blocks.
    pub fn unit_names(&self) -> Vec<String> {
        let mut names = vec![STEM.to_string()];
        for (s, &w) in self.stage_widths.iter().enumerate() {
            for b in 0..self.blocks_per_stage {
                names.push(Self::block_name(s, w, b));
            }
        }
        names
    }

    /// `(C, H, W)` of a unit's output for `image_size` inputs.
    pub fn tap_shape(&self, tap: &str) -> Result<(usize, usize, usize)> {
        if tap == STEM {
            return Ok((self.stem_channels, self.image_size, self.image_size));
        }
        for (s, &w) in self.stage_widths.iter().enumerate() {
            for b in 0..self.blocks_per_stage {
                if Self::block_name(s, w, b) == tap {
                    let side = self.image_size >> s;
                    return Ok((w, side, side));
                }
            }
        }
        Err(Error::UnknownTap(tap.to_string()))
    }

    /// Last block of the last stage; input to the rotation head.
    pub fn final_tap(&self) -> String {
        let s = self.stage_widths.len() - 1;
        Self::block_name(s, self.stage_widths[s], self.blocks_per_stage - 1)
    }

    /// Last block of stage `stage` (1-based), e.g. `resblock2_128b`.
    pub fn stage_output_tap(&self, stage: usize) -> Option<String> {
        let w = *self.stage_widths.get(stage.checked_sub(1)?)?;
        Some(Self::block_name(stage - 1, w, self.blocks_per_stage - 1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.is_empty() || self.blocks_per_stage == 0 {
            return Err(Error::Config(
                "backbone needs at least one stage and one block per stage".into(),
            ));
        }
        if self.stage_widths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "stage widths must be strictly increasing, got {:?}",
                self.stage_widths
            )));
        }
        if self.blocks_per_stage > 26 {
            return Err(Error::Config("at most 26 blocks per stage".into()));
        }
        let downsample = 1usize << self.stage_widths.len();
        if self.image_size == 0 || !self.image_size.is_multiple_of(downsample) {
            return Err(Error::Config(format!(
                "image size {} must be divisible by {downsample}",
                self.image_size
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for tap in &self.taps {
            self.tap_shape(tap)?;
            if !seen.insert(tap) {
                return Err(Error::Config(format!("duplicate tap `{tap}`")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ResidualBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    projection: Option<Conv2d>,
}

impl ResidualBlock {
    fn new<R: rand::Rng>(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        init: &mut Initializer<'_, R>,
        params: &mut ParamSet,
    ) -> Result<Self> {
        let conv1 = Conv2d::new(&format!("{name}.conv1"), in_ch, out_ch, 3, stride, init, params)?;
        let bn1 = BatchNorm::new(&format!("{name}.bn1"), out_ch, init, params)?;
        let conv2 = Conv2d::new(&format!("{name}.conv2"), out_ch, out_ch, 3, 1, init, params)?;
        let bn2 = BatchNorm::new(&format!("{name}.bn2"), out_ch, init, params)?;
        let projection = if stride != 1 || in_ch != out_ch {
            Some(Conv2d::new(
                &format!("{name}.proj"),
                in_ch,
                out_ch,
                1,
                stride,
                init,
                params,
            )?)
        } else {
            None
        };
        Ok(Self {
            conv1,
            bn1,
            conv2,
            bn2,
            projection,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let h = self.bn1.forward(&self.conv1.forward(x)?, train)?.relu()?;
        let h = self.bn2.forward(&self.conv2.forward(&h)?, train)?;
        let shortcut = match &self.projection {
            Some(p) => p.forward(x)?,
            None => x.clone(),
        };
        Ok((h + shortcut)?.relu()?)
    }
}

#[derive(Clone, Debug)]
enum UnitLayer {
    Stem(Conv2d, BatchNorm),
    Block(ResidualBlock),
}

#[derive(Clone, Debug)]
struct Unit {
    name: String,
    layer: UnitLayer,
    params: ParamSet,
}

impl Unit {
    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        match &self.layer {
            UnitLayer::Stem(conv, bn) => Ok(bn.forward(&conv.forward(x)?, train)?.relu()?),
            UnitLayer::Block(b) => b.forward(x, train),
        }
    }
}

/// Residual feature extractor. Parameters are named `backbone.<unit>.<layer>.*`.
#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    units: Vec<Unit>,
    /// Index of the last frozen unit, if any.
    frozen_through: Option<usize>,
    device: Device,
}

/// Builds a deterministically initialized backbone.
pub fn build_backbone(cfg: &BackboneConfig, init_seed: u64) -> Result<Backbone> {
    Backbone::new(cfg, init_seed, &Device::Cpu)
}

impl Backbone {
    pub fn new(cfg: &BackboneConfig, init_seed: u64, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let mut init = Initializer::new(&mut rng, device.clone());
        let mut units = Vec::new();

        let mut params = ParamSet::new();
        let prefix = format!("backbone.{STEM}");
        let conv = Conv2d::new(
            &format!("{prefix}.conv"),
            3,
            cfg.stem_channels,
            3,
            1,
            &mut init,
            &mut params,
        )?;
        let bn = BatchNorm::new(&format!("{prefix}.bn"), cfg.stem_channels, &mut init, &mut params)?;
        units.push(Unit {
            name: STEM.into(),
            layer: UnitLayer::Stem(conv, bn),
            params,
        });

        let mut in_ch = cfg.stem_channels;
        for (s, &w) in cfg.stage_widths.iter().enumerate() {
            for b in 0..cfg.blocks_per_stage {
                let name = BackboneConfig::block_name(s, w, b);
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let mut params = ParamSet::new();
                let block = ResidualBlock::new(&format!("backbone.{name}"), in_ch, w, stride, &mut init, &mut params)?;
                units.push(Unit {
                    name,
                    layer: UnitLayer::Block(block),
                    params,
                });
                in_ch = w;
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            units,
            frozen_through: None,
            device: device.clone(),
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn unit_index(&self, tap: &str) -> Result<usize> {
        self.units
            .iter()
            .position(|u| u.name == tap)
            .ok_or_else(|| Error::UnknownTap(tap.to_string()))
    }

    pub fn tap_shape(&self, tap: &str) -> Result<(usize, usize, usize)> {
        self.cfg.tap_shape(tap)
    }

    /// Runs the network up to and including `tap`.
    ///
    /// Frozen units always run in inference mode; when the whole path is
    /// frozen the result is detached from the graph.
    pub fn forward_to_tap(&self, x: &Tensor, tap: &str, train: bool) -> Result<Tensor> {
        let last = self.unit_index(tap)?;
        if x.rank() != 4 || x.dim(1)? != 3 {
            return Err(Error::Shape(format!("expected (B, 3, H, W) input, got {:?}", x.dims())));
        }
        let mut h = x.clone();
        for (i, unit) in self.units[..=last].iter().enumerate() {
            let frozen = self.frozen_through.is_some_and(|f| i <= f);
            h = unit.forward(&h, train && !frozen)?;
            if self.frozen_through == Some(i) {
                h = h.detach();
            }
        }
        Ok(h)
    }

    /// Excludes every parameter up to and including `through_tap` from
    /// gradient updates and pins their batch norms to running statistics.
    /// Freezing is monotone: an earlier tap never un-freezes later units.
    pub fn freeze(&mut self, through_tap: &str) -> Result<()> {
        let idx = self.unit_index(through_tap)?;
        self.frozen_through = Some(self.frozen_through.map_or(idx, |f| f.max(idx)));
        Ok(())
    }

    /// Consuming form of [`Backbone::freeze`].
    pub fn frozen(mut self, through_tap: &str) -> Result<Self> {
        self.freeze(through_tap)?;
        Ok(self)
    }

    pub fn frozen_through(&self) -> Option<&str> {
        self.frozen_through.map(|i| self.units[i].name.as_str())
    }

    pub fn is_frozen(&self, unit: &str) -> bool {
        match (self.units.iter().position(|u| u.name == unit), self.frozen_through) {
            (Some(i), Some(f)) => i <= f,
            _ => false,
        }
    }

    pub fn params(&self) -> ParamSet {
        let mut all = ParamSet::new();
        for u in &self.units {
            all.extend(u.params.clone());
        }
        all
    }

    /// Trainable variables outside the frozen region.
    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        self.units
            .iter()
            .enumerate()
            .filter(|(i, _)| self.frozen_through.is_none_or(|f| *i > f))
            .flat_map(|(_, u)| {
                u.params
                    .trainable()
                    .map(|p| (p.name.clone(), p.var.clone()))
                    .collect::<Vec<_>>()
            })
            .collect()
    }
}

/// Extra residual block(s) at `rotation_head_width` channels, global average
/// pooling, and a linear map to the four rotation logits.
#[derive(Clone, Debug)]
pub struct RotationHead {
    blocks: Vec<ResidualBlock>,
    fc: Linear,
    params: ParamSet,
}

impl RotationHead {
    pub fn new(cfg: &BackboneConfig, init_seed: u64, device: &Device) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed ^ 0x5EED_0001);
        let mut init = Initializer::new(&mut rng, device.clone());
        let mut params = ParamSet::new();
        let mut in_ch = *cfg.stage_widths.last().expect("validated config");
        let w = cfg.rotation_head_width;
        let mut blocks = Vec::new();
        for b in 0..cfg.rotation_head_blocks {
            let name = format!("rotation_head.block{}", block_letter(b));
            let stride = if b == 0 { 2 } else { 1 };
            blocks.push(ResidualBlock::new(&name, in_ch, w, stride, &mut init, &mut params)?);
            in_ch = w;
        }
        let fc = Linear::new("rotation_head.fc", in_ch, 4, &mut init, &mut params)?;
        Ok(Self { blocks, fc, params })
    }

    pub fn forward(&self, features: &Tensor, train: bool) -> Result<Tensor> {
        let mut h = features.clone();
        for b in &self.blocks {
            h = b.forward(&h, train)?;
        }
        self.fc.forward(&global_avg_pool(&h)?)
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }
}

/// `B x 4` rotation logits for a batch.
pub fn rotation_logits(backbone: &Backbone, head: &RotationHead, batch: &Tensor, train: bool) -> Result<Tensor> {
    let features = backbone.forward_to_tap(batch, &backbone.config().final_tap(), train)?;
    head.forward(&features, train)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Flatten,
    #[default]
    Gap,
}

impl PoolMode {
    pub fn input_width(self, (c, h, w): (usize, usize, usize)) -> usize {
        match self {
            PoolMode::Flatten => c * h * w,
            PoolMode::Gap => c,
        }
    }

    pub fn apply(self, features: &Tensor) -> Result<Tensor> {
        match self {
            PoolMode::Flatten => Ok(features.flatten_from(1)?),
            PoolMode::Gap => global_avg_pool(features),
        }
    }
}

pub const BOW_EPS: f64 = 1e-8;
pub const BOW_GAMMA_INIT: f64 = 10.0;

/// Scaled-cosine softmax: `softmax(gamma * cos(feature, w_k))` over the rows
/// `w_k` of `weight`.
///
/// `features` is `(B, C)`, `weight` is `(K, C)`, `gamma` has one element. A
/// zero feature vector yields logits of zero and hence the uniform
/// distribution.
pub fn bow_predict(features: &Tensor, weight: &Tensor, gamma: &Tensor) -> Result<Tensor> {
    if features.rank() != 2 || weight.rank() != 2 || features.dim(1)? != weight.dim(1)? {
        return Err(Error::DimMismatch {
            what: "bow head feature width",
            expected: weight.dims().get(1).copied().unwrap_or(0),
            got: features.dims().last().copied().unwrap_or(0),
        });
    }
    let unit_rows = |t: &Tensor| -> Result<Tensor> {
        let norm = (t.sqr()?.sum_keepdim(1)?.sqrt()? + BOW_EPS)?;
        Ok(t.broadcast_div(&norm)?)
    };
    let cos = unit_rows(features)?.matmul(&unit_rows(weight)?.t()?)?;
    let logits = cos.broadcast_mul(&gamma.reshape((1, 1))?)?;
    softmax_rows(&logits)
}

/// Reparametrized linear-plus-softmax layer producing a distribution over
/// the `K` visual words.
#[derive(Clone, Debug)]
pub struct BowPredictionHead {
    weight: Var,
    gamma: Var,
    pool: PoolMode,
    params: ParamSet,
}

impl BowPredictionHead {
    pub fn new(k: usize, input_width: usize, pool: PoolMode, init_seed: u64, device: &Device) -> Result<Self> {
        if k == 0 || input_width == 0 {
            return Err(Error::Config("bow head needs K >= 1 and a positive input width".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed ^ 0x5EED_0002);
        let mut init = Initializer::new(&mut rng, device.clone());
        let mut params = ParamSet::new();
        let weight = params.push(
            "bow_head.weight",
            init.normal(&[k, input_width], 1.0)?,
            ParamKind::Trainable,
        );
        let gamma = params.push(
            "bow_head.gamma",
            init.constant(&[1], BOW_GAMMA_INIT)?,
            ParamKind::Trainable,
        );
        Ok(Self {
            weight,
            gamma,
            pool,
            params,
        })
    }

    pub fn k(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn pool(&self) -> PoolMode {
        self.pool
    }

    pub fn gamma(&self) -> Result<f32> {
        Ok(self.gamma.as_tensor().to_vec1::<f32>()?[0])
    }

    /// Distribution over words for already pooled `(B, C)` features.
    pub fn predict(&self, pooled: &Tensor) -> Result<Tensor> {
        bow_predict(pooled, self.weight.as_tensor(), self.gamma.as_tensor())
    }

    /// Pools a `(B, C, H, W)` tap according to the head's mode, then predicts.
    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        self.predict(&self.pool.apply(features)?)
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    #[default]
    Linear,
    Nonlinear,
}

pub const NONLINEAR_HIDDEN: usize = 1024;

#[derive(Clone, Debug)]
enum ClassifierLayers {
    Linear(Linear),
    Nonlinear { fc1: Linear, bn: BatchNorm, fc2: Linear },
}

/// 100-way classifier on a backbone tap, either flattened or pooled.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    mode: PoolMode,
    kind: HeadKind,
    layers: ClassifierLayers,
    params: ParamSet,
}

impl ClassifierHead {
    pub fn new(
        tap_shape: (usize, usize, usize),
        mode: PoolMode,
        kind: HeadKind,
        classes: usize,
        init_seed: u64,
        device: &Device,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed ^ 0x5EED_0003);
        let mut init = Initializer::new(&mut rng, device.clone());
        let mut params = ParamSet::new();
        let width = mode.input_width(tap_shape);
        let layers = match kind {
            HeadKind::Linear => {
                ClassifierLayers::Linear(Linear::new("classifier.fc", width, classes, &mut init, &mut params)?)
            }
            HeadKind::Nonlinear => ClassifierLayers::Nonlinear {
                fc1: Linear::new("classifier.fc1", width, NONLINEAR_HIDDEN, &mut init, &mut params)?,
                bn: BatchNorm::new("classifier.bn", NONLINEAR_HIDDEN, &mut init, &mut params)?,
                fc2: Linear::new("classifier.fc2", NONLINEAR_HIDDEN, classes, &mut init, &mut params)?,
            },
        };
        Ok(Self {
            mode,
            kind,
            layers,
            params,
        })
    }

    pub fn mode(&self) -> PoolMode {
        self.mode
    }

    pub fn kind(&self) -> HeadKind {
        self.kind
    }

    pub fn input_width(&self) -> usize {
        match &self.layers {
            ClassifierLayers::Linear(fc) => fc.in_features(),
            ClassifierLayers::Nonlinear { fc1, .. } => fc1.in_features(),
        }
    }

    /// Number of affine maps in the head.
    pub fn affine_count(&self) -> usize {
        match self.layers {
            ClassifierLayers::Linear(_) => 1,
            ClassifierLayers::Nonlinear { .. } => 2,
        }
    }

    pub fn forward(&self, features: &Tensor, train: bool) -> Result<Tensor> {
        let x = self.mode.apply(features)?;
        if x.dim(1)? != self.input_width() {
            return Err(Error::DimMismatch {
                what: "classifier input width",
                expected: self.input_width(),
                got: x.dim(1)?,
            });
        }
        match &self.layers {
            ClassifierLayers::Linear(fc) => fc.forward(&x),
            ClassifierLayers::Nonlinear { fc1, bn, fc2 } => fc2.forward(&bn.forward(&fc1.forward(&x)?, train)?.relu()?),
        }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }
}

/// `B x classes` logits from the classifier attached at `tap`.
pub fn classify(backbone: &Backbone, head: &ClassifierHead, batch: &Tensor, tap: &str, train: bool) -> Result<Tensor> {
    let shape = backbone.tap_shape(tap)?;
    let expected = head.mode().input_width(shape);
    if expected != head.input_width() {
        return Err(Error::DimMismatch {
            what: "classifier input width for tap",
            expected: head.input_width(),
            got: expected,
        });
    }
    head.forward(&backbone.forward_to_tap(batch, tap, train)?, train)
}

/// Backbone plus whichever heads a training stage uses.
#[derive(Clone, Debug)]
pub struct Network {
    pub backbone: Backbone,
    pub rotation: Option<RotationHead>,
    pub bow: Option<BowPredictionHead>,
    pub classifier: Option<ClassifierHead>,
}

impl Network {
    pub fn new(backbone: Backbone) -> Self {
        Self {
            backbone,
            rotation: None,
            bow: None,
            classifier: None,
        }
    }

    pub fn params(&self) -> ParamSet {
        let mut all = self.backbone.params();
        for heads in [
            self.rotation.as_ref().map(|h| h.params()),
            self.bow.as_ref().map(|h| h.params()),
            self.classifier.as_ref().map(|h| h.params()),
        ]
        .into_iter()
        .flatten()
        {
            all.extend(heads.clone());
        }
        all
    }

    /// Variables the optimizer should update.
    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        let mut vars = self.backbone.trainable_vars();
        for heads in [
            self.rotation.as_ref().map(|h| h.params()),
            self.bow.as_ref().map(|h| h.params()),
            self.classifier.as_ref().map(|h| h.params()),
        ]
        .into_iter()
        .flatten()
        {
            vars.extend(heads.trainable().map(|p| (p.name.clone(), p.var.clone())));
        }
        vars
    }
}

/// Scalar dtype used throughout the network.
pub const DTYPE: DType = DType::F32;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::soft_cross_entropy;
    use rand::Rng;

    fn tiny_cfg() -> BackboneConfig {
        BackboneConfig {
            stem_channels: 4,
            stage_widths: vec![4, 8, 16],
            blocks_per_stage: 2,
            rotation_head_width: 16 + 8,
            rotation_head_blocks: 1,
            image_size: 32,
            taps: vec!["resblock2_8b".into(), "resblock3_16b".into()],
        }
    }

    fn input(b: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Initializer::new(&mut rng, Device::Cpu);
        init.normal(&[b, 3, 32, 32], 1.0).unwrap().as_tensor().clone()
    }

    #[test]
    fn default_tap_shapes() {
        let cfg = BackboneConfig::default();
        assert_eq!(cfg.tap_shape("resblock2_128b").unwrap(), (128, 16, 16));
        assert_eq!(cfg.tap_shape("resblock3_256b").unwrap(), (256, 8, 8));
        assert_eq!(cfg.final_tap(), "resblock3_256b");
        assert_eq!(cfg.stage_output_tap(2).unwrap(), "resblock2_128b");
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn default_backbone_forward_shapes() {
        let bb = build_backbone(&BackboneConfig::default(), 0).unwrap();
        let x = input(2, 1);
        assert_eq!(
            bb.forward_to_tap(&x, "resblock3_256b", false).unwrap().dims(),
            &[2, 256, 8, 8]
        );
        assert_eq!(
            bb.forward_to_tap(&x, "resblock2_128b", false).unwrap().dims(),
            &[2, 128, 16, 16]
        );
    }

    #[test]
    fn bad_configs() {
        let mut cfg = tiny_cfg();
        cfg.taps.push("resblock9_1a".into());
        assert!(matches!(build_backbone(&cfg, 0), Err(Error::UnknownTap(_))));
        let mut cfg = tiny_cfg();
        cfg.stage_widths = vec![8, 8, 16];
        assert!(matches!(build_backbone(&cfg, 0), Err(Error::Config(_))));
        let mut cfg = tiny_cfg();
        cfg.taps = vec!["stem".into(), "stem".into()];
        assert!(build_backbone(&cfg, 0).is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_backbone(&tiny_cfg(), 7).unwrap().params().to_tensors().unwrap();
        let b = build_backbone(&tiny_cfg(), 7).unwrap().params().to_tensors().unwrap();
        let c = build_backbone(&tiny_cfg(), 8).unwrap().params().to_tensors().unwrap();
        assert_eq!(ParamSet::squared_distance(&a, &b).unwrap(), 0.0);
        assert!(ParamSet::squared_distance(&a, &c).unwrap() > 0.0);
    }

    #[test]
    fn unknown_tap_on_forward() {
        let bb = build_backbone(&tiny_cfg(), 0).unwrap();
        assert!(matches!(
            bb.forward_to_tap(&input(1, 0), "nope", false),
            Err(Error::UnknownTap(_))
        ));
    }

    #[test]
    fn eval_mode_is_batch_independent() {
        let bb = build_backbone(&tiny_cfg(), 3).unwrap();
        let x = input(5, 2);
        let all = bb.forward_to_tap(&x, "resblock3_16b", false).unwrap();
        let one = bb
            .forward_to_tap(&x.narrow(0, 3, 1).unwrap(), "resblock3_16b", false)
            .unwrap();
        let diff = (all.narrow(0, 3, 1).unwrap() - one)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap();
        assert!(diff.to_scalar::<f32>().unwrap() < 1e-5);
    }

    #[test]
    fn zero_input_is_finite() {
        let bb = build_backbone(&tiny_cfg(), 0).unwrap();
        let x = Tensor::zeros((2, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
        for train in [false, true] {
            let y = bb.forward_to_tap(&x, "resblock3_16b", train).unwrap();
            let v = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert!(v.iter().all(|f| f.is_finite()));
        }
    }

    #[test]
    fn rotation_head_outputs_four_logits() {
        let cfg = tiny_cfg();
        let bb = build_backbone(&cfg, 0).unwrap();
        let head = RotationHead::new(&cfg, 0, &Device::Cpu).unwrap();
        let logits = rotation_logits(&bb, &head, &input(3, 0), false).unwrap();
        assert_eq!(logits.dims(), &[3, 4]);
        let sums = softmax_rows(&logits).unwrap().sum(1).unwrap().to_vec1::<f32>().unwrap();
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-5));
    }

    // Logits gamma*cos with cos ~ N(0, 1/C) give an expected excess of
    // sigma^2/2 over ln K plus target noise of order sigma*|t|; a plain
    // ln K + 0.2 bound is not guaranteed at C = 256.
    #[test]
    fn fresh_bow_loss_near_uniform_bound() {
        let dev = Device::Cpu;
        let cfg = BackboneConfig::default();
        let bb = Backbone::new(&cfg, 3, &dev).unwrap();
        let (c, _, _) = cfg.tap_shape(&cfg.final_tap()).unwrap();
        let k = 2048;
        let head = BowPredictionHead::new(k, c, PoolMode::Gap, 3, &dev).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f32> = (0..4 * 3 * 32 * 32).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x = Tensor::from_vec(x, (4, 3, 32, 32), &dev).unwrap();
        let pred = head
            .forward(&bb.forward_to_tap(&x, &cfg.final_tap(), true).unwrap())
            .unwrap();
        let mut t = vec![0f32; 4 * k];
        for row in t.chunks_mut(k) {
            for _ in 0..64 {
                row[rng.random_range(0..40)] += 1.0 / 64.0;
            }
        }
        let t_norm = t
            .chunks(k)
            .map(|r| r.iter().map(|v| (v * v) as f64).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        let t = Tensor::from_vec(t, (4, k), &dev).unwrap();
        let loss = soft_cross_entropy(&pred, &t).unwrap().to_scalar::<f32>().unwrap() as f64;
        let sigma = BOW_GAMMA_INIT / (c as f64).sqrt();
        let bound = (k as f64).ln() + sigma * sigma / 2.0 + 3.0 * sigma * t_norm;
        assert!(loss.is_finite() && loss <= bound, "{loss} > {bound}");
        assert!(loss >= (k as f64).ln() - 3.0 * sigma * t_norm);
    }

    #[test]
    fn bow_predict_limits() {
        let dev = Device::Cpu;
        let head = BowPredictionHead::new(2048, 8, PoolMode::Gap, 0, &dev).unwrap();
        let f = Tensor::randn(0f32, 1., (2, 8), &dev).unwrap();
        let p = bow_predict(
            &f,
            &head.weight.as_tensor().clone(),
            &Tensor::new(&[0f32], &dev).unwrap(),
        )
        .unwrap();
        for row in p.to_vec2::<f32>().unwrap() {
            assert!(row.iter().all(|v| (v - 1.0 / 2048.0).abs() < 1e-9));
        }
        // feature equal to row k with a large scale picks k
        let w = head.weight.as_tensor();
        let f = w.narrow(0, 1234, 1).unwrap();
        let p = bow_predict(&f, w, &Tensor::new(&[100f32], &dev).unwrap()).unwrap();
        let argmax = p.argmax(1).unwrap().to_vec1::<u32>().unwrap()[0];
        assert_eq!(argmax, 1234);
        // zero feature falls back to uniform
        let z = Tensor::zeros((1, 8), DType::F32, &dev).unwrap();
        let p = head.predict(&z).unwrap().to_vec2::<f32>().unwrap();
        assert!(p[0].iter().all(|v| (v - 1.0 / 2048.0).abs() < 1e-9));
    }

    #[test]
    fn bow_gradient_matches_finite_differences() {
        let dev = Device::Cpu;
        let (c, k) = (4, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut init = Initializer::new(&mut rng, dev.clone());
        let f = init
            .normal(&[3, c], 1.0)
            .unwrap()
            .as_tensor()
            .to_dtype(DType::F64)
            .unwrap();
        let w = Var::from_tensor(
            &init
                .normal(&[k, c], 1.0)
                .unwrap()
                .as_tensor()
                .to_dtype(DType::F64)
                .unwrap(),
        )
        .unwrap();
        let gamma = Var::from_tensor(&Tensor::new(&[3.0f64], &dev).unwrap()).unwrap();
        let target = softmax_rows(
            &init
                .normal(&[3, k], 1.0)
                .unwrap()
                .as_tensor()
                .to_dtype(DType::F64)
                .unwrap(),
        )
        .unwrap();
        let loss = |w: &Tensor, g: &Tensor| -> f64 {
            soft_cross_entropy(&bow_predict(&f, w, g).unwrap(), &target)
                .unwrap()
                .to_scalar::<f64>()
                .unwrap()
        };
        let l = soft_cross_entropy(&bow_predict(&f, w.as_tensor(), gamma.as_tensor()).unwrap(), &target).unwrap();
        let grads = l.backward().unwrap();
        let gw = grads
            .get(w.as_tensor())
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let gg = grads.get(gamma.as_tensor()).unwrap().to_vec1::<f64>().unwrap()[0];

        let h = 1e-6;
        let w0 = w.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for i in 0..w0.len() {
            let mut plus = w0.clone();
            plus[i] += h;
            let mut minus = w0.clone();
            minus[i] -= h;
            let tp = Tensor::from_vec(plus, (k, c), &dev).unwrap();
            let tm = Tensor::from_vec(minus, (k, c), &dev).unwrap();
            let fd = (loss(&tp, gamma.as_tensor()) - loss(&tm, gamma.as_tensor())) / (2.0 * h);
            let rel = (fd - gw[i]).abs() / fd.abs().max(gw[i].abs()).max(1e-8);
            assert!(
                rel < 1e-3 || (fd - gw[i]).abs() < 1e-9,
                "w[{i}] fd {fd} analytic {}",
                gw[i]
            );
        }
        let gp = Tensor::new(&[3.0 + h], &dev).unwrap();
        let gm = Tensor::new(&[3.0 - h], &dev).unwrap();
        let fd = (loss(w.as_tensor(), &gp) - loss(w.as_tensor(), &gm)) / (2.0 * h);
        assert!((fd - gg).abs() / fd.abs().max(1e-8) < 1e-3);
    }

    #[test]
    fn classifier_widths_and_mismatch() {
        let cfg = BackboneConfig::default();
        let dev = Device::Cpu;
        let s3 = cfg.tap_shape("resblock3_256b").unwrap();
        let s2 = cfg.tap_shape("resblock2_128b").unwrap();
        assert_eq!(PoolMode::Flatten.input_width(s3), 16384);
        assert_eq!(PoolMode::Flatten.input_width(s2), 32768);
        assert_eq!(PoolMode::Gap.input_width(s3), 256);
        assert_eq!(PoolMode::Gap.input_width(s2), 128);

        let tcfg = tiny_cfg();
        let bb = build_backbone(&tcfg, 0).unwrap();
        let head = ClassifierHead::new(
            bb.tap_shape("resblock3_16b").unwrap(),
            PoolMode::Flatten,
            HeadKind::Linear,
            100,
            0,
            &dev,
        )
        .unwrap();
        assert_eq!(head.affine_count(), 1);
        assert_eq!(head.input_width(), 16 * 8 * 8);
        let logits = classify(&bb, &head, &input(2, 0), "resblock3_16b", false).unwrap();
        assert_eq!(logits.dims(), &[2, 100]);
        assert!(matches!(
            classify(&bb, &head, &input(2, 0), "resblock2_8b", false),
            Err(Error::DimMismatch { .. })
        ));

        let nl = ClassifierHead::new(
            bb.tap_shape("resblock3_16b").unwrap(),
            PoolMode::Gap,
            HeadKind::Nonlinear,
            100,
            0,
            &dev,
        )
        .unwrap();
        assert_eq!(nl.affine_count(), 2);
        assert_eq!(
            classify(&bb, &nl, &input(2, 0), "resblock3_16b", true).unwrap().dims(),
            &[2, 100]
        );
    }

    #[test]
    fn freezing_is_monotone_and_idempotent() {
        let mut bb = build_backbone(&tiny_cfg(), 0).unwrap();
        let total = bb.trainable_vars().len();
        bb.freeze("resblock2_8b").unwrap();
        let after = bb.trainable_vars().len();
        bb.freeze("resblock2_8b").unwrap();
        assert_eq!(bb.trainable_vars().len(), after);
        bb.freeze("stem").unwrap();
        assert_eq!(bb.frozen_through(), Some("resblock2_8b"));
        assert!(after < total);
        assert!(bb.is_frozen("resblock1_4a") && !bb.is_frozen("resblock3_16a"));
        assert!(bb.clone().frozen("missing").is_err());
    }
}
