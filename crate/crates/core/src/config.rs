//! Run configuration. Every key has a default; the defaults are the full-scale
//! hyperparameters, and `configs/toy.toml` overrides them for CPU-sized runs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::SynthSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    /// Four strided 3x3 conv blocks.
    Toy,
    /// Bottleneck residual network ending in 2048 channels at stride 32.
    ResnetLike,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSource {
    /// Contextualized class tokens (last N rows of the class-token transformer output).
    Output,
    /// The learnable input tokens.
    Input,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MessagePassing {
    Gat,
    Gcn,
    Sage,
}

impl MessagePassing {
    pub const ALL: [MessagePassing; 3] = [MessagePassing::Gcn, MessagePassing::Sage, MessagePassing::Gat];

    pub fn name(self) -> &'static str {
        match self {
            MessagePassing::Gat => "GAT",
            MessagePassing::Gcn => "GCN",
            MessagePassing::Sage => "SAGE",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub backbone: BackboneKind,
    /// Channels of the four toy conv blocks.
    pub toy_channels: [usize; 4],
    /// Strides of the four toy conv blocks.
    pub toy_strides: [usize; 4],
    /// Bottleneck blocks per stage of the residual backbone.
    pub resnet_blocks: [usize; 4],
    pub d: usize,
    /// Base encoder layers.
    pub b_l: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub pre_norm: bool,
    pub roi_grid: usize,
    /// Class-embedding width in the box/class concatenation; 0 means d/4.
    pub d_cls: usize,
    /// Hidden width of the two-layer box and fusion MLPs; 0 means d.
    pub fusion_hidden: usize,
    /// Class-token transformer layers.
    pub t_l: usize,
    /// Class-token transformer heads; 0 means `heads`.
    pub mcit_heads: usize,
    /// Number of class tokens; 0 means the vocabulary's target count.
    pub num_target_tokens: usize,
    pub ig_target_source: TargetSource,
    pub d_prime: usize,
    pub mp_variant: MessagePassing,
    pub mp_layers: usize,
    pub mp_heads: usize,
    /// Hidden width of the edge-score and verb heads; 0 means a single linear layer.
    pub edge_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_height: 256,
            image_width: 448,
            backbone: BackboneKind::ResnetLike,
            toy_channels: [16, 32, 64, 64],
            toy_strides: [2, 2, 2, 2],
            resnet_blocks: [3, 4, 6, 3],
            d: 512,
            b_l: 2,
            heads: 8,
            ffn_dim: 2048,
            pre_norm: false,
            roi_grid: 7,
            d_cls: 0,
            fusion_hidden: 0,
            t_l: 4,
            mcit_heads: 0,
            num_target_tokens: 0,
            ig_target_source: TargetSource::Output,
            d_prime: 128,
            mp_variant: MessagePassing::Gat,
            mp_layers: 2,
            mp_heads: 2,
            edge_hidden: 0,
        }
    }
}

impl ModelConfig {
    pub fn d_cls(&self) -> usize {
        if self.d_cls == 0 {
            self.d / 4
        } else {
            self.d_cls
        }
    }

    pub fn fusion_hidden(&self) -> usize {
        if self.fusion_hidden == 0 {
            self.d
        } else {
            self.fusion_hidden
        }
    }

    pub fn mcit_heads(&self) -> usize {
        if self.mcit_heads == 0 {
            self.heads
        } else {
            self.mcit_heads
        }
    }

    /// Spatial size of the backbone output grid.
    pub fn grid_size(&self) -> (usize, usize) {
        match self.backbone {
            BackboneKind::Toy => self.toy_strides.iter().fold(
                (self.image_height, self.image_width),
                |(h, w), s| ((h - 1) / s + 1, (w - 1) / s + 1),
            ),
            BackboneKind::ResnetLike => {
                let down = |x: usize| {
                    // stem conv, max pool, then three strided stages
                    (0..5).fold(x, |v, _| (v - 1) / 2 + 1)
                };
                (down(self.image_height), down(self.image_width))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return err("d must be a positive multiple of heads");
        }
        if self.d % self.mcit_heads() != 0 {
            return err("d must be a multiple of mcit_heads");
        }
        if self.d % 4 != 0 {
            return err("d must be divisible by 4 for the 2D positional encoding");
        }
        if self.d_cls() == 0 || self.d_cls() >= self.d {
            return err("d_cls must lie in (0, d)");
        }
        if self.roi_grid == 0 || self.d_prime == 0 || self.mp_heads == 0 {
            return err("roi_grid, d_prime and mp_heads must be positive");
        }
        if self.d_prime % self.mp_heads != 0 {
            return err("d_prime must be a multiple of mp_heads");
        }
        if self.t_l == 0 {
            return err("t_l must be at least 1");
        }
        if self.image_height == 0 || self.image_width == 0 {
            return err("image size must be positive");
        }
        if self.toy_strides.contains(&0) {
            return err("toy strides must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PseudoLabelChoice {
    /// Uniform random pick among matching triplets, reseeded per (epoch, frame, instance).
    Random,
    /// First matching triplet in dictionary order.
    First,
}

/// Optimizer and schedule for one training stage. A `[train.stageN]` table only
/// needs the keys it changes; the rest come from that stage's defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_backbone: f64,
    pub lr_base: f64,
    /// Class-token transformer, its target head and the instrument feature fusion.
    pub lr_mcit: f64,
    /// Interaction graph layers and edge heads.
    pub lr_ig: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    /// Multiplicative learning-rate decay applied after every epoch.
    pub lr_decay: f64,
}

impl StageConfig {
    pub fn stage1_default() -> Self {
        Self {
            optimizer: OptimizerKind::Sgd,
            epochs: 30,
            batch_size: 32,
            lr_backbone: 1e-3,
            lr_base: 1e-3,
            lr_mcit: 1e-2,
            lr_ig: 0.0,
            weight_decay: 1e-6,
            momentum: 0.9,
            lr_decay: 0.99,
        }
    }

    pub fn stage2_default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            epochs: 30,
            batch_size: 32,
            lr_backbone: 1e-5,
            lr_base: 1e-4,
            lr_mcit: 1e-4,
            lr_ig: 1e-3,
            weight_decay: 0.0,
            momentum: 0.0,
            lr_decay: 0.99,
        }
    }
}

fn overlay_stage<'de, D: serde::Deserializer<'de>>(
    deserializer: D,
    defaults: StageConfig,
) -> std::result::Result<StageConfig, D::Error> {
    use serde::de::Error as _;
    let overrides = toml::Table::deserialize(deserializer)?;
    let mut table = toml::Table::try_from(defaults).map_err(D::Error::custom)?;
    table.extend(overrides);
    StageConfig::deserialize(table).map_err(D::Error::custom)
}

fn stage1_with_defaults<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<StageConfig, D::Error> {
    overlay_stage(d, StageConfig::stage1_default())
}

fn stage2_with_defaults<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<StageConfig, D::Error> {
    overlay_stage(d, StageConfig::stage2_default())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    #[serde(deserialize_with = "stage1_with_defaults")]
    pub stage1: StageConfig,
    #[serde(deserialize_with = "stage2_with_defaults")]
    pub stage2: StageConfig,
    /// Edge loss weight.
    pub alpha: f64,
    /// Verb loss weight.
    pub beta: f64,
    pub pseudo_labels: PseudoLabelChoice,
    /// Optional JSON array overriding the computed target class weights.
    pub class_weights_file: Option<PathBuf>,
    /// Random horizontal flip augmentation.
    pub hflip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1: StageConfig::stage1_default(),
            stage2: StageConfig::stage2_default(),
            alpha: 1.0,
            beta: 0.5,
            pseudo_labels: PseudoLabelChoice::Random,
            class_weights_file: None,
            hflip: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub drop_invalid_triplets: bool,
    /// Emit nothing for an instance whose winning verb is the background class.
    pub suppress_background: bool,
    /// Edge probability above which an edge is reported as active in visual exports.
    pub visualization_threshold: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            drop_invalid_triplets: false,
            suppress_background: true,
            visualization_threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    /// Keep only the top-scoring predictions per frame; unset means uncapped.
    pub max_dets: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            max_dets: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset directory with `annotations.json`, `detections.json` and `images/`.
    pub dataset: Option<PathBuf>,
    /// Number of trailing videos held out for evaluation.
    pub held_out_videos: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            held_out_videos: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub eval: EvalConfig,
    pub data: DataConfig,
    pub synth: SynthSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
            eval: EvalConfig::default(),
            data: DataConfig::default(),
            synth: SynthSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for (name, s) in [("stage1", &self.train.stage1), ("stage2", &self.train.stage2)] {
            if s.batch_size == 0 {
                return Err(Error::Config(format!("{name}.batch_size must be positive")));
            }
            if !(s.lr_decay > 0.0 && s.lr_decay <= 1.0) {
                return Err(Error::Config(format!("{name}.lr_decay must lie in (0, 1]")));
            }
        }
        if self.train.alpha < 0.0 || self.train.beta < 0.0 {
            return Err(Error::Config("alpha and beta must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.iou_threshold) {
            return Err(Error::Config("iou_threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Parses `text` after applying `section.key=value` overrides. Values are read
/// as TOML literals, falling back to plain strings.
pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut root: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not of the form key=value")))?;
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let parts: Vec<&str> = key.trim().split('.').collect();
        let mut table = &mut root;
        for p in &parts[..parts.len() - 1] {
            table = table
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a section")))?;
        }
        table.insert(parts[parts.len() - 1].to_string(), value);
    }
    let merged = toml::to_string(&root).map_err(|e| Error::Config(e.to_string()))?;
    RunConfig::from_toml_str(&merged)
}

/// Every configuration key with its default, in `section.key = value` form.
pub fn default_keys() -> Vec<String> {
    fn walk(prefix: &str, t: &toml::Table, out: &mut Vec<String>) {
        for (k, v) in t {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match v {
                toml::Value::Table(inner) => walk(&key, inner, out),
                other => out.push(format!("{key} = {other}")),
            }
        }
    }
    let text = RunConfig::default().to_toml_string().expect("defaults serialize");
    let table: toml::Table = text.parse().expect("defaults parse");
    let mut out = Vec::new();
    walk("", &table, &mut out);
    for unset in ["train.class_weights_file", "eval.max_dets", "data.dataset"] {
        out.push(format!("{unset} = (unset)"));
    }
    out.sort();
    out
}
