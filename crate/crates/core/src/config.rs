//! Declarative configuration: data generation, model sizes and the staged
//! training schedule. Files are TOML; a file may name a `preset` whose
//! values it overrides key by key.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const DESK: &str = include_str!("../../../configs/desk.toml");
const PAPER: &str = include_str!("../../../configs/paper.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub preset: String,
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub num_frames: usize,
    pub image_size: usize,
    pub pixel_spacing_mm: f64,
    pub phantom_size: usize,
    pub voxel_spacing_mm: f64,
    pub n_landmarks: usize,
    pub sweeps_per_subject: usize,
    pub noise_level: f64,
    pub rot_amplitude_deg: f64,
    /// Relative weights of `linear`, `c-shape` and `s-shape`.
    pub family_mix: FamilyMix,
    /// Elevational length ranges per family, `[min, max]` mm.
    pub linear_length_mm: [f64; 2],
    pub c_shape_length_mm: [f64; 2],
    pub s_shape_length_mm: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyMix {
    pub linear: f64,
    #[serde(rename = "c-shape")]
    pub c_shape: f64,
    #[serde(rename = "s-shape")]
    pub s_shape: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub hidden: usize,
    pub intermediate: usize,
    pub layers: usize,
    pub heads: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalConfig {
    pub channels: Vec<usize>,
    pub temporal_kernels: Vec<usize>,
    pub causal: bool,
    pub pooled_dim: usize,
    pub pool_heads: usize,
}

impl LocalConfig {
    /// Temporal receptive field in frames.
    pub fn receptive_field(&self) -> usize {
        1 + self.temporal_kernels.iter().map(|k| k - 1).sum::<usize>()
    }

    /// Frames on each side that can influence an embedding (trailing only
    /// when causal).
    pub fn radius(&self) -> usize {
        let span = self.receptive_field() - 1;
        if self.causal {
            span
        } else {
            span / 2
        }
    }

    pub fn downsample(&self) -> usize {
        1 << self.channels.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlobalConfig {
    pub backbone: String,
    pub feature_dim: usize,
    pub resolution: usize,
    /// Channel widths of the stride-2 stages of the built-in backbone.
    pub channels: Vec<usize>,
    pub temporal: TransformerConfig,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub stride: usize,
    pub interposer: TransformerConfig,
    pub decoder: TransformerConfig,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub local: LocalConfig,
    pub global: GlobalConfig,
    pub fusion: FusionConfig,
    /// Temporal transformer stacked on the local encoder in the coupled
    /// ablation.
    pub coupled: TransformerConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Contiguous window length for local pretraining.
    pub window: usize,
    pub local_batch: usize,
    /// Frames drawn per sweep for global pretraining.
    pub global_count: usize,
    pub global_batch: usize,
    pub fusion_batch: usize,
    pub grad_clip: f64,
    pub freeze_local_cnn: bool,
    /// Validation interval in epochs; the last epoch is always validated.
    pub val_every: usize,
    pub local_cnn: StagePlan,
    pub local_pool: StagePlan,
    pub global: StagePlan,
    pub fusion: StagePlan,
    pub coupled: StagePlan,
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn parse_toml(text: &str, origin: &str) -> Result<toml::Value> {
    text.parse::<toml::Value>().map_err(|e| Error::Config(format!("{origin}: {e}")))
}

fn preset_text(name: &str) -> Result<&'static str> {
    match name {
        "desk" => Ok(DESK),
        "paper" => Ok(PAPER),
        other => Err(Error::Config(format!("unknown preset {other:?} (expected desk or paper)"))),
    }
}

impl Config {
    pub fn preset(name: &str) -> Result<Self> {
        Self::from_toml_str(&format!("preset = {name:?}"), name)
    }

    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        let over = parse_toml(text, origin)?;
        let preset = over.get("preset").and_then(|v| v.as_str()).unwrap_or("desk").to_string();
        let mut value = parse_toml(preset_text(&preset)?, &preset)?;
        merge(&mut value, over);
        let cfg: Config = value.try_into().map_err(|e: toml::de::Error| Error::Config(format!("{origin}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let m = &self.model;
        let l = &m.local;
        if l.channels.is_empty() || l.channels.len() != l.temporal_kernels.len() {
            return bad("model.local.channels and temporal_kernels must be non-empty and equally long".into());
        }
        if l.temporal_kernels.iter().any(|&k| k == 0) {
            return bad("temporal kernels must be >= 1".into());
        }
        if !l.causal && l.temporal_kernels.iter().any(|k| k % 2 == 0) {
            return bad("non-causal temporal kernels must be odd".into());
        }
        if l.receptive_field() > 9 {
            return bad(format!("temporal receptive field {} exceeds 9 frames", l.receptive_field()));
        }
        if m.image_size % l.downsample() != 0 {
            return bad(format!("image size {} is not divisible by {}", m.image_size, l.downsample()));
        }
        if l.pooled_dim % l.pool_heads != 0 {
            return bad("pooled_dim must be divisible by pool_heads".into());
        }
        let g = &m.global;
        if g.resolution == 0 || g.resolution > m.image_size || g.resolution % (1 << g.channels.len()) != 0 {
            return bad(format!("global resolution {} is invalid", g.resolution));
        }
        for (name, t) in [
            ("global.temporal", &g.temporal),
            ("fusion.interposer", &m.fusion.interposer),
            ("fusion.decoder", &m.fusion.decoder),
            ("coupled", &m.coupled),
        ] {
            if t.heads == 0 || t.hidden % t.heads != 0 || t.hidden % 2 != 0 || t.layers == 0 {
                return bad(format!("model.{name}: hidden must be even and divisible by heads, layers >= 1"));
            }
        }
        if m.fusion.stride == 0 {
            return bad("fusion stride must be >= 1".into());
        }
        let d = &self.data;
        if d.image_size != m.image_size {
            return bad(format!("data.image_size {} differs from model.image_size {}", d.image_size, m.image_size));
        }
        if d.num_frames < 2 || d.sweeps_per_subject == 0 {
            return bad("data.num_frames must be >= 2 and sweeps_per_subject >= 1".into());
        }
        let mix = &d.family_mix;
        if [mix.linear, mix.c_shape, mix.s_shape].iter().any(|&w| w < 0.0) || mix.linear + mix.c_shape + mix.s_shape <= 0.0 {
            return bad("family_mix weights must be non-negative with a positive sum".into());
        }
        let t = &self.train;
        if t.window < 2 || t.window > d.num_frames || t.global_count < 2 || t.global_count > d.num_frames {
            return bad("train.window and train.global_count must lie in [2, num_frames]".into());
        }
        if t.local_batch == 0 || t.global_batch == 0 || t.fusion_batch == 0 || t.val_every == 0 {
            return bad("batch sizes and val_every must be >= 1".into());
        }
        Ok(())
    }

    /// Hash of the model architecture; checkpoints from different
    /// architectures are incompatible.
    pub fn model_hash(&self) -> String {
        let json = serde_json::to_string(&self.model).expect("model config serialises");
        hex(&Sha256::digest(json.as_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_load() {
        let desk = Config::preset("desk").unwrap();
        assert_eq!(desk.model.local.receptive_field(), 5);
        assert_eq!(desk.model.local.radius(), 2);
        assert_eq!(desk.model.local.downsample(), 16);
        assert_eq!((desk.data.train, desk.data.val, desk.data.test, desk.data.num_frames), (200, 20, 20, 64));
        let paper = Config::preset("paper").unwrap();
        let t = &paper.model.global.temporal;
        assert_eq!((t.hidden, t.intermediate, t.layers, t.heads), (512, 1024, 8, 8));
        let i = &paper.model.fusion.interposer;
        assert_eq!((i.hidden, i.intermediate, i.layers, i.heads), (64, 32, 4, 4));
        assert_eq!(paper.model.global.resolution, 224);
        assert_ne!(desk.model_hash(), paper.model_hash());
    }

    #[test]
    fn overrides_merge_into_preset() {
        let cfg = Config::from_toml_str("seed = 3\n[train.fusion]\nepochs = 2\n", "test").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.train.fusion.epochs, 2);
        assert_eq!(cfg.train.fusion.lr, Config::preset("desk").unwrap().train.fusion.lr);
        let again = Config::from_toml_str(&cfg.to_toml(), "round-trip").unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(Config::from_toml_str("[model.local]\ntemporal_kernels = [4, 3, 1, 1]\n", "t").is_err());
        assert!(Config::from_toml_str("[model.local]\ntemporal_kernels = [5, 5, 3, 1]\n", "t").is_err());
        assert!(Config::from_toml_str("[model.local]\ntemporal_kernels = [5, 5, 1, 1]\n", "t").is_ok());
        assert!(Config::from_toml_str("preset = \"huge\"\n", "t").is_err());
        assert!(Config::from_toml_str("[model]\nunknown = 1\n", "t").is_err());
        assert!(Config::from_toml_str("[model]\nimage_size = 72\n", "t").is_err());
    }
}
