//! Strict JSON configuration: unknown keys are rejected, every field has a
//! documented default, and the resolved document is embedded in checkpoints.

use serde::{Deserialize, Serialize};

use crate::attention::TopkVariant;
use crate::decoder::DecoderDims;
use crate::encoder::{AttentionKind, EncoderDims};
use crate::error::{Error, Result};
use crate::stem::StemDims;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_size: usize,
    pub num_classes: usize,
    pub stem_widths: [usize; 4],
    pub fpn_width: usize,
    pub stage_widths: [usize; 4],
    pub stage_depths: [usize; 4],
    pub attention: AttentionConfig,
    pub inject: bool,
    pub freeze_stem: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    /// Per-stage attention kind: "window" or "topk".
    pub kinds: [String; 4],
    pub heads: usize,
    pub window: usize,
    pub k_tokens: usize,
    pub k_channels: usize,
    /// "full-key" (canonical) or "selected-key".
    pub topk_variant: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub steps: usize,
    pub warmup_frac: f64,
    pub min_lr_frac: f64,
    pub eval_every: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dir: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 64,
            num_classes: 4,
            stem_widths: [16, 32, 64, 128],
            fpn_width: 32,
            stage_widths: [32, 64, 128, 256],
            stage_depths: [2, 2, 2, 2],
            attention: AttentionConfig::default(),
            inject: true,
            freeze_stem: false,
        }
    }
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            kinds: [
                "window".into(),
                "window".into(),
                "topk".into(),
                "topk".into(),
            ],
            heads: 4,
            window: 4,
            k_tokens: 28,
            k_channels: 64,
            topk_variant: "full-key".into(),
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.00075,
            weight_decay: 0.005,
            batch: 4,
            steps: 1000,
            warmup_frac: 0.1,
            min_lr_frac: 0.01,
            eval_every: 50,
            seed: 42,
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { dir: "data".into() }
    }
}

impl Default for ConfigFile {
    fn default() -> Self {
        ConfigFile {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl ConfigFile {
    pub fn from_json(text: &str) -> Result<ConfigFile> {
        let cfg: ConfigFile = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.input_size == 0 || m.input_size % 32 != 0 {
            return Err(Error::Config(format!(
                "model.input_size {} must be a positive multiple of 32",
                m.input_size
            )));
        }
        if m.num_classes < 2 {
            return Err(Error::Config(format!(
                "model.num_classes {} must be >= 2",
                m.num_classes
            )));
        }
        for i in 1..4 {
            if m.stage_widths[i] != 2 * m.stage_widths[i - 1] {
                return Err(Error::Config(format!(
                    "model.stage_widths must double across stages, got {:?}",
                    m.stage_widths
                )));
            }
        }
        for k in &m.attention.kinds {
            parse_kind(k)?;
        }
        parse_variant(&m.attention.topk_variant)?;
        if m.attention.k_tokens == 0 || m.attention.k_channels == 0 {
            return Err(Error::Config(
                "attention.k_tokens and attention.k_channels must be positive".into(),
            ));
        }
        if m.attention.heads == 0 || m.attention.window == 0 {
            return Err(Error::Config(
                "attention.heads and attention.window must be positive".into(),
            ));
        }
        let t = &self.train;
        if t.batch == 0 || t.steps == 0 {
            return Err(Error::Config("train.batch and train.steps must be positive".into()));
        }
        if !(0.0..1.0).contains(&t.warmup_frac) {
            return Err(Error::Config(format!(
                "train.warmup_frac {} must be in [0, 1)",
                t.warmup_frac
            )));
        }
        Ok(())
    }

    pub fn model_dims(&self) -> Result<crate::model::ModelDims> {
        crate::model::ModelDims::from_config(self)
    }
}

pub fn parse_kind(s: &str) -> Result<AttentionKind> {
    match s {
        "window" => Ok(AttentionKind::Window),
        "topk" => Ok(AttentionKind::Topk),
        other => Err(Error::Config(format!(
            "attention kind '{other}' (expected 'window' or 'topk')"
        ))),
    }
}

pub fn parse_variant(s: &str) -> Result<TopkVariant> {
    match s {
        "full-key" => Ok(TopkVariant::FullKey),
        "selected-key" => Ok(TopkVariant::SelectedKey),
        other => Err(Error::Config(format!(
            "topk_variant '{other}' (expected 'full-key' or 'selected-key')"
        ))),
    }
}

impl ModelConfig {
    pub fn stem_dims(&self) -> StemDims {
        StemDims {
            widths: self.stem_widths,
            stem_stride: 2,
            fpn_width: self.fpn_width,
        }
    }

    pub fn encoder_dims(&self) -> Result<EncoderDims> {
        let mut kinds = [AttentionKind::Window; 4];
        for (i, k) in self.attention.kinds.iter().enumerate() {
            kinds[i] = parse_kind(k)?;
        }
        Ok(EncoderDims {
            stage_widths: self.stage_widths,
            stage_depths: self.stage_depths,
            kinds,
            heads: self.attention.heads,
            window: self.attention.window,
            k_tokens: self.attention.k_tokens,
            k_channels: self.attention.k_channels,
            variant: parse_variant(&self.attention.topk_variant)?,
            inject: self.inject,
            fpn_width: self.fpn_width,
            mlp_expansion: 4,
        })
    }

    pub fn decoder_dims(&self, stem_stride: usize) -> DecoderDims {
        DecoderDims {
            stage_widths: self.stage_widths,
            num_classes: self.num_classes,
            head_upsample: stem_stride * 2,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ConfigFile::default();
        let json = cfg.to_json();
        let back = ConfigFile::from_json(&json).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn empty_object_gets_all_defaults() {
        let cfg = ConfigFile::from_json("{}").unwrap();
        assert_eq!(cfg, ConfigFile::default());
        assert_eq!(cfg.train.lr, 0.00075);
        assert_eq!(cfg.train.weight_decay, 0.005);
        assert_eq!(cfg.train.batch, 4);
    }

    #[test]
    fn default_uses_topk_in_last_two_stages_only() {
        let cfg = ConfigFile::default();
        assert_eq!(
            cfg.model.attention.kinds,
            ["window", "window", "topk", "topk"]
        );
    }

    #[test]
    fn unknown_keys_rejected() {
        let e = ConfigFile::from_json(r#"{"model": {"frobnicate": 3}}"#).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        let e = ConfigFile::from_json(r#"{"extra_section": {}}"#).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
    }

    #[test]
    fn invalid_values_rejected() {
        let e = ConfigFile::from_json(r#"{"model": {"input_size": 48}}"#).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        let e = ConfigFile::from_json(r#"{"model": {"stage_widths": [32, 64, 100, 200]}}"#)
            .unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        let e = ConfigFile::from_json(
            r#"{"model": {"attention": {"kinds": ["dense", "window", "topk", "topk"]}}}"#,
        )
        .unwrap_err();
        assert!(matches!(e, Error::Config(_)));
    }
}
