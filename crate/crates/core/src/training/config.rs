use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::augment::AugmentConfig;
use super::loss::LossWeights;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Flat training configuration, readable from TOML or JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub iters: u64,
    pub crop: usize,
    #[serde(rename = "T")]
    pub clip_len: usize,
    #[serde(rename = "L_blocks")]
    pub egmm_blocks: usize,
    #[serde(rename = "B_bins")]
    pub bins: usize,
    #[serde(rename = "N_slots")]
    pub slots: usize,
    pub seed: u64,
    pub dataset_path: Option<PathBuf>,
    pub checkpoint_every: u64,
    pub w_bce: f64,
    pub w_sj: f64,
    pub aug_scale: bool,
    pub aug_flip: bool,
    pub aug_reverse: bool,
    pub aug_color: bool,
    pub widths: [usize; 3],
    pub mask_dim: usize,
    pub guide_dim: usize,
    pub use_image: bool,
    pub use_event: bool,
    pub use_acmf: bool,
    pub use_egmm: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        let m = ModelConfig::default();
        Self {
            lr: 2e-4,
            weight_decay: 0.07,
            batch: 4,
            iters: 5000,
            crop: 64,
            clip_len: 5,
            egmm_blocks: m.egmm_blocks,
            bins: m.bins,
            slots: m.slots,
            seed: 0,
            dataset_path: None,
            checkpoint_every: 1000,
            w_bce: 0.5,
            w_sj: 0.5,
            aug_scale: true,
            aug_flip: true,
            aug_reverse: true,
            aug_color: true,
            widths: m.widths,
            mask_dim: m.mask_dim,
            guide_dim: m.guide_dim,
            use_image: true,
            use_event: true,
            use_acmf: true,
            use_egmm: true,
        }
    }

    pub fn paper() -> Self {
        Self {
            batch: 8,
            iters: 50_000,
            crop: 256,
            checkpoint_every: 5000,
            aug_color: false,
            ..Self::desk()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown profile {other:?} (expected desk or paper)"))),
        }
    }

    /// Parses a TOML (or, for `.json` paths, JSON) document. Keys absent
    /// from the document keep the values of `base`.
    pub fn load(path: &Path, base: &TrainConfig) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: serde_json::Value = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            let v: toml::Value = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            serde_json::to_value(v)?
        };
        Self::merge(base, doc)
    }

    fn merge(base: &TrainConfig, doc: serde_json::Value) -> Result<Self> {
        let serde_json::Value::Object(over) = doc else {
            return Err(Error::Config("configuration must be a key-value table".into()));
        };
        let serde_json::Value::Object(mut all) = serde_json::to_value(base)? else {
            unreachable!("struct serialises to an object")
        };
        for (k, v) in over {
            if !all.contains_key(&k) {
                return Err(Error::Config(format!("unknown configuration key {k:?}")));
            }
            all.insert(k, v);
        }
        serde_json::from_value(serde_json::Value::Object(all)).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            bins: self.bins,
            widths: self.widths,
            key_dim: self.widths[2],
            mask_dim: self.mask_dim,
            guide_dim: self.guide_dim,
            slots: self.slots,
            egmm_blocks: self.egmm_blocks,
            use_image: self.use_image,
            use_event: self.use_event,
            use_acmf: self.use_acmf,
            use_egmm: self.use_egmm,
            ..ModelConfig::default()
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            w_bce: self.w_bce,
            w_sj: self.w_sj,
            clip_len: self.clip_len,
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            scale: self.aug_scale,
            crop: Some(self.crop),
            flip: self.aug_flip,
            reverse: self.aug_reverse,
            color: self.aug_color,
            ..AugmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.weight_decay >= 0.0) || self.lr * self.weight_decay >= 1.0 {
            return bad("weight_decay must be non-negative with lr * weight_decay < 1");
        }
        if self.batch == 0 || self.iters == 0 || self.checkpoint_every == 0 {
            return bad("batch, iters and checkpoint_every must be positive");
        }
        if self.crop == 0 || self.crop % 16 != 0 {
            return bad("crop must be a positive multiple of 16");
        }
        if self.clip_len < 2 {
            return bad("T must be at least 2 (one annotated and one predicted frame)");
        }
        self.loss_weights().validate()?;
        self.model_config().validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_overrides_named_keys_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "lr = 0.001\nT = 3\nL_blocks = 2\ndataset_path = \"data\"\n").unwrap();
        let c = TrainConfig::load(&p, &TrainConfig::desk()).unwrap();
        assert_eq!(c.lr, 0.001);
        assert_eq!(c.clip_len, 3);
        assert_eq!(c.egmm_blocks, 2);
        assert_eq!(c.batch, 4);
        assert_eq!(c.dataset_path.as_deref(), Some(Path::new("data")));
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"learning_rate": 1}"#).unwrap();
        assert!(matches!(TrainConfig::load(&p, &TrainConfig::desk()), Err(Error::Config(_))));
        let c = TrainConfig {
            crop: 60,
            ..TrainConfig::desk()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn profiles() {
        assert_eq!(TrainConfig::profile("paper").unwrap().batch, 8);
        assert_eq!(TrainConfig::profile("desk").unwrap().iters, 5000);
        assert!(TrainConfig::profile("huge").is_err());
    }
}
