//! Shared run configuration: one TOML file with nested sections, strict
//! unknown-key rejection, documented defaults for every key, and a content
//! hash that is stable under key reordering (the hash covers the parsed,
//! canonically re-serialized form).

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fusion::FusionMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; every module derives a named substream from it.
    pub seed: u64,
    pub fusion: FusionConfig,
    pub model: ModelConfig,
    pub retrieval: RetrievalConfig,
    pub weakgen: WeakGenConfig,
    pub evaluation: EvalConfig,
    pub paths: PathsConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// Feature alignment: `none`, `concat`, or `concat+CA`.
    pub mode: FusionMode,
    /// Shared model width (even, >= 2).
    pub d_model: usize,
    /// Neighbors fetched per query.
    pub k_retrieve: usize,
    /// Caption token rows for the multi-modal path.
    pub caption_tokens: usize,
    /// Caption embedding channels.
    pub caption_dim: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            mode: FusionMode::ConcatCa,
            d_model: 64,
            k_retrieve: 10,
            caption_tokens: 16,
            caption_dim: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of decoded proposals (anchors).
    pub n_proposals: usize,
    pub decoder_layers: usize,
    /// Attention head count; this implementation is single-head.
    pub n_heads: usize,
    /// Square input resolution fed to the query encoder (multiple of 8).
    pub input_size: u32,
    pub learning_rate: f64,
    /// Reduced rate for the convolutional backbone.
    pub backbone_learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Epochs before pseudo-label refinement starts on weak data.
    pub stage1_epochs: usize,
    pub batch_size: usize,
    /// Matching-cost weight on box L1.
    pub l1_weight: f64,
    /// Matching-cost weight on (1 - IoU).
    pub iou_weight: f64,
    /// Matching-cost weight on |score - target|.
    pub score_weight: f64,
    /// Weight pulling unmatched proposal scores toward zero.
    pub unmatched_score_weight: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_proposals: 90,
            decoder_layers: 2,
            n_heads: 1,
            input_size: 64,
            learning_rate: 1e-4,
            backbone_learning_rate: 1e-5,
            weight_decay: 1e-4,
            epochs: 500,
            stage1_epochs: 100,
            batch_size: 8,
            l1_weight: 5.0,
            iou_weight: 2.0,
            score_weight: 1.0,
            unmatched_score_weight: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    /// Encoder spec: `line-hist:GxG,B` or `file:PATH`.
    pub encoder: String,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            encoder: "line-hist:8x8,8".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeakGenConfig {
    /// Refinement rounds run after stage 1 during training.
    pub rounds: usize,
    /// Pseudo labels kept per image (k).
    pub labels_per_image: usize,
    /// Pairwise IoU ceiling for label diversity.
    pub diversity_iou: f64,
    /// Canvas side bounds in pixels.
    pub canvas_min: u32,
    pub canvas_max: u32,
    /// Embedded-region area fraction range.
    pub area_min: f64,
    pub area_max: f64,
    /// Expanded canvases generated per source image.
    pub canvases_per_source: usize,
    /// Random training crops drawn per pair per stage-1 epoch.
    pub crops_per_pair: usize,
}

impl Default for WeakGenConfig {
    fn default() -> Self {
        WeakGenConfig {
            rounds: 1,
            labels_per_image: 8,
            diversity_iou: 0.8,
            canvas_min: 256,
            canvas_max: 384,
            area_min: 0.4,
            area_max: 0.8,
            canvases_per_source: 1,
            crops_per_pair: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// IoU threshold for crop equivalence (closed comparison, >= eps).
    pub eps: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { eps: 0.85 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Embedding cache directory; the `PROCROP_CACHE` environment variable
    /// overrides it. Unset disables caching.
    pub cache_dir: Option<String>,
}

impl RunConfig {
    /// Parse a TOML file, fill defaults, and validate. An empty file yields
    /// the full default configuration.
    pub fn parse(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)
            .map_err(|e| Error::Config(format!("failed to parse config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let f = &self.fusion;
        if f.d_model < 2 || f.d_model % 2 != 0 {
            return bad(format!(
                "fusion.d_model must be an even number >= 2, got {}",
                f.d_model
            ));
        }
        if f.mode != FusionMode::None && f.k_retrieve == 0 {
            return bad(format!(
                "fusion.k_retrieve must be >= 1 when fusion.mode is `{}`",
                f.mode
            ));
        }
        if f.caption_tokens == 0 || f.caption_dim == 0 {
            return bad("fusion.caption_tokens and fusion.caption_dim must be >= 1".into());
        }
        let m = &self.model;
        if m.n_proposals == 0 {
            return bad("model.n_proposals must be >= 1".into());
        }
        if m.n_heads != 1 {
            return bad(format!(
                "model.n_heads must be 1 (single-head attention), got {}",
                m.n_heads
            ));
        }
        if m.decoder_layers == 0 {
            return bad("model.decoder_layers must be >= 1".into());
        }
        if m.input_size < 16 || m.input_size % 8 != 0 {
            return bad(format!(
                "model.input_size must be a multiple of 8 and >= 16, got {}",
                m.input_size
            ));
        }
        if m.stage1_epochs > m.epochs {
            return bad(format!(
                "model.stage1_epochs ({}) must not exceed model.epochs ({})",
                m.stage1_epochs, m.epochs
            ));
        }
        if m.batch_size == 0 {
            return bad("model.batch_size must be >= 1".into());
        }
        for (key, v) in [
            ("model.learning_rate", m.learning_rate),
            ("model.backbone_learning_rate", m.backbone_learning_rate),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{key} must be a positive finite number, got {v}"));
            }
        }
        for (key, v) in [
            ("model.weight_decay", m.weight_decay),
            ("model.l1_weight", m.l1_weight),
            ("model.iou_weight", m.iou_weight),
            ("model.score_weight", m.score_weight),
            ("model.unmatched_score_weight", m.unmatched_score_weight),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{key} must be a non-negative finite number, got {v}"));
            }
        }
        self.retrieval
            .encoder
            .parse::<crate::embed::EncoderSpec>()
            .map_err(|e| Error::Config(format!("retrieval.encoder: {e}")))?;
        let w = &self.weakgen;
        if w.labels_per_image == 0 {
            return bad("weakgen.labels_per_image must be >= 1".into());
        }
        if !(w.diversity_iou > 0.0 && w.diversity_iou < 1.0) {
            return bad(format!(
                "weakgen.diversity_iou must be in (0, 1), got {}",
                w.diversity_iou
            ));
        }
        if w.canvas_min < 32 || w.canvas_max < w.canvas_min {
            return bad(format!(
                "weakgen canvas bounds must satisfy 32 <= canvas_min <= canvas_max, got {}..{}",
                w.canvas_min, w.canvas_max
            ));
        }
        if !(w.area_min > 0.0 && w.area_min <= w.area_max && w.area_max <= 1.0) {
            return bad(format!(
                "weakgen area fractions must satisfy 0 < area_min <= area_max <= 1, got {}..{}",
                w.area_min, w.area_max
            ));
        }
        if w.canvases_per_source == 0 || w.crops_per_pair == 0 {
            return bad("weakgen.canvases_per_source and weakgen.crops_per_pair must be >= 1".into());
        }
        let e = &self.evaluation;
        if !(e.eps > 0.0 && e.eps <= 1.0) {
            return bad(format!("evaluation.eps must be in (0, 1], got {}", e.eps));
        }
        Ok(())
    }

    /// Canonical serialization: struct field order, independent of the order
    /// keys appeared in the source file.
    pub fn to_canonical_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical form.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_canonical_toml().as_bytes());
        crate::embed::hex_string(&h.finalize())
    }

    /// Named deterministic substream: every module draws its randomness from
    /// `(seed, label)` so pipelines stay reproducible under parallelism.
    pub fn substream(&self, label: &str) -> rand_chacha::ChaCha8Rng {
        derive_rng(self.seed, label)
    }
}

/// Derive a ChaCha stream from `(seed, label)` via SHA-256.
pub fn derive_rng(seed: u64, label: &str) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    rand_chacha::ChaCha8Rng::from_seed(key)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_yields_paper_defaults() {
        let cfg = RunConfig::parse_str("").unwrap();
        assert_eq!(cfg.fusion.k_retrieve, 10);
        assert_eq!(cfg.model.n_proposals, 90);
        assert_eq!(cfg.evaluation.eps, 0.85);
        assert_eq!(cfg.model.epochs, 500);
        assert_eq!(cfg.model.stage1_epochs, 100);
        assert_eq!(cfg.weakgen.labels_per_image, 8);
        assert_eq!(cfg.fusion.mode, FusionMode::ConcatCa);
    }

    #[test]
    fn bad_fusion_mode_names_allowed_set() {
        let err = RunConfig::parse_str("[fusion]\nmode = \"banana\"\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("banana") || msg.contains("unknown variant"), "{msg}");
        assert!(msg.contains("none") && msg.contains("concat"), "{msg}");
    }

    #[test]
    fn unknown_key_rejected_by_name() {
        let err = RunConfig::parse_str("[fusion]\nheads = 4\n").unwrap_err();
        assert!(err.to_string().contains("heads"), "{err}");
        let err = RunConfig::parse_str("frobnicate = 1\n").unwrap_err();
        assert!(err.to_string().contains("frobnicate"), "{err}");
    }

    #[test]
    fn roundtrip_parse_serialize_parse() {
        let cfg = RunConfig::parse_str("seed = 7\n[fusion]\nmode = \"concat\"\nd_model = 32\n").unwrap();
        let text = cfg.to_canonical_toml();
        let again = RunConfig::parse_str(&text).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn hash_stable_under_key_reordering() {
        let a = RunConfig::parse_str("[model]\nepochs = 9\nbatch_size = 2\nstage1_epochs = 4\n").unwrap();
        let b = RunConfig::parse_str("[model]\nstage1_epochs = 4\nbatch_size = 2\nepochs = 9\n").unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig::parse_str("[model]\nepochs = 10\nbatch_size = 2\nstage1_epochs = 4\n").unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn out_of_range_values_name_the_key() {
        for (toml, key) in [
            ("[evaluation]\neps = 1.5\n", "evaluation.eps"),
            ("[model]\nn_heads = 2\n", "model.n_heads"),
            ("[model]\ninput_size = 20\n", "model.input_size"),
            ("[weakgen]\ndiversity_iou = 1.0\n", "weakgen.diversity_iou"),
            ("[fusion]\nd_model = 7\n", "fusion.d_model"),
            (
                "[model]\nepochs = 3\nstage1_epochs = 5\n",
                "model.stage1_epochs",
            ),
        ] {
            let err = RunConfig::parse_str(toml).unwrap_err();
            assert!(err.to_string().contains(key), "{toml} -> {err}");
        }
    }

    #[test]
    fn substreams_differ_by_label_and_agree_by_seed() {
        use rand::RngCore;
        let cfg = RunConfig::parse_str("seed = 5\n").unwrap();
        let mut a = cfg.substream("weakgen");
        let mut b = cfg.substream("model");
        assert_ne!(a.next_u64(), b.next_u64());
        let mut c = cfg.substream("weakgen");
        let mut d = cfg.substream("weakgen");
        assert_eq!(c.next_u64(), d.next_u64());
    }
}
