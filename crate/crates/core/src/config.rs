//! Flat key-value run configuration (TOML, no tables). One file drives
//! every subcommand; unknown keys are rejected so typos fail loudly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoder::{Dims, FeedFutureTiming, ModelConfig};
use crate::error::{Error, Result};
use crate::inference::DecodeSettings;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // -- model ------------------------------------------------------------
    /// Preset name; see `ModelConfig::PRESETS`.
    pub model: String,
    pub emb_dim: usize,
    pub enc_dim: usize,
    pub dec_dim: usize,
    /// Attention energy size; defaults to dec_dim.
    pub attn_dim: Option<usize>,
    pub readout_dim: usize,
    pub feed_future_timing: FeedFutureTiming,
    pub separate_future_init: bool,
    pub future_loss_weight: f64,
    pub past_loss_weight: f64,
    pub vocab_size: usize,

    // -- training ---------------------------------------------------------
    pub batch_size: usize,
    pub max_len: usize,
    pub lr0: f64,
    pub halve_on_plateau: bool,
    pub max_epochs: usize,
    pub shuffle_seed: u64,
    pub grad_clip_norm: f64,
    pub init_from: Option<PathBuf>,

    // -- paths ------------------------------------------------------------
    pub train_src: Option<PathBuf>,
    pub train_tgt: Option<PathBuf>,
    pub dev_src: Option<PathBuf>,
    pub dev_tgt: Option<PathBuf>,
    pub src_vocab: Option<PathBuf>,
    pub tgt_vocab: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub metrics_log: PathBuf,

    // -- inference --------------------------------------------------------
    pub beam: usize,
    pub max_out_len: usize,
    pub length_normalize: bool,
    pub rerank_nll_weight: f64,
    pub rerank_future_weight: f64,
    pub rerank_past_weight: f64,

    pub seed: u64,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: "baseline".into(),
            emb_dim: 32,
            enc_dim: 64,
            dec_dim: 64,
            attn_dim: None,
            readout_dim: 64,
            feed_future_timing: FeedFutureTiming::Previous,
            separate_future_init: false,
            future_loss_weight: 1.0,
            past_loss_weight: 1.0,
            vocab_size: 64,
            batch_size: 16,
            max_len: 50,
            lr0: 5e-4,
            halve_on_plateau: true,
            max_epochs: 30,
            shuffle_seed: 1,
            grad_clip_norm: 1.0,
            init_from: None,
            train_src: None,
            train_tgt: None,
            dev_src: None,
            dev_tgt: None,
            src_vocab: None,
            tgt_vocab: None,
            checkpoint: PathBuf::from("model.ckpt.json"),
            metrics_log: PathBuf::from("metrics.tsv"),
            beam: 12,
            max_out_len: 80,
            length_normalize: true,
            rerank_nll_weight: 1.0,
            rerank_future_weight: 1.0,
            rerank_past_weight: 1.0,
            seed: 1,
            threads: 1,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| Error::Config(format!("cannot parse config {}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self)
            .map_err(|e| Error::Config(format!("cannot serialize config: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn dims(&self) -> Dims {
        Dims {
            emb: self.emb_dim,
            enc: self.enc_dim,
            dec: self.dec_dim,
            attn: self.attn_dim.unwrap_or(self.dec_dim),
            readout: self.readout_dim,
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::preset(&self.model, self.dims())?;
        cfg.feed_future_timing = self.feed_future_timing;
        cfg.separate_future_init = self.separate_future_init;
        cfg.future_loss_weight = self.future_loss_weight;
        cfg.past_loss_weight = self.past_loss_weight;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            max_len: self.max_len,
            lr0: self.lr0,
            halve_on_plateau: self.halve_on_plateau,
            max_epochs: self.max_epochs,
            shuffle_seed: self.shuffle_seed,
            grad_clip_norm: self.grad_clip_norm,
            init_from: self.init_from.clone(),
        }
    }

    pub fn decode_settings(&self) -> DecodeSettings {
        DecodeSettings {
            beam: self.beam,
            max_out_len: self.max_out_len,
            length_normalize: self.length_normalize,
        }
    }

    pub fn rerank_weights(&self) -> (f64, f64, f64) {
        (
            self.rerank_nll_weight,
            self.rerank_future_weight,
            self.rerank_past_weight,
        )
    }

    pub fn require<'a>(&self, field: &str, value: &'a Option<PathBuf>) -> Result<&'a Path> {
        let path = value
            .as_deref()
            .ok_or_else(|| Error::Data(format!("config key `{field}` is required")))?;
        if !path.exists() {
            return Err(Error::Data(format!(
                "`{field}` path does not exist: {}",
                path.display()
            )));
        }
        Ok(path)
    }
}

/// A commented config template. Desk-scale defaults are active; the
/// full-scale values from the original recipe sit next to them as comments.
pub fn template(out_dir: &Path) -> String {
    let d = out_dir.display();
    format!(
        r#"# Run configuration (flat key-value TOML).
# Desk-scale defaults are active; full-scale reference values are commented.

# -- model ---------------------------------------------------------------
model = "baseline"            # one of: baseline, +frnn-gru, +frnn-gru-o,
                              # +frnn-gru-i, +frnn+loss, +prnn, +prnn+loss,
                              # +frnn+prnn, +frnn+prnn+loss
emb_dim = 32                  # full scale: 512
enc_dim = 64                  # full scale: 1024
dec_dim = 64                  # full scale: 1024
readout_dim = 64
# attn_dim = 64               # defaults to dec_dim
feed_future_timing = "previous"
separate_future_init = false
future_loss_weight = 1.0
past_loss_weight = 1.0
vocab_size = 64               # full scale: 30000

# -- training ------------------------------------------------------------
batch_size = 16               # full scale: 80
max_len = 50                  # full scale: 50
lr0 = 0.0005                  # full scale: 0.0005
halve_on_plateau = true
max_epochs = 30
shuffle_seed = 1
grad_clip_norm = 1.0
# init_from = "baseline.ckpt.json"   # two-pass training

# -- paths ---------------------------------------------------------------
train_src = "{d}/train.src"
train_tgt = "{d}/train.tgt"
dev_src = "{d}/dev.src"
dev_tgt = "{d}/dev.tgt"
src_vocab = "{d}/vocab.src"
tgt_vocab = "{d}/vocab.tgt"
checkpoint = "{d}/model.ckpt.json"
metrics_log = "{d}/metrics.tsv"

# -- inference -----------------------------------------------------------
beam = 12                     # full scale: 12
max_out_len = 80
length_normalize = true
rerank_nll_weight = 1.0
rerank_future_weight = 1.0
rerank_past_weight = 1.0

seed = 1
threads = 1
"#
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_roundtrip() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.lr0, cfg.lr0);
        assert_eq!(back.model, cfg.model);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<RunConfig>("modell = \"baseline\"").unwrap_err();
        assert!(err.to_string().contains("modell"));
    }

    #[test]
    fn template_parses_with_paths() {
        let text = template(Path::new("/tmp/x"));
        let cfg: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg.emb_dim, 32);
        assert_eq!(cfg.beam, 12);
        assert!(cfg.train_src.unwrap().ends_with("train.src"));
    }

    #[test]
    fn preset_and_dims_flow_into_model_config() {
        let mut cfg = RunConfig::default();
        cfg.model = "+frnn+prnn+loss".into();
        cfg.attn_dim = Some(48);
        let mc = cfg.model_config().unwrap();
        assert!(mc.use_future && mc.use_past && mc.use_losses);
        assert_eq!(mc.dims.attn, 48);

        cfg.model = "nonsense".into();
        assert!(matches!(cfg.model_config(), Err(Error::Config(_))));
    }
}
