//! Flat `key = value` run configuration. Every field of the model, training,
//! pipeline and inference settings has one key, so a run is fully described
//! by its file.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapter::PastPadding;
use crate::features::EncoderSpec;
use crate::model::ModelConfig;
use crate::train::TrainConfig;
use crate::{Error, Result};

/// Clip geometry and the fixed toy encoder / latent stub.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub encoder: EncoderSpec,
    pub encoder_seed: u64,
    pub vae_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            frames: 49,
            height: 32,
            width: 48,
            encoder: EncoderSpec::toy(),
            encoder_seed: 17,
            vae_seed: 29,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferConfig {
    pub steps: usize,
    pub scale: f64,
    pub guidance: f64,
    pub drop_first_frame: bool,
    pub seed: u64,
    pub prompt: String,
    pub style_keyword: String,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            scale: 0.8,
            guidance: 1.0,
            drop_first_frame: false,
            seed: 0,
            prompt: "a scene".into(),
            style_keyword: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pipeline: PipelineConfig,
    pub infer: InferConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::toy();
        let mut pipeline = PipelineConfig::default();
        pipeline.encoder.feature_dim = model.adapter.feature_dim;
        Self {
            model,
            train: TrainConfig::default(),
            pipeline,
            infer: InferConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::contract(format!("bad value `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::contract(format!("bad boolean `{v}` for `{key}`"))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (m, t, p, i) = (
            &mut self.model,
            &mut self.train,
            &mut self.pipeline,
            &mut self.infer,
        );
        match key {
            "backbone.num_blocks" => m.backbone.num_blocks = parse(key, v)?,
            "backbone.width" => m.backbone.width = parse(key, v)?,
            "backbone.patch" => m.backbone.patch = parse(key, v)?,
            "backbone.heads" => m.backbone.heads = parse(key, v)?,
            "backbone.text_dim" => m.backbone.text_dim = parse(key, v)?,
            "backbone.latent_channels" => m.backbone.latent_channels = parse(key, v)?,
            "backbone.mlp_ratio" => m.backbone.mlp_ratio = parse(key, v)?,
            "backbone.freq_dim" => m.backbone.freq_dim = parse(key, v)?,
            "backbone.positional" => m.backbone.positional = parse_bool(key, v)?,
            "adapter.feature_dim" => m.adapter.feature_dim = parse(key, v)?,
            "adapter.hidden_channels" => m.adapter.hidden_channels = parse(key, v)?,
            "adapter.out_channels" => m.adapter.out_channels = parse(key, v)?,
            "adapter.kernel_t" => m.adapter.kernel_t = parse(key, v)?,
            "adapter.spatial_kernel" => m.adapter.spatial_kernel = parse(key, v)?,
            "adapter.norm_groups" => m.adapter.norm_groups = parse(key, v)?,
            "adapter.padding" => {
                m.adapter.padding = match v {
                    "replicate" => PastPadding::Replicate,
                    "zeros" => PastPadding::Zeros,
                    _ => {
                        return Err(Error::contract(format!(
                            "bad padding `{v}` (replicate | zeros)"
                        )))
                    }
                }
            }
            "control.blocks" => m.control.blocks = parse(key, v)?,
            "control.branch_width" => m.control.branch_width = parse(key, v)?,
            "control.heads" => m.control.heads = parse(key, v)?,
            "control.mlp_ratio" => m.control.mlp_ratio = parse(key, v)?,
            "control.scale" => m.control.residual_scale = parse(key, v)?,
            "control.spatial_mixing" => m.control.spatial_mixing = parse_bool(key, v)?,
            "control.normalize_features" => m.control.normalize_features = parse_bool(key, v)?,
            "train.lr_peak" => t.lr_peak = parse(key, v)?,
            "train.beta1" => t.beta1 = parse(key, v)?,
            "train.beta2" => t.beta2 = parse(key, v)?,
            "train.eps" => t.eps = parse(key, v)?,
            "train.weight_decay" => t.weight_decay = parse(key, v)?,
            "train.warmup_steps" => t.warmup_steps = parse(key, v)?,
            "train.total_steps" => t.total_steps = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.grad_clip" => t.grad_clip = parse(key, v)?,
            "train.cond_dropout" => t.cond_dropout = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "pipeline.frames" => p.frames = parse(key, v)?,
            "pipeline.height" => p.height = parse(key, v)?,
            "pipeline.width" => p.width = parse(key, v)?,
            "pipeline.patch" => p.encoder.patch = parse(key, v)?,
            "pipeline.upscale" => p.encoder.upscale = parse(key, v)?,
            "pipeline.encoder_seed" => p.encoder_seed = parse(key, v)?,
            "pipeline.vae_seed" => p.vae_seed = parse(key, v)?,
            "infer.steps" => i.steps = parse(key, v)?,
            "infer.scale" => i.scale = parse(key, v)?,
            "infer.cfg" => i.guidance = parse(key, v)?,
            "infer.drop_first_frame" => i.drop_first_frame = parse_bool(key, v)?,
            "infer.seed" => i.seed = parse(key, v)?,
            "infer.prompt" => i.prompt = v.to_string(),
            "infer.style_keyword" => i.style_keyword = v.to_string(),
            _ => return Err(Error::contract(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Keeps derived sizes consistent after edits: encoder width follows the
    /// adapter input.
    fn sync(&mut self) {
        self.pipeline.encoder.feature_dim = self.model.adapter.feature_dim;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.pipeline.encoder.validate()?;
        crate::ensure!(
            self.model
                .adapter
                .output_frames(self.pipeline.frames)
                .is_ok(),
            "pipeline.frames = {} must satisfy T ≡ 1 (mod 4)",
            self.pipeline.frames
        );
        crate::ensure!(self.infer.steps >= 1, "infer.steps must be ≥ 1");
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::contract(format!("line {}: expected `key = value`", n + 1))
            })?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::contract(format!("line {}: {e}", n + 1)))?;
        }
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    pub fn entries(&self) -> BTreeMap<&'static str, String> {
        let (m, t, p, i) = (&self.model, &self.train, &self.pipeline, &self.infer);
        let pad = match m.adapter.padding {
            PastPadding::Replicate => "replicate",
            PastPadding::Zeros => "zeros",
        };
        BTreeMap::from([
            ("backbone.num_blocks", m.backbone.num_blocks.to_string()),
            ("backbone.width", m.backbone.width.to_string()),
            ("backbone.patch", m.backbone.patch.to_string()),
            ("backbone.heads", m.backbone.heads.to_string()),
            ("backbone.text_dim", m.backbone.text_dim.to_string()),
            (
                "backbone.latent_channels",
                m.backbone.latent_channels.to_string(),
            ),
            ("backbone.mlp_ratio", m.backbone.mlp_ratio.to_string()),
            ("backbone.freq_dim", m.backbone.freq_dim.to_string()),
            ("backbone.positional", m.backbone.positional.to_string()),
            ("adapter.feature_dim", m.adapter.feature_dim.to_string()),
            (
                "adapter.hidden_channels",
                m.adapter.hidden_channels.to_string(),
            ),
            ("adapter.out_channels", m.adapter.out_channels.to_string()),
            ("adapter.kernel_t", m.adapter.kernel_t.to_string()),
            (
                "adapter.spatial_kernel",
                m.adapter.spatial_kernel.to_string(),
            ),
            ("adapter.norm_groups", m.adapter.norm_groups.to_string()),
            ("adapter.padding", pad.to_string()),
            ("control.blocks", m.control.blocks.to_string()),
            ("control.branch_width", m.control.branch_width.to_string()),
            ("control.heads", m.control.heads.to_string()),
            ("control.mlp_ratio", m.control.mlp_ratio.to_string()),
            ("control.scale", m.control.residual_scale.to_string()),
            (
                "control.spatial_mixing",
                m.control.spatial_mixing.to_string(),
            ),
            (
                "control.normalize_features",
                m.control.normalize_features.to_string(),
            ),
            ("train.lr_peak", t.lr_peak.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.eps", t.eps.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.warmup_steps", t.warmup_steps.to_string()),
            ("train.total_steps", t.total_steps.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.grad_clip", t.grad_clip.to_string()),
            ("train.cond_dropout", t.cond_dropout.to_string()),
            ("train.seed", t.seed.to_string()),
            ("pipeline.frames", p.frames.to_string()),
            ("pipeline.height", p.height.to_string()),
            ("pipeline.width", p.width.to_string()),
            ("pipeline.patch", p.encoder.patch.to_string()),
            ("pipeline.upscale", p.encoder.upscale.to_string()),
            ("pipeline.encoder_seed", p.encoder_seed.to_string()),
            ("pipeline.vae_seed", p.vae_seed.to_string()),
            ("infer.steps", i.steps.to_string()),
            ("infer.scale", i.scale.to_string()),
            ("infer.cfg", i.guidance.to_string()),
            ("infer.drop_first_frame", i.drop_first_frame.to_string()),
            ("infer.seed", i.seed.to_string()),
            ("infer.prompt", i.prompt.clone()),
            ("infer.style_keyword", i.style_keyword.clone()),
        ])
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.entries() {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}
