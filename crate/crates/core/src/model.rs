//! The full conditioned denoiser: frozen backbone, temporal adapter and
//! control branch wired together.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterConfig, TemporalAdapter};
use crate::backbone::{BackboneConfig, ToyBackbone};
use crate::control::{gate_residual, ControlBranch, ControlConfig, ControlMask};
use crate::diffusion::Denoiser;
use crate::nn::layer_norm;
use crate::params::{ParamSet, ParamSpec};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub adapter: AdapterConfig,
    pub control: ControlConfig,
}

impl ModelConfig {
    /// Desk-scale configuration used by tests and the CLI defaults.
    pub fn toy() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            adapter: AdapterConfig {
                feature_dim: 32,
                hidden_channels: 32,
                out_channels: 32,
                ..Default::default()
            },
            control: ControlConfig {
                blocks: 4,
                branch_width: 64,
                ..Default::default()
            },
        }
    }

    /// Sizes of the full-scale system this toy mirrors. Documentation only:
    /// this is far too large to instantiate on a laptop.
    pub fn full_scale_reference() -> Self {
        Self {
            backbone: BackboneConfig {
                num_blocks: 42,
                width: 3072,
                patch: 2,
                heads: 48,
                text_dim: 4096,
                latent_channels: 16,
                mlp_ratio: 4,
                freq_dim: 256,
                max_grid: (13, 30, 45),
                positional: true,
            },
            adapter: AdapterConfig::default(),
            control: ControlConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.control.validate(&self.backbone)?;
        let [a, b] = self.adapter.stage_specs();
        a.validate()?;
        b.validate()?;
        Ok(())
    }

    pub fn trainable_specs(&self) -> Vec<ParamSpec> {
        let mut s = TemporalAdapter::param_specs(&self.adapter);
        s.extend(ControlBranch::param_specs(
            &self.control,
            &self.backbone,
            self.adapter.out_channels,
        ));
        s
    }
}

/// Conditioning for one clip.
#[derive(Debug, Clone)]
pub struct ControlInput {
    /// Raw per-frame features `(T, D, h, w)`; `None` runs the backbone alone.
    pub features: Option<Tensor>,
    pub text: Tensor,
    /// First latent frame `(1, C, h, w)` for image-to-video conditioning.
    pub first_frame: Option<Tensor>,
    pub mask: Option<ControlMask>,
    pub scale: f64,
    /// Classifier-free guidance weight; 1 disables guidance.
    pub guidance: f64,
}

impl ControlInput {
    pub fn new(features: Option<Tensor>, text: Tensor) -> Self {
        Self {
            features,
            text,
            first_frame: None,
            mask: None,
            scale: 1.0,
            guidance: 1.0,
        }
    }
}

/// Not `Clone`: trainable parameters are shared `Var`s, so a shallow copy would
/// alias the weights being optimized.
#[derive(Debug)]
pub struct ControlledModel {
    cfg: ModelConfig,
    backbone: ToyBackbone,
    adapter: TemporalAdapter,
    branch: ControlBranch,
    trainable: ParamSet,
}

impl ControlledModel {
    /// Seeded initialization: the backbone is frozen, the branch projections start at zero.
    pub fn init(cfg: ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let backbone = ToyBackbone::init(cfg.backbone.clone(), seed, dtype, device)?.freeze()?;
        let trainable = ParamSet::init(
            &cfg.trainable_specs(),
            seed.wrapping_add(1),
            dtype,
            device,
            true,
        )?;
        Self::from_parts(cfg, backbone, trainable)
    }

    pub fn from_parts(
        cfg: ModelConfig,
        backbone: ToyBackbone,
        trainable: ParamSet,
    ) -> Result<Self> {
        cfg.validate()?;
        let backbone = if backbone.is_frozen() {
            backbone
        } else {
            backbone.freeze()?
        };
        let adapter = TemporalAdapter::from_params(cfg.adapter.clone(), &trainable)?;
        let branch = ControlBranch::from_params(cfg.control.clone(), &cfg.backbone, &trainable)?;
        Ok(Self {
            cfg,
            backbone,
            adapter,
            branch,
            trainable,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn backbone(&self) -> &ToyBackbone {
        &self.backbone
    }

    pub fn adapter(&self) -> &TemporalAdapter {
        &self.adapter
    }

    pub fn branch(&self) -> &ControlBranch {
        &self.branch
    }

    pub fn trainable(&self) -> &ParamSet {
        &self.trainable
    }

    pub fn dtype(&self) -> DType {
        self.backbone.dtype()
    }

    fn prepare_features(&self, features: &Tensor) -> Result<Tensor> {
        let f = features.to_dtype(self.dtype())?;
        if !self.cfg.control.normalize_features {
            return Ok(f);
        }
        let per_token = f.permute((0, 2, 3, 1))?;
        Ok(layer_norm(&per_token)?
            .permute((0, 3, 1, 2))?
            .contiguous()?)
    }

    /// Unscaled residuals `Z_l(h^c_l)` for `l = 1..L`.
    pub fn residuals(&self, z_t: &Tensor, t: f64, features: &Tensor) -> Result<Vec<Tensor>> {
        let adapted = self.adapter.adapt(&self.prepare_features(features)?)?;
        self.branch.forward(z_t, &adapted, t)
    }

    fn predict_single(
        &self,
        z_t: &Tensor,
        t: f64,
        input: &ControlInput,
        features: Option<&Tensor>,
    ) -> Result<Tensor> {
        let gated = match features {
            Some(f) if input.scale != 0.0 => {
                let raw = self.residuals(z_t, t, f)?;
                Some(
                    raw.iter()
                        .map(|r| gate_residual(r, input.mask.as_ref(), input.scale).map(Some))
                        .collect::<Result<Vec<_>>>()?,
                )
            }
            _ => None,
        };
        self.backbone.denoise(
            z_t,
            t,
            &input.text,
            input.first_frame.as_ref(),
            gated.as_deref(),
        )
    }

    pub fn predict(&self, z_t: &Tensor, t: f64, input: Option<&ControlInput>) -> Result<Tensor> {
        let Some(input) = input else {
            let text = Tensor::zeros(self.cfg.backbone.text_dim, z_t.dtype(), z_t.device())?;
            return self.backbone.denoise(z_t, t, &text, None, None);
        };
        let cond = self.predict_single(z_t, t, input, input.features.as_ref())?;
        if input.guidance == 1.0 || input.features.is_none() {
            return Ok(cond);
        }
        let zeros = input
            .features
            .as_ref()
            .map(|f| f.zeros_like())
            .transpose()?;
        let uncond = self.predict_single(z_t, t, input, zeros.as_ref())?;
        Ok((&uncond + ((cond - &uncond)? * input.guidance)?)?)
    }
}

impl Denoiser for ControlledModel {
    type Cond = ControlInput;

    fn predict_v(&self, z_t: &Tensor, t: f64, cond: Option<&ControlInput>) -> Result<Tensor> {
        self.predict(z_t, t, cond)
    }
}
