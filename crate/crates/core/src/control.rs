//! The control branch: noisy latent tokens concatenated with adapted
//! conditioning, a stack of lightweight blocks, and one zero-initialized
//! projection per controlled backbone block.
//!
//! Residuals are gated as `s · (M ⊙ r)` before the backbone adds them.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{patchify, BackboneConfig, TokenState};
use crate::nn::{Block, FactorizedPosition, Linear, TimeEmbed};
use crate::params::{linear_specs, ParamSet, ParamSpec};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlConfig {
    /// Number of controlled backbone blocks `L`.
    pub blocks: usize,
    pub branch_width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Inference-time residual scale `s`.
    pub residual_scale: f64,
    /// `false` replaces in-branch attention with a per-token linear map.
    pub spatial_mixing: bool,
    /// Layer-normalize encoder features before the adapter.
    pub normalize_features: bool,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            blocks: 16,
            branch_width: 256,
            heads: 4,
            mlp_ratio: 4,
            residual_scale: 0.8,
            spatial_mixing: true,
            normalize_features: false,
        }
    }
}

impl ControlConfig {
    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        crate::ensure!(
            self.blocks >= 1 && self.blocks <= backbone.num_blocks,
            "control.blocks = {} must lie in 1..={}",
            self.blocks,
            backbone.num_blocks
        );
        crate::ensure!(
            self.residual_scale >= 0.0,
            "control.scale must be non-negative, got {}",
            self.residual_scale
        );
        crate::ensure!(
            self.heads >= 1 && self.branch_width.is_multiple_of(self.heads),
            "branch width {} is not divisible by {} heads",
            self.branch_width,
            self.heads
        );
        Ok(())
    }
}

/// Binary validity mask over the token grid, `(T', 1, h_tok, w_tok)`.
#[derive(Debug, Clone)]
pub struct ControlMask {
    mask: Tensor,
}

impl ControlMask {
    pub fn new(mask: Tensor) -> Result<Self> {
        let (_, c, _, _) = mask.dims4()?;
        crate::ensure!(c == 1, "mask must have a single channel, got {c}");
        let values = mask.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        if let Some(v) = values.iter().find(|v| **v != 0.0 && **v != 1.0) {
            return Err(Error::contract(format!(
                "mask entries must be 0 or 1, found {v}"
            )));
        }
        Ok(Self { mask })
    }

    pub fn ones(grid: (usize, usize, usize), dtype: DType, device: &Device) -> Result<Self> {
        Ok(Self {
            mask: Tensor::ones((grid.0, 1, grid.1, grid.2), dtype, device)?,
        })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.mask
    }

    pub fn grid(&self) -> (usize, usize, usize) {
        let d = self.mask.dims();
        (d[0], d[2], d[3])
    }

    /// One column per token in raster order, `(N, 1)`.
    pub fn token_column(&self) -> Result<Tensor> {
        let (t, h, w) = self.grid();
        Ok(self.mask.reshape((t * h * w, 1))?)
    }
}

/// `s · (M ⊙ r)` for a `(N, width)` residual.
pub fn gate_residual(residual: &Tensor, mask: Option<&ControlMask>, scale: f64) -> Result<Tensor> {
    let r = match mask {
        Some(m) => {
            let col = m.token_column()?.to_dtype(residual.dtype())?;
            crate::ensure!(
                col.dims()[0] == residual.dims()[0],
                "mask covers {} tokens, residual has {}",
                col.dims()[0],
                residual.dims()[0]
            );
            residual.broadcast_mul(&col)?
        }
        None => residual.clone(),
    };
    Ok((r * scale)?)
}

/// `h + s · (M ⊙ r)`.
pub fn apply_residuals(
    h: &TokenState,
    residual: &TokenState,
    mask: &ControlMask,
    scale: f64,
) -> Result<TokenState> {
    crate::ensure!(
        h.grid == residual.grid && h.channels() == residual.channels(),
        "residual grid {:?}×{} does not match hidden state {:?}×{}",
        residual.grid,
        residual.channels(),
        h.grid,
        h.channels()
    );
    crate::ensure!(
        mask.grid() == h.grid,
        "mask grid {:?} does not match token grid {:?}",
        mask.grid(),
        h.grid
    );
    let gated = gate_residual(&residual.tokens, Some(mask), scale)?;
    TokenState::new((&h.tokens + gated)?, h.grid)
}

/// Replaces `cond` by zeros with probability `p`. Returns whether it dropped.
pub fn conditioning_dropout<R: Rng + ?Sized>(
    cond: &Tensor,
    p: f64,
    rng: &mut R,
) -> Result<(Tensor, bool)> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!(
            "dropout probability {p} is outside [0, 1]"
        )));
    }
    let u: f64 = rng.random();
    if u < p {
        Ok((cond.zeros_like()?, true))
    } else {
        Ok((cond.clone(), false))
    }
}

#[derive(Debug, Clone)]
pub struct ControlBranch {
    cfg: ControlConfig,
    patch: usize,
    positional: bool,
    input: Linear,
    pos: FactorizedPosition,
    time: TimeEmbed,
    blocks: Vec<Block>,
    zero: Vec<Linear>,
}

impl ControlBranch {
    pub fn param_specs(
        cfg: &ControlConfig,
        backbone: &BackboneConfig,
        cond_channels: usize,
    ) -> Vec<ParamSpec> {
        let p2 = backbone.patch * backbone.patch;
        let bw = cfg.branch_width;
        let mut s = linear_specs(
            "branch.in",
            (backbone.latent_channels + cond_channels) * p2,
            bw,
            false,
        );
        s.extend(FactorizedPosition::specs(
            "branch.pos",
            backbone.max_grid,
            bw,
        ));
        s.extend(TimeEmbed::specs("branch.time", backbone.freq_dim, bw));
        for l in 0..cfg.blocks {
            s.extend(Block::specs(
                &format!("branch.blocks.{l}"),
                bw,
                cfg.mlp_ratio,
                cfg.spatial_mixing,
            ));
            s.extend(linear_specs(
                &format!("branch.zero.{l}"),
                bw,
                backbone.width,
                true,
            ));
        }
        s
    }

    pub fn from_params(
        cfg: ControlConfig,
        backbone: &BackboneConfig,
        ps: &ParamSet,
    ) -> Result<Self> {
        cfg.validate(backbone)?;
        let blocks = (0..cfg.blocks)
            .map(|l| {
                Block::load(
                    ps,
                    &format!("branch.blocks.{l}"),
                    cfg.heads,
                    cfg.spatial_mixing,
                )
            })
            .collect::<Result<_>>()?;
        let zero = (0..cfg.blocks)
            .map(|l| Linear::load(ps, &format!("branch.zero.{l}")))
            .collect::<Result<_>>()?;
        Ok(Self {
            input: Linear::load(ps, "branch.in")?,
            pos: FactorizedPosition::load(ps, "branch.pos")?,
            time: TimeEmbed::load(ps, "branch.time", backbone.freq_dim)?,
            blocks,
            zero,
            patch: backbone.patch,
            positional: backbone.positional,
            cfg,
        })
    }

    pub fn config(&self) -> &ControlConfig {
        &self.cfg
    }

    /// Raw residuals `Z_l(h^c_l)`, one `(N_tok, backbone width)` tensor per
    /// controlled block.
    pub fn forward(&self, z_t: &Tensor, cond: &Tensor, t: f64) -> Result<Vec<Tensor>> {
        let (zt, _, zh, zw) = z_t.dims4()?;
        let (ct, _, ch, cw) = cond.dims4()?;
        if ct != zt {
            return Err(Error::contract(format!(
                "conditioning has {ct} frames along the time axis, latent has {zt}"
            )));
        }
        if ch != zh {
            return Err(Error::contract(format!(
                "conditioning height {ch} does not match latent height {zh}"
            )));
        }
        if cw != zw {
            return Err(Error::contract(format!(
                "conditioning width {cw} does not match latent width {zw}"
            )));
        }
        let x = Tensor::cat(&[z_t, &cond.to_dtype(z_t.dtype())?], 1)?;
        let tokens = patchify(&x, self.patch)?;
        let mut h = self.input.forward(&tokens.tokens)?;
        if self.positional {
            h = h.broadcast_add(&self.pos.forward(tokens.grid)?)?;
        }
        let c = self.time.forward(t, z_t.dtype(), z_t.device())?.silu()?;
        let mut out = Vec::with_capacity(self.blocks.len());
        for (block, zero) in self.blocks.iter().zip(&self.zero) {
            h = block.forward(&h, &c)?;
            out.push(zero.forward(&h)?);
        }
        Ok(out)
    }
}
