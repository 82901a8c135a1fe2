//! Toy video diffusion transformer standing in for the frozen base model.
//!
//! Latents are cut into `patch × patch` tokens over every latent frame, the
//! first latent frame is channel-concatenated (with a frame indicator) for
//! image-to-video conditioning, and timestep plus text enter each block as an
//! adaptive layer-norm shift. Control residuals are added to the hidden
//! state after block `l`.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::nn::{layer_norm, Block, FactorizedPosition, Linear, TimeEmbed};
use crate::params::{linear_specs, ParamSet, ParamSpec};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub num_blocks: usize,
    pub width: usize,
    pub patch: usize,
    pub heads: usize,
    pub text_dim: usize,
    pub latent_channels: usize,
    pub mlp_ratio: usize,
    pub freq_dim: usize,
    /// Largest `(t, h, w)` token grid the position tables cover.
    pub max_grid: (usize, usize, usize),
    /// Toy-mode switch; without positions the model is equivariant to token permutations.
    pub positional: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            num_blocks: 8,
            width: 64,
            patch: 2,
            heads: 4,
            text_dim: 16,
            latent_channels: 4,
            mlp_ratio: 4,
            freq_dim: 32,
            max_grid: (16, 32, 48),
            positional: true,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        crate::ensure!(self.num_blocks >= 1, "backbone needs at least one block");
        crate::ensure!(self.patch >= 1, "patch must be ≥ 1");
        crate::ensure!(
            self.heads >= 1 && self.width.is_multiple_of(self.heads),
            "width {} is not divisible by {} heads",
            self.width,
            self.heads
        );
        crate::ensure!(self.freq_dim.is_multiple_of(2), "freq_dim must be even");
        Ok(())
    }

    /// Token grid for a latent of the given shape, checking divisibility.
    pub fn token_grid(
        &self,
        latent: (usize, usize, usize, usize),
    ) -> Result<(usize, usize, usize)> {
        let (t, _, h, w) = latent;
        crate::ensure!(
            h % self.patch == 0,
            "latent height {h} is not divisible by patch {}",
            self.patch
        );
        crate::ensure!(
            w % self.patch == 0,
            "latent width {w} is not divisible by patch {}",
            self.patch
        );
        Ok((t, h / self.patch, w / self.patch))
    }

    fn input_channels(&self) -> usize {
        2 * self.latent_channels + 1
    }
}

/// Tokens with their `(T', h_tok, w_tok)` factorization.
#[derive(Debug, Clone)]
pub struct TokenState {
    pub tokens: Tensor,
    pub grid: (usize, usize, usize),
}

impl TokenState {
    pub fn new(tokens: Tensor, grid: (usize, usize, usize)) -> Result<Self> {
        let (n, _) = tokens.dims2()?;
        crate::ensure!(
            n == grid.0 * grid.1 * grid.2,
            "{n} tokens do not factor as grid {grid:?}"
        );
        Ok(Self { tokens, grid })
    }

    pub fn len(&self) -> usize {
        self.grid.0 * self.grid.1 * self.grid.2
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.tokens.dims()[1]
    }
}

/// `(T, C, H, W)` → tokens of size `C·p²` in `(t, h, w)` raster order.
pub fn patchify(z: &Tensor, patch: usize) -> Result<TokenState> {
    let (t, c, h, w) = z.dims4()?;
    crate::ensure!(
        h % patch == 0,
        "height {h} is not divisible by patch {patch}"
    );
    crate::ensure!(
        w % patch == 0,
        "width {w} is not divisible by patch {patch}"
    );
    let (ht, wt) = (h / patch, w / patch);
    let tokens = z
        .reshape((t * c, ht, patch, wt, patch))?
        .permute((0, 1, 3, 2, 4))?
        .reshape((t, c, ht * wt, patch * patch))?
        .permute((0, 2, 1, 3))?
        .reshape((t * ht * wt, c * patch * patch))?;
    TokenState::new(tokens, (t, ht, wt))
}

pub fn unpatchify(tok: &TokenState, patch: usize) -> Result<Tensor> {
    let (t, ht, wt) = tok.grid;
    let cp = tok.channels();
    crate::ensure!(
        cp.is_multiple_of(patch * patch),
        "token width {cp} is not a multiple of patch area {}",
        patch * patch
    );
    let c = cp / (patch * patch);
    Ok(tok
        .tokens
        .reshape((t, ht * wt, c, patch * patch))?
        .permute((0, 2, 1, 3))?
        .reshape((t * c, ht, wt, patch, patch))?
        .permute((0, 1, 3, 2, 4))?
        .reshape((t, c, ht * patch, wt * patch))?)
}

#[derive(Debug, Clone)]
pub struct ToyBackbone {
    cfg: BackboneConfig,
    params: ParamSet,
    patch_embed: Linear,
    pos: FactorizedPosition,
    time: TimeEmbed,
    text: Linear,
    blocks: Vec<Block>,
    final_shift: Linear,
    final_proj: Linear,
}

impl ToyBackbone {
    pub fn param_specs(cfg: &BackboneConfig) -> Vec<ParamSpec> {
        let p2 = cfg.patch * cfg.patch;
        let w = cfg.width;
        let mut s = linear_specs("backbone.patch_embed", cfg.input_channels() * p2, w, false);
        s.extend(FactorizedPosition::specs("backbone.pos", cfg.max_grid, w));
        s.extend(TimeEmbed::specs("backbone.time", cfg.freq_dim, w));
        s.extend(linear_specs("backbone.text", cfg.text_dim, w, false));
        for i in 0..cfg.num_blocks {
            s.extend(Block::specs(
                &format!("backbone.blocks.{i}"),
                w,
                cfg.mlp_ratio,
                true,
            ));
        }
        s.extend(linear_specs("backbone.final.shift", w, w, false));
        s.extend(linear_specs(
            "backbone.final.proj",
            w,
            cfg.latent_channels * p2,
            false,
        ));
        s
    }

    /// Randomly initialized, still trainable.
    pub fn init(cfg: BackboneConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let params = ParamSet::init(&Self::param_specs(&cfg), seed, dtype, device, true)?;
        Self::from_params(cfg, params)
    }

    pub fn from_params(cfg: BackboneConfig, params: ParamSet) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.num_blocks)
            .map(|i| Block::load(&params, &format!("backbone.blocks.{i}"), cfg.heads, true))
            .collect::<Result<_>>()?;
        Ok(Self {
            patch_embed: Linear::load(&params, "backbone.patch_embed")?,
            pos: FactorizedPosition::load(&params, "backbone.pos")?,
            time: TimeEmbed::load(&params, "backbone.time", cfg.freq_dim)?,
            text: Linear::load(&params, "backbone.text")?,
            blocks,
            final_shift: Linear::load(&params, "backbone.final.shift")?,
            final_proj: Linear::load(&params, "backbone.final.proj")?,
            cfg,
            params,
        })
    }

    /// Detaches every parameter so no optimizer step can reach the backbone.
    pub fn freeze(self) -> Result<Self> {
        let params = self.params.frozen()?;
        Self::from_params(self.cfg, params)
    }

    pub fn is_frozen(&self) -> bool {
        self.params.vars().is_empty()
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params
            .tensors()
            .next()
            .map(|(_, t)| t.dtype())
            .unwrap_or(DType::F32)
    }

    /// Sinusoidal time embedding followed by the backbone's MLP, `(1, width)`.
    pub fn time_embedding(&self, t: f64, device: &Device) -> Result<Tensor> {
        self.time.forward(t, self.dtype(), device)
    }

    /// Predicts the velocity for `z_t` (`(T', C, h, w)`).
    ///
    /// `residuals[l]`, when present, must be `(N_tok, width)` and is added to
    /// the hidden state after block `l + 1`.
    pub fn denoise(
        &self,
        z_t: &Tensor,
        t: f64,
        text_emb: &Tensor,
        first_frame: Option<&Tensor>,
        residuals: Option<&[Option<Tensor>]>,
    ) -> Result<Tensor> {
        let dims = z_t.dims4()?;
        let (nt, c, h, w) = dims;
        crate::ensure!(
            c == self.cfg.latent_channels,
            "latent has {c} channels, backbone expects {}",
            self.cfg.latent_channels
        );
        let grid = self.cfg.token_grid(dims)?;
        let device = z_t.device();
        let dtype = z_t.dtype();

        let (ff, indicator) = match first_frame {
            Some(f) => {
                let f = f.reshape((1, c, h, w)).map_err(|_| {
                    Error::contract(format!(
                        "first frame {:?} does not match latent frame ({c}, {h}, {w})",
                        f.dims()
                    ))
                })?;
                let mut ind = vec![0f64; nt];
                ind[0] = 1.0;
                let ind = Tensor::from_vec(ind, (nt, 1, 1, 1), device)?
                    .to_dtype(dtype)?
                    .broadcast_as((nt, 1, h, w))?;
                (f.broadcast_as((nt, c, h, w))?, ind)
            }
            None => (
                Tensor::zeros((nt, c, h, w), dtype, device)?,
                Tensor::zeros((nt, 1, h, w), dtype, device)?,
            ),
        };
        let x = Tensor::cat(&[z_t, &ff, &indicator], 1)?;
        let tokens = patchify(&x, self.cfg.patch)?;
        let mut hs = self.patch_embed.forward(&tokens.tokens)?;
        if self.cfg.positional {
            hs = hs.broadcast_add(&self.pos.forward(grid)?)?;
        }

        crate::ensure!(
            text_emb.elem_count() == self.cfg.text_dim,
            "text embedding has {} values, expected {}",
            text_emb.elem_count(),
            self.cfg.text_dim
        );
        let text = text_emb.reshape((1, self.cfg.text_dim))?;
        let cond = (self.time_embedding(t, device)? + self.text.forward(&text)?)?.silu()?;

        let residuals = residuals.unwrap_or(&[]);
        if residuals.len() > self.cfg.num_blocks {
            return Err(Error::contract(format!(
                "residual supplied for block {} but the backbone has {} blocks",
                residuals.len(),
                self.cfg.num_blocks
            )));
        }
        let n_tok = grid.0 * grid.1 * grid.2;
        for (l, block) in self.blocks.iter().enumerate() {
            hs = block.forward(&hs, &cond)?;
            if let Some(Some(r)) = residuals.get(l) {
                if r.dims() != [n_tok, self.cfg.width] {
                    return Err(Error::contract(format!(
                        "residual for block {} has shape {:?}, expected [{n_tok}, {}]",
                        l + 1,
                        r.dims(),
                        self.cfg.width
                    )));
                }
                hs = (hs + r)?;
            }
        }
        let out = layer_norm(&hs)?.broadcast_add(&self.final_shift.forward(&cond)?)?;
        let out = self.final_proj.forward(&out)?;
        unpatchify(&TokenState::new(out, grid)?, self.cfg.patch)
    }
}
