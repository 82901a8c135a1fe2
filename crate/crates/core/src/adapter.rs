//! Causal temporal adapter: two stride-2 stages of
//! `SiLU(GroupNorm(CausalConv3D(x)))` compressing `T = 4k + 1` conditioning
//! frames to the `k + 1` latent frames.
//!
//! Temporal padding of `kernel_t − 1` frames is applied on the past side only,
//! so output frame `j` of a stage reads input frames `≤ stride·j`. Group norm
//! statistics are taken per frame; pooling them across time would leak
//! future frames into the past.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::params::{Init, ParamSet, ParamSpec};
use crate::{Error, Result};

const GN_EPS: f64 = 1e-6;

/// How the `kernel_t − 1` past frames in front of frame 0 are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PastPadding {
    Replicate,
    Zeros,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_t: usize,
    pub stride_t: usize,
    pub spatial_kernel: usize,
    pub norm_groups: usize,
    pub padding: PastPadding,
}

impl CausalConvSpec {
    pub fn validate(&self) -> Result<()> {
        crate::ensure!(self.kernel_t >= 1, "kernel_t must be ≥ 1");
        crate::ensure!(
            self.stride_t == 1 || self.stride_t == 2,
            "stride_t must be 1 or 2, got {}",
            self.stride_t
        );
        crate::ensure!(
            self.spatial_kernel % 2 == 1,
            "spatial kernel {} must be odd to preserve the grid",
            self.spatial_kernel
        );
        crate::ensure!(
            self.norm_groups >= 1 && self.out_channels.is_multiple_of(self.norm_groups),
            "{} output channels are not divisible into {} groups",
            self.out_channels,
            self.norm_groups
        );
        Ok(())
    }

    /// Output frame count, `(T − 1)/stride + 1`.
    pub fn output_frames(&self, t: usize) -> Result<usize> {
        crate::ensure!(t >= 1, "causal stage needs at least one frame");
        if !(t - 1).is_multiple_of(self.stride_t) {
            return Err(Error::contract(format!(
                "T = {t} frames must satisfy T ≡ 1 (mod {}) for a stride-{} stage",
                self.stride_t, self.stride_t
            )));
        }
        Ok((t - 1) / self.stride_t + 1)
    }

    fn specs(&self, prefix: &str) -> Vec<ParamSpec> {
        let fan_in = self.in_channels * self.kernel_t * self.spatial_kernel * self.spatial_kernel;
        vec![
            ParamSpec::new(
                format!("{prefix}.conv.weight"),
                &[
                    self.out_channels,
                    self.in_channels,
                    self.kernel_t,
                    self.spatial_kernel,
                    self.spatial_kernel,
                ],
                Init::Normal(1.0 / (fan_in as f64).sqrt()),
            ),
            ParamSpec::new(
                format!("{prefix}.conv.bias"),
                &[self.out_channels],
                Init::Normal(0.1),
            ),
            ParamSpec::new(
                format!("{prefix}.gn.weight"),
                &[self.out_channels],
                Init::Ones,
            ),
            ParamSpec::new(
                format!("{prefix}.gn.bias"),
                &[self.out_channels],
                Init::Zeros,
            ),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct CausalStage {
    spec: CausalConvSpec,
    /// `(C', C, k_t, k, k)`; taps are sliced per call so in-place updates are seen.
    weight: Tensor,
    bias: Tensor,
    gamma: Tensor,
    beta: Tensor,
}

impl CausalStage {
    pub fn load(ps: &ParamSet, prefix: &str, spec: CausalConvSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            weight: ps.get(&format!("{prefix}.conv.weight"))?,
            bias: ps.get(&format!("{prefix}.conv.bias"))?,
            gamma: ps.get(&format!("{prefix}.gn.weight"))?,
            beta: ps.get(&format!("{prefix}.gn.bias"))?,
            spec,
        })
    }

    pub fn spec(&self) -> &CausalConvSpec {
        &self.spec
    }

    /// `(T, C, h, w)` → `(T_out, C', h, w)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (t, c, h, w) = x.dims4()?;
        crate::ensure!(
            c == self.spec.in_channels,
            "causal stage expects {} channels, got {c}",
            self.spec.in_channels
        );
        let t_out = self.spec.output_frames(t)?;
        let kt = self.spec.kernel_t;
        let padded = if kt > 1 {
            let past = match self.spec.padding {
                PastPadding::Replicate => x
                    .narrow(0, 0, 1)?
                    .broadcast_as((kt - 1, c, h, w))?
                    .contiguous()?,
                PastPadding::Zeros => Tensor::zeros((kt - 1, c, h, w), x.dtype(), x.device())?,
            };
            Tensor::cat(&[&past, x], 0)?
        } else {
            x.clone()
        };
        let pad = self.spec.spatial_kernel / 2;
        let mut acc: Option<Tensor> = None;
        for k in 0..self.spec.kernel_t {
            let tap = self.weight.narrow(2, k, 1)?.squeeze(2)?.contiguous()?;
            let idx: Vec<u32> = (0..t_out)
                .map(|j| (self.spec.stride_t * j + k) as u32)
                .collect();
            let idx = Tensor::new(idx.as_slice(), x.device())?;
            let frames = padded.index_select(&idx, 0)?;
            let y = frames.conv2d(&tap, pad, 1, 1, 1)?;
            acc = Some(match acc {
                Some(a) => (a + y)?,
                None => y,
            });
        }
        let co = self.spec.out_channels;
        let y = acc
            .expect("kernel_t ≥ 1")
            .broadcast_add(&self.bias.reshape((1, co, 1, 1))?)?;
        let y = group_norm_per_frame(&y, self.spec.norm_groups)?;
        let y = y
            .broadcast_mul(&self.gamma.reshape((1, co, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, co, 1, 1))?)?;
        Ok(y.silu()?)
    }
}

/// Group norm whose statistics cover `(C/G, h, w)` of a single frame.
pub fn group_norm_per_frame(x: &Tensor, groups: usize) -> Result<Tensor> {
    let (t, c, h, w) = x.dims4()?;
    let g = x.reshape((t, groups, (c / groups) * h * w))?;
    let mean = g.mean_keepdim(2)?;
    let gc = g.broadcast_sub(&mean)?;
    let var = gc.sqr()?.mean_keepdim(2)?;
    let n = gc.broadcast_div(&(var + GN_EPS)?.sqrt()?)?;
    Ok(n.reshape((t, c, h, w))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub feature_dim: usize,
    pub hidden_channels: usize,
    pub out_channels: usize,
    pub kernel_t: usize,
    pub spatial_kernel: usize,
    pub norm_groups: usize,
    pub padding: PastPadding,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            feature_dim: 384,
            hidden_channels: 256,
            out_channels: 256,
            kernel_t: 3,
            spatial_kernel: 3,
            norm_groups: 8,
            padding: PastPadding::Replicate,
        }
    }
}

impl AdapterConfig {
    pub fn stage_specs(&self) -> [CausalConvSpec; 2] {
        let stage = |i, o| CausalConvSpec {
            in_channels: i,
            out_channels: o,
            kernel_t: self.kernel_t,
            stride_t: 2,
            spatial_kernel: self.spatial_kernel,
            norm_groups: self.norm_groups,
            padding: self.padding,
        };
        [
            stage(self.feature_dim, self.hidden_channels),
            stage(self.hidden_channels, self.out_channels),
        ]
    }

    /// Frames after both stages: `(T − 1)/4 + 1`.
    pub fn output_frames(&self, t: usize) -> Result<usize> {
        if t == 0 || !(t - 1).is_multiple_of(4) {
            return Err(Error::contract(format!(
                "conditioning length T = {t} must satisfy T ≡ 1 (mod 4)"
            )));
        }
        Ok((t - 1) / 4 + 1)
    }
}

#[derive(Debug, Clone)]
pub struct TemporalAdapter {
    cfg: AdapterConfig,
    stages: [CausalStage; 2],
}

impl TemporalAdapter {
    pub fn param_specs(cfg: &AdapterConfig) -> Vec<ParamSpec> {
        let [a, b] = cfg.stage_specs();
        let mut s = a.specs("adapter.stage0");
        s.extend(b.specs("adapter.stage1"));
        s
    }

    pub fn from_params(cfg: AdapterConfig, ps: &ParamSet) -> Result<Self> {
        let [a, b] = cfg.stage_specs();
        Ok(Self {
            stages: [
                CausalStage::load(ps, "adapter.stage0", a)?,
                CausalStage::load(ps, "adapter.stage1", b)?,
            ],
            cfg,
        })
    }

    pub fn init(
        cfg: AdapterConfig,
        seed: u64,
        dtype: DType,
        device: &Device,
    ) -> Result<(Self, ParamSet)> {
        let ps = ParamSet::init(&Self::param_specs(&cfg), seed, dtype, device, true)?;
        Ok((Self::from_params(cfg, &ps)?, ps))
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.cfg
    }

    pub fn stages(&self) -> &[CausalStage; 2] {
        &self.stages
    }

    /// `(T, D, h, w)` features → `((T − 1)/4 + 1, C_out, h, w)`.
    pub fn adapt(&self, features: &Tensor) -> Result<Tensor> {
        let (t, d, _, _) = features.dims4()?;
        self.cfg.output_frames(t)?;
        crate::ensure!(
            d == self.cfg.feature_dim,
            "features have {d} channels, adapter expects {}",
            self.cfg.feature_dim
        );
        let h1 = self.stages[0].forward(features)?;
        self.stages[1].forward(&h1)
    }
}
