//! Small differentiable building blocks shared by the backbone and the
//! control branch. Everything operates on `(tokens, channels)` matrices.

use candle_core::{DType, Device, Tensor, D};

use crate::params::{linear_specs, Init, ParamSet, ParamSpec};
use crate::{Error, Result};

const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn load(ps: &ParamSet, prefix: &str) -> Result<Self> {
        Ok(Self {
            weight: ps.get(&format!("{prefix}.weight"))?,
            bias: ps.get(&format!("{prefix}.bias"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Parameter-free layer norm over the channel axis.
pub fn layer_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(xc.broadcast_div(&(var + LN_EPS)?.sqrt()?)?)
}

/// Sinusoidal features of a diffusion time in `[0, 1]`, shape `(1, dim)`.
pub fn timestep_features(t: f64, dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = vec![0.0f64; dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        let arg = t * 1000.0 * freq;
        v[i] = arg.cos();
        v[half + i] = arg.sin();
    }
    Ok(Tensor::from_vec(v, (1, dim), device)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
pub struct TimeEmbed {
    fc1: Linear,
    fc2: Linear,
    freq_dim: usize,
}

impl TimeEmbed {
    pub fn specs(prefix: &str, freq_dim: usize, width: usize) -> Vec<ParamSpec> {
        let mut s = linear_specs(&format!("{prefix}.fc1"), freq_dim, width, false);
        s.extend(linear_specs(&format!("{prefix}.fc2"), width, width, false));
        s
    }

    pub fn load(ps: &ParamSet, prefix: &str, freq_dim: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::load(ps, &format!("{prefix}.fc1"))?,
            fc2: Linear::load(ps, &format!("{prefix}.fc2"))?,
            freq_dim,
        })
    }

    pub fn forward(&self, t: f64, dtype: DType, device: &Device) -> Result<Tensor> {
        let f = timestep_features(t, self.freq_dim, dtype, device)?;
        self.fc2.forward(&self.fc1.forward(&f)?.silu()?)
    }
}

/// Learned absolute position table factorized over `(t, h, w)`.
#[derive(Debug, Clone)]
pub struct FactorizedPosition {
    t: Tensor,
    h: Tensor,
    w: Tensor,
}

impl FactorizedPosition {
    pub fn specs(prefix: &str, max: (usize, usize, usize), width: usize) -> Vec<ParamSpec> {
        vec![
            ParamSpec::new(format!("{prefix}.t"), &[max.0, width], Init::Normal(0.02)),
            ParamSpec::new(format!("{prefix}.h"), &[max.1, width], Init::Normal(0.02)),
            ParamSpec::new(format!("{prefix}.w"), &[max.2, width], Init::Normal(0.02)),
        ]
    }

    pub fn load(ps: &ParamSet, prefix: &str) -> Result<Self> {
        Ok(Self {
            t: ps.get(&format!("{prefix}.t"))?,
            h: ps.get(&format!("{prefix}.h"))?,
            w: ps.get(&format!("{prefix}.w"))?,
        })
    }

    /// Position embedding for every token of a `(t, h, w)` grid, `(N, width)`.
    pub fn forward(&self, grid: (usize, usize, usize)) -> Result<Tensor> {
        let (nt, nh, nw) = grid;
        let check = |table: &Tensor, n: usize, axis: &str| -> Result<()> {
            let max = table.dim(0)?;
            if n > max {
                return Err(Error::contract(format!(
                    "token grid {axis} extent {n} exceeds the position table size {max}"
                )));
            }
            Ok(())
        };
        check(&self.t, nt, "t")?;
        check(&self.h, nh, "h")?;
        check(&self.w, nw, "w")?;
        let width = self.t.dim(1)?;
        let t = self.t.narrow(0, 0, nt)?.reshape((nt, 1, 1, width))?;
        let h = self.h.narrow(0, 0, nh)?.reshape((1, nh, 1, width))?;
        let w = self.w.narrow(0, 0, nw)?.reshape((1, 1, nw, width))?;
        let pos = t.broadcast_add(&h)?.broadcast_add(&w)?;
        Ok(pos.reshape((nt * nh * nw, width))?)
    }
}

#[derive(Debug, Clone)]
pub struct Attention {
    qkv: Linear,
    out: Linear,
    heads: usize,
}

impl Attention {
    pub fn specs(prefix: &str, width: usize) -> Vec<ParamSpec> {
        let mut s = linear_specs(&format!("{prefix}.qkv"), width, 3 * width, false);
        s.extend(linear_specs(&format!("{prefix}.out"), width, width, false));
        s
    }

    pub fn load(ps: &ParamSet, prefix: &str, heads: usize) -> Result<Self> {
        Ok(Self {
            qkv: Linear::load(ps, &format!("{prefix}.qkv"))?,
            out: Linear::load(ps, &format!("{prefix}.out"))?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, width) = x.dims2()?;
        let hd = width / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((n, 3, self.heads, hd))?
            .permute((1, 2, 0, 3))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?)? / (hd as f64).sqrt())?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let y = attn.matmul(&v)?.permute((1, 0, 2))?.reshape((n, width))?;
        self.out.forward(&y)
    }
}

/// Token mixer of a block: attention across tokens, or the per-token linear
/// projection used by the no-spatial-mixing ablation.
#[derive(Debug, Clone)]
pub enum Mixer {
    Attention(Attention),
    Pointwise(Linear),
}

#[derive(Debug, Clone)]
pub struct Block {
    shift: Linear,
    mixer: Mixer,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    pub fn specs(prefix: &str, width: usize, mlp_ratio: usize, mixing: bool) -> Vec<ParamSpec> {
        let mut s = linear_specs(&format!("{prefix}.shift"), width, 2 * width, false);
        if mixing {
            s.extend(Attention::specs(&format!("{prefix}.attn"), width));
        } else {
            s.extend(linear_specs(&format!("{prefix}.mix"), width, width, false));
        }
        s.extend(linear_specs(
            &format!("{prefix}.fc1"),
            width,
            mlp_ratio * width,
            false,
        ));
        s.extend(linear_specs(
            &format!("{prefix}.fc2"),
            mlp_ratio * width,
            width,
            false,
        ));
        s
    }

    pub fn load(ps: &ParamSet, prefix: &str, heads: usize, mixing: bool) -> Result<Self> {
        let mixer = if mixing {
            Mixer::Attention(Attention::load(ps, &format!("{prefix}.attn"), heads)?)
        } else {
            Mixer::Pointwise(Linear::load(ps, &format!("{prefix}.mix"))?)
        };
        Ok(Self {
            shift: Linear::load(ps, &format!("{prefix}.shift"))?,
            mixer,
            fc1: Linear::load(ps, &format!("{prefix}.fc1"))?,
            fc2: Linear::load(ps, &format!("{prefix}.fc2"))?,
        })
    }

    /// `cond` is the activated conditioning vector, shape `(1, width)`.
    pub fn forward(&self, h: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let shifts = self.shift.forward(cond)?.chunk(2, D::Minus1)?;
        let a = layer_norm(h)?.broadcast_add(&shifts[0])?;
        let mixed = match &self.mixer {
            Mixer::Attention(attn) => attn.forward(&a)?,
            Mixer::Pointwise(lin) => lin.forward(&a)?,
        };
        let h = (h + mixed)?;
        let m = layer_norm(&h)?.broadcast_add(&shifts[1])?;
        let y = self.fc2.forward(&self.fc1.forward(&m)?.gelu()?)?;
        Ok((h + y)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_norm_standardizes_rows() {
        let x = Tensor::new(
            &[[1.0f64, 2.0, 3.0, 6.0], [0.0, 0.0, 1.0, -1.0]],
            &Device::Cpu,
        )
        .unwrap();
        let y = layer_norm(&x).unwrap();
        for row in y.to_vec2::<f64>().unwrap() {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn timestep_features_are_bounded() {
        let f = timestep_features(0.37, 16, DType::F64, &Device::Cpu).unwrap();
        assert_eq!(f.dims(), &[1, 16]);
        assert!(
            f.abs()
                .unwrap()
                .max_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap()
                <= 1.0
        );
    }
}
