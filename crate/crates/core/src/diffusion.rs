//! Variance-preserving forward process, v-prediction targets, the training
//! loss and a deterministic sampler.
//!
//! The schedule is the cosine VP schedule `α_t = cos(πt/2)`, `σ_t = sin(πt/2)`.

use std::f64::consts::FRAC_PI_2;
use std::marker::PhantomData;

use candle_core::{DType, Device, Shape, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    /// Default number of sampler steps.
    pub num_steps: usize,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self { num_steps: 10 }
    }
}

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!(
            "diffusion time {t} is outside [0, 1]"
        )));
    }
    Ok(())
}

impl NoiseSchedule {
    pub fn cosine(num_steps: usize) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::contract("schedule needs at least one step"));
        }
        Ok(Self { num_steps })
    }

    /// `(α_t, σ_t)` with exact endpoints.
    pub fn coefficients(&self, t: f64) -> Result<(f64, f64)> {
        check_t(t)?;
        Ok(if t == 0.0 {
            (1.0, 0.0)
        } else if t == 1.0 {
            (0.0, 1.0)
        } else {
            let phi = FRAC_PI_2 * t;
            (phi.cos(), phi.sin())
        })
    }

    pub fn alpha(&self, t: f64) -> Result<f64> {
        Ok(self.coefficients(t)?.0)
    }

    pub fn sigma(&self, t: f64) -> Result<f64> {
        Ok(self.coefficients(t)?.1)
    }
}

/// A latent frame sequence, `(T', C, h, w)`.
#[derive(Debug, Clone)]
pub struct LatentVideo {
    data: Tensor,
}

impl LatentVideo {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 4 {
            return Err(Error::contract(format!(
                "latent video must be rank 4 (T', C, h, w), got {:?}",
                data.dims()
            )));
        }
        ensure_finite(&data, "latent video")?;
        Ok(Self { data })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn frame_count(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let d = self.data.dims();
        (d[0], d[1], d[2], d[3])
    }

    /// Latent frame count of a `T`-frame pixel video: `(T − 1)/4 + 1`.
    pub fn frames_for(pixel_frames: usize) -> Result<usize> {
        if pixel_frames == 0 || !(pixel_frames - 1).is_multiple_of(4) {
            return Err(Error::contract(format!(
                "pixel frame count {pixel_frames} must satisfy T ≡ 1 (mod 4)"
            )));
        }
        Ok((pixel_frames - 1) / 4 + 1)
    }
}

pub(crate) fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let s = t
        .abs()?
        .sum_all()?
        .to_dtype(DType::F64)?
        .to_scalar::<f64>()?;
    if !s.is_finite() {
        return Err(Error::numeric(format!("{what} contains non-finite values")));
    }
    Ok(())
}

fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::contract(format!(
            "noise shape {:?} differs from latent shape {:?}",
            b.dims(),
            a.dims()
        )));
    }
    Ok(())
}

/// `z_t = α_t z0 + σ_t ε`.
pub fn forward_diffuse(z0: &Tensor, eps: &Tensor, t: f64, sched: &NoiseSchedule) -> Result<Tensor> {
    check_same_shape(z0, eps)?;
    let (a, s) = sched.coefficients(t)?;
    Ok(((z0 * a)? + (eps * s)?)?)
}

/// `v_t = α_t ε − σ_t z0`.
pub fn v_target(z0: &Tensor, eps: &Tensor, t: f64, sched: &NoiseSchedule) -> Result<Tensor> {
    check_same_shape(z0, eps)?;
    let (a, s) = sched.coefficients(t)?;
    Ok(((eps * a)? - (z0 * s)?)?)
}

/// Anything that predicts a velocity for a noisy latent.
pub trait Denoiser {
    type Cond;

    fn predict_v(&self, z_t: &Tensor, t: f64, cond: Option<&Self::Cond>) -> Result<Tensor>;
}

/// Adapts a closure into a [`Denoiser`].
pub struct FnDenoiser<F, C> {
    f: F,
    _cond: PhantomData<fn(&C)>,
}

pub fn denoiser_fn<C, F>(f: F) -> FnDenoiser<F, C>
where
    F: Fn(&Tensor, f64, Option<&C>) -> Result<Tensor>,
{
    FnDenoiser {
        f,
        _cond: PhantomData,
    }
}

impl<C, F> Denoiser for FnDenoiser<F, C>
where
    F: Fn(&Tensor, f64, Option<&C>) -> Result<Tensor>,
{
    type Cond = C;

    fn predict_v(&self, z_t: &Tensor, t: f64, cond: Option<&C>) -> Result<Tensor> {
        (self.f)(z_t, t, cond)
    }
}

/// Standard normal tensor drawn from `rng`.
pub fn gaussian<R: Rng + ?Sized>(
    shape: impl Into<Shape>,
    dtype: DType,
    device: &Device,
    rng: &mut R,
) -> Result<Tensor> {
    let shape = shape.into();
    let values: Vec<f64> = (0..shape.elem_count())
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Ok(Tensor::from_vec(values, shape, device)?.to_dtype(dtype)?)
}

/// Training time, uniform on the open interval `(0, 1)`.
pub fn sample_time<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let t: f64 = rng.random();
        if t > 0.0 {
            return t;
        }
    }
}

/// Element-mean squared error of the denoiser at a fixed `(ε, t)`.
pub fn loss_at<Dn: Denoiser>(
    denoiser: &Dn,
    z0: &Tensor,
    eps: &Tensor,
    t: f64,
    cond: Option<&Dn::Cond>,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let z_t = forward_diffuse(z0, eps, t, sched)?;
    let target = v_target(z0, eps, t, sched)?;
    let pred = denoiser.predict_v(&z_t, t, cond)?;
    if pred.dims() != z_t.dims() {
        return Err(Error::contract(format!(
            "denoiser returned shape {:?} for input {:?}",
            pred.dims(),
            z_t.dims()
        )));
    }
    ensure_finite(&pred, "denoiser output")?;
    Ok((pred - target)?.sqr()?.mean_all()?)
}

/// Batch-mean v-prediction loss with `t ~ U(0,1)` and `ε ~ N(0, I)` drawn
/// from `rng`, one draw per batch item in order.
pub fn diffusion_loss<Dn: Denoiser, R: Rng + ?Sized>(
    denoiser: &Dn,
    z0_batch: &[Tensor],
    cond_batch: &[Option<Dn::Cond>],
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    if z0_batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    if cond_batch.len() != z0_batch.len() {
        return Err(Error::contract(format!(
            "{} latents but {} conditioning entries",
            z0_batch.len(),
            cond_batch.len()
        )));
    }
    let mut terms = Vec::with_capacity(z0_batch.len());
    for (i, (z0, cond)) in z0_batch.iter().zip(cond_batch).enumerate() {
        let t = sample_time(rng);
        let eps = gaussian(z0.shape(), z0.dtype(), z0.device(), rng)?;
        let l = loss_at(denoiser, z0, &eps, t, cond.as_ref(), sched).map_err(|e| match e {
            Error::Numeric(m) => Error::numeric(format!("batch index {i}: {m}")),
            other => other,
        })?;
        terms.push(l);
    }
    Ok(Tensor::stack(&terms, 0)?.mean_all()?)
}

/// Deterministic sampler from `t = 1` to `t = 0` in `steps` uniform steps.
///
/// Each step reconstructs `ẑ0 = α_t z − σ_t v̂` and `ε̂ = σ_t z + α_t v̂` and
/// re-noises to the next time, which is exact when `v̂` is the true velocity.
pub fn sample<Dn: Denoiser>(
    denoiser: &Dn,
    z_init: &Tensor,
    cond: Option<&Dn::Cond>,
    steps: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::contract("sampler needs steps ≥ 1"));
    }
    let mut z = z_init.clone();
    for i in 0..steps {
        let t = 1.0 - i as f64 / steps as f64;
        let s = if i + 1 == steps {
            0.0
        } else {
            1.0 - (i + 1) as f64 / steps as f64
        };
        let v = denoiser.predict_v(&z, t, cond)?;
        let (at, st) = sched.coefficients(t)?;
        let (a_s, s_s) = sched.coefficients(s)?;
        let x0 = ((&z * at)? - (&v * st)?)?;
        let e = ((&z * st)? + (&v * at)?)?;
        z = ((x0 * a_s)? + (e * s_s)?)?;
        ensure_finite(&z, "sampler state").map_err(|_| {
            Error::numeric(format!("sampler produced non-finite values at step {i}"))
        })?;
    }
    Ok(z)
}
