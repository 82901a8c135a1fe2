//! Training loop for the control branch and adapter: AdamW with warmup and
//! cosine decay, global-norm clipping and conditioning dropout.

use std::collections::BTreeMap;
use std::io::Write;

use candle_core::{backprop::GradStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::conditioning_dropout;
use crate::diffusion::{diffusion_loss, NoiseSchedule};
use crate::model::{ControlInput, ControlledModel};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub cond_dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_peak: 2e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_steps: 500,
            total_steps: 2000,
            batch_size: 8,
            grad_clip: 1.0,
            cond_dropout: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        crate::ensure!(
            self.lr_peak > 0.0,
            "lr_peak must be positive, got {}",
            self.lr_peak
        );
        crate::ensure!(
            (0.0..=1.0).contains(&self.cond_dropout),
            "cond_dropout must lie in [0, 1], got {}",
            self.cond_dropout
        );
        crate::ensure!(
            self.warmup_steps < self.total_steps,
            "warmup_steps ({}) must be below total_steps ({})",
            self.warmup_steps,
            self.total_steps
        );
        crate::ensure!(self.batch_size >= 1, "batch_size must be ≥ 1");
        crate::ensure!(self.grad_clip > 0.0, "grad_clip must be positive");
        crate::ensure!(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
            "betas must lie in [0, 1)"
        );
        Ok(())
    }
}

/// Linear warmup from 0 to `lr_peak`, then cosine decay to 0 at `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    crate::ensure!(
        step <= cfg.total_steps,
        "step {step} beyond total_steps {}",
        cfg.total_steps
    );
    if step < cfg.warmup_steps {
        return Ok(cfg.lr_peak * step as f64 / cfg.warmup_steps as f64);
    }
    let tau = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    Ok(cfg.lr_peak * (1.0 + (std::f64::consts::PI * tau).cos()) / 2.0)
}

/// Decoupled-weight-decay Adam with explicit moment state.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: usize,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every `(name, var)` with its gradient scaled by `grad_scale`.
    pub fn update(
        &mut self,
        vars: &[(&str, &Var)],
        grads: &BTreeMap<String, Tensor>,
        grad_scale: f64,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, var) in vars {
            let Some(g) = grads.get(*name) else {
                continue;
            };
            let g = (g * grad_scale)?;
            let m_prev = match self.m.get(*name) {
                Some(m) => m.clone(),
                None => g.zeros_like()?,
            };
            let v_prev = match self.v.get(*name) {
                Some(v) => v.clone(),
                None => g.zeros_like()?,
            };
            let m = ((m_prev * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = ((v_prev * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let step = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.eps)?)?;
            let p = var.as_tensor();
            let decayed = (p - (p * (lr * self.weight_decay))?)?;
            var.set(&(decayed - (step * lr)?)?)?;
            self.m.insert(name.to_string(), m);
            self.v.insert(name.to_string(), v);
        }
        Ok(())
    }
}

/// One clip ready for training.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub id: String,
    /// `(T', C, h, w)`.
    pub latents: Tensor,
    /// Raw features `(T, D, h, w)`.
    pub features: Tensor,
    pub text: Tensor,
    pub first_frame: bool,
}

#[derive(Debug)]
pub struct TrainState {
    pub model: ControlledModel,
    pub optimizer: AdamW,
    /// Number of completed updates.
    pub step: usize,
}

impl TrainState {
    pub fn new(model: ControlledModel, cfg: &TrainConfig) -> Self {
        Self {
            model,
            optimizer: AdamW::new(cfg),
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub grad_norm_clipped: f64,
    pub lr: f64,
    pub dropped: usize,
}

/// Per-step generator; depends only on `(seed, step)` so resumed runs replay exactly.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> Result<f64> {
    let mut sq = 0.0;
    for g in grads.values() {
        sq += g
            .to_dtype(candle_core::DType::F64)?
            .sqr()?
            .sum_all()?
            .to_scalar::<f64>()?;
    }
    Ok(sq.sqrt())
}

fn collect_grads(vars: &[(&str, &Var)], store: &GradStore) -> BTreeMap<String, Tensor> {
    vars.iter()
        .filter_map(|(n, v)| store.get(v.as_tensor()).map(|g| (n.to_string(), g.clone())))
        .collect()
}

/// Batch loss with conditioning dropout applied to the raw features.
pub fn batch_loss<R: Rng + ?Sized>(
    model: &ControlledModel,
    batch: &[&TrainSample],
    cond_dropout: f64,
    rng: &mut R,
) -> Result<(Tensor, usize)> {
    let mut conds = Vec::with_capacity(batch.len());
    let mut dropped = 0;
    for s in batch {
        let (features, was_dropped) = conditioning_dropout(&s.features, cond_dropout, rng)?;
        dropped += was_dropped as usize;
        let mut input = ControlInput::new(Some(features), s.text.clone());
        if s.first_frame {
            input.first_frame = Some(s.latents.narrow(0, 0, 1)?);
        }
        conds.push(Some(input));
    }
    let z0: Vec<Tensor> = batch.iter().map(|s| s.latents.clone()).collect();
    let loss = diffusion_loss(model, &z0, &conds, &NoiseSchedule::default(), rng)?;
    Ok((loss, dropped))
}

/// Draws a batch, takes one clipped AdamW step and advances `state.step`.
pub fn train_step<R: Rng + ?Sized>(
    state: &mut TrainState,
    data: &[TrainSample],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StepMetrics> {
    crate::ensure!(!data.is_empty(), "no training samples");
    crate::ensure!(
        state.model.backbone().is_frozen(),
        "backbone must be frozen before training"
    );
    let picks: Vec<usize> = (0..cfg.batch_size)
        .map(|_| rng.random_range(0..data.len()))
        .collect();
    let batch: Vec<&TrainSample> = picks.iter().map(|&i| &data[i]).collect();
    let (loss, dropped) =
        batch_loss(&state.model, &batch, cfg.cond_dropout, rng).map_err(|e| match e {
            Error::Numeric(m) => Error::numeric(format!(
                "step {}: {m} (clips {:?})",
                state.step,
                ids(&batch)
            )),
            other => other,
        })?;
    let loss_value = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    if !loss_value.is_finite() {
        return Err(Error::numeric(format!(
            "non-finite loss at step {} (clips {:?})",
            state.step,
            ids(&batch)
        )));
    }
    let store = loss.backward()?;
    let vars = state.model.trainable().vars();
    let grads = collect_grads(&vars, &store);
    let norm = global_norm(&grads)?;
    if !norm.is_finite() {
        return Err(Error::numeric(format!(
            "non-finite gradient norm at step {}",
            state.step
        )));
    }
    let scale = if norm > cfg.grad_clip {
        cfg.grad_clip / norm
    } else {
        1.0
    };
    let lr = lr_at(state.step, cfg)?;
    state.optimizer.update(&vars, &grads, scale, lr)?;
    state.step += 1;
    Ok(StepMetrics {
        step: state.step,
        loss: loss_value,
        grad_norm: norm,
        grad_norm_clipped: norm * scale,
        lr,
        dropped,
    })
}

fn ids(batch: &[&TrainSample]) -> Vec<String> {
    batch.iter().map(|s| s.id.clone()).collect()
}

/// Runs `steps` updates with per-step generators, writing JSON-lines metrics.
pub fn fit(
    state: &mut TrainState,
    data: &[TrainSample],
    cfg: &TrainConfig,
    steps: usize,
    mut metrics: Option<&mut dyn Write>,
) -> Result<Vec<StepMetrics>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut rng = step_rng(cfg.seed, state.step);
        let m = train_step(state, data, cfg, &mut rng)?;
        if let Some(w) = metrics.as_deref_mut() {
            let line = serde_json::json!({"step": m.step, "loss": m.loss, "grad_norm": m.grad_norm, "lr": m.lr});
            writeln!(w, "{line}")?;
        }
        out.push(m);
    }
    Ok(out)
}

/// Mean conditioned loss over a fixed set of `(t, ε)` draws, without gradients.
pub fn eval_loss(
    model: &ControlledModel,
    sample: &TrainSample,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch: Vec<&TrainSample> = vec![sample; draws];
    let (loss, _) = batch_loss(model, &batch, 0.0, &mut rng)?;
    Ok(loss
        .detach()
        .to_dtype(candle_core::DType::F64)?
        .to_scalar::<f64>()?)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use candle_core::{DType, Device};

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg).unwrap(), 0.0);
        assert_eq!(lr_at(500, &cfg).unwrap(), 2e-4);
        assert!(lr_at(2000, &cfg).unwrap().abs() < 1e-20);
        assert!((lr_at(1250, &cfg).unwrap() - 1e-4).abs() < 1e-18);
        assert!(lr_at(2001, &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            cond_dropout: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            warmup_steps: 2000,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    pub(crate) fn tiny() -> (ControlledModel, TrainSample) {
        let mut cfg = ModelConfig::toy();
        cfg.backbone.num_blocks = 2;
        cfg.backbone.width = 16;
        cfg.backbone.heads = 2;
        cfg.control.blocks = 2;
        cfg.control.branch_width = 16;
        cfg.control.heads = 2;
        cfg.adapter.feature_dim = 8;
        cfg.adapter.hidden_channels = 8;
        cfg.adapter.out_channels = 8;
        let dev = Device::Cpu;
        let model = ControlledModel::init(cfg, 3, DType::F32, &dev).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sample = TrainSample {
            id: "clip".into(),
            latents: crate::diffusion::gaussian((3, 4, 4, 6), DType::F32, &dev, &mut rng).unwrap(),
            features: crate::diffusion::gaussian((9, 8, 4, 6), DType::F32, &dev, &mut rng).unwrap(),
            text: Tensor::zeros(16, DType::F32, &dev).unwrap(),
            first_frame: true,
        };
        (model, sample)
    }

    #[test]
    fn zero_lr_leaves_parameters_untouched() {
        let (model, sample) = tiny();
        let cfg = TrainConfig {
            warmup_steps: 5,
            total_steps: 10,
            batch_size: 1,
            ..Default::default()
        };
        let mut state = TrainState::new(model, &cfg);
        let before = state.model.trainable().checksum().unwrap();
        let m = train_step(&mut state, &[sample], &cfg, &mut step_rng(0, 0)).unwrap();
        assert_eq!(m.lr, 0.0);
        assert_eq!(state.model.trainable().checksum().unwrap(), before);
    }

    #[test]
    fn clipping_bounds_the_applied_norm() {
        let (model, sample) = tiny();
        let cfg = TrainConfig {
            warmup_steps: 0,
            total_steps: 10,
            batch_size: 2,
            grad_clip: 1e-3,
            lr_peak: 1e-3,
            ..Default::default()
        };
        let mut state = TrainState::new(model, &cfg);
        let backbone = state.model.backbone().params().checksum().unwrap();
        let ms = fit(&mut state, &[sample], &cfg, 3, None).unwrap();
        for m in &ms {
            assert!(m.grad_norm_clipped <= cfg.grad_clip + 1e-6);
            assert!(m.loss.is_finite());
        }
        assert_eq!(
            state.model.backbone().params().checksum().unwrap(),
            backbone
        );
    }

    #[test]
    fn metrics_are_json_lines() {
        let (model, sample) = tiny();
        let cfg = TrainConfig {
            warmup_steps: 1,
            total_steps: 10,
            batch_size: 1,
            ..Default::default()
        };
        let mut state = TrainState::new(model, &cfg);
        let mut buf = Vec::new();
        fit(&mut state, &[sample], &cfg, 2, Some(&mut buf)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<serde_json::Value> = text
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1]["step"], 2);
        assert!(
            lines[0]["loss"].is_f64() && lines[0]["grad_norm"].is_f64() && lines[0]["lr"].is_f64()
        );
    }
}
