//! Sampling videos from features: single blocks and autoregressive rollouts
//! where each block is reconditioned on the previous block's last frame.

use candle_core::{Device, Tensor};
use ndarray::{s, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::InferConfig;
use crate::control::ControlMask;
use crate::diffusion::{gaussian, sample, NoiseSchedule};
use crate::features::FeatureGrid;
use crate::model::{ControlInput, ControlledModel};
use crate::text::{build_prompt, ToyTextEncoder};
use crate::video::{VaeStub, VideoTensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recondition {
    LastFrame,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutPlan {
    pub block_frames: usize,
    pub num_blocks: usize,
    pub recondition: Recondition,
}

impl RolloutPlan {
    pub fn new(block_frames: usize, num_blocks: usize) -> Result<Self> {
        let plan = Self {
            block_frames,
            num_blocks,
            recondition: Recondition::LastFrame,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        crate::ensure!(
            self.block_frames >= 1 && (self.block_frames - 1).is_multiple_of(4),
            "block_frames = {} must satisfy ≡ 1 (mod 4)",
            self.block_frames
        );
        crate::ensure!(self.num_blocks >= 1, "num_blocks must be ≥ 1");
        Ok(())
    }

    /// Consecutive blocks share their boundary frame.
    pub fn total_frames(&self) -> usize {
        1 + self.num_blocks * (self.block_frames - 1)
    }
}

/// Runs the sampler and pixel decoding for one or more blocks.
pub struct Generator<'a> {
    pub model: &'a ControlledModel,
    pub vae: &'a VaeStub,
    pub device: Device,
}

#[derive(Debug, Clone)]
pub struct RolloutOutput {
    pub video: VideoTensor,
    /// First-frame conditioning handed to each block (quantized pixels).
    pub conditioning: Vec<Option<Array3<f32>>>,
}

impl Generator<'_> {
    fn text(&self, cfg: &InferConfig) -> Result<Tensor> {
        let prompt = build_prompt(&cfg.prompt, &cfg.style_keyword)?;
        ToyTextEncoder {
            dim: self.model.config().backbone.text_dim,
        }
        .encode(&prompt, self.model.dtype(), &self.device)
    }

    /// Samples one block of `features.frames()` frames. With a first frame the
    /// output starts with exactly that frame.
    pub fn infer(
        &self,
        features: &FeatureGrid,
        first_frame: Option<&Array3<f32>>,
        mask: Option<&ControlMask>,
        cfg: &InferConfig,
        seed: u64,
    ) -> Result<VideoTensor> {
        let frames = features.frames();
        let latent_frames = self.model.config().adapter.output_frames(frames)?;
        let (h, w) = features.spatial();
        let c = self.model.config().backbone.latent_channels;
        let dtype = self.model.dtype();
        let first = match first_frame.filter(|_| !cfg.drop_first_frame) {
            Some(f) => {
                crate::ensure!(
                    f.dim() == (3, h * self.vae.spatial, w * self.vae.spatial),
                    "first frame {:?} does not match feature grid {h}×{w}",
                    f.dim()
                );
                let clip = VideoTensor::new(f.clone().insert_axis(Axis(0)))?;
                Some(
                    self.vae
                        .encode(&clip, &self.device)?
                        .into_tensor()
                        .to_dtype(dtype)?,
                )
            }
            None => None,
        };
        let mut input = ControlInput::new(
            Some(features.to_tensor(dtype, &self.device)?),
            self.text(cfg)?,
        );
        input.first_frame = first.clone();
        input.mask = mask.cloned();
        input.scale = cfg.scale;
        input.guidance = cfg.guidance;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = gaussian((latent_frames, c, h, w), dtype, &self.device, &mut rng)?;
        let mut z0 = sample(
            self.model,
            &z,
            Some(&input),
            cfg.steps,
            &NoiseSchedule::default(),
        )?;
        if let Some(f) = &first {
            z0 = Tensor::cat(&[f, &z0.narrow(0, 1, latent_frames - 1)?], 0)?;
        }
        let video = self.vae.decode(&z0)?.quantized();
        match first_frame.filter(|_| !cfg.drop_first_frame) {
            Some(f) => {
                let mut data = video.into_data();
                data.slice_mut(s![0, .., .., ..]).assign(f);
                VideoTensor::new(data)
            }
            None => Ok(video),
        }
    }

    /// Block `k > 0` is conditioned on the last frame of block `k − 1`, and its
    /// own first frame (identical to that frame) is not repeated.
    pub fn rollout(
        &self,
        blocks: &[FeatureGrid],
        first_frame: Option<&Array3<f32>>,
        plan: &RolloutPlan,
        cfg: &InferConfig,
    ) -> Result<RolloutOutput> {
        plan.validate()?;
        if blocks.len() < plan.num_blocks {
            return Err(Error::contract(format!(
                "missing feature block {} (have {} of {})",
                blocks.len(),
                blocks.len(),
                plan.num_blocks
            )));
        }
        let mut frames: Vec<Array3<f32>> = Vec::with_capacity(plan.total_frames());
        let mut conditioning = Vec::with_capacity(plan.num_blocks);
        let mut cond = first_frame
            .map(|f| VideoTensor::new(f.clone().insert_axis(Axis(0))).map(|v| v.quantized()));
        for (k, block) in blocks.iter().take(plan.num_blocks).enumerate() {
            crate::ensure!(
                block.frames() == plan.block_frames,
                "feature block {k} has {} frames, plan expects {}",
                block.frames(),
                plan.block_frames
            );
            let cond_frame = match cond.take() {
                Some(v) => Some(v?.frame(0).to_owned()),
                None => None,
            };
            let video = self.infer(
                block,
                cond_frame.as_ref(),
                None,
                cfg,
                cfg.seed.wrapping_add(k as u64),
            )?;
            let skip = if k == 0 { 0 } else { 1 };
            frames.extend((skip..video.frames()).map(|i| video.frame(i).to_owned()));
            conditioning.push(cond_frame);
            cond = Some(Ok(VideoTensor::new(
                video
                    .frame(video.frames() - 1)
                    .to_owned()
                    .insert_axis(Axis(0)),
            )?));
        }
        let (c, h, w) = frames[0].dim();
        let mut data = Array4::<f32>::zeros((frames.len(), c, h, w));
        for (i, f) in frames.iter().enumerate() {
            data.index_axis_mut(Axis(0), i).assign(f);
        }
        Ok(RolloutOutput {
            video: VideoTensor::new(data)?,
            conditioning,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_arithmetic() {
        assert_eq!(RolloutPlan::new(49, 5).unwrap().total_frames(), 241);
        assert_eq!(RolloutPlan::new(49, 1).unwrap().total_frames(), 49);
        assert!(RolloutPlan::new(48, 2).is_err());
        assert!(RolloutPlan::new(49, 0).is_err());
    }
}
