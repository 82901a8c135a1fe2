//! On-disk clip datasets.
//!
//! ```text
//! <root>/manifest.json            {"clips": [{"id", "prompt", "frames"}]}
//! <root>/<id>/frames/000000.png
//! <root>/<id>/features.cdkt       optional, (T, D, h, w)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{sample_group, GroupWeights, PairBuilder};
use crate::features::{load_features, save_features, FeatureGrid};
use crate::text::{build_prompt, ToyTextEncoder};
use crate::train::TrainSample;
use crate::video::VideoTensor;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub id: String,
    #[serde(default)]
    pub prompt: String,
    pub frames: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub clips: Vec<ClipEntry>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::contract(format!("cannot read {}: {e}", path.display())))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        crate::ensure!(
            !manifest.clips.is_empty(),
            "dataset {} lists no clips",
            root.display()
        );
        for c in &manifest.clips {
            crate::ensure!(
                !c.id.is_empty() && !c.id.contains(['/', '\\']) && c.id != "..",
                "invalid clip id `{}`",
                c.id
            );
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    /// Writes a clip's frames (and features, when given) and appends it to the manifest.
    pub fn create_clip(
        root: &Path,
        entry: &ClipEntry,
        video: &VideoTensor,
        features: Option<&FeatureGrid>,
    ) -> Result<()> {
        crate::ensure!(
            video.frames() == entry.frames,
            "clip `{}` declares {} frames but has {}",
            entry.id,
            entry.frames,
            video.frames()
        );
        let dir = root.join(&entry.id);
        video.save_pngs(&dir.join("frames"))?;
        if let Some(f) = features {
            save_features(f, &dir.join("features.cdkt"))?;
        }
        let path = root.join("manifest.json");
        let mut manifest: DatasetManifest = match fs::read_to_string(&path) {
            Ok(t) => serde_json::from_str(&t)?,
            Err(_) => DatasetManifest::default(),
        };
        manifest.clips.retain(|c| c.id != entry.id);
        manifest.clips.push(entry.clone());
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn clips(&self) -> &[ClipEntry] {
        &self.manifest.clips
    }

    pub fn clip_dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    pub fn load_video(&self, clip: &ClipEntry) -> Result<VideoTensor> {
        VideoTensor::load_pngs(&self.clip_dir(&clip.id).join("frames"), clip.frames)
    }

    pub fn features_path(&self, clip: &ClipEntry) -> PathBuf {
        self.clip_dir(&clip.id).join("features.cdkt")
    }

    /// Cached features, if present.
    pub fn load_features(&self, clip: &ClipEntry, patch: usize) -> Result<Option<FeatureGrid>> {
        let p = self.features_path(clip);
        if !p.exists() {
            return Ok(None);
        }
        let f = load_features(&p, patch)?;
        crate::ensure!(
            f.frames() == clip.frames,
            "features for clip `{}` have {} frames, clip has {}",
            clip.id,
            f.frames(),
            clip.frames
        );
        Ok(Some(f))
    }
}

/// Draws `pairs_per_clip` appearance-augmented pairs for every clip. The
/// prompt of each sample carries its augmentation keyword.
pub fn build_samples(
    ds: &Dataset,
    builder: &PairBuilder<'_>,
    weights: &GroupWeights,
    text_dim: usize,
    pairs_per_clip: usize,
    seed: u64,
    dtype: DType,
) -> Result<Vec<TrainSample>> {
    weights.validate()?;
    let text = ToyTextEncoder { dim: text_dim };
    let device: &Device = &builder.device;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for clip in ds.clips() {
        let video = ds.load_video(clip)?;
        for i in 0..pairs_per_clip {
            let pair = builder.build_pair(&video, sample_group(weights, &mut rng), &mut rng)?;
            let prompt = build_prompt(&clip.prompt, &pair.style_keyword)?;
            out.push(TrainSample {
                id: format!("{}#{i}", clip.id),
                latents: pair.target_latents.tensor().to_dtype(dtype)?,
                features: pair.features.to_tensor(dtype, device)?,
                text: text.encode(&prompt, dtype, device)?,
                first_frame: true,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_id_validation() {
        let dir = tempfile::tempdir().unwrap();
        let v = VideoTensor::synthetic(5, 16, 16, 3).unwrap();
        let e = ClipEntry {
            id: "a".into(),
            prompt: "x".into(),
            frames: 5,
        };
        Dataset::create_clip(dir.path(), &e, &v, None).unwrap();
        Dataset::create_clip(dir.path(), &e, &v, None).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.clips(), std::slice::from_ref(&e));
        assert_eq!(ds.load_video(&e).unwrap().data(), v.quantized().data());
        assert!(ds.load_features(&e, 16).unwrap().is_none());

        fs::write(
            dir.path().join("manifest.json"),
            r#"{"clips":[{"id":"../x","frames":5}]}"#,
        )
        .unwrap();
        assert!(Dataset::open(dir.path()).is_err());
    }
}
