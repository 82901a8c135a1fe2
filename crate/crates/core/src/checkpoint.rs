//! Checkpoints: a tar archive holding `manifest.json` and one tensor file per
//! parameter and optimizer moment, each with a sha256 checksum.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::ToyBackbone;
use crate::model::{ControlledModel, ModelConfig};
use crate::params::ParamSet;
use crate::tensor_io::{self, RawTensor};
use crate::train::{AdamW, TrainConfig, TrainState};
use crate::{Error, Result};

pub const FORMAT: &str = "cdk-checkpoint/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Backbone,
    Trainable,
    AdamM,
    AdamV,
}

impl EntryKind {
    fn dir(self) -> &'static str {
        match self {
            Self::Backbone => "backbone",
            Self::Trainable => "trainable",
            Self::AdamM => "adam_m",
            Self::AdamV => "adam_v",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub kind: EntryKind,
    pub file: String,
    pub shape: Vec<usize>,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub step: usize,
    pub optimizer_step: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub backbone_checksum: String,
    pub entries: Vec<Entry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    crate::hex(&Sha256::digest(bytes))
}

fn append(builder: &mut tar::Builder<Vec<u8>>, path: &str, data: &[u8]) -> Result<()> {
    let mut h = tar::Header::new_gnu();
    h.set_size(data.len() as u64);
    h.set_mode(0o644);
    h.set_mtime(0);
    h.set_uid(0);
    h.set_gid(0);
    h.set_entry_type(tar::EntryType::Regular);
    builder.append_data(&mut h, path, data)?;
    Ok(())
}

/// Writes the full training state. Tensors are stored as `f32`.
pub fn save_checkpoint(state: &TrainState, train: &TrainConfig, path: &Path) -> Result<Manifest> {
    crate::ensure!(
        state.model.dtype() == DType::F32,
        "checkpoints store f32 tensors; model is {:?}",
        state.model.dtype()
    );
    let mut files: Vec<(String, Vec<u8>)> = Vec::new();
    let mut entries = Vec::new();
    let mut push = |kind: EntryKind, name: &str, t: &Tensor| -> Result<()> {
        let raw = RawTensor::from_tensor(t)?;
        let bytes = tensor_io::encode(&raw);
        let file = format!("{}/{name}.cdkt", kind.dir());
        entries.push(Entry {
            name: name.to_string(),
            kind,
            file: file.clone(),
            shape: raw.shape,
            sha256: sha256_hex(&bytes),
        });
        files.push((file, bytes));
        Ok(())
    };
    for (n, t) in state.model.backbone().params().tensors() {
        push(EntryKind::Backbone, n, t)?;
    }
    for (n, t) in state.model.trainable().tensors() {
        push(EntryKind::Trainable, n, t)?;
    }
    for (n, t) in &state.optimizer.m {
        push(EntryKind::AdamM, n, t)?;
    }
    for (n, t) in &state.optimizer.v {
        push(EntryKind::AdamV, n, t)?;
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        step: state.step,
        optimizer_step: state.optimizer.step,
        model: state.model.config().clone(),
        train: train.clone(),
        backbone_checksum: state.model.backbone().params().checksum()?,
        entries,
    };
    let mut builder = tar::Builder::new(Vec::new());
    append(
        &mut builder,
        "manifest.json",
        &serde_json::to_vec_pretty(&manifest)?,
    )?;
    for (file, bytes) in &files {
        append(&mut builder, file, bytes)?;
    }
    let archive = builder.into_inner()?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, archive)?;
    fs::rename(&tmp, path)?;
    Ok(manifest)
}

fn read_archive(path: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
    let bytes = fs::read(path)?;
    let mut archive = tar::Archive::new(bytes.as_slice());
    let mut out = BTreeMap::new();
    for entry in archive.entries()? {
        let mut entry = entry?;
        let name = entry.path()?.to_string_lossy().into_owned();
        let mut data = Vec::new();
        entry.read_to_end(&mut data)?;
        out.insert(name, data);
    }
    Ok(out)
}

/// Restores a state saved by [`save_checkpoint`]; every tensor is verified
/// before anything is built.
pub fn load_checkpoint(path: &Path, device: &Device) -> Result<(TrainState, TrainConfig)> {
    let files = read_archive(path)?;
    let manifest: Manifest = serde_json::from_slice(
        files
            .get("manifest.json")
            .ok_or_else(|| Error::contract("checkpoint has no manifest.json"))?,
    )?;
    crate::ensure!(
        manifest.format == FORMAT,
        "unsupported checkpoint format `{}`",
        manifest.format
    );
    let mut groups: BTreeMap<EntryKind, BTreeMap<String, RawTensor>> = BTreeMap::new();
    for e in &manifest.entries {
        let bytes = files.get(&e.file).ok_or_else(|| {
            Error::contract(format!(
                "tensor `{}` missing from archive ({})",
                e.name, e.file
            ))
        })?;
        if sha256_hex(bytes) != e.sha256 {
            return Err(Error::contract(format!(
                "checksum mismatch for tensor `{}`",
                e.name
            )));
        }
        let raw = tensor_io::decode(bytes)
            .map_err(|err| Error::contract(format!("tensor `{}`: {err}", e.name)))?;
        crate::ensure!(
            raw.shape == e.shape,
            "tensor `{}` has shape {:?}, manifest says {:?}",
            e.name,
            raw.shape,
            e.shape
        );
        groups
            .entry(e.kind)
            .or_default()
            .insert(e.name.clone(), raw);
    }
    let take = |groups: &mut BTreeMap<EntryKind, BTreeMap<String, RawTensor>>, k| {
        groups.remove(&k).unwrap_or_default()
    };
    let cfg = manifest.model.clone();
    let dtype = DType::F32;
    let backbone_raw = take(&mut groups, EntryKind::Backbone);
    let backbone_params = ParamSet::from_raw(
        &ToyBackbone::param_specs(&cfg.backbone),
        &backbone_raw,
        dtype,
        device,
        false,
    )?;
    let backbone = ToyBackbone::from_params(cfg.backbone.clone(), backbone_params)?;
    crate::ensure!(
        backbone.params().checksum()? == manifest.backbone_checksum,
        "backbone checksum does not match the manifest"
    );
    let trainable_raw = take(&mut groups, EntryKind::Trainable);
    let trainable =
        ParamSet::from_raw(&cfg.trainable_specs(), &trainable_raw, dtype, device, true)?;
    let model = ControlledModel::from_parts(cfg, backbone, trainable)?;

    let moments = |raw: BTreeMap<String, RawTensor>| -> Result<BTreeMap<String, Tensor>> {
        raw.into_iter()
            .map(|(n, r)| {
                crate::ensure!(
                    model.trainable().get(&n).is_ok(),
                    "optimizer state for unknown tensor `{n}`"
                );
                Ok((n, r.to_tensor(dtype, device)?))
            })
            .collect()
    };
    let mut optimizer = AdamW::new(&manifest.train);
    optimizer.step = manifest.optimizer_step;
    optimizer.m = moments(take(&mut groups, EntryKind::AdamM))?;
    optimizer.v = moments(take(&mut groups, EntryKind::AdamV))?;
    Ok((
        TrainState {
            model,
            optimizer,
            step: manifest.step,
        },
        manifest.train,
    ))
}

/// Loads only the model, for inference.
pub fn load_model(path: &Path, device: &Device) -> Result<ControlledModel> {
    Ok(load_checkpoint(path, device)?.0.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::fit;
    use crate::train::tests::tiny;

    fn cfg() -> TrainConfig {
        TrainConfig {
            warmup_steps: 1,
            total_steps: 20,
            batch_size: 1,
            lr_peak: 1e-3,
            ..Default::default()
        }
    }

    #[test]
    fn resume_matches_uninterrupted_training() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.tar");
        let data = [tiny().1];

        let mut straight = TrainState::new(tiny().0, &cfg());
        let full: Vec<f64> = fit(&mut straight, &data, &cfg(), 10, None)
            .unwrap()
            .iter()
            .map(|m| m.loss)
            .collect();

        let mut first = TrainState::new(tiny().0, &cfg());
        let mut resumed: Vec<f64> = fit(&mut first, &data, &cfg(), 5, None)
            .unwrap()
            .iter()
            .map(|m| m.loss)
            .collect();
        save_checkpoint(&first, &cfg(), &path).unwrap();
        let (mut second, c) = load_checkpoint(&path, &Device::Cpu).unwrap();
        assert_eq!(c, cfg());
        resumed.extend(
            fit(&mut second, &data, &c, 5, None)
                .unwrap()
                .iter()
                .map(|m| m.loss),
        );
        assert_eq!(full, resumed);
        assert_eq!(
            straight.model.trainable().checksum().unwrap(),
            second.model.trainable().checksum().unwrap()
        );
    }

    #[test]
    fn loaded_model_predicts_like_the_trained_one() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.tar");
        let data = [tiny().1];
        let mut s = TrainState::new(tiny().0, &cfg());
        fit(&mut s, &data, &cfg(), 5, None).unwrap();
        save_checkpoint(&s, &cfg(), &path).unwrap();
        let (l, _) = load_checkpoint(&path, &Device::Cpu).unwrap();
        let a = crate::train::eval_loss(&s.model, &data[0], 2, 0).unwrap();
        let b = crate::train::eval_loss(&l.model, &data[0], 2, 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn archive_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let s = TrainState::new(tiny().0, &cfg());
        save_checkpoint(&s, &cfg(), &dir.path().join("a.tar")).unwrap();
        save_checkpoint(&s, &cfg(), &dir.path().join("b.tar")).unwrap();
        assert_eq!(
            fs::read(dir.path().join("a.tar")).unwrap(),
            fs::read(dir.path().join("b.tar")).unwrap()
        );
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.tar");
        let s = TrainState::new(tiny().0, &cfg());
        save_checkpoint(&s, &cfg(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        // Flip a byte well past the manifest, inside some tensor payload.
        let n = bytes.len();
        bytes[n / 2] ^= 0xff;
        fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path, &Device::Cpu)
            .unwrap_err()
            .to_string();
        assert!(
            err.contains("tensor") || err.contains("json") || err.contains("i/o"),
            "{err}"
        );
    }
}
