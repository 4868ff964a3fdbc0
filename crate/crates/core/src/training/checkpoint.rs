//! Checkpoint container.
//!
//! Layout: `CDS1`, a little-endian `u64` manifest length, the JSON manifest,
//! the tensor blocks (each a complete `CDS1` tensor) in manifest order, and a
//! SHA-256 digest of everything before it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::{OptimConfig, OptimizerState};
use crate::ctensor::io::{decode_tensor, encode_tensor, AnyTensor, MAGIC};
use crate::ctensor::{ComplexTensor, Real};
use crate::models::{ModelConfig, ModelGraph};
use crate::{CdsError, Result};

const DIGEST_LEN: usize = 32;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSnapshot {
    pub config: OptimConfig,
    pub step: u64,
    pub m: Vec<AnyTensor>,
    pub v: Vec<AnyTensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub step: u64,
    /// Every parameter and buffer, named `layer.param`, in model order.
    pub params: Vec<(String, AnyTensor)>,
    pub optimizer: Option<OptimizerSnapshot>,
    /// SHA-256 of the metrics CSV written up to `step`.
    pub metrics_digest: String,
}

#[derive(Serialize, Deserialize)]
struct Block {
    name: String,
    role: String,
    bytes: usize,
}

#[derive(Serialize, Deserialize)]
struct OptimManifest {
    config: OptimConfig,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    container: String,
    model: ModelConfig,
    step: u64,
    metrics_digest: String,
    optimizer: Option<OptimManifest>,
    blocks: Vec<Block>,
}

fn real_block<T: Real>(v: &[T]) -> AnyTensor {
    let t = ComplexTensor::from_planes(&[v.len()], v.to_vec(), vec![T::zero(); v.len()]).expect("1-D shape");
    AnyTensor::from_tensor(t)
}

fn real_values<T: Real>(t: &AnyTensor) -> Vec<T> {
    t.clone().into_precision::<T>().re().to_vec()
}

impl Checkpoint {
    pub fn capture<T: Real>(
        model: &ModelGraph<T>,
        optimizer: Option<&OptimizerState<T>>,
        step: u64,
        metrics_digest: &str,
    ) -> Self {
        let params = model
            .layers()
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                l.params().into_iter().map(move |p| (format!("{i}.{}", p.name), AnyTensor::from_tensor(p.value.clone())))
            })
            .collect();
        let optimizer = optimizer.map(|o| OptimizerSnapshot {
            config: o.config,
            step: o.step,
            m: o.m.iter().map(|v| real_block(v)).collect(),
            v: o.v.iter().map(|v| real_block(v)).collect(),
        });
        Self { model: model.config.clone(), step, params, optimizer, metrics_digest: metrics_digest.into() }
    }

    /// Copies the stored parameters into `model`, which must have been built
    /// from the same configuration.
    pub fn restore<T: Real>(&self, model: &mut ModelGraph<T>) -> Result<()> {
        if model.config != self.model {
            return Err(CdsError::ConfigMismatch(format!(
                "checkpoint holds {:?}, model is {:?}",
                self.model, model.config
            )));
        }
        let mut targets: Vec<(String, &mut crate::autodiff::Param<T>)> = model
            .net_mut()
            .layers_mut()
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| l.params_mut().into_iter().map(move |p| (format!("{i}.{}", p.name), p)))
            .collect();
        if targets.len() != self.params.len() {
            return Err(CdsError::ConfigMismatch(format!(
                "checkpoint has {} tensors, model has {}",
                self.params.len(),
                targets.len()
            )));
        }
        for ((name, p), (stored, t)) in targets.iter_mut().zip(&self.params) {
            if name != stored || p.value.shape() != t.shape() {
                return Err(CdsError::ConfigMismatch(format!(
                    "tensor {stored} {:?} does not fit {name} {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone().into_precision();
        }
        Ok(())
    }

    pub fn build_model<T: Real>(&self) -> Result<ModelGraph<T>> {
        let mut m = ModelGraph::build(&self.model)?;
        self.restore(&mut m)?;
        Ok(m)
    }

    pub fn optimizer_state<T: Real>(&self) -> Option<OptimizerState<T>> {
        self.optimizer.as_ref().map(|o| OptimizerState {
            config: o.config,
            step: o.step,
            m: o.m.iter().map(real_values).collect(),
            v: o.v.iter().map(real_values).collect(),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blocks = Vec::new();
        let mut payload = Vec::new();
        let mut push = |name: &str, role: &str, t: &AnyTensor| -> Result<()> {
            let bytes = match t {
                AnyTensor::F32(t) => encode_tensor(t)?,
                AnyTensor::F64(t) => encode_tensor(t)?,
            };
            blocks.push(Block { name: name.into(), role: role.into(), bytes: bytes.len() });
            payload.extend(bytes);
            Ok(())
        };
        for (name, t) in &self.params {
            push(name, "param", t)?;
        }
        if let Some(o) = &self.optimizer {
            for (i, t) in o.m.iter().enumerate() {
                push(&i.to_string(), "m", t)?;
            }
            for (i, t) in o.v.iter().enumerate() {
                push(&i.to_string(), "v", t)?;
            }
        }
        let manifest = Manifest {
            container: "checkpoint".into(),
            model: self.model.clone(),
            step: self.step,
            metrics_digest: self.metrics_digest.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimManifest { config: o.config, step: o.step }),
            blocks,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(12 + json.len() + payload.len() + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend(json);
        out.extend(payload);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |msg: &str| CdsError::CorruptCheckpoint(msg.into());
        if bytes.len() < 12 + DIGEST_LEN || &bytes[..4] != MAGIC {
            return Err(corrupt("file too short or missing CDS1 header"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let len = u64::from_le_bytes(body[4..12].try_into().expect("8 bytes")) as usize;
        let json = body.get(12..12 + len).ok_or_else(|| corrupt("truncated manifest"))?;
        let manifest: Manifest =
            serde_json::from_slice(json).map_err(|e| CdsError::CorruptCheckpoint(format!("manifest: {e}")))?;
        if manifest.container != "checkpoint" {
            return Err(corrupt("not a checkpoint container"));
        }
        let mut pos = 12 + len;
        let mut params = Vec::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for b in &manifest.blocks {
            let raw = body.get(pos..pos + b.bytes).ok_or_else(|| corrupt("truncated tensor block"))?;
            pos += b.bytes;
            let t = decode_tensor(raw).map_err(|e| CdsError::CorruptCheckpoint(format!("block {}: {e}", b.name)))?;
            match b.role.as_str() {
                "param" => params.push((b.name.clone(), t)),
                "m" => m.push(t),
                "v" => v.push(t),
                other => return Err(CdsError::CorruptCheckpoint(format!("unknown block role '{other}'"))),
            }
        }
        if pos != body.len() {
            return Err(corrupt("trailing bytes after the last block"));
        }
        let optimizer = manifest.optimizer.map(|o| OptimizerSnapshot { config: o.config, step: o.step, m, v });
        Ok(Self { model: manifest.model, step: manifest.step, params, optimizer, metrics_digest: manifest.metrics_digest })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Mode;
    use crate::ctensor::{make_tensor, Fill, Rng};
    use crate::models::ModelKind;

    fn small(kind: ModelKind, seed: u64) -> ModelGraph<f32> {
        ModelGraph::build(&ModelConfig::new(kind, 4, 2).image_size(8).seed(seed)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = Rng::new(2);
        let x = make_tensor::<f32>(&[3, 2, 8, 8], Fill::Gaussian { rng: &mut rng, mean: 0.0, std: 1.0 }).unwrap();
        for kind in ModelKind::ALL {
            let mut m = small(kind, 1);
            m.logits(&x, Mode::Train).unwrap();
            let opt = OptimizerState::<f32> { config: OptimConfig::default(), step: 3, m: vec![vec![0.5; 2]], v: vec![vec![0.25; 2]] };
            let ck = Checkpoint::capture(&m, Some(&opt), 7, "abc");
            let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.optimizer_state::<f32>().unwrap(), opt);
            let mut restored = back.build_model::<f32>().unwrap();
            let a = m.logits(&x, Mode::Eval).unwrap();
            let b = restored.logits(&x, Mode::Eval).unwrap();
            assert_eq!(a.data(), b.data(), "{kind}");
        }
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = Checkpoint::capture(&small(ModelKind::TypeI, 0), None, 0, "").to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 10]), Err(CdsError::CorruptCheckpoint(_))));
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(CdsError::CorruptCheckpoint(_))));
        assert!(matches!(Checkpoint::from_bytes(b"CDS1"), Err(CdsError::CorruptCheckpoint(_))));
    }

    #[test]
    fn mismatched_architecture_is_rejected() {
        let ck = Checkpoint::capture(&small(ModelKind::TypeI, 0), None, 0, "");
        let mut other = small(ModelKind::TypeE, 0);
        assert!(matches!(ck.restore(&mut other), Err(CdsError::ConfigMismatch(_))));
        let mut tweaked = ck.clone();
        tweaked.params.pop();
        let mut same = small(ModelKind::TypeI, 0);
        assert!(matches!(tweaked.restore(&mut same), Err(CdsError::ConfigMismatch(_))));
    }
}
