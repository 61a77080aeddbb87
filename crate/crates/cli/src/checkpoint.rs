//! Binary checkpoint: an 8-byte magic, a little-endian `u64` manifest length,
//! the JSON manifest, then every parameter tensor as little-endian `f32` in
//! manifest order.

use std::fs;
use std::path::Path;

use metaquant::hypernet::{HypernetConfig, MetaQuantNet};
use metaquant::target_net::{builtin_spec, TargetNetSpec};
use metaquant::{BitRange, BitwidthPolicy};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"MQNTCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
    /// Length in bytes.
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub target: String,
    pub input_shape: Vec<usize>,
    pub class_count: usize,
    pub bit_range: BitRange,
    pub hidden: usize,
    pub ste_clip: f32,
    /// The fixed policy a retrained network was trained under.
    pub policy: Option<BitwidthPolicy>,
    /// Training-split loss recorded at the end of the run that wrote this.
    pub final_loss: Option<f64>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub target: String,
    pub input_shape: Vec<usize>,
    pub class_count: usize,
    pub bit_range: BitRange,
    pub policy: Option<BitwidthPolicy>,
    pub final_loss: Option<f64>,
    pub net: MetaQuantNet,
}

impl Checkpoint {
    pub fn spec(&self) -> Result<TargetNetSpec> {
        Ok(builtin_spec(&self.target, &self.input_shape, self.class_count)?)
    }

    pub fn manifest(&self) -> Manifest {
        let config = self.net.config();
        let mut offset = 0u64;
        let tensors = self
            .net
            .named_params()
            .into_iter()
            .map(|(name, t)| {
                let length = 4 * t.len() as u64;
                let entry = TensorEntry { name, shape: t.shape().to_vec(), offset, length };
                offset += length;
                entry
            })
            .collect();
        Manifest {
            format_version: FORMAT_VERSION,
            target: self.target.clone(),
            input_shape: self.input_shape.clone(),
            class_count: self.class_count,
            bit_range: self.bit_range,
            hidden: config.hidden,
            ste_clip: config.ste_clip,
            policy: self.policy.clone(),
            final_loss: self.final_loss,
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest()).expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + manifest.len() + 4 * self.net.param_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, t) in self.net.named_params() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: String| CliError::format(path, m);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (missing magic)".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..).unwrap_or_default();
        if body.len() < len {
            return Err(bad(format!("manifest length {len} exceeds file size")));
        }
        let manifest: Manifest =
            serde_json::from_slice(&body[..len]).map_err(|e| bad(format!("manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {}", manifest.format_version)));
        }
        let payload = &body[len..];

        let mut expected = 0u64;
        for t in &manifest.tensors {
            let elements: usize = t.shape.iter().product();
            if t.offset != expected || t.length != 4 * elements as u64 {
                return Err(bad(format!("tensor {} does not tile the payload", t.name)));
            }
            expected += t.length;
        }
        if expected != payload.len() as u64 {
            return Err(bad(format!("payload holds {} bytes, manifest describes {expected}", payload.len())));
        }

        let spec = builtin_spec(&manifest.target, &manifest.input_shape, manifest.class_count)?;
        let config = HypernetConfig { hidden: manifest.hidden, ste_clip: manifest.ste_clip };
        let mut net = MetaQuantNet::new(&spec, config, 0)?;
        let names: Vec<(String, Vec<usize>)> =
            net.named_params().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        if names.len() != manifest.tensors.len() {
            return Err(bad(format!("expected {} tensors, found {}", names.len(), manifest.tensors.len())));
        }
        for (((name, shape), entry), dst) in names.iter().zip(&manifest.tensors).zip(net.params_mut()) {
            if *name != entry.name || *shape != entry.shape {
                return Err(bad(format!("tensor {} {:?} where {name} {shape:?} was expected", entry.name, entry.shape)));
            }
            let raw = &payload[entry.offset as usize..(entry.offset + entry.length) as usize];
            for (v, chunk) in dst.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
                *v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            }
        }
        Ok(Checkpoint {
            target: manifest.target,
            input_shape: manifest.input_shape,
            class_count: manifest.class_count,
            bit_range: manifest.bit_range,
            policy: manifest.policy,
            final_loss: manifest.final_loss,
            net,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(CliError::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(CliError::io(path))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let spec = builtin_spec("mlp-3", &[2], 3).unwrap();
        let net = MetaQuantNet::new(&spec, HypernetConfig { hidden: 6, ste_clip: 1.0 }, 4).unwrap();
        Checkpoint {
            target: "mlp-3".into(),
            input_shape: vec![2],
            class_count: 3,
            bit_range: BitRange::new(1, 5).unwrap(),
            policy: Some(BitwidthPolicy::new(vec![2, 1, 8]).unwrap()),
            final_loss: Some(0.123_456_789_012_345),
            net,
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ckpt = sample();
        let back = Checkpoint::from_bytes(&ckpt.to_bytes(), Path::new("x")).unwrap();
        assert_eq!(back, ckpt);
        for ((_, a), (_, b)) in ckpt.net.named_params().iter().zip(back.net.named_params()) {
            let bits = |t: &metaquant::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn descriptors_tile_payload() {
        let ckpt = sample();
        let m = ckpt.manifest();
        let total: u64 = m.tensors.iter().map(|t| t.length).sum();
        assert_eq!(total, 4 * ckpt.net.param_count() as u64);
        assert_eq!(m.tensors[0].offset, 0);
        assert_eq!(m.tensors[0].name, "block0.fc1.weight");
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample().to_bytes();
        let p = Path::new("x");
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], p).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(Checkpoint::from_bytes(&wrong, p).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..12], p).is_err());
    }
}
