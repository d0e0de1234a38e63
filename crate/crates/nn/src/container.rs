//! Flat binary container for weights and cached datasets.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "STEERBO\0"
//! version  u32      1
//! length   u64      byte length of the manifest
//! manifest JSON     {"meta": …, "arrays": [{"name": …, "shape": […]}, …]}
//! payload  f64 LE   each array row-major, in manifest order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{ArchitectureDescriptor, Network};
use crate::{NnError, Tensor};

pub const MAGIC: &[u8; 8] = b"STEERBO\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub arrays: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { meta, arrays: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.arrays.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), NnError> {
        let manifest = Manifest {
            meta: self.meta.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|(name, t)| ArrayEntry { name: name.clone(), shape: t.shape().to_vec() })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| NnError::Data(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, t) in &self.arrays {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, NnError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NnError::Data("not a steerbo container (bad magic)".into()));
        }
        let mut u32b = [0u8; 4];
        r.read_exact(&mut u32b)?;
        let version = u32::from_le_bytes(u32b);
        if version != VERSION {
            return Err(NnError::Data(format!("unsupported container version {version}")));
        }
        let mut u64b = [0u8; 8];
        r.read_exact(&mut u64b)?;
        let len = u64::from_le_bytes(u64b) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let manifest: Manifest = serde_json::from_slice(&json).map_err(|e| NnError::Data(e.to_string()))?;
        let mut arrays = Vec::with_capacity(manifest.arrays.len());
        let mut buf = [0u8; 8];
        for entry in manifest.arrays {
            let n: usize = entry.shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            arrays.push((entry.name, Tensor::new(&entry.shape, data)?));
        }
        Ok(Self { meta: manifest.meta, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// Serializes weights plus batch-norm running statistics.
pub fn network_to_container(net: &Network) -> Container {
    let meta = serde_json::json!({
        "kind": "network",
        "architecture": net.descriptor(),
    });
    let mut c = Container::new(meta);
    for (name, t) in net.param_names().into_iter().zip(net.params()) {
        let plain = Tensor::new(t.shape(), t.data().to_vec()).expect("same shape");
        c.push(name, plain);
    }
    for (name, b) in net.buffers() {
        let len = b.len();
        c.push(name, Tensor::new(&[len], b).expect("1-d"));
    }
    c
}

/// Rebuilds a network, checking that the stored architecture equals
/// `expected` when given.
pub fn network_from_container(c: &Container, expected: Option<&ArchitectureDescriptor>) -> Result<Network, NnError> {
    if c.meta.get("kind").and_then(|v| v.as_str()) != Some("network") {
        return Err(NnError::Data("container does not hold network weights".into()));
    }
    let arch: ArchitectureDescriptor = serde_json::from_value(c.meta["architecture"].clone())
        .map_err(|e| NnError::Data(format!("bad architecture manifest: {e}")))?;
    if let Some(exp) = expected {
        if exp != &arch {
            return Err(NnError::Config(format!(
                "weights were saved for architecture '{}' with input {:?}, requested '{}' with input {:?}",
                arch.name, arch.input_shape, exp.name, exp.input_shape
            )));
        }
    }
    let mut net = Network::from_descriptor(&arch, 0)?;
    let names = net.param_names();
    for (name, slot) in names.iter().zip(net.params_mut()) {
        let t = c.get(name).ok_or_else(|| NnError::Data(format!("missing tensor {name}")))?;
        if t.shape() != slot.shape() {
            return Err(NnError::Config(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        slot.data_mut().copy_from_slice(t.data());
    }
    for (name, _) in net.buffers() {
        let t = c.get(&name).ok_or_else(|| NnError::Data(format!("missing buffer {name}")))?.clone();
        net.set_buffer(&name, t.data())?;
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_jnet, build_stlstm, JNetConfig, StLstmConfig};

    #[test]
    fn network_roundtrip_preserves_weights() {
        let desc = build_stlstm(&StLstmConfig::default(), [3, 8, 8, 1]).unwrap();
        let net = Network::from_descriptor(&desc, 42).unwrap();
        let mut bytes = Vec::new();
        network_to_container(&net).write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = network_from_container(&Container::read_from(&bytes[..]).unwrap(), Some(&desc)).unwrap();
        assert_eq!(back.weights_digest(), net.weights_digest());
    }

    #[test]
    fn architecture_mismatch_is_rejected() {
        let desc = build_stlstm(&StLstmConfig::default(), [3, 8, 8, 1]).unwrap();
        let net = Network::from_descriptor(&desc, 1).unwrap();
        let c = network_to_container(&net);
        let other = build_jnet(
            &JNetConfig { conv_maps: [2, 2, 2], conv_kernels: [1, 1, 1], ..JNetConfig::default() },
            [3, 8, 8, 1],
        )
        .unwrap();
        assert!(matches!(network_from_container(&c, Some(&other)), Err(NnError::Config(_))));
    }

    #[test]
    fn bad_magic_is_rejected() {
        assert!(Container::read_from(&b"NOTMAGIC\x01\0\0\0"[..]).is_err());
    }
}
