//! Checkpoint container.
//!
//! Layout: magic `FSCK`, `u32` format version, `u64` header length, UTF-8
//! JSON header, then every parameter tensor as a flat block of
//! little-endian `f64` in layer order. All integers are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dense::{numel, Tensor};
use super::nn::{LayerSpec, Network};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Describes the random stream a run was using when the checkpoint was cut.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngDescriptor {
    pub algorithm: String,
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub split: usize,
    pub param_shapes: Vec<Vec<usize>>,
    pub rng: Option<RngDescriptor>,
    /// Free-form run metadata (learner settings, config fingerprint).
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub rng: Option<RngDescriptor>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(network: Network) -> Self {
        Checkpoint {
            network,
            rng: None,
            meta: serde_json::Value::Null,
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let net = &self.network;
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            input_shape: net.input_shape().to_vec(),
            layers: net.layers().to_vec(),
            split: net.split(),
            param_shapes: net.params().iter().map(|p| p.shape().to_vec()).collect(),
            rng: self.rng.clone(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for p in net.params() {
            for v in p.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let mut b4 = [0u8; 4];
        read_exact(&mut r, &mut b4, "version")?;
        let version = u32::from_le_bytes(b4);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut b8 = [0u8; 8];
        read_exact(&mut r, &mut b8, "header length")?;
        let len = u64::from_le_bytes(b8) as usize;
        let mut json = vec![0u8; len];
        read_exact(&mut r, &mut json, "header")?;
        let header: CheckpointHeader = serde_json::from_slice(&json)?;
        if header.version != version {
            return Err(Error::Format("header version disagrees with container".into()));
        }
        let mut params = Vec::with_capacity(header.param_shapes.len());
        for shape in &header.param_shapes {
            let n = numel(shape);
            let mut buf = vec![0u8; n * 8];
            read_exact(&mut r, &mut buf, "parameter block")?;
            let data = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            params.push(Tensor::new(shape.clone(), data)?);
        }
        let network = Network::from_parts(header.input_shape, header.layers, header.split, params)?;
        Ok(Checkpoint {
            network,
            rng: header.rng,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Checkpoint::read_from(std::io::BufReader::new(f))
    }
}

pub(crate) fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated {what}")),
        _ => Error::Io(e),
    })
}
