//! Model checkpoints: a text header (kind, format version, seed, tensor
//! table, embedded experiment config, content hash) and a little-endian f32
//! parameter blob. The hash covers the header lines and the blob, so any
//! edit to either is caught on load.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::DType;
use sha2::{Digest, Sha256};

use crate::conditioning::SceneEncoder;
use crate::config::ExperimentConfig;
use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::format::{check_payload, push_f32s, read_f32s, read_file, Header};
use crate::nn::{ParamStore, TensorMeta};
use crate::vae::VaeModel;

pub const CHECKPOINT_MAGIC: &str = "egodiff-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
const HASH_KEY: &str = "content_hash";
const CONFIG_PREFIX: &str = "config.";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Vae,
    Denoiser,
    SceneEncoder,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Vae => "vae",
            ModelKind::Denoiser => "denoiser",
            ModelKind::SceneEncoder => "scene-encoder",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vae" => Ok(ModelKind::Vae),
            "denoiser" => Ok(ModelKind::Denoiser),
            "scene-encoder" => Ok(ModelKind::SceneEncoder),
            _ => Err(Error::CorruptHeader(format!("unknown model kind '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub seed: u64,
    /// Build that wrote the file.
    pub producer: String,
    pub config: ExperimentConfig,
    pub tensors: Vec<TensorMeta>,
    pub blob: Vec<f32>,
}

fn shape_text(shape: &[usize]) -> String {
    if shape.is_empty() {
        "-".into()
    } else {
        shape
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join("x")
    }
}

fn parse_tensor(line: &str) -> Result<TensorMeta> {
    let bad = || Error::CorruptHeader(format!("malformed tensor line '{line}'"));
    let (name, shape) = line.rsplit_once(' ').ok_or_else(bad)?;
    let shape = if shape == "-" {
        vec![]
    } else {
        shape
            .split('x')
            .map(|d| d.parse().map_err(|_| bad()))
            .collect::<Result<_>>()?
    };
    Ok(TensorMeta {
        name: name.to_string(),
        shape,
    })
}

impl Checkpoint {
    pub fn from_store(
        kind: ModelKind,
        seed: u64,
        config: &ExperimentConfig,
        store: &ParamStore,
    ) -> Result<Self> {
        Ok(Self {
            kind,
            seed,
            producer: crate::VERSION.to_string(),
            config: config.clone(),
            tensors: store.metas(),
            blob: store.to_f32()?,
        })
    }

    fn header_without_hash(&self) -> Header {
        let mut h = Header::default();
        h.push("format_version", CHECKPOINT_VERSION);
        h.push("kind", self.kind);
        h.push("seed", self.seed);
        h.push("version", &self.producer);
        h.push("tensors", self.tensors.len());
        for t in &self.tensors {
            h.push("tensor", format!("{} {}", t.name, shape_text(&t.shape)));
        }
        for (k, v) in self.config.entries() {
            h.push(&format!("{CONFIG_PREFIX}{k}"), v);
        }
        h
    }

    fn digest(header: &Header, payload: &[u8]) -> String {
        let mut sha = Sha256::new();
        sha.update(header.encode(CHECKPOINT_MAGIC).as_bytes());
        sha.update(payload);
        hex::encode(sha.finalize())
    }

    pub fn content_hash(&self) -> String {
        let mut payload = Vec::new();
        push_f32s(&mut payload, &self.blob);
        Self::digest(&self.header_without_hash(), &payload)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        push_f32s(&mut payload, &self.blob);
        let mut h = self.header_without_hash();
        let hash = Self::digest(&h, &payload);
        h.push(HASH_KEY, hash);
        let mut out = h.encode(CHECKPOINT_MAGIC).into_bytes();
        out.extend_from_slice(&payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (h, payload) = Header::decode(bytes, CHECKPOINT_MAGIC)?;
        let version: u32 = h.parse("format_version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionSkew {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let kind: ModelKind = h.get("kind")?.parse()?;
        let seed: u64 = h.parse("seed")?;
        let producer = h.get("version")?.to_string();
        let count: usize = h.parse("tensors")?;
        let tensors = h
            .all("tensor")
            .into_iter()
            .map(parse_tensor)
            .collect::<Result<Vec<_>>>()?;
        if tensors.len() != count {
            return Err(Error::CorruptHeader(format!(
                "header declares {count} tensors but lists {}",
                tensors.len()
            )));
        }
        let mut config = ExperimentConfig::default();
        for (k, v) in h.entries() {
            if let Some(key) = k.strip_prefix(CONFIG_PREFIX) {
                config
                    .set(key, v)
                    .map_err(|e| Error::CorruptHeader(format!("embedded config: {e}")))?;
            }
        }
        let mut values = 0usize;
        for t in &tensors {
            values = t
                .shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| values.checked_add(n))
                .ok_or_else(|| Error::CorruptHeader("tensor sizes overflow".into()))?;
        }
        check_payload(payload, values)?;
        let expected = h.get(HASH_KEY)?.to_string();
        let mut stripped = Header::default();
        for (k, v) in h.entries().iter().filter(|(k, _)| k != HASH_KEY) {
            stripped.push(k, v);
        }
        let computed = Self::digest(&stripped, payload);
        if computed != expected {
            return Err(Error::HashMismatch { expected, computed });
        }
        let ckpt = Self {
            kind,
            seed,
            producer,
            config,
            tensors,
            blob: read_f32s(payload),
        };
        // Header lines must be exactly the canonical ones, or the re-encoded
        // file would differ from the one that was hashed.
        if ckpt.header_without_hash() != stripped {
            return Err(Error::CorruptHeader(
                "header lines are not in canonical form".into(),
            ));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path, "checkpoint")?)
    }

    pub fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Precondition(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )))
        }
    }

    pub fn to_vae(&self) -> Result<VaeModel> {
        self.expect_kind(ModelKind::Vae)?;
        let vae = VaeModel::new(self.config.vae_model(), self.seed, DType::F32)?;
        vae.params().load_f32(&self.tensors, &self.blob)?;
        Ok(vae)
    }

    pub fn to_denoiser(&self) -> Result<Denoiser> {
        self.expect_kind(ModelKind::Denoiser)?;
        let den = Denoiser::new(self.config.denoiser_model(), self.seed, DType::F32)?;
        den.params().load_f32(&self.tensors, &self.blob)?;
        Ok(den)
    }

    pub fn to_scene_encoder(&self) -> Result<SceneEncoder> {
        self.expect_kind(ModelKind::SceneEncoder)?;
        let enc = SceneEncoder::new(self.config.scene_encoder(), self.seed, DType::F32)?;
        enc.params().load_f32(&self.tensors, &self.blob)?;
        Ok(enc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (ExperimentConfig, VaeModel) {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_overrides([
            ("frames", "4"),
            ("latent_dim", "8"),
            ("vae_layers", "1"),
            ("vae_ff_dim", "8"),
        ])
        .unwrap();
        let vae = VaeModel::new(cfg.vae_model(), 3, DType::F32).unwrap();
        (cfg, vae)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (cfg, vae) = tiny();
        let ck = Checkpoint::from_store(ModelKind::Vae, 3, &cfg, vae.params()).unwrap();
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode(), bytes);
        let restored = back.to_vae().unwrap();
        assert_eq!(
            restored.params().hash("").unwrap(),
            vae.params().hash("").unwrap()
        );
        assert!(matches!(back.to_denoiser(), Err(Error::Precondition(_))));
    }

    #[test]
    fn tampering_is_detected() {
        let (cfg, vae) = tiny();
        let bytes = Checkpoint::from_store(ModelKind::Vae, 3, &cfg, vae.params())
            .unwrap()
            .encode();
        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 0x01;
        assert!(matches!(
            Checkpoint::decode(&flipped),
            Err(Error::HashMismatch { .. })
        ));
        let text = String::from_utf8_lossy(&bytes[..60]).to_string();
        let skew = text.replacen("format_version: 1", "format_version: 2", 1);
        let mut b = skew.into_bytes();
        b.extend_from_slice(&bytes[60..]);
        assert!(matches!(
            Checkpoint::decode(&b),
            Err(Error::VersionSkew {
                found: 2,
                supported: 1
            })
        ));
        assert!(matches!(
            Checkpoint::decode(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated { .. })
        ));
        let header_len = bytes
            .windows(11)
            .position(|w| w == b"end_header\n")
            .unwrap()
            + 11;
        let header = std::str::from_utf8(&bytes[..header_len]).unwrap();
        let mut b = header
            .replacen("config.kappa: 0.9", "config.kappa: 0.8", 1)
            .into_bytes();
        b.extend_from_slice(&bytes[header_len..]);
        assert!(matches!(
            Checkpoint::decode(&b),
            Err(Error::HashMismatch { .. })
        ));
    }

    #[test]
    fn tensor_lines() {
        let m = parse_tensor("enc.block0.attn.q.weight 8x8").unwrap();
        assert_eq!(m.shape, vec![8, 8]);
        assert_eq!(parse_tensor("s -").unwrap().shape, Vec::<usize>::new());
        assert!(parse_tensor("bad 8xq").is_err());
    }
}
