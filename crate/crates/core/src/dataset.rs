//! On-disk episode sets.
//!
//! ```text
//! egodiff-dataset
//! version: 1
//! episodes: 2
//! frames: 60
//! lookahead: 30
//! joints: 24
//! pose_dim: 75
//! points: 1024
//! fps: 30
//! endianness: little
//! episode: seed=... kappa=0.9 scenario=face-to-face floor=-1.62
//! episode: ...
//! end_header
//! ```
//!
//! followed, per episode, by the wearer (`F×V`), the interactee recording
//! (`(F+lookahead)×V`) and the scene (`N×3`) as little-endian f32.

use std::path::Path;

use crate::body::{pose_dim, PoseSequence};
use crate::conditioning::ScenePointCloud;
use crate::error::{invalid, Error, Result};
use crate::format::{check_payload, push_f32s, read_f32s, read_file, Header};
use crate::synth::{EpisodeMeta, InteractionEpisode};

pub const DATASET_MAGIC: &str = "egodiff-dataset";
pub const DATASET_VERSION: u32 = 1;

/// Shape shared by every episode of a file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetShape {
    pub frames: usize,
    pub lookahead: usize,
    pub joints: usize,
    pub points: usize,
    pub fps: f32,
}

impl DatasetShape {
    pub fn of(episodes: &[InteractionEpisode]) -> Result<Self> {
        let first = episodes
            .first()
            .ok_or_else(|| invalid("dataset needs ≥ 1 episode"))?;
        let shape = Self {
            frames: first.frames(),
            lookahead: first.lookahead(),
            joints: first.wearer.joints(),
            points: first.scene.len(),
            fps: first.wearer.fps(),
        };
        for (i, e) in episodes.iter().enumerate() {
            let same = e.frames() == shape.frames
                && e.lookahead() == shape.lookahead
                && e.wearer.joints() == shape.joints
                && e.interactee.joints() == shape.joints
                && e.scene.len() == shape.points
                && e.wearer.fps().to_bits() == shape.fps.to_bits()
                && e.interactee.fps().to_bits() == shape.fps.to_bits();
            if !same {
                return Err(invalid(format!(
                    "episode {i} does not share the shape of episode 0"
                )));
            }
        }
        Ok(shape)
    }

    fn values_per_episode(&self) -> usize {
        let v = pose_dim(self.joints);
        (2 * self.frames + self.lookahead) * v + 3 * self.points
    }
}

fn meta_line(m: &EpisodeMeta) -> String {
    format!(
        "seed={} kappa={} scenario={} floor={}",
        m.seed, m.kappa, m.scenario, m.floor_height
    )
}

fn parse_meta(line: &str) -> Result<EpisodeMeta> {
    let bad = || Error::CorruptHeader(format!("malformed episode line '{line}'"));
    let mut fields = line.split(' ').map(|kv| kv.split_once('=').ok_or_else(bad));
    let mut next = |key: &str| -> Result<&str> {
        match fields.next() {
            Some(Ok((k, v))) if k == key => Ok(v),
            _ => Err(bad()),
        }
    };
    let seed = next("seed")?.parse().map_err(|_| bad())?;
    let kappa = next("kappa")?.parse().map_err(|_| bad())?;
    let scenario = next("scenario")?.parse().map_err(|_| bad())?;
    let floor_height = next("floor")?.parse().map_err(|_| bad())?;
    if fields.next().is_some() {
        return Err(bad());
    }
    Ok(EpisodeMeta {
        seed,
        kappa,
        scenario,
        floor_height,
    })
}

pub fn encode_dataset(episodes: &[InteractionEpisode]) -> Result<Vec<u8>> {
    let shape = DatasetShape::of(episodes)?;
    let mut h = Header::default();
    h.push("version", DATASET_VERSION);
    h.push("episodes", episodes.len());
    h.push("frames", shape.frames);
    h.push("lookahead", shape.lookahead);
    h.push("joints", shape.joints);
    h.push("pose_dim", pose_dim(shape.joints));
    h.push("points", shape.points);
    h.push("fps", shape.fps);
    h.push("endianness", "little");
    for e in episodes {
        h.push("episode", meta_line(&e.meta));
    }
    let mut out = h.encode(DATASET_MAGIC).into_bytes();
    for e in episodes {
        push_f32s(&mut out, e.wearer.as_slice());
        push_f32s(&mut out, e.interactee.as_slice());
        push_f32s(&mut out, e.scene.points().as_flattened());
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<InteractionEpisode>> {
    let (h, payload) = Header::decode(bytes, DATASET_MAGIC)?;
    let version: u32 = h.parse("version")?;
    if version != DATASET_VERSION {
        return Err(Error::VersionSkew {
            found: version,
            supported: DATASET_VERSION,
        });
    }
    if h.get("endianness")? != "little" {
        return Err(Error::CorruptHeader(format!(
            "unsupported endianness '{}'",
            h.get("endianness")?
        )));
    }
    let count: usize = h.parse("episodes")?;
    let shape = DatasetShape {
        frames: h.parse("frames")?,
        lookahead: h.parse("lookahead")?,
        joints: h.parse("joints")?,
        points: h.parse("points")?,
        fps: h.parse("fps")?,
    };
    let v: usize = h.parse("pose_dim")?;
    if shape.joints == 0 || v != pose_dim(shape.joints) {
        return Err(Error::DimensionMismatch(format!(
            "pose_dim {v} does not match {} joints (expected {})",
            shape.joints,
            3 * shape.joints + 3
        )));
    }
    if shape.frames == 0 || shape.points == 0 {
        return Err(Error::CorruptHeader("frames and points must be ≥ 1".into()));
    }
    let metas = h.all("episode");
    if metas.len() != count {
        return Err(Error::CorruptHeader(format!(
            "header declares {count} episodes but lists {}",
            metas.len()
        )));
    }
    let per = shape.values_per_episode();
    let total = count
        .checked_mul(per)
        .ok_or_else(|| Error::CorruptHeader("declared sizes overflow".into()))?;
    check_payload(payload, total)?;
    let values = read_f32s(payload);
    let mut out = Vec::with_capacity(count);
    let wearer_len = shape.frames * v;
    let inter_len = (shape.frames + shape.lookahead) * v;
    for (chunk, meta) in values.chunks_exact(per).zip(metas) {
        let wearer = PoseSequence::new(chunk[..wearer_len].to_vec(), shape.joints, shape.fps)?;
        let interactee = PoseSequence::new(
            chunk[wearer_len..wearer_len + inter_len].to_vec(),
            shape.joints,
            shape.fps,
        )?;
        let points = chunk[wearer_len + inter_len..]
            .chunks_exact(3)
            .map(|p| [p[0], p[1], p[2]])
            .collect();
        let scene = ScenePointCloud::new(points)?;
        out.push(InteractionEpisode::new(
            wearer,
            interactee,
            scene,
            parse_meta(meta)?,
        )?);
    }
    Ok(out)
}

pub fn write_dataset(episodes: &[InteractionEpisode], path: &Path) -> Result<()> {
    std::fs::write(path, encode_dataset(episodes)?)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<InteractionEpisode>> {
    decode_dataset(&read_file(path, "dataset file")?)
}
