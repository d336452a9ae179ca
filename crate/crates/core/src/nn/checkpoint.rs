//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header describing every tensor, then all tensor data as little-endian
//! `f64` in header order.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{Mlp, MlpSpec, ModelParams, RmsPropState, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SLCKPT\0\0";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub network_hash: String,
    /// Episodes completed when the checkpoint was taken.
    pub episode: u64,
    /// Parameter store version.
    pub version: u64,
    /// Base seed from which every per-episode generator is derived.
    pub rng_seed: u64,
    /// Resolved configuration the parameters were trained under.
    pub config: serde_json::Value,
    pub params: ModelParams,
    pub actor_opt: RmsPropState,
    pub critic_opt: RmsPropState,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config_hash: String,
    network_hash: String,
    episode: u64,
    version: u64,
    rng_seed: u64,
    config: serde_json::Value,
    actor_spec: MlpSpec,
    critic_spec: MlpSpec,
    tensors: Vec<TensorMeta>,
}

fn groups(ck: &Checkpoint) -> [(&'static str, &[Tensor]); 4] {
    [
        ("actor", &ck.params.actor.params),
        ("critic", &ck.params.critic.params),
        ("actor_opt", &ck.actor_opt.mean_square),
        ("critic_opt", &ck.critic_opt.mean_square),
    ]
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        for (group, ts) in groups(self) {
            for t in ts {
                tensors.push(TensorMeta {
                    name: format!("{group}/{}", t.name),
                    shape: t.shape.clone(),
                });
            }
        }
        let header = Header {
            config_hash: self.config_hash.clone(),
            network_hash: self.network_hash.clone(),
            episode: self.episode,
            version: self.version,
            rng_seed: self.rng_seed,
            config: self.config.clone(),
            actor_spec: self.params.actor.spec.clone(),
            critic_spec: self.params.critic.spec.clone(),
            tensors,
        };
        let header = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::new();
        out.write_all(MAGIC)?;
        out.write_u32::<LittleEndian>(CHECKPOINT_FORMAT_VERSION)?;
        out.write_u64::<LittleEndian>(header.len() as u64)?;
        out.write_all(&header)?;
        for (_, ts) in groups(self) {
            for t in ts {
                for &x in &t.data {
                    out.write_f64::<LittleEndian>(x)?;
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = cur.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))?;
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let len = cur.read_u64::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
        let start = cur.position() as usize;
        let header_bytes = bytes
            .get(start..start.saturating_add(len))
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(header_bytes).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        cur.set_position((start + len) as u64);

        let mut actor = Mlp::zeros(header.actor_spec.clone())?;
        let mut critic = Mlp::zeros(header.critic_spec.clone())?;
        let mut actor_opt = RmsPropState::new(&actor.params);
        let mut critic_opt = RmsPropState::new(&critic.params);
        let mut metas = header.tensors.iter();
        for (group, ts) in [
            ("actor", &mut actor.params),
            ("critic", &mut critic.params),
            ("actor_opt", &mut actor_opt.mean_square),
            ("critic_opt", &mut critic_opt.mean_square),
        ] {
            for t in ts.iter_mut() {
                let meta = metas.next().ok_or_else(|| bad("missing tensor entries"))?;
                if meta.name != format!("{group}/{}", t.name) || meta.shape != t.shape {
                    return Err(Error::Checkpoint(format!(
                        "tensor {} {:?} does not match {group}/{} {:?}",
                        meta.name, meta.shape, t.name, t.shape
                    )));
                }
                for x in &mut t.data {
                    *x = cur
                        .read_f64::<LittleEndian>()
                        .map_err(|_| Error::Checkpoint(format!("truncated data in {}", meta.name)))?;
                }
            }
        }
        if metas.next().is_some() {
            return Err(bad("unexpected extra tensors"));
        }
        if (cur.position() as usize) != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Checkpoint {
            config_hash: header.config_hash,
            network_hash: header.network_hash,
            episode: header.episode,
            version: header.version,
            rng_seed: header.rng_seed,
            config: header.config,
            params: ModelParams { actor, critic },
            actor_opt,
            critic_opt,
        })
    }
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = ck.to_bytes()?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
