//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "RELNETCK"
//! version  u32
//! config   u64 length + TOML bytes
//! counters global_step u64, update_index u64, total_steps u64
//! params   u32 count, then per parameter:
//!            u32 name length + name bytes
//!            u8 rank, u64 per extent
//!            u64 value count, f32 bits per value
//! adam     u64 step, f64 beta1, f64 beta2, f64 eps,
//!          then first-moment and second-moment payloads (f32 bits,
//!          shapes mirror the parameter list)
//! rngs     action stream, shuffle stream: 32 seed bytes + u128 word pos
//! envs     u32 count, then per env: rng (as above) + world state
//! ```
//!
//! `load(save(x))` reproduces bit-identical parameters; any version mismatch
//! is rejected with a message.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::env::{Body, WorldState};

pub const MAGIC: &[u8; 8] = b"RELNETCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access checkpoint {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

/// State of one ChaCha stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

/// One environment's resume data.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvSnapshot {
    pub rng: RngState,
    pub world: WorldState,
}

/// Everything needed to resume a training run bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_toml: String,
    pub global_step: u64,
    pub update_index: u64,
    pub total_steps: u64,
    /// (name, shape, row-major values) per parameter, in store order.
    pub params: Vec<(String, Vec<usize>, Vec<f32>)>,
    pub adam_step: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub adam_m: Vec<Vec<f32>>,
    pub adam_v: Vec<Vec<f32>>,
    pub action_rng: RngState,
    pub shuffle_rng: RngState,
    pub envs: Vec<EnvSnapshot>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Enc(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.bytes(self.config_toml.as_bytes());
        w.u64(self.global_step);
        w.u64(self.update_index);
        w.u64(self.total_steps);

        w.u32(self.params.len() as u32);
        for (name, shape, data) in &self.params {
            w.bytes32(name.as_bytes());
            w.0.push(shape.len() as u8);
            for &e in shape {
                w.u64(e as u64);
            }
            w.u64(data.len() as u64);
            for &v in data {
                w.u32(v.to_bits());
            }
        }

        w.u64(self.adam_step);
        w.f64(self.adam_beta1);
        w.f64(self.adam_beta2);
        w.f64(self.adam_eps);
        for group in [&self.adam_m, &self.adam_v] {
            for payload in group {
                w.u64(payload.len() as u64);
                for &v in payload {
                    w.u32(v.to_bits());
                }
            }
        }

        w.rng(&self.action_rng);
        w.rng(&self.shuffle_rng);

        w.u32(self.envs.len() as u32);
        for env in &self.envs {
            w.rng(&env.rng);
            w.world(&env.world);
        }
        w.0
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Dec { data, pos: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let config_toml = String::from_utf8(r.bytes()?)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let global_step = r.u64()?;
        let update_index = r.u64()?;
        let total_steps = r.u64()?;

        let n_params = r.u32()? as usize;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let name = String::from_utf8(r.bytes32()?)
                .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let count = r.u64()? as usize;
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                data.push(f32::from_bits(r.u32()?));
            }
            params.push((name, shape, data));
        }

        let adam_step = r.u64()?;
        let adam_beta1 = r.f64()?;
        let adam_beta2 = r.f64()?;
        let adam_eps = r.f64()?;
        let mut moments = Vec::new();
        for _ in 0..2 {
            let mut group = Vec::with_capacity(n_params);
            for _ in 0..n_params {
                let count = r.u64()? as usize;
                let mut payload = Vec::with_capacity(count);
                for _ in 0..count {
                    payload.push(f32::from_bits(r.u32()?));
                }
                group.push(payload);
            }
            moments.push(group);
        }
        let adam_v = moments.pop().unwrap();
        let adam_m = moments.pop().unwrap();

        let action_rng = r.rng()?;
        let shuffle_rng = r.rng()?;

        let n_envs = r.u32()? as usize;
        let mut envs = Vec::with_capacity(n_envs);
        for _ in 0..n_envs {
            let rng = r.rng()?;
            let world = r.world()?;
            envs.push(EnvSnapshot { rng, world });
        }
        if r.pos != data.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{} trailing bytes",
                data.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            config_toml,
            global_step,
            update_index,
            total_steps,
            params,
            adam_step,
            adam_beta1,
            adam_beta2,
            adam_eps,
            adam_m,
            adam_v,
            action_rng,
            shuffle_rng,
            envs,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source: std::io::Error| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        let data = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&data)
    }
}

struct Enc(Vec<u8>);

impl Enc {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn bytes32(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
    fn rng(&mut self, r: &RngState) {
        self.0.extend_from_slice(&r.seed);
        self.0.extend_from_slice(&r.word_pos.to_le_bytes());
    }
    fn world(&mut self, s: &WorldState) {
        self.u32(s.cubes.len() as u32);
        for c in &s.cubes {
            for v in [c.pos[0], c.pos[1], c.vel[0], c.vel[1]] {
                self.f64(v);
            }
        }
        self.u32(s.effectors.len() as u32);
        for e in &s.effectors {
            for v in [e.pos[0], e.pos[1], e.vel[0], e.vel[1]] {
                self.f64(v);
            }
        }
        self.f64(s.goal[0]);
        self.f64(s.goal[1]);
        self.u64(s.target as u64);
        for &id in &s.cube_ids {
            self.f64(id);
        }
        self.f64(s.cube_side);
        self.u32(s.step);
    }
}

struct Dec<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.data.len() {
            return Err(CheckpointError::Corrupt("unexpected end of file".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn bytes(&mut self) -> Result<Vec<u8>, CheckpointError> {
        let n = self.u64()? as usize;
        Ok(self.take(n)?.to_vec())
    }
    fn bytes32(&mut self) -> Result<Vec<u8>, CheckpointError> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }
    fn rng(&mut self) -> Result<RngState, CheckpointError> {
        let seed: [u8; 32] = self.take(32)?.try_into().unwrap();
        let word_pos = u128::from_le_bytes(self.take(16)?.try_into().unwrap());
        Ok(RngState { seed, word_pos })
    }
    fn world(&mut self) -> Result<WorldState, CheckpointError> {
        let n_cubes = self.u32()? as usize;
        let mut cubes = Vec::with_capacity(n_cubes);
        for _ in 0..n_cubes {
            let (px, py, vx, vy) = (self.f64()?, self.f64()?, self.f64()?, self.f64()?);
            cubes.push(Body {
                pos: [px, py],
                vel: [vx, vy],
            });
        }
        let n_eff = self.u32()? as usize;
        let mut effectors = Vec::with_capacity(n_eff);
        for _ in 0..n_eff {
            let (px, py, vx, vy) = (self.f64()?, self.f64()?, self.f64()?, self.f64()?);
            effectors.push(Body {
                pos: [px, py],
                vel: [vx, vy],
            });
        }
        let goal = [self.f64()?, self.f64()?];
        let target = self.u64()? as usize;
        let mut cube_ids = Vec::with_capacity(n_cubes);
        for _ in 0..n_cubes {
            cube_ids.push(self.f64()?);
        }
        let cube_side = self.f64()?;
        let step = self.u32()?;
        Ok(WorldState {
            cubes,
            effectors,
            goal,
            target,
            cube_ids,
            cube_side,
            step,
        })
    }
}
