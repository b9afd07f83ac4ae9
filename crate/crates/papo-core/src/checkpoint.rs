//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "PAPOCKPT"
//! version u32      currently 1
//! desc    u32 len + UTF-8 TOML: architecture spec and training counters
//! count   u32      tensor count
//! tensor  u32 name len + name bytes
//!         u32 rows, u32 cols
//!         rows*cols f32 values (little-endian)
//! ```
//!
//! Model parameters are stored under their canonical names; Adam moments
//! under `opt.{actor,critic}.{m,v}.<slot>`. Values are quantized to f32 on
//! write, so a resumed run is statistically but not bitwise identical to an
//! uninterrupted one; two runs from the same manifest produce byte-identical
//! checkpoint files.

use crate::error::{Error, Result};
use crate::nets::{ActorCritic, NetSpec};
use crate::tensor::Tensor;
use crate::trainer::Trainer;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"PAPOCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Descriptor {
    spec: NetSpec,
    state: CounterState,
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct CounterState {
    pub episodes: u64,
    pub updates: u64,
    pub actor_opt_steps: u64,
    pub critic_opt_steps: u64,
}

pub struct Checkpoint {
    pub spec: NetSpec,
    pub counters: CounterState,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Snapshot a bare model (no optimizer state).
    pub fn of_model(model: &ActorCritic) -> Checkpoint {
        Checkpoint {
            spec: model.spec.clone(),
            counters: CounterState::default(),
            tensors: model
                .named_params()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
        }
    }

    /// Snapshot a trainer: parameters, optimizer moments, and counters.
    pub fn of_trainer(trainer: &Trainer) -> Checkpoint {
        let mut ck = Checkpoint::of_model(&trainer.model);
        let (actor, critic) = trainer.optimizers();
        ck.counters = CounterState {
            episodes: trainer.episode_count(),
            updates: trainer.update_count(),
            actor_opt_steps: actor.step_count(),
            critic_opt_steps: critic.step_count(),
        };
        for (prefix, opt) in [("actor", actor), ("critic", critic)] {
            for (slot, (m, v)) in opt.state().iter().enumerate() {
                ck.tensors.push((
                    format!("opt.{prefix}.m.{slot}"),
                    Tensor::from_vec(1, m.len(), m.clone()),
                ));
                ck.tensors.push((
                    format!("opt.{prefix}.v.{slot}"),
                    Tensor::from_vec(1, v.len(), v.clone()),
                ));
            }
        }
        ck
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let desc = toml::to_string(&Descriptor {
            spec: self.spec.clone(),
            state: self.counters,
        })
        .map_err(|e| Error::Checkpoint(format!("descriptor encode: {e}")))?;
        buf.extend_from_slice(&(desc.len() as u32).to_le_bytes());
        buf.extend_from_slice(desc.as_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            buf.extend_from_slice(&(t.cols() as u32).to_le_bytes());
            for &v in t.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let tmp = path.with_extension("tmp");
        std::fs::File::create(&tmp)?.write_all(&buf)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut off = 0usize;
        let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
            if *off + n > bytes.len() {
                return Err(Error::Checkpoint("truncated file".into()));
            }
            let s = &bytes[*off..*off + n];
            *off += n;
            Ok(s)
        };
        let u32_at = |off: &mut usize| -> Result<u32> {
            let s = take(off, 4)?;
            Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        };
        if take(&mut off, 8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32_at(&mut off)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let dlen = u32_at(&mut off)? as usize;
        let desc_bytes = take(&mut off, dlen)?.to_vec();
        let desc: Descriptor = toml::from_str(
            std::str::from_utf8(&desc_bytes)
                .map_err(|_| Error::Checkpoint("descriptor not UTF-8".into()))?,
        )
        .map_err(|e| Error::Checkpoint(format!("descriptor decode: {e}")))?;
        let count = u32_at(&mut off)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = u32_at(&mut off)? as usize;
            let name = String::from_utf8(take(&mut off, nlen)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name not UTF-8".into()))?;
            let rows = u32_at(&mut off)? as usize;
            let cols = u32_at(&mut off)? as usize;
            let raw = take(&mut off, rows * cols * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            tensors.push((name, Tensor::from_vec(rows, cols, data)));
        }
        Ok(Checkpoint {
            spec: desc.spec,
            counters: desc.state,
            tensors,
        })
    }

    fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))
    }

    /// Rebuild the model: construct from the spec, then overwrite every
    /// parameter from the stored tensors (shape-checked).
    pub fn restore_model(&self) -> Result<ActorCritic> {
        let mut model = ActorCritic::from_spec(self.spec.clone(), 0);
        let mut err = None;
        model.for_each_param_mut(&mut |name, t| {
            if err.is_some() {
                return;
            }
            match self.tensor(&name) {
                Ok(stored) => {
                    if stored.rows() != t.rows() || stored.cols() != t.cols() {
                        err = Some(Error::Checkpoint(format!(
                            "tensor '{name}' shape [{}, {}] != expected [{}, {}]",
                            stored.rows(),
                            stored.cols(),
                            t.rows(),
                            t.cols()
                        )));
                        return;
                    }
                    *t = stored.clone();
                }
                Err(e) => err = Some(e),
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(model),
        }
    }

    /// Restore optimizer moments and counters into a freshly built trainer.
    pub fn restore_optimizers(&self, trainer: &mut Trainer) -> Result<()> {
        let counters = self.counters;
        {
            let (actor, critic) = trainer.optimizers_mut();
            for (prefix, opt, steps) in [
                ("actor", actor, counters.actor_opt_steps),
                ("critic", critic, counters.critic_opt_steps),
            ] {
                let slots = opt.state().len();
                let mut moments = Vec::with_capacity(slots);
                for slot in 0..slots {
                    let m = self.tensor(&format!("opt.{prefix}.m.{slot}"))?;
                    let v = self.tensor(&format!("opt.{prefix}.v.{slot}"))?;
                    moments.push((m.data().to_vec(), v.data().to_vec()));
                }
                opt.restore(steps, moments);
            }
        }
        trainer.restore_counters(counters.episodes, counters.updates);
        Ok(())
    }
}

/// Order-sensitive digest of every parameter byte; detects any mutation.
pub fn model_checksum(model: &ActorCritic) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for (name, t) in model.named_params() {
        for b in name.as_bytes() {
            h = (h ^ *b as u64).wrapping_mul(0x1000_0000_01b3);
        }
        for v in t.data() {
            for b in v.to_le_bytes() {
                h = (h ^ b as u64).wrapping_mul(0x1000_0000_01b3);
            }
        }
    }
    h
}
