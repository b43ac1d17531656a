//! Versioned little-endian checkpoint files.
//!
//! Layout: the 8-byte magic `FLASHCK\0`, a `u32` format version, a `u64` manifest
//! length, the JSON manifest, then every tensor's values as `f64` in manifest
//! order (parameters first, then each optimizer's `m` and `v` per parameter).

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::grad::{AdamConfig, AdamState, ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"FLASHCK\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Teacher,
    Distill,
}

/// Position of a ChaCha stream: enough to continue it exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub trainable: bool,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub name: String,
    pub config: AdamConfig,
    /// Parameter names in optimizer order, paired with their moments.
    pub states: Vec<(String, AdamState)>,
}

/// One logged scalar. Wall-clock time is attached only when rows are written out,
/// so histories of replayed runs compare equal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub iter: u64,
    pub nfe: usize,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub iter: u64,
    pub params: Vec<NamedTensor>,
    pub optimizers: Vec<OptimizerState>,
    pub rng: Option<RngState>,
    pub history: Vec<MetricRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    kind: CheckpointKind,
    config: ExperimentConfig,
    seed: u64,
    iter: u64,
    params: Vec<TensorEntry>,
    optimizers: Vec<OptimizerEntry>,
    rng: Option<RngEntry>,
    history: Vec<MetricRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    trainable: bool,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerEntry {
    name: String,
    config: AdamConfig,
    params: Vec<String>,
    steps: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RngEntry {
    seed: String,
    stream: u64,
    /// Decimal, since the position does not fit a JSON number.
    word_pos: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(s.get(2 * i..2 * i + 2)?, 16).ok()?;
    }
    Some(out)
}

impl Checkpoint {
    /// Every parameter of `store`, in id order.
    pub fn snapshot_params(store: &ParamStore) -> Vec<NamedTensor> {
        store
            .ids()
            .map(|id| NamedTensor {
                name: store.name(id).to_string(),
                trainable: store.is_trainable(id),
                value: store.value(id).clone(),
            })
            .collect()
    }

    /// Rebuilds a store with the same ids as the one snapshotted.
    pub fn restore_params(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for p in &self.params {
            store.add(p.name.clone(), p.value.clone(), p.trainable)?;
        }
        Ok(store)
    }

    pub fn optimizer(&self, name: &str) -> Option<&OptimizerState> {
        self.optimizers.iter().find(|o| o.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            kind: self.kind,
            config: self.config.clone(),
            seed: self.seed,
            iter: self.iter,
            params: self
                .params
                .iter()
                .map(|p| TensorEntry {
                    name: p.name.clone(),
                    trainable: p.trainable,
                    shape: p.value.shape().to_vec(),
                })
                .collect(),
            optimizers: self
                .optimizers
                .iter()
                .map(|o| OptimizerEntry {
                    name: o.name.clone(),
                    config: o.config,
                    params: o.states.iter().map(|(n, _)| n.clone()).collect(),
                    steps: o.states.iter().map(|(_, s)| s.step).collect(),
                })
                .collect(),
            rng: self.rng.map(|r| RngEntry {
                seed: hex(&r.seed),
                stream: r.stream,
                word_pos: r.word_pos.to_string(),
            }),
            history: self.history.clone(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(json.len() + 20);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |t: &Tensor| {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for p in &self.params {
            put(&p.value);
        }
        for o in &self.optimizers {
            for (_, s) in &o.states {
                put(&s.m);
                put(&s.v);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint {
            path: Default::default(),
            msg: msg.to_string(),
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a flashlab checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < len {
            return Err(bad("truncated manifest"));
        }
        let manifest: Manifest = serde_json::from_slice(&body[..len]).map_err(|e| bad(&format!("manifest: {e}")))?;
        let mut blob = &body[len..];
        let mut take = |shape: &[usize]| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            if blob.len() < 8 * n {
                return Err(bad("truncated tensor data"));
            }
            let data = blob[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            blob = &blob[8 * n..];
            Tensor::new(shape.to_vec(), data)
        };
        let mut params = Vec::with_capacity(manifest.params.len());
        for e in &manifest.params {
            params.push(NamedTensor {
                name: e.name.clone(),
                trainable: e.trainable,
                value: take(&e.shape)?,
            });
        }
        let mut optimizers = Vec::with_capacity(manifest.optimizers.len());
        for o in &manifest.optimizers {
            if o.params.len() != o.steps.len() {
                return Err(bad("optimizer step list does not match its parameters"));
            }
            let mut states = Vec::with_capacity(o.params.len());
            for (name, &step) in o.params.iter().zip(&o.steps) {
                let shape = params
                    .iter()
                    .find(|p| &p.name == name)
                    .ok_or_else(|| bad(&format!("optimizer refers to unknown parameter {name}")))?
                    .value
                    .shape()
                    .to_vec();
                let m = take(&shape)?;
                let v = take(&shape)?;
                states.push((name.clone(), AdamState { m, v, step }));
            }
            optimizers.push(OptimizerState {
                name: o.name.clone(),
                config: o.config,
                states,
            });
        }
        if !blob.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        let rng = match &manifest.rng {
            None => None,
            Some(r) => Some(RngState {
                seed: unhex(&r.seed).ok_or_else(|| bad("malformed rng seed"))?,
                stream: r.stream,
                word_pos: r.word_pos.parse().map_err(|_| bad("malformed rng position"))?,
            }),
        };
        manifest.config.validate()?;
        Ok(Self {
            kind: manifest.kind,
            config: manifest.config,
            seed: manifest.seed,
            iter: manifest.iter,
            params,
            optimizers,
            rng,
            history: manifest.history,
        })
    }

    /// Writes atomically through a sibling temporary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let ctx = |e: std::io::Error| Error::Checkpoint {
            path: path.to_path_buf(),
            msg: e.to_string(),
        };
        let mut f = std::fs::File::create(&tmp).map_err(ctx)?;
        f.write_all(&bytes).map_err(ctx)?;
        f.sync_all().map_err(ctx)?;
        std::fs::rename(&tmp, path).map_err(ctx)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::Checkpoint {
                path: path.to_path_buf(),
                msg: e.to_string(),
            })?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint { msg, .. } => Error::Checkpoint {
                path: path.to_path_buf(),
                msg,
            },
            other => other,
        })
    }
}
