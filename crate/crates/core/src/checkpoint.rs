//! Binary checkpoint container.
//!
//! Layout (little-endian): the 8-byte magic `MOESIMV1`, a `u32` version, a
//! `u64`-length-prefixed JSON descriptor, a `u32` tensor count, then per
//! tensor a `u32`-prefixed UTF-8 name, a `u32` rank, `u64` dims and the `f32`
//! payload.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, Tensor};
use crate::data::FeatureScaler;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelParams};
use crate::trainer::{Progress, TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"MOESIMV1";
pub const VERSION: u32 = 1;

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSnapshot {
    pub config: TrainConfig,
    pub state: TrainState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    /// Feature transform fitted on the training data.
    pub scaler: Option<FeatureScaler>,
    pub training: Option<TrainingSnapshot>,
}

impl Checkpoint {
    pub fn for_model(model: Model<f32>) -> Self {
        Checkpoint {
            model,
            scaler: None,
            training: None,
        }
    }

    /// Check every stored tensor against the shapes `config` implies.
    pub fn check_compatible(&self, config: &ModelConfig) -> Result<()> {
        let stored: HashMap<String, &Tensor<f32>> =
            self.model.params.named_tensors().into_iter().collect();
        for (name, shape) in ModelParams::<f32>::expected_shapes(config) {
            match stored.get(&name) {
                None => return Err(Error::Config(format!("checkpoint lacks tensor `{name}`"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Config(format!(
                        "tensor `{name}` has shape {:?} in the checkpoint, the config expects {shape:?}",
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if stored.len() != ModelParams::<f32>::expected_shapes(config).len() {
            return Err(Error::Config(
                "checkpoint has a different number of tensors than the config".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Incompatible("malformed RNG state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Serialize, Deserialize)]
struct TrainingDescriptor {
    config: TrainConfig,
    step: u64,
    adam: AdamConfig,
    adam_t: u64,
    rng: RngState,
    empty_streak: Vec<u32>,
    progress: Progress,
}

#[derive(Serialize, Deserialize)]
struct Descriptor {
    model: ModelConfig,
    scaler: Option<FeatureScaler>,
    training: Option<TrainingDescriptor>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.shape().len() as u32);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut tensors: Vec<(String, &Tensor<f32>)> = ckpt.model.params.named_tensors();
    let training = ckpt.training.as_ref().map(|t| {
        let s = &t.state;
        TrainingDescriptor {
            config: t.config.clone(),
            step: s.step,
            adam: s.adam.config,
            adam_t: s.adam.t(),
            rng: RngState::capture(&s.rng),
            empty_streak: s.empty_streak.clone(),
            progress: s.progress.clone(),
        }
    });
    if let Some(t) = &ckpt.training {
        let names = ckpt.model.params.trainable_names();
        let (m, v) = (t.state.adam.first_moments(), t.state.adam.second_moments());
        if !m.is_empty() {
            if m.len() != names.len() {
                return Err(Error::Consistency(
                    "optimizer moments do not match the parameters".into(),
                ));
            }
            for (name, t) in names.iter().zip(m) {
                tensors.push((format!("{ADAM_M}{name}"), t));
            }
            for (name, t) in names.iter().zip(v) {
                tensors.push((format!("{ADAM_V}{name}"), t));
            }
        }
    }
    let descriptor = serde_json::to_vec(&Descriptor {
        model: ckpt.model.config.clone(),
        scaler: ckpt.scaler.clone(),
        training,
    })
    .map_err(|e| Error::Format(e.to_string()))?;

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    out.extend_from_slice(&(descriptor.len() as u64).to_le_bytes());
    out.extend_from_slice(&descriptor);
    put_u32(&mut out, tensors.len() as u32);
    for (name, t) in tensors {
        put_tensor(&mut out, &name, t);
    }
    Ok(out)
}

/// Write atomically: a sibling temp file is renamed over `path`.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Incompatible(format!("truncated checkpoint at byte {}", self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn len(&mut self, v: u64) -> Result<usize> {
        usize::try_from(v).map_err(|_| Error::Incompatible("length overflows".into()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Incompatible("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Incompatible(format!(
            "checkpoint version {version}, this build reads {VERSION}"
        )));
    }
    let dlen = r.u64()?;
    let dlen = r.len(dlen)?;
    let descriptor: Descriptor = serde_json::from_slice(r.take(dlen)?)
        .map_err(|e| Error::Incompatible(format!("bad descriptor: {e}")))?;
    let count = r.u32()? as usize;
    let mut tensors = HashMap::with_capacity(count);
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::Incompatible("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            let d = r.u64()?;
            dims.push(r.len(d)?);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Incompatible(format!("tensor `{name}` is too large")))?;
        let payload = r.take(
            numel
                .checked_mul(4)
                .ok_or_else(|| Error::Incompatible("payload overflows".into()))?,
        )?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if tensors
            .insert(name.clone(), Tensor::new(&dims, data)?)
            .is_some()
        {
            return Err(Error::Incompatible(format!("duplicate tensor `{name}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Incompatible(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }

    let mut moments_m = HashMap::new();
    let mut moments_v = HashMap::new();
    let keys: Vec<String> = tensors.keys().cloned().collect();
    for k in keys {
        if let Some(n) = k.strip_prefix(ADAM_M) {
            moments_m.insert(n.to_string(), tensors.remove(&k).expect("key present"));
        } else if let Some(n) = k.strip_prefix(ADAM_V) {
            moments_v.insert(n.to_string(), tensors.remove(&k).expect("key present"));
        }
    }
    let config = descriptor.model;
    let params = ModelParams::from_named(&config, tensors)?;
    let model = Model::from_parts(config, params)?;
    let training = match descriptor.training {
        None => None,
        Some(t) => {
            let names = model.params.trainable_names();
            let (m, v) = if moments_m.is_empty() && moments_v.is_empty() {
                (Vec::new(), Vec::new())
            } else {
                let mut m = Vec::with_capacity(names.len());
                let mut v = Vec::with_capacity(names.len());
                for n in &names {
                    let missing =
                        || Error::Incompatible(format!("optimizer state for `{n}` is missing"));
                    m.push(moments_m.remove(n).ok_or_else(missing)?);
                    v.push(moments_v.remove(n).ok_or_else(missing)?);
                }
                (m, v)
            };
            if m.iter()
                .zip(model.params.trainable())
                .any(|(a, b)| a.shape() != b.shape())
            {
                return Err(Error::Incompatible(
                    "optimizer state shapes differ from parameters".into(),
                ));
            }
            Some(TrainingSnapshot {
                config: t.config,
                state: TrainState {
                    step: t.step,
                    adam: AdamState::from_parts(t.adam, t.adam_t, m, v)?,
                    rng: t.rng.restore()?,
                    empty_streak: t.empty_streak,
                    progress: t.progress,
                },
            })
        }
    };
    Ok(Checkpoint {
        model,
        scaler: descriptor.scaler,
        training,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    decode_checkpoint(&bytes)
}

/// Load and require the stored shapes to match `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    ckpt.check_compatible(expected)?;
    Ok(ckpt)
}
