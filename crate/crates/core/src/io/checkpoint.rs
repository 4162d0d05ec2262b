//! Single-file checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes          | content                                   |
//! |----------------|-------------------------------------------|
//! | 0..4           | magic `ABPC`                              |
//! | 4..8           | format version (u32)                      |
//! | 8..16          | header length in bytes (u64)              |
//! | 16..16+len     | UTF-8 header of `key = value` lines       |
//! | padding        | zeros up to the next multiple of 64       |
//! | payload        | f64 tensor data, each tensor 64-aligned   |
//!
//! The file ends with the last tensor's final byte.
//!
//! The header carries the network, hyper-parameters, observation settings,
//! seed and iteration count, then one `tensor = ...` record per tensor with
//! its name, element type, shape, payload offset, length and SHA-256.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::generator::{join_shape, parse_shape, NetSpec, Weights};
use crate::inference::LatentState;
use crate::io::config::{
    apply_hyper_entry, hyper_to_text, parse_entries, spec_from_entries, ObservationConfig,
};
use crate::learning::{Hyper, IterationRecord, TrainHistory, TrainState};
use crate::linalg::Matrix;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ABPC";
pub const VERSION: u32 = 1;
const ALIGN: usize = 64;
const PREAMBLE: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: NetSpec,
    pub hyper: Hyper,
    pub observation: ObservationConfig,
    pub seed: u64,
    pub iteration: usize,
    pub tensors: Vec<(String, Tensor)>,
}

fn align(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

fn tensor_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn corrupt(msg: impl std::fmt::Display) -> Error {
    Error::format(format!("corrupt checkpoint: {msg}"))
}

impl Checkpoint {
    /// Snapshot of a training run. Weights, velocities, latents, chain ages
    /// and the loss history are stored as named tensors, followed by `extra`.
    pub fn from_training(
        spec: &NetSpec,
        hyper: &Hyper,
        observation: &ObservationConfig,
        state: &TrainState,
        extra: Vec<(String, Tensor)>,
    ) -> Self {
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        for (name, t) in state.weights.named_tensors() {
            tensors.push((name, t.clone()));
        }
        for (name, t) in state.velocity.named_tensors() {
            tensors.push((format!("velocity.{name}"), t.clone()));
        }
        for (i, s) in state.latents.iter().enumerate() {
            tensors.push((format!("latent.{i}"), s.z.clone()));
        }
        tensors.push((
            "chain_age".into(),
            Tensor::from_vec(state.latents.iter().map(|s| s.chain_age as f64).collect()),
        ));
        let rows: Vec<f64> = state
            .history
            .records
            .iter()
            .flat_map(|r| {
                [
                    r.iteration as f64,
                    r.mean_loss,
                    r.mean_latent_sq,
                    r.grad_norm,
                ]
            })
            .collect();
        let history = Tensor::new(vec![state.history.records.len(), 4], rows).expect("4 columns");
        tensors.push(("history".into(), history));
        tensors.extend(extra);
        Checkpoint {
            spec: spec.clone(),
            hyper: hyper.clone(),
            observation: observation.clone(),
            seed: hyper.seed,
            iteration: state.iteration,
            tensors,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn require(&self, name: &str) -> Result<&Tensor> {
        self.tensor(name)
            .ok_or_else(|| Error::format(format!("checkpoint has no tensor {name:?}")))
    }

    fn weights_with_prefix(&self, prefix: &str) -> Result<Weights> {
        let mut w = Weights::zeros(&self.spec);
        let names: Vec<String> = w.named_tensors().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(w.tensors_mut()) {
            let full = format!("{prefix}{name}");
            let stored = self.require(&full)?;
            if stored.shape() != slot.shape() {
                return Err(Error::format(format!(
                    "tensor {full} has shape {:?}, network expects {:?}",
                    stored.shape(),
                    slot.shape()
                )));
            }
            *slot = stored.clone();
        }
        Ok(w)
    }

    pub fn weights(&self) -> Result<Weights> {
        self.weights_with_prefix("")
    }

    /// Stored per-example latents, in example order.
    pub fn latents(&self) -> Result<Vec<Tensor>> {
        let n = self.require("chain_age")?.numel();
        (0..n)
            .map(|i| self.require(&format!("latent.{i}")).cloned())
            .collect()
    }

    pub fn train_state(&self) -> Result<TrainState> {
        let ages = self.require("chain_age")?;
        let latents = self
            .latents()?
            .into_iter()
            .zip(ages.data())
            .map(|(z, &age)| LatentState {
                z,
                chain_age: age as usize,
            })
            .collect();
        let hist = self.require("history")?;
        let records = hist
            .data()
            .chunks_exact(4)
            .map(|r| IterationRecord {
                iteration: r[0] as usize,
                mean_loss: r[1],
                mean_latent_sq: r[2],
                grad_norm: r[3],
            })
            .collect();
        Ok(TrainState {
            weights: self.weights()?,
            velocity: self.weights_with_prefix("velocity.")?,
            latents,
            iteration: self.iteration,
            history: TrainHistory { records },
        })
    }

    /// The stored K x D sensing matrix, if any.
    pub fn sensing(&self) -> Result<Option<Matrix>> {
        match self.tensor("sensing") {
            None => Ok(None),
            Some(t) if t.shape().len() == 2 => {
                Matrix::from_vec(t.shape()[0], t.shape()[1], t.data().to_vec()).map(Some)
            }
            Some(t) => Err(Error::format(format!(
                "sensing tensor has shape {:?}",
                t.shape()
            ))),
        }
    }

    fn header_and_layout(&self) -> Result<(String, Vec<usize>, usize)> {
        let mut seen = HashSet::new();
        let mut header = String::new();
        for line in self.spec.to_text().lines() {
            let _ = writeln!(header, "net.{line}");
        }
        header.push_str(&hyper_to_text(&self.hyper));
        header.push_str(&self.observation.to_text());
        let _ = writeln!(header, "seed = {}", self.seed);
        let _ = writeln!(header, "iteration = {}", self.iteration);
        let mut offsets = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        let mut end = 0;
        for (name, t) in &self.tensors {
            let legal = |c: char| c.is_ascii_alphanumeric() || "._-".contains(c);
            if name.is_empty() || !name.chars().all(legal) || !seen.insert(name.as_str()) {
                return Err(Error::invalid(format!(
                    "tensor name {name:?} must be unique and use only letters, digits, '.', '_' or '-'"
                )));
            }
            let _ = writeln!(
                header,
                "tensor = name={name} dtype=f64 shape={} offset={offset} len={} sha256={}",
                if t.shape().is_empty() {
                    "scalar".into()
                } else {
                    join_shape(t.shape())
                },
                t.numel(),
                sha256_hex(&tensor_bytes(t))
            );
            offsets.push(offset);
            end = offset + 8 * t.numel();
            offset = align(end);
        }
        Ok((header, offsets, end))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (header, offsets, payload_len) = self.header_and_layout()?;
        let payload_start = align(PREAMBLE + header.len());
        let mut out = Vec::with_capacity(payload_start + payload_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.resize(payload_start, 0);
        for ((_, t), off) in self.tensors.iter().zip(offsets) {
            out.resize(payload_start + off, 0);
            out.extend(tensor_bytes(t));
        }
        out.resize(payload_start + payload_len, 0);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::format("not a checkpoint (bad magic)"));
        }
        if bytes.len() < PREAMBLE {
            return Err(corrupt("truncated preamble"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version == 0 || version > VERSION {
            return Err(Error::format(format!(
                "unsupported version {version} (this build reads up to {VERSION})"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|h| PREAMBLE.checked_add(h))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("header extends past end of file"))?;
        let header = std::str::from_utf8(&bytes[PREAMBLE..header_end])
            .map_err(|_| corrupt("header is not UTF-8"))?;
        let payload_start = align(header_end);

        let mut net = Vec::new();
        let mut hyper = Hyper::default();
        let mut observation = ObservationConfig::default();
        let mut seed = None;
        let mut iteration = None;
        let mut records = Vec::new();
        for (key, value) in parse_entries(header).map_err(corrupt)? {
            match key.as_str() {
                "seed" => seed = Some(value.parse().map_err(|_| corrupt("bad seed"))?),
                "iteration" => {
                    iteration = Some(value.parse().map_err(|_| corrupt("bad iteration"))?)
                }
                "tensor" => records.push(value),
                k if k.starts_with("net.") => net.push((k["net.".len()..].to_string(), value)),
                k if observation.apply_entry(k, &value).map_err(corrupt)? => {}
                k if apply_hyper_entry(&mut hyper, k, &value).map_err(corrupt)? => {}
                other => return Err(corrupt(format!("unknown header key {other:?}"))),
            }
        }
        let spec = spec_from_entries(None, None, &net).map_err(corrupt)?;
        let mut seen = HashSet::new();
        let mut tensors = Vec::with_capacity(records.len());
        let mut covered = vec![false; bytes.len()];
        for rec in records {
            let (name, t, range) = read_tensor(&rec, bytes, payload_start)?;
            if !seen.insert(name.clone()) {
                return Err(corrupt(format!("tensor {name} appears twice")));
            }
            if covered[range.clone()].iter().any(|&c| c) {
                return Err(corrupt(format!("tensor {name} overlaps another tensor")));
            }
            covered[range].iter_mut().for_each(|c| *c = true);
            tensors.push((name, t));
        }
        let stray = (header_end..bytes.len()).find(|&i| !covered[i] && bytes[i] != 0);
        if let Some(i) = stray {
            return Err(corrupt(format!("non-zero padding byte at offset {i}")));
        }
        Ok(Checkpoint {
            spec,
            hyper,
            observation,
            seed: seed.ok_or_else(|| corrupt("header lacks a seed"))?,
            iteration: iteration.ok_or_else(|| corrupt("header lacks an iteration count"))?,
            tensors,
        })
    }
}

fn read_tensor(
    record: &str,
    bytes: &[u8],
    payload_start: usize,
) -> Result<(String, Tensor, std::ops::Range<usize>)> {
    let mut fields = std::collections::HashMap::new();
    for part in record.split_whitespace() {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| corrupt(format!("bad tensor field {part:?}")))?;
        fields.insert(k, v);
    }
    let get = |k: &str| {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| corrupt(format!("tensor record lacks {k}")))
    };
    let name = get("name")?.to_string();
    if get("dtype")? != "f64" {
        return Err(corrupt(format!("tensor {name}: unsupported element type")));
    }
    let shape = match get("shape")? {
        "scalar" => Vec::new(),
        s => parse_shape(s).map_err(corrupt)?,
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| corrupt(format!("tensor {name}: bad {k}")))
    };
    let (offset, len) = (num("offset")?, num("len")?);
    if len != shape.iter().product::<usize>() {
        return Err(corrupt(format!(
            "tensor {name}: length {len} does not match shape {shape:?}"
        )));
    }
    let start = payload_start
        .checked_add(offset)
        .filter(|_| offset % ALIGN == 0)
        .ok_or_else(|| corrupt(format!("tensor {name}: misaligned offset")))?;
    let end = len
        .checked_mul(8)
        .and_then(|b| start.checked_add(b))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| {
            corrupt(format!(
                "tensor {name} extends past end of file (truncated payload)"
            ))
        })?;
    let raw = &bytes[start..end];
    if sha256_hex(raw) != get("sha256")? {
        return Err(corrupt(format!("tensor {name} fails its checksum")));
    }
    let data: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(corrupt(format!("tensor {name} holds non-finite values")));
    }
    Ok((name, Tensor::new(shape, data)?, start..end))
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::format(format!("cannot read checkpoint {}: {e}", path.display())))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::LayerSpec;
    use crate::tensor::Activation;

    fn sample() -> Checkpoint {
        let spec = NetSpec::new(
            vec![2],
            vec![LayerSpec::dense(&[1, 2, 2], Activation::Tanh).normalized(true)],
        )
        .unwrap();
        let hyper = Hyper {
            learning_rate: 0.1 + 0.2,
            seed: 11,
            ..Hyper::default()
        };
        let mut state = TrainState::init(&spec, 3, &hyper);
        state.iteration = 4;
        state.history.records.push(IterationRecord {
            iteration: 1,
            mean_loss: 2.5,
            mean_latent_sq: 1.0 / 3.0,
            grad_norm: 1e-300,
        });
        Checkpoint::from_training(
            &spec,
            &hyper,
            &ObservationConfig::default(),
            &state,
            vec![("scalar".into(), Tensor::scalar(-0.0))],
        )
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"ABPC");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.hyper.learning_rate.to_bits(), (0.1f64 + 0.2).to_bits());
        assert_eq!(
            back.tensor("scalar").unwrap().data()[0].to_bits(),
            (-0.0f64).to_bits()
        );
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let state = back.train_state().unwrap();
        assert_eq!(state.latents.len(), 3);
        assert_eq!(state.history.records[0].grad_norm, 1e-300);
    }

    #[test]
    fn header_errors() {
        let bytes = sample().to_bytes().unwrap();
        let e = Checkpoint::from_bytes(b"PNG\x89....")
            .unwrap_err()
            .to_string();
        assert!(e.contains("not a checkpoint"), "{e}");
        let mut v2 = bytes.clone();
        v2[4] = 2;
        let e = Checkpoint::from_bytes(&v2).unwrap_err().to_string();
        assert!(e.contains("unsupported version"), "{e}");
        let e = Checkpoint::from_bytes(&bytes[..bytes.len() - 8])
            .unwrap_err()
            .to_string();
        assert!(e.contains("corrupt"), "{e}");
        let e = Checkpoint::from_bytes(&bytes[..40])
            .unwrap_err()
            .to_string();
        assert!(e.contains("corrupt"), "{e}");
    }
}
