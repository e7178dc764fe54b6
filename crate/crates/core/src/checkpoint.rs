//! PTCK training checkpoints.
//!
//! Layout (little-endian): `b"PTCK"`, `u32` version, `u32` tensor count, then per tensor
//! `u32` name length, UTF-8 name, `u32` ndim, `ndim × u32` dims and the `f64` values;
//! finally `u64` length and a JSON blob with configs, schedule and history.
//!
//! Tensors are `model.*`, optionally `best.*`, and the flat Adam moments `adam.m`, `adam.v`.
//! Values are stored as `f64` so that a resumed run continues bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, PetraModel};
use crate::nn::Parameterized;
use crate::tensor::Tensor;
use crate::trainer::{Adam, EpochRecord, Schedule, TrainConfig, TrainState};

const MAGIC: &[u8; 4] = b"PTCK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    model_config: ModelConfig,
    train_config: TrainConfig,
    epoch: usize,
    /// Temperature and learning rate the next epoch would use.
    tau: f64,
    lr: f64,
    best_f1: Option<f64>,
    best_epoch: Option<usize>,
    bad_epochs: usize,
    stopped: bool,
    adam_step: u64,
    has_best: bool,
    history: Vec<EpochRecord>,
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for d in shape {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(state: &TrainState) -> Result<Vec<u8>> {
    let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    let mut collect = |prefix: &str, m: &PetraModel| {
        m.visit(prefix, &mut |n, t| tensors.push((n.to_string(), t.shape().to_vec(), t.data().to_vec())));
    };
    collect("model", &state.model);
    if let Some(best) = &state.best {
        collect("best", best);
    }
    let p = state.adam.m.len();
    tensors.push(("adam.m".into(), vec![p], state.adam.m.clone()));
    tensors.push(("adam.v".into(), vec![p], state.adam.v.clone()));

    let s = &state.schedule;
    let meta = Meta {
        model_config: state.model.config.clone(),
        train_config: state.config.clone(),
        epoch: state.epoch,
        tau: state.config.temperature(state.epoch),
        lr: s.lr,
        best_f1: s.best_epoch.map(|_| s.best_f1),
        best_epoch: s.best_epoch,
        bad_epochs: s.bad_epochs,
        stopped: s.stopped,
        adam_step: state.adam.step,
        has_best: state.best.is_some(),
        history: state.history.clone(),
    };
    let json = serde_json::to_vec(&meta)?;

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, shape, data) in &tensors {
        put_tensor(&mut out, name, shape, data);
    }
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("truncated checkpoint while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }
}

fn fill_model(prefix: &str, model: &mut PetraModel, tensors: &mut BTreeMap<String, Tensor>) -> Result<()> {
    let mut err = None;
    model.visit_mut(prefix, &mut |name, t| {
        if err.is_some() {
            return;
        }
        match tensors.remove(name) {
            Some(src) if src.shape() == t.shape() => t.data_mut().copy_from_slice(src.data()),
            Some(src) => {
                err = Some(Error::Shape(format!(
                    "checkpoint tensor `{name}` has shape {:?}, model expects {:?}",
                    src.shape(),
                    t.shape()
                )))
            }
            None => err = Some(Error::Format(format!("checkpoint is missing tensor `{name}`"))),
        }
    });
    err.map_or(Ok(()), Err)
}

pub fn decode(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|e| Error::Format(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let ndim = r.u32("ndim")?;
        let shape = (0..ndim).map(|_| r.u32("dims")).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, d| a.checked_mul(*d));
        let n = n.and_then(|n| n.checked_mul(8)).ok_or_else(|| Error::Format(format!("`{name}` is too large")))?;
        let data = r
            .take(n, &name)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if tensors.insert(name.clone(), Tensor::from_vec(&shape, data)?).is_some() {
            return Err(Error::Format(format!("duplicate tensor `{name}`")));
        }
    }
    let b = r.take(8, "JSON length")?;
    let json_len = u64::from_le_bytes(b.try_into().unwrap()) as usize;
    let meta: Meta = serde_json::from_slice(r.take(json_len, "JSON blob")?)?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes in checkpoint", bytes.len() - r.pos)));
    }

    let mut model = PetraModel::new(meta.model_config, 0)?;
    fill_model("model", &mut model, &mut tensors)?;
    let best = if meta.has_best {
        let mut b = model.clone();
        fill_model("best", &mut b, &mut tensors)?;
        Some(b)
    } else {
        None
    };
    let mut moment = |name: &str| -> Result<Vec<f64>> {
        let t = tensors.remove(name).ok_or_else(|| Error::Format(format!("checkpoint is missing `{name}`")))?;
        if t.len() != model.parameter_count() {
            return Err(Error::Shape(format!("`{name}` has {} entries, model has {} parameters", t.len(), model.parameter_count())));
        }
        Ok(t.into_vec())
    };
    let adam = Adam {
        step: meta.adam_step,
        m: moment("adam.m")?,
        v: moment("adam.v")?,
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Format(format!("unexpected tensor `{extra}` in checkpoint")));
    }
    meta.train_config.validate()?;
    Ok(TrainState {
        config: meta.train_config,
        model,
        adam,
        epoch: meta.epoch,
        schedule: Schedule {
            lr: meta.lr,
            best_f1: meta.best_f1.unwrap_or(f64::NEG_INFINITY),
            best_epoch: meta.best_epoch,
            bad_epochs: meta.bad_epochs,
            stopped: meta.stopped,
        },
        best,
        history: meta.history,
    })
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    fs::write(path, encode(state)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<TrainState> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SyntheticSpec};
    use crate::memory::Variant;

    fn tiny(variant: Variant) -> PetraModel {
        PetraModel::new(
            ModelConfig {
                input_dim: 32,
                hidden_dim: 8,
                num_cells: 3,
                variant,
                key_dim: 2,
                mlp_hidden: 6,
                ..ModelConfig::default()
            },
            4,
        )
        .unwrap()
    }

    fn corpora() -> (Vec<crate::corpus::CorefInstance>, Vec<crate::corpus::CorefInstance>) {
        let spec = |n, seed| SyntheticSpec { num_docs: n, seed, ..SyntheticSpec::default() };
        (
            generate_synthetic(&spec(12, 1)).unwrap().instances,
            generate_synthetic(&spec(6, 2)).unwrap().instances,
        )
    }

    fn state(variant: Variant) -> TrainState {
        TrainState::new(tiny(variant), TrainConfig { max_epochs: 4, ..TrainConfig::default() }).unwrap()
    }

    #[test]
    fn round_trip_preserves_everything() {
        let (train, val) = corpora();
        for v in [Variant::Vanilla, Variant::LearnedInit, Variant::FixedKey] {
            let mut st = state(v);
            assert_eq!(decode(&encode(&st).unwrap()).unwrap(), st);
            st.run_epoch(&train, &val).unwrap();
            let bytes = encode(&st).unwrap();
            let back = decode(&bytes).unwrap();
            assert_eq!(back, st);
            assert_eq!(encode(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn resume_matches_uninterrupted_training() {
        let (train, val) = corpora();
        let mut full = state(Variant::Vanilla);
        full.train(&train, &val, |_| {}).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ptck");
        let mut first = state(Variant::Vanilla);
        first.run_epoch(&train, &val).unwrap();
        first.run_epoch(&train, &val).unwrap();
        save(&first, &path).unwrap();
        let mut resumed = load(&path).unwrap();
        resumed.train(&train, &val, |_| {}).unwrap();

        assert_eq!(resumed, full);
        assert_eq!(encode(&resumed).unwrap(), encode(&full).unwrap());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = encode(&state(Variant::Vanilla)).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(Error::Format(_) | Error::Json(_))));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode(&long), Err(Error::Format(_))));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let st = state(Variant::Vanilla);
        let mut bytes = encode(&st).unwrap();
        // Shrink the declared hidden size in the JSON so the stored tensors no longer fit.
        let key = b"\"hidden_dim\":8";
        let at = bytes.windows(key.len()).position(|w| w == key).unwrap();
        bytes[at + key.len() - 1] = b'7';
        assert!(matches!(decode(&bytes), Err(Error::Shape(_))));
    }
}
