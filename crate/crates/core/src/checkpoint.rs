//! Checkpoints as a single safetensors file.
//!
//! Tensor names carry a component prefix (`g/`, `f/`, `d/`, `e/`, `r/`, `p/`,
//! `opt_g/`, `opt_d/`, `w_avg`). Everything else (configuration text, step,
//! RNG position, optimizer step counts, frozen-network hashes, sampler state)
//! lives in one JSON string under the `meta` header key.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, SafeTensors, View};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::data::EpochSampler;
use crate::embeddings::FrozenHashes;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::ops;
use crate::styles::StyleAverage;
use crate::training::{Model, TrainState, DTYPE};

const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    format: u32,
    config: String,
    step: u64,
    rng: RngState,
    opt_g_step: u64,
    opt_d_step: u64,
    frozen: FrozenHashes,
    sampler: EpochSampler,
}

struct Raw {
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl View for &Raw {
    fn dtype(&self) -> Dtype {
        Dtype::F32
    }

    fn shape(&self) -> &[usize] {
        &self.shape
    }

    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Borrowed(&self.data)
    }

    fn data_len(&self) -> usize {
        self.data.len()
    }
}

fn raw(t: &Tensor) -> Result<Raw> {
    let v = ops::to_vec_f32(t)?;
    Ok(Raw { shape: t.dims().to_vec(), data: v.iter().flat_map(|x| x.to_le_bytes()).collect() })
}

const STORES: [&str; 6] = ["g", "f", "d", "e", "r", "p"];

fn stores(model: &Model) -> [&ParamStore; 6] {
    [
        &model.g_store,
        &model.f_store,
        &model.d_store,
        &model.frozen.encoder_store,
        &model.frozen.identity_store,
        &model.frozen.perceptual_store,
    ]
}

fn fmt_err(e: impl std::fmt::Display) -> Error {
    Error::Format(format!("checkpoint: {e}"))
}

/// Serialises a training state.
pub fn to_bytes(state: &TrainState) -> Result<Vec<u8>> {
    let mut tensors: BTreeMap<String, Raw> = BTreeMap::new();
    for (prefix, store) in STORES.iter().zip(stores(&state.model)) {
        for (name, var) in store.iter() {
            tensors.insert(format!("{prefix}/{name}"), raw(var.as_tensor())?);
        }
    }
    for (prefix, opt) in [("opt_g", &state.opt_g), ("opt_d", &state.opt_d)] {
        for (name, t) in opt.state_tensors() {
            tensors.insert(format!("{prefix}/{name}"), raw(&t)?);
        }
    }
    let w = state.model.w_avg.values();
    tensors
        .insert("w_avg".into(), Raw { shape: vec![w.len()], data: w.iter().flat_map(|x| x.to_le_bytes()).collect() });
    let meta = Meta {
        format: FORMAT_VERSION,
        config: state.model.config.to_text(),
        step: state.step,
        rng: RngState {
            seed: hex::encode(state.rng.get_seed()),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
        opt_g_step: state.opt_g.step_count(),
        opt_d_step: state.opt_d.step_count(),
        frozen: state.model.frozen_hashes()?,
        sampler: state.sampler.clone(),
    };
    let info = HashMap::from([("meta".to_string(), serde_json::to_string(&meta)?)]);
    safetensors::tensor::serialize(tensors.iter().map(|(k, v)| (k.as_str(), v)), Some(info)).map_err(fmt_err)
}

fn to_tensor(view: &safetensors::tensor::TensorView<'_>) -> Result<Tensor> {
    if view.dtype() != Dtype::F32 {
        return Err(fmt_err(format!("unsupported dtype {:?}", view.dtype())));
    }
    let v: Vec<f32> = view.data().chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(Tensor::from_vec(v, view.shape(), &Device::Cpu)?.to_dtype(DTYPE)?)
}

/// Restores a training state.
pub fn from_bytes(bytes: &[u8]) -> Result<TrainState> {
    let st = SafeTensors::deserialize(bytes).map_err(fmt_err)?;
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(fmt_err)?;
    let meta_text =
        header.metadata().as_ref().and_then(|m| m.get("meta")).ok_or_else(|| fmt_err("missing meta header"))?;
    let meta: Meta = serde_json::from_str(meta_text)?;
    if meta.format != FORMAT_VERSION {
        return Err(fmt_err(format!("unsupported format version {}", meta.format)));
    }
    let config = Config::parse_str(&meta.config)?;
    let mut model = Model::build(&config)?;

    let mut loaded: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, view) in st.tensors() {
        loaded.insert(name, to_tensor(&view)?);
    }
    for (prefix, store) in STORES.iter().zip(stores(&model)) {
        for name in store.names() {
            let key = format!("{prefix}/{name}");
            let t = loaded.remove(&key).ok_or_else(|| fmt_err(format!("missing tensor {key}")))?;
            store.assign(name, &t)?;
        }
    }
    let w = loaded.remove("w_avg").ok_or_else(|| fmt_err("missing tensor w_avg"))?;
    model.w_avg = StyleAverage::from_values(ops::to_vec_f32(&w)?, config.train.w_avg_decay);
    if model.frozen_hashes()? != meta.frozen {
        return Err(fmt_err("frozen network hashes do not match the stored values"));
    }

    let mut opt_state: [BTreeMap<String, Tensor>; 2] = Default::default();
    for (name, t) in loaded {
        let (slot, rest) = if let Some(r) = name.strip_prefix("opt_g/") {
            (0, r)
        } else if let Some(r) = name.strip_prefix("opt_d/") {
            (1, r)
        } else {
            return Err(fmt_err(format!("unexpected tensor {name}")));
        };
        opt_state[slot].insert(rest.to_string(), t);
    }

    let mut state = TrainState::new(model, meta.sampler.len);
    state.opt_g.restore(meta.opt_g_step, &opt_state[0], DTYPE)?;
    state.opt_d.restore(meta.opt_d_step, &opt_state[1], DTYPE)?;
    state.step = meta.step;
    state.sampler = meta.sampler;
    let seed: [u8; 32] =
        hex::decode(&meta.rng.seed).map_err(fmt_err)?.try_into().map_err(|_| fmt_err("rng seed must be 32 bytes"))?;
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
    rng.set_stream(meta.rng.stream);
    rng.set_word_pos(meta.rng.word_pos.parse::<u128>().map_err(fmt_err)?);
    state.rng = rng;
    Ok(state)
}

pub fn save(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, to_bytes(state)?)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<TrainState> {
    from_bytes(&std::fs::read(path)?)
}

/// Loads only the networks, for inference and evaluation.
pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    Ok(load(path)?.model)
}
