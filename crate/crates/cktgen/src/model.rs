//! Model assembly: configuration, parameter initialization, and the
//! versioned binary checkpoint format.

use serde::{Deserialize, Serialize};

/// Architecture hyperparameters shared by the encoders and the decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Token width d.
    pub d_model: usize,
    /// Latent width d'.
    pub d_latent: usize,
    /// Wide hidden width d''.
    pub d_hidden: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Graph-convolution depth used by both the circuit encoder and the
    /// decoder edge pathway.
    pub gnn_layers: usize,
    pub p_drop_embed: f64,
    pub p_drop_gnn: f64,
    pub p_drop_enc: f64,
    pub p_drop_dec: f64,
    /// When set, each pairwise edge decision also sees the latent row of
    /// the edge-pass transformer, widening the pair MLP input to 3d.
    #[serde(default)]
    pub edge_pair_latent: bool,
}

impl ModelConfig {
    /// Full-scale configuration: d, d', d'' of 128/64/512, 4-layer
    /// transformers with 8 heads and feed-forward width 512.
    pub fn full() -> Self {
        ModelConfig {
            d_model: 128,
            d_latent: 64,
            d_hidden: 512,
            enc_layers: 4,
            dec_layers: 4,
            heads: 8,
            ff_dim: 512,
            gnn_layers: 1,
            p_drop_embed: 0.2,
            p_drop_gnn: 0.2,
            p_drop_enc: 0.3,
            p_drop_dec: 0.1,
            edge_pair_latent: false,
        }
    }

    /// Small configuration for single-core smoke runs and tests.
    pub fn desk() -> Self {
        ModelConfig {
            d_model: 32,
            d_latent: 16,
            d_hidden: 64,
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            ff_dim: 64,
            gnn_layers: 1,
            p_drop_embed: 0.2,
            p_drop_gnn: 0.2,
            p_drop_enc: 0.3,
            p_drop_dec: 0.1,
            edge_pair_latent: false,
        }
    }

    pub fn check(&self) -> Result<(), String> {
        if self.d_model == 0 || self.d_latent == 0 || self.d_hidden == 0 {
            return Err("model dimensions must be positive".into());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 || self.d_hidden % self.heads != 0 {
            return Err(format!(
                "head count {} must divide widths {} and {}",
                self.heads, self.d_model, self.d_hidden
            ));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return Err("transformer depth must be positive".into());
        }
        for p in [
            self.p_drop_embed,
            self.p_drop_gnn,
            self.p_drop_enc,
            self.p_drop_dec,
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(format!("dropout {p} outside [0, 1)"));
            }
        }
        Ok(())
    }
}

use std::fs;
use std::io::{self, Read as _, Write as _};
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AdamW, ParamStore};
use crate::dataset::DatasetProfile;
use crate::decoder::Decoder;
use crate::encoders::{CircuitEncoder, SpecEncoder};
use crate::losses::ClassifierHeads;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

/// Both encoders, the decoder, and the guidance heads over one parameter
/// store, tied to the profile they were initialized for.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: ModelConfig,
    pub profile: DatasetProfile,
    pub enc_c: CircuitEncoder,
    pub enc_s: SpecEncoder,
    pub decoder: Decoder,
    pub heads: ClassifierHeads,
    pub store: ParamStore,
}

impl ModelState {
    /// Builds and initializes every component from one seeded stream, in a
    /// fixed registration order so initialization is reproducible.
    pub fn init(config: &ModelConfig, profile: &DatasetProfile, seed: u64) -> Result<Self, String> {
        config.check()?;
        profile.check().map_err(|e| e.to_string())?;
        let enc_c = CircuitEncoder::new(config, profile.n_max);
        let enc_s = SpecEncoder::new(config, profile);
        let decoder = Decoder::new(config, profile.n_max);
        let heads = ClassifierHeads::new(config, profile);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        enc_c.register(&mut store, &mut rng);
        enc_s.register(&mut store, &mut rng);
        decoder.register(&mut store, &mut rng);
        heads.register(&mut store, &mut rng);
        Ok(ModelState {
            config: config.clone(),
            profile: profile.clone(),
            enc_c,
            enc_s,
            decoder,
            heads,
            store,
        })
    }

    /// Rebuilds the component wiring around an already-populated store.
    fn from_parts(
        config: ModelConfig,
        profile: DatasetProfile,
        store: ParamStore,
    ) -> Result<Self, String> {
        config.check()?;
        profile.check().map_err(|e| e.to_string())?;
        Ok(ModelState {
            enc_c: CircuitEncoder::new(&config, profile.n_max),
            enc_s: SpecEncoder::new(&config, &profile),
            decoder: Decoder::new(&config, profile.n_max),
            heads: ClassifierHeads::new(&config, &profile),
            config,
            profile,
            store,
        })
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct OptimizerHeader {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: u64,
    entries: Vec<TensorEntry>,
}

/// Early-stop bookkeeping carried inside training checkpoints so a
/// resumed run behaves exactly like an uninterrupted one.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainProgress {
    /// Best validation loss seen so far, absent before the first pass.
    pub best_val: Option<f64>,
    pub bad_epochs: u64,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    profile: DatasetProfile,
    epoch: u64,
    params: Vec<TensorEntry>,
    optimizer: Option<OptimizerHeader>,
    #[serde(default)]
    progress: Option<TrainProgress>,
}

const CKPT_MAGIC: &[u8; 8] = b"CKTGCKPT";
const CKPT_VERSION: u32 = 1;

fn write_tensor(buf: &mut Vec<u8>, t: &ArrayD<f64>) {
    for &v in t.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_tensor(data: &[u8], off: &mut usize, shape: &[usize]) -> Result<ArrayD<f64>, CheckpointError> {
    let n: usize = shape.iter().product();
    let need = n * 8;
    if *off + need > data.len() {
        return Err(CheckpointError::Format("tensor data truncated".into()));
    }
    let mut vals = Vec::with_capacity(n);
    for k in 0..n {
        let s = *off + k * 8;
        vals.push(f64::from_le_bytes(data[s..s + 8].try_into().unwrap()));
    }
    *off += need;
    ArrayD::from_shape_vec(IxDyn(shape), vals)
        .map_err(|e| CheckpointError::Format(e.to_string()))
}

/// Writes magic, version, a JSON header, then raw little-endian f64 tensor
/// data for all parameters and, when present, the optimizer moments. The
/// byte stream round-trips bit-exactly.
pub fn save_checkpoint(
    state: &ModelState,
    optimizer: Option<&AdamW>,
    epoch: u64,
    path: &Path,
) -> Result<(), CheckpointError> {
    save_checkpoint_full(state, optimizer, epoch, None, path)
}

pub fn save_checkpoint_full(
    state: &ModelState,
    optimizer: Option<&AdamW>,
    epoch: u64,
    progress: Option<TrainProgress>,
    path: &Path,
) -> Result<(), CheckpointError> {
    let params: Vec<TensorEntry> = state
        .store
        .iter()
        .map(|(name, t)| TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
        })
        .collect();
    let optimizer_header = optimizer.map(|opt| OptimizerHeader {
        lr: opt.lr,
        beta1: opt.beta1,
        beta2: opt.beta2,
        eps: opt.eps,
        weight_decay: opt.weight_decay,
        t: opt.t,
        entries: opt
            .m
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    });
    let header = CheckpointHeader {
        config: state.config.clone(),
        profile: state.profile.clone(),
        epoch,
        params,
        optimizer: optimizer_header,
        progress,
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| CheckpointError::Format(e.to_string()))?;

    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    for (_, t) in state.store.iter() {
        write_tensor(&mut buf, t);
    }
    if let Some(opt) = optimizer {
        for (name, m) in opt.m.iter() {
            write_tensor(&mut buf, m);
            write_tensor(&mut buf, &opt.v[name]);
        }
    }

    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&buf)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(
    path: &Path,
) -> Result<(ModelState, Option<AdamW>, u64), CheckpointError> {
    let (state, opt, epoch, _) = load_checkpoint_full(path)?;
    Ok((state, opt, epoch))
}

pub fn load_checkpoint_full(
    path: &Path,
) -> Result<(ModelState, Option<AdamW>, u64, Option<TrainProgress>), CheckpointError> {
    let mut data = Vec::new();
    fs::File::open(path)?.read_to_end(&mut data)?;
    if data.len() < 20 || &data[0..8] != CKPT_MAGIC {
        return Err(CheckpointError::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(data[8..12].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(CheckpointError::Format(format!(
            "unsupported version {version}"
        )));
    }
    let hlen = u64::from_le_bytes(data[12..20].try_into().unwrap()) as usize;
    if 20 + hlen > data.len() {
        return Err(CheckpointError::Format("header truncated".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&data[20..20 + hlen])
        .map_err(|e| CheckpointError::Format(e.to_string()))?;

    let mut off = 20 + hlen;
    let mut store = ParamStore::new();
    for e in &header.params {
        let t = read_tensor(&data, &mut off, &e.shape)?;
        store.insert(&e.name, t);
    }
    let optimizer = match &header.optimizer {
        None => None,
        Some(oh) => {
            let mut m = IndexMap::new();
            let mut v = IndexMap::new();
            for e in &oh.entries {
                m.insert(e.name.clone(), read_tensor(&data, &mut off, &e.shape)?);
                v.insert(e.name.clone(), read_tensor(&data, &mut off, &e.shape)?);
            }
            Some(AdamW {
                lr: oh.lr,
                beta1: oh.beta1,
                beta2: oh.beta2,
                eps: oh.eps,
                weight_decay: oh.weight_decay,
                t: oh.t,
                m,
                v,
            })
        }
    };
    if off != data.len() {
        return Err(CheckpointError::Format(format!(
            "{} trailing bytes",
            data.len() - off
        )));
    }
    let state = ModelState::from_parts(header.config, header.profile, store)
        .map_err(CheckpointError::Format)?;
    Ok((state, optimizer, header.epoch, header.progress))
}
