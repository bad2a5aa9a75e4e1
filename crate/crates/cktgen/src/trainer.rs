//! End-to-end optimization of the joint objective: weighted KL plus
//! reconstruction from both latents, latent consistency, classifier
//! guidance, and the filtered contrastive term. Owns checkpointing and
//! deterministic resume.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{sample_standard_normal, AdamW, Graph, Var};
use crate::circuit::Circuit;
use crate::dataset::{make_batch, Batch, BinnedSpecification, DataError, DatasetProfile};
use crate::decoder::reconstruction_loss;
use crate::encoders::reparameterize;
use crate::losses::{classifier_guidance, consistency_loss, infonce, kl_total, LossWeights};
use crate::model::{
    load_checkpoint_full, save_checkpoint_full, CheckpointError, ModelConfig, ModelState,
    TrainProgress,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite {term} at epoch {epoch} step {step}: {value}")]
    NonFinite {
        term: String,
        epoch: u64,
        step: u64,
        value: f64,
    },
    #[error("latent objective: {0}")]
    Latent(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("resume mismatch: {0}")]
    Mismatch(String),
    #[error("training set is empty")]
    Empty,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Table-style ablations: drop the contrastive and guidance terms, drop
/// the variational parameters (deterministic latents, no KL), or drop the
/// same-specification filter mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    None,
    NceCg,
    Vae,
    Filter,
}

impl std::str::FromStr for Ablation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Ablation::None),
            "nce_cg" => Ok(Ablation::NceCg),
            "vae" => Ok(Ablation::Vae),
            "filter" => Ok(Ablation::Filter),
            other => Err(format!("unknown ablation {other}")),
        }
    }
}

/// Objective variant: the conditional/retrieval objective uses a much
/// smaller KL weight than the reconstruction/unconditional one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Conditional,
    Unconditional,
}

impl std::str::FromStr for TrainMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cond" | "conditional" => Ok(TrainMode::Conditional),
            "uncond" | "unconditional" => Ok(TrainMode::Unconditional),
            other => Err(format!("unknown mode {other}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub enable_kl: bool,
    pub enable_consistency: bool,
    pub enable_nce: bool,
    pub enable_cg: bool,
    pub use_filter_mask: bool,
    /// When false the reparameterization noise is zero and encodings are
    /// the Gaussian means.
    pub latent_noise: bool,
    pub deterministic: bool,
    /// Early-stop patience in epochs; 0 disables early stopping.
    pub patience: usize,
}

impl TrainConfig {
    pub fn new(profile: &DatasetProfile, mode: TrainMode) -> Self {
        let mut weights = LossWeights::recommended(profile);
        weights.lambda_kl = match mode {
            TrainMode::Conditional => 1e-5,
            TrainMode::Unconditional => 5e-3,
        };
        TrainConfig {
            lr: 1e-4,
            weight_decay: 0.01,
            batch_size: 32,
            epochs: 300,
            weights,
            seed: 0,
            enable_kl: true,
            enable_consistency: true,
            enable_nce: true,
            enable_cg: true,
            use_filter_mask: true,
            latent_noise: true,
            deterministic: true,
            patience: 30,
        }
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        match ablation {
            Ablation::None => {}
            Ablation::NceCg => {
                self.enable_nce = false;
                self.enable_cg = false;
            }
            Ablation::Vae => {
                self.enable_kl = false;
                self.latent_noise = false;
            }
            Ablation::Filter => {
                self.use_filter_mask = false;
            }
        }
        self
    }

    pub fn check(&self) -> Result<(), String> {
        if !(self.lr > 0.0) {
            return Err(format!("learning rate {} must be positive", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return Err("weight decay must be nonnegative".into());
        }
        if self.batch_size == 0 {
            return Err("batch size must be positive".into());
        }
        self.weights.check()
    }
}

/// Per-step log entry. `total` always equals
/// `lambda_kl * kl + recon + consistency + guidance + nce`, with disabled
/// terms contributing zero.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainLogRecord {
    pub epoch: u64,
    pub step: u64,
    pub kl: f64,
    pub recon: f64,
    pub consistency: f64,
    pub guidance: f64,
    pub nce: f64,
    pub total: f64,
    pub wall_ms: f64,
}

struct LossVars {
    kl: Option<Var>,
    recon: Var,
    consistency: Option<Var>,
    guidance: Option<Var>,
    nce: Option<Var>,
    total: Var,
}

fn compose_losses(
    g: &mut Graph,
    state: &ModelState,
    batch: &Batch,
    cfg: &TrainConfig,
    noise_c: ArrayD<f64>,
    noise_s: ArrayD<f64>,
) -> Result<LossVars, TrainError> {
    let lat_c = state.enc_c.apply(g, &state.store, batch);
    let lat_s = state
        .enc_s
        .apply(g, &state.store, &batch.specs)
        .map_err(TrainError::Latent)?;
    let zc = reparameterize(g, lat_c, noise_c);
    let zs = reparameterize(g, lat_s, noise_s);

    let out_c = state.decoder.teacher_forced_batch(g, &state.store, batch, zc);
    let out_s = state.decoder.teacher_forced_batch(g, &state.store, batch, zs);
    let r_c = reconstruction_loss(g, batch, &out_c, &cfg.weights);
    let r_s = reconstruction_loss(g, batch, &out_s, &cfg.weights);
    let recon = g.add(r_c.total, r_s.total);
    let mut total = recon;

    let kl = if cfg.enable_kl {
        let k = kl_total(g, lat_c, lat_s);
        let wk = g.mul_scalar(k, cfg.weights.lambda_kl);
        total = g.add(total, wk);
        Some(k)
    } else {
        None
    };
    let consistency = if cfg.enable_consistency {
        let c = consistency_loss(g, zc, zs);
        total = g.add(total, c);
        Some(c)
    } else {
        None
    };
    let guidance = if cfg.enable_cg {
        let c = classifier_guidance(g, &state.store, &state.heads, zc, &batch.specs)
            .map_err(TrainError::Latent)?;
        total = g.add(total, c);
        Some(c)
    } else {
        None
    };
    let nce = if cfg.enable_nce {
        let mask = if cfg.use_filter_mask {
            batch.filter_mask.clone()
        } else {
            ndarray::Array2::from_elem((batch.size, batch.size), true)
        };
        let n = infonce(g, zs, zc, &mask, cfg.weights.tau).map_err(TrainError::Latent)?;
        total = g.add(total, n);
        Some(n)
    } else {
        None
    };

    Ok(LossVars {
        kl,
        recon,
        consistency,
        guidance,
        nce,
        total,
    })
}

fn term_value(g: &Graph, v: Option<Var>) -> f64 {
    v.map(|v| g.scalar_value(v)).unwrap_or(0.0)
}

fn check_finite(
    g: &Graph,
    vars: &LossVars,
    epoch: u64,
    step: u64,
) -> Result<(), TrainError> {
    let named = [
        ("kl", vars.kl),
        ("recon", Some(vars.recon)),
        ("consistency", vars.consistency),
        ("guidance", vars.guidance),
        ("nce", vars.nce),
        ("total", Some(vars.total)),
    ];
    for (term, v) in named {
        if let Some(v) = v {
            let value = g.scalar_value(v);
            if !value.is_finite() {
                return Err(TrainError::NonFinite {
                    term: term.into(),
                    epoch,
                    step,
                    value,
                });
            }
        }
    }
    Ok(())
}

/// One optimizer update over a batch. The RNG supplies the dropout stream
/// and the reparameterization noise.
pub fn train_step(
    state: &mut ModelState,
    opt: &mut AdamW,
    batch: &Batch,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    epoch: u64,
    step: u64,
) -> Result<TrainLogRecord, TrainError> {
    let t0 = Instant::now();
    let d = state.config.d_latent;
    let dropout_seed = rng.gen::<u64>();
    let (noise_c, noise_s) = if cfg.latent_noise {
        (
            sample_standard_normal(rng, &[batch.size, d]),
            sample_standard_normal(rng, &[batch.size, d]),
        )
    } else {
        (
            ArrayD::zeros(IxDyn(&[batch.size, d])),
            ArrayD::zeros(IxDyn(&[batch.size, d])),
        )
    };

    let mut g = Graph::new(true, dropout_seed);
    let vars = compose_losses(&mut g, state, batch, cfg, noise_c, noise_s)?;
    check_finite(&g, &vars, epoch, step)?;

    let record = TrainLogRecord {
        epoch,
        step,
        kl: term_value(&g, vars.kl),
        recon: g.scalar_value(vars.recon),
        consistency: term_value(&g, vars.consistency),
        guidance: term_value(&g, vars.guidance),
        nce: term_value(&g, vars.nce),
        total: g.scalar_value(vars.total),
        wall_ms: 0.0,
    };
    let grads = g.backward(vars.total);
    opt.step(&mut state.store, &grads);
    Ok(TrainLogRecord {
        wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        ..record
    })
}

/// Total loss over a split in eval mode with zero latent noise; used for
/// early stopping.
pub fn validation_loss(
    state: &ModelState,
    records: &[(Circuit, BinnedSpecification)],
    cfg: &TrainConfig,
) -> Result<f64, TrainError> {
    let d = state.config.d_latent;
    let mut total = 0.0;
    let mut count = 0.0;
    for chunk in records.chunks(cfg.batch_size) {
        let batch = make_batch(chunk, &state.profile)?;
        let mut g = Graph::new(false, 0);
        let zeros_c = ArrayD::zeros(IxDyn(&[batch.size, d]));
        let zeros_s = ArrayD::zeros(IxDyn(&[batch.size, d]));
        let vars = compose_losses(&mut g, state, &batch, cfg, zeros_c, zeros_s)?;
        total += g.scalar_value(vars.total) * batch.size as f64;
        count += batch.size as f64;
    }
    Ok(total / count.max(1.0))
}

fn epoch_rng(cfg: &TrainConfig, epoch: u64) -> ChaCha8Rng {
    if cfg.deterministic {
        let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
        r.set_stream(epoch.wrapping_add(1));
        r
    } else {
        ChaCha8Rng::from_entropy()
    }
}

/// Runs the optimization loop, writing one checkpoint per epoch plus a
/// final `model.ckpt`. Resuming from an epoch checkpoint in deterministic
/// mode reproduces the uninterrupted run bit-for-bit.
#[allow(clippy::too_many_arguments)]
pub fn fit(
    train: &[(Circuit, BinnedSpecification)],
    val: &[(Circuit, BinnedSpecification)],
    model_config: &ModelConfig,
    profile: &DatasetProfile,
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
    log: &mut dyn FnMut(&TrainLogRecord),
) -> Result<(ModelState, PathBuf), TrainError> {
    cfg.check().map_err(TrainError::Config)?;
    if train.is_empty() {
        return Err(TrainError::Empty);
    }
    fs::create_dir_all(out_dir)?;

    let (mut state, mut opt, start_epoch, progress) = match resume {
        Some(path) => {
            let (st, op, ep, pr) = load_checkpoint_full(path)?;
            if st.profile != *profile {
                return Err(TrainError::Mismatch(format!(
                    "checkpoint profile {} differs from requested {}",
                    st.profile.name, profile.name
                )));
            }
            if st.config != *model_config {
                return Err(TrainError::Mismatch(
                    "checkpoint model configuration differs".into(),
                ));
            }
            let op = op.unwrap_or_else(|| AdamW::new(cfg.lr, cfg.weight_decay));
            (st, op, ep, pr.unwrap_or(TrainProgress {
                best_val: None,
                bad_epochs: 0,
            }))
        }
        None => (
            ModelState::init(model_config, profile, cfg.seed).map_err(TrainError::Config)?,
            AdamW::new(cfg.lr, cfg.weight_decay),
            0,
            TrainProgress {
                best_val: None,
                bad_epochs: 0,
            },
        ),
    };
    opt.lr = cfg.lr;
    opt.weight_decay = cfg.weight_decay;
    let mut progress = progress;

    let final_path = out_dir.join("model.ckpt");
    let mut completed = start_epoch;
    for epoch in start_epoch..cfg.epochs as u64 {
        let mut rng = epoch_rng(cfg, epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let records: Vec<(Circuit, BinnedSpecification)> =
                chunk.iter().map(|&k| train[k].clone()).collect();
            let batch = make_batch(&records, profile)?;
            let record = train_step(&mut state, &mut opt, &batch, cfg, &mut rng, epoch, b as u64)?;
            log(&record);
        }

        let mut stop = false;
        if !val.is_empty() && cfg.patience > 0 {
            let v = validation_loss(&state, val, cfg)?;
            if !v.is_finite() {
                return Err(TrainError::NonFinite {
                    term: "validation".into(),
                    epoch,
                    step: 0,
                    value: v,
                });
            }
            if progress.best_val.map_or(true, |best| v < best) {
                progress.best_val = Some(v);
                progress.bad_epochs = 0;
            } else {
                progress.bad_epochs += 1;
            }
            stop = progress.bad_epochs >= cfg.patience as u64;
        }

        let epoch_path = out_dir.join(format!("epoch_{:04}.ckpt", epoch + 1));
        save_checkpoint_full(&state, Some(&opt), epoch + 1, Some(progress), &epoch_path)?;
        completed = epoch + 1;
        if stop {
            break;
        }
    }
    save_checkpoint_full(&state, Some(&opt), completed, Some(progress), &final_path)?;
    Ok((state, final_path))
}
