//! Circuit and specification encoders producing latent Gaussians.
//!
//! The circuit encoder fuses per-node type and position embeddings with a
//! graph-convolution pass over the adjacency, runs a transformer over the
//! node tokens plus two learnable query tokens, and combines the query
//! outputs with a projection of the device parameters to yield the mean
//! and log-variance heads. The specification encoder embeds the three
//! binned categories, concatenates in (gain, bw, pm) order, and projects
//! through an MLP.

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamStore, Var};
use crate::circuit::{NUM_NODE_TYPES, PARAM_WIDTH};
use crate::dataset::{Batch, BinnedSpecification, DatasetProfile};
use crate::model::ModelConfig;
use crate::nn::{padding_mask, Embedding, GraphConv, Linear, Mlp, TransformerStack};

/// Diagonal Gaussian over the latent space, one row per batch entry.
#[derive(Debug, Clone, Copy)]
pub struct LatentGaussian {
    pub mu: Var,
    pub logvar: Var,
}

/// z = mu + exp(logvar / 2) * noise, on tape.
pub fn reparameterize(g: &mut Graph, latent: LatentGaussian, noise: ArrayD<f64>) -> Var {
    assert_eq!(g.value(latent.mu).shape(), noise.shape());
    let half = g.mul_scalar(latent.logvar, 0.5);
    let sigma = g.exp(half);
    let n = g.leaf(noise);
    let scaled = g.mul(sigma, n);
    g.add(latent.mu, scaled)
}

/// Plain-array version for sampling outside a tape.
pub fn reparameterize_array(
    mu: &ArrayD<f64>,
    logvar: &ArrayD<f64>,
    noise: &ArrayD<f64>,
) -> ArrayD<f64> {
    let mut out = mu.clone();
    ndarray::Zip::from(&mut out)
        .and(logvar)
        .and(noise)
        .for_each(|o, &lv, &n| *o += (0.5 * lv).exp() * n);
    out
}

#[derive(Debug, Clone)]
pub struct CircuitEncoder {
    pub config: ModelConfig,
    pub n_max: usize,
    type_emb: Embedding,
    pos_emb: Embedding,
    gnn: Vec<GraphConv>,
    transformer: TransformerStack,
    param_mlp: Mlp,
    mu_head: Linear,
    logvar_head: Linear,
}

impl CircuitEncoder {
    pub fn new(config: &ModelConfig, n_max: usize) -> Self {
        let d = config.d_model;
        let gnn = (0..config.gnn_layers)
            .map(|k| GraphConv::new(&format!("enc_c.gnn{k}"), d, d))
            .collect();
        CircuitEncoder {
            config: config.clone(),
            n_max,
            type_emb: Embedding::new("enc_c.type_emb", NUM_NODE_TYPES, d),
            pos_emb: Embedding::new("enc_c.pos_emb", n_max, d),
            gnn,
            transformer: TransformerStack::new(
                "enc_c.tf",
                config.enc_layers,
                d,
                config.heads,
                config.ff_dim,
                config.p_drop_enc,
            ),
            param_mlp: Mlp::new(
                "enc_c.param_mlp",
                &[n_max * PARAM_WIDTH, config.d_hidden, d],
            ),
            mu_head: Linear::new("enc_c.mu_head", 2 * d, config.d_latent),
            logvar_head: Linear::new("enc_c.logvar_head", 2 * d, config.d_latent),
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.type_emb.register(store, rng);
        self.pos_emb.register(store, rng);
        for l in &self.gnn {
            l.register(store, rng);
        }
        self.transformer.register(store, rng);
        self.param_mlp.register(store, rng);
        self.mu_head.register(store, rng);
        self.logvar_head.register(store, rng);
        store.insert_normal("enc_c.q_mu", &[1, self.config.d_model], 0.02, rng);
        store.insert_normal("enc_c.q_sigma", &[1, self.config.d_model], 0.02, rng);
    }

    /// Encodes a whole batch; returns `[m, d_latent]` mean and log-variance.
    pub fn apply(&self, g: &mut Graph, store: &ParamStore, batch: &Batch) -> LatentGaussian {
        let d = self.config.d_model;
        let (m, n) = (batch.size, batch.n_max);
        assert!(n <= self.n_max, "batch capacity exceeds encoder capacity");

        // padded slots embed row 0; the attention mask hides them anyway
        let mut type_ids = Vec::with_capacity(m * n);
        let mut pos_ids = Vec::with_capacity(m * n);
        for row in 0..m {
            for slot in 0..n {
                if slot < batch.node_counts[row] {
                    type_ids.push(batch.type_ids[[row, slot]]);
                    pos_ids.push(batch.position_ids[[row, slot]]);
                } else {
                    type_ids.push(0);
                    pos_ids.push(0);
                }
            }
        }
        let temb = self.type_emb.apply(g, store, &type_ids);
        let pemb = self.pos_emb.apply(g, store, &pos_ids);
        let pemb = g.dropout(pemb, self.config.p_drop_embed);
        let base = g.add(temb, pemb);
        let base = g.reshape(base, &[m, n, d]);

        // adjacency pass over the fused embeddings
        let a_hat = g.leaf(crate::nn::normalized_adjacency(
            &batch.adjacency.clone().into_dyn(),
        ));
        let mut h = base;
        for layer in &self.gnn {
            h = layer.apply(g, store, h, a_hat);
        }
        let h = g.dropout(h, self.config.p_drop_gnn);
        let tokens = g.add(base, h);

        // prepend the two learnable query tokens
        let zeros_m = g.leaf(ArrayD::zeros(IxDyn(&[m, 1, d])));
        let q_mu = g.param(store, "enc_c.q_mu");
        let q_mu = g.reshape(q_mu, &[1, 1, d]);
        let q_mu = g.add(q_mu, zeros_m);
        let q_sigma = g.param(store, "enc_c.q_sigma");
        let q_sigma = g.reshape(q_sigma, &[1, 1, d]);
        let q_sigma = g.add(q_sigma, zeros_m);
        let seq = g.concat(&[q_mu, q_sigma, tokens], 1);

        let counts: Vec<usize> = batch.node_counts.iter().map(|&c| c + 2).collect();
        let mask = g.leaf(padding_mask(&counts, n + 2));
        let out = self.transformer.apply(g, store, seq, Some(mask));

        let mu_tok = g.slice(out, 1, 0, 1);
        let mu_tok = g.reshape(mu_tok, &[m, d]);
        let sig_tok = g.slice(out, 1, 1, 1);
        let sig_tok = g.reshape(sig_tok, &[m, d]);

        // masked device parameters, flattened and projected
        let masked = (&batch.params * &batch.param_mask).into_dyn();
        let flat = masked
            .into_shape_with_order(IxDyn(&[m, n * PARAM_WIDTH]))
            .unwrap();
        let flat = if n < self.n_max {
            let mut padded = ArrayD::zeros(IxDyn(&[m, self.n_max * PARAM_WIDTH]));
            padded
                .slice_axis_mut(ndarray::Axis(1), ndarray::Slice::from(0..n * PARAM_WIDTH))
                .assign(&flat);
            padded
        } else {
            flat
        };
        let xb = g.leaf(flat);
        let xb = self.param_mlp.apply(g, store, xb);

        let mu_in = g.concat(&[mu_tok, xb], 1);
        let sig_in = g.concat(&[sig_tok, xb], 1);
        LatentGaussian {
            mu: self.mu_head.apply(g, store, mu_in),
            logvar: self.logvar_head.apply(g, store, sig_in),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SpecEncoder {
    pub config: ModelConfig,
    pub categories: (usize, usize, usize),
    gain_emb: Embedding,
    bw_emb: Embedding,
    pm_emb: Embedding,
    mlp: Mlp,
    mu_head: Linear,
    logvar_head: Linear,
}

impl SpecEncoder {
    pub fn new(config: &ModelConfig, profile: &DatasetProfile) -> Self {
        let d = config.d_model;
        let (cg, cb, cp) = profile.spec_category_counts();
        SpecEncoder {
            config: config.clone(),
            categories: (cg, cb, cp),
            gain_emb: Embedding::new("enc_s.gain_emb", cg, d),
            bw_emb: Embedding::new("enc_s.bw_emb", cb, d),
            pm_emb: Embedding::new("enc_s.pm_emb", cp, d),
            mlp: Mlp::new("enc_s.mlp", &[3 * d, config.d_hidden, d]),
            mu_head: Linear::new("enc_s.mu_head", d, config.d_latent),
            logvar_head: Linear::new("enc_s.logvar_head", d, config.d_latent),
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.gain_emb.register(store, rng);
        self.bw_emb.register(store, rng);
        self.pm_emb.register(store, rng);
        self.mlp.register(store, rng);
        self.mu_head.register(store, rng);
        self.logvar_head.register(store, rng);
    }

    /// Encodes a list of binned specifications as `[m, d_latent]` heads.
    pub fn apply(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        specs: &[BinnedSpecification],
    ) -> Result<LatentGaussian, String> {
        let (cg, cb, cp) = self.categories;
        for s in specs {
            if s.gain_cat as usize >= cg || s.bw_cat as usize >= cb || s.pm_cat as usize >= cp {
                return Err(format!(
                    "specification ({}, {}, {}) outside category grid ({cg}, {cb}, {cp})",
                    s.gain_cat, s.bw_cat, s.pm_cat
                ));
            }
        }
        let gain_ids: Vec<usize> = specs.iter().map(|s| s.gain_cat as usize).collect();
        let bw_ids: Vec<usize> = specs.iter().map(|s| s.bw_cat as usize).collect();
        let pm_ids: Vec<usize> = specs.iter().map(|s| s.pm_cat as usize).collect();
        let eg = self.gain_emb.apply(g, store, &gain_ids);
        let eb = self.bw_emb.apply(g, store, &bw_ids);
        let ep = self.pm_emb.apply(g, store, &pm_ids);
        let cat = g.concat(&[eg, eb, ep], 1);
        let h = self.mlp.apply(g, store, cat);
        Ok(LatentGaussian {
            mu: self.mu_head.apply(g, store, h),
            logvar: self.logvar_head.apply(g, store, h),
        })
    }
}
