//! Autoregressive circuit decoder. A causal transformer consumes the
//! projected latent as row zero followed by the shifted token embeddings
//! and emits per-step type and position logits; a second pass over the
//! node set scores every j < i edge pair autoregressively, with each
//! vertex's incoming edges conditioned only on edges into earlier
//! vertices; device parameters come straight from the latent through a
//! dedicated head.

use ndarray::{Array3, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamStore, Var};
use crate::circuit::{Circuit, Node, NUM_NODE_TYPES, PARAM_WIDTH};
use crate::dataset::{make_batch, Batch, BinnedSpecification, DataError, DatasetProfile, NONE_TYPE_ID};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::nn::{causal_mask, causal_normalized_adjacency, Embedding, GraphConv, Linear, Mlp, TransformerStack};

/// Real node types plus the pad id used for teacher-forced sequences.
pub const TYPE_VOCAB: usize = NUM_NODE_TYPES + 1;

/// Node emission strategy during generation. Greedy takes the argmax and
/// thresholds edge probabilities at 0.5; categorical samples types,
/// positions, and edges at the given temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampler {
    Greedy,
    Categorical { temperature: f64 },
}

/// Teacher-forced outputs: `type_logits` is `[m, n_max, 27]`, `pos_logits`
/// `[m, n_max, n_max]`, `edge_logits` one column per j < i slot, and
/// `param_pred` `[m, n_max, P]`.
#[derive(Debug, Clone, Copy)]
pub struct DecoderLogits {
    pub type_logits: Var,
    pub pos_logits: Var,
    pub edge_logits: Var,
    pub param_pred: Var,
}

/// Reconstruction components and their weighted sum.
#[derive(Debug, Clone, Copy)]
pub struct ReconLoss {
    pub types: Var,
    pub positions: Var,
    pub edges: Var,
    pub params: Var,
    pub total: Var,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    n_max: usize,
    d_latent: usize,
    d_model: usize,
    d_hidden: usize,
    pair_latent: bool,
    z_proj: Linear,
    type_emb: Embedding,
    pos_emb: Embedding,
    tf: TransformerStack,
    type_head: Linear,
    pos_head: Linear,
    edge_gnn: GraphConv,
    edge_out: Linear,
    f_e: Mlp,
    f_b: Mlp,
}

impl Decoder {
    pub fn new(config: &ModelConfig, n_max: usize) -> Self {
        let dh = config.d_hidden;
        let pair_width = if config.edge_pair_latent {
            3 * config.d_model
        } else {
            2 * config.d_model
        };
        Decoder {
            n_max,
            d_latent: config.d_latent,
            d_model: config.d_model,
            d_hidden: dh,
            pair_latent: config.edge_pair_latent,
            z_proj: Linear::new("dec.z_proj", config.d_latent, dh),
            type_emb: Embedding::new("dec.type_emb", TYPE_VOCAB, dh),
            pos_emb: Embedding::new("dec.pos_emb", n_max, dh),
            tf: TransformerStack::new(
                "dec.tf",
                config.dec_layers,
                dh,
                config.heads,
                config.ff_dim,
                config.p_drop_dec,
            ),
            type_head: Linear::new("dec.type_head", dh, TYPE_VOCAB),
            pos_head: Linear::new("dec.pos_head", dh, n_max),
            edge_gnn: GraphConv::new("dec.edge_gnn", dh, dh),
            edge_out: Linear::new("dec.edge_out", dh, config.d_model),
            f_e: Mlp::new("dec.f_e", &[pair_width, config.d_model, 1]),
            f_b: Mlp::new("dec.f_b", &[config.d_latent, dh, n_max * PARAM_WIDTH]),
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.z_proj.register(store, rng);
        self.type_emb.register(store, rng);
        self.pos_emb.register(store, rng);
        self.tf.register(store, rng);
        self.type_head.register(store, rng);
        self.pos_head.register(store, rng);
        self.edge_gnn.register(store, rng);
        self.edge_out.register(store, rng);
        self.f_e.register(store, rng);
        self.f_b.register(store, rng);
    }

    fn project_latent(&self, g: &mut Graph, store: &ParamStore, z: Var, m: usize) -> Var {
        let zp = self.z_proj.apply(g, store, z);
        g.reshape(zp, &[m, 1, self.d_hidden])
    }

    fn token_embeddings(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        types: &[usize],
        positions: &[usize],
        m: usize,
        n: usize,
    ) -> Var {
        let te = self.type_emb.apply(g, store, types);
        let pe = self.pos_emb.apply(g, store, positions);
        let tok = g.add(te, pe);
        g.reshape(tok, &[m, n, self.d_hidden])
    }

    /// Edge pass: graph convolution over the supplied adjacency restricted
    /// to each vertex's incoming edges, latent row prepended, shared
    /// transformer, then one logit per j < i pair in flat order. The logit
    /// for pair (j, i) reads transformer row i as the query (it attends the
    /// latent and graph rows 0..i-1, so only edges into vertices before i)
    /// and row j + 1 as the key (attends up to vertex j's own in-edges,
    /// still before i). No logit can see the edge it predicts, which keeps
    /// teacher forcing honest and lets generation decide edges vertex by
    /// vertex against the adjacency built so far. `tok` is
    /// `[m, n, d_hidden]`.
    fn edge_logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        zp3: Var,
        tok: Var,
        adjacency: &Array3<f64>,
        m: usize,
        n: usize,
    ) -> Var {
        let a_hat = g.leaf(causal_normalized_adjacency(&adjacency.clone().into_dyn()));
        let conv = self.edge_gnn.apply(g, store, tok, a_hat);
        let seq = g.concat(&[zp3, conv], 1);
        let mask = g.leaf(causal_mask(n + 1));
        let h = self.tf.apply(g, store, seq, Some(mask));
        let xe3 = self.edge_out.apply3(g, store, h);
        let xe = g.reshape(xe3, &[m * (n + 1), self.d_model]);

        let slots = n * (n - 1) / 2;
        let mut rows_i = Vec::with_capacity(m * slots);
        let mut rows_j = Vec::with_capacity(m * slots);
        let mut rows_z = Vec::with_capacity(m * slots);
        for b in 0..m {
            let base = b * (n + 1);
            for i in 1..n {
                for j in 0..i {
                    rows_i.push(base + i);
                    rows_j.push(base + j + 1);
                    rows_z.push(base);
                }
            }
        }
        let xi = g.gather_rows(xe, &rows_i);
        let xj = g.gather_rows(xe, &rows_j);
        let y = if self.pair_latent {
            let xz = g.gather_rows(xe, &rows_z);
            g.concat(&[xi, xj, xz], 1)
        } else {
            g.concat(&[xi, xj], 1)
        };
        let logit = self.f_e.apply(g, store, y);
        g.reshape(logit, &[m, slots])
    }

    /// Teacher-forced forward over a batch: step i sees the latent plus
    /// ground-truth tokens strictly before i; the edge pass teacher-forces
    /// the ground-truth adjacency, with causal masking so pair (j, i)
    /// logits depend only on edges into vertices before i.
    pub fn teacher_forced_batch(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &Batch,
        z: Var,
    ) -> DecoderLogits {
        let (m, n) = (batch.size, batch.n_max);
        assert_eq!(n, self.n_max, "batch capacity differs from decoder");
        assert_eq!(g.value(z).shape(), [m, self.d_latent]);
        let zp3 = self.project_latent(g, store, z, m);
        let types: Vec<usize> = batch.type_ids.iter().cloned().collect();
        let positions: Vec<usize> = batch.position_ids.iter().cloned().collect();
        let tok = self.token_embeddings(g, store, &types, &positions, m, n);

        let prefix = g.slice(tok, 1, 0, n - 1);
        let seq = g.concat(&[zp3, prefix], 1);
        let mask = g.leaf(causal_mask(n));
        let h = self.tf.apply(g, store, seq, Some(mask));
        let type_logits = self.type_head.apply3(g, store, h);
        let pos_logits = self.pos_head.apply3(g, store, h);

        let edge_logits = self.edge_logits(g, store, zp3, tok, &batch.adjacency, m, n);

        let pb = self.f_b.apply(g, store, z);
        let param_pred = g.reshape(pb, &[m, n, PARAM_WIDTH]);

        DecoderLogits {
            type_logits,
            pos_logits,
            edge_logits,
            param_pred,
        }
    }

    /// Single-circuit convenience wrapper; errors if the circuit exceeds
    /// the profile capacity.
    pub fn teacher_forced_logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        circuit: &Circuit,
        spec: BinnedSpecification,
        profile: &DatasetProfile,
        z: Var,
    ) -> Result<DecoderLogits, DataError> {
        let batch = make_batch(&[(circuit.clone(), spec)], profile)?;
        Ok(self.teacher_forced_batch(g, store, &batch, z))
    }

    /// Autoregressive generation: emit (type, position) pairs until the
    /// OUTPUT type or the node budget, then decide incoming edges one
    /// vertex at a time, feeding the adjacency accepted so far back into
    /// the edge pass, then fill parameters. Edges always satisfy j < i, so
    /// the result is acyclic by construction; other validity rules are
    /// measured downstream, not enforced.
    pub fn generate(
        &self,
        store: &ParamStore,
        profile: &DatasetProfile,
        z: &[f64],
        max_nodes: usize,
        sampler: Sampler,
        rng: &mut ChaCha8Rng,
    ) -> Circuit {
        assert_eq!(z.len(), self.d_latent);
        let budget = max_nodes.min(self.n_max);
        let out_ty = profile.convention.output_type as usize;
        let z_arr = ArrayD::from_shape_vec(IxDyn(&[1, self.d_latent]), z.to_vec()).unwrap();

        let mut types: Vec<usize> = Vec::new();
        let mut positions: Vec<usize> = Vec::new();
        while types.len() < budget {
            let step = types.len();
            let mut g = Graph::new(false, 0);
            let zv = g.leaf(z_arr.clone());
            let zp3 = self.project_latent(&mut g, store, zv, 1);
            let seq = if step == 0 {
                zp3
            } else {
                let tok = self.token_embeddings(&mut g, store, &types, &positions, 1, step);
                g.concat(&[zp3, tok], 1)
            };
            let mask = g.leaf(causal_mask(step + 1));
            let h = self.tf.apply(&mut g, store, seq, Some(mask));
            let last = g.slice(h, 1, step, 1);
            let last2 = g.reshape(last, &[1, self.d_hidden]);
            let tl = self.type_head.apply(&mut g, store, last2);
            let pl = self.pos_head.apply(&mut g, store, last2);
            let mut t_logits: Vec<f64> = g.value(tl).iter().cloned().collect();
            t_logits[NONE_TYPE_ID] = f64::NEG_INFINITY;
            let p_logits: Vec<f64> = g.value(pl).iter().cloned().collect();
            let t = pick(&t_logits, sampler, rng);
            let p = pick(&p_logits, sampler, rng);
            types.push(t);
            positions.push(p);
            if t == out_ty {
                break;
            }
        }

        let n = types.len();
        let mut edges: Vec<(usize, usize)> = Vec::new();
        if n >= 2 {
            // pair (j, i) logits only see edges into vertices before i, so
            // rerunning the pass after each vertex's decisions reproduces
            // the teacher-forced conditionals exactly
            let mut adjacency = Array3::<f64>::zeros((1, n, n));
            for i in 1..n {
                let mut g = Graph::new(false, 0);
                let zv = g.leaf(z_arr.clone());
                let zp3 = self.project_latent(&mut g, store, zv, 1);
                let tok = self.token_embeddings(&mut g, store, &types, &positions, 1, n);
                let logits = self.edge_logits(&mut g, store, zp3, tok, &adjacency, 1, n);
                let lv = g.value(logits);
                let base = i * (i - 1) / 2;
                for j in 0..i {
                    let logit = lv[[0, base + j]];
                    let keep = match sampler {
                        Sampler::Greedy => logit > 0.0,
                        Sampler::Categorical { temperature } => {
                            let p = 1.0 / (1.0 + (-logit / temperature).exp());
                            rng.gen::<f64>() < p
                        }
                    };
                    if keep {
                        edges.push((j, i));
                        adjacency[[0, j, i]] = 1.0;
                    }
                }
            }
        }

        let mut g = Graph::new(false, 0);
        let zv = g.leaf(z_arr);
        let pb = self.f_b.apply(&mut g, store, zv);
        let pv = g.value(pb);
        let mut nodes = Vec::with_capacity(n);
        for k in 0..n {
            let arity = profile.node_types[types[k]].param_arity;
            let vals: Vec<f64> = (0..arity)
                .map(|s| pv[[0, k * PARAM_WIDTH + s]])
                .collect();
            nodes.push(Node::new(types[k] as u16, positions[k] as u16, &vals));
        }
        Circuit::new(nodes, edges).expect("generated edges satisfy j < i")
    }
}

fn pick(logits: &[f64], sampler: Sampler, rng: &mut ChaCha8Rng) -> usize {
    match sampler {
        Sampler::Greedy => {
            let mut best = 0;
            for (k, &v) in logits.iter().enumerate() {
                if v > logits[best] {
                    best = k;
                }
            }
            best
        }
        Sampler::Categorical { temperature } => {
            assert!(temperature > 0.0, "temperature must be positive");
            let hi = logits
                .iter()
                .cloned()
                .filter(|v| v.is_finite())
                .fold(f64::NEG_INFINITY, f64::max);
            let probs: Vec<f64> = logits
                .iter()
                .map(|&v| {
                    if v.is_finite() {
                        ((v - hi) / temperature).exp()
                    } else {
                        0.0
                    }
                })
                .collect();
            let total: f64 = probs.iter().sum();
            let mut u = rng.gen::<f64>() * total;
            for (k, &p) in probs.iter().enumerate() {
                u -= p;
                if u <= 0.0 {
                    return k;
                }
            }
            probs.len() - 1
        }
    }
}

/// One weighted reconstruction pass: mean cross-entropy over real type and
/// position steps, mean BCE over real edge slots, mean squared error over
/// masked parameter slots. Callers decode from each latent and sum the
/// totals.
pub fn reconstruction_loss(
    g: &mut Graph,
    batch: &Batch,
    logits: &DecoderLogits,
    w: &LossWeights,
) -> ReconLoss {
    let (m, n) = (batch.size, batch.n_max);
    let step_weights: Vec<f64> = (0..m * n)
        .map(|k| {
            if k % n < batch.node_counts[k / n] {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let t2 = g.reshape(logits.type_logits, &[m * n, TYPE_VOCAB]);
    let t_targets: Vec<usize> = batch.type_ids.iter().cloned().collect();
    let types = g.cross_entropy(t2, &t_targets, &step_weights);

    let p2 = g.reshape(logits.pos_logits, &[m * n, n]);
    let p_targets: Vec<usize> = batch.position_ids.iter().cloned().collect();
    let positions = g.cross_entropy(p2, &p_targets, &step_weights);

    let edges = g.bce_with_logits(
        logits.edge_logits,
        batch.edge_targets.clone().into_dyn(),
        batch.edge_mask.clone().into_dyn(),
    );

    let params = g.mse_masked(
        logits.param_pred,
        batch.params.clone().into_dyn(),
        batch.param_mask.clone().into_dyn(),
    );

    let wt = g.mul_scalar(types, w.lambda_t);
    let wp = g.mul_scalar(positions, w.lambda_p);
    let wb = g.mul_scalar(params, w.lambda_b);
    let s1 = g.add(wt, wp);
    let s2 = g.add(edges, wb);
    let total = g.add(s1, s2);
    ReconLoss {
        types,
        positions,
        edges,
        params,
        total,
    }
}
