//! Neural building blocks: dense layers, embeddings, multi-head attention,
//! pre-norm transformer blocks, and a symmetric-normalized graph
//! convolution. Modules register named parameters once and build tape ops
//! on every forward pass.

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamStore, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(name: &str, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            name: name.to_string(),
            in_dim,
            out_dim,
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        store.insert_dense(&format!("{}.w", self.name), self.in_dim, self.out_dim, rng);
        store.insert_zeros(&format!("{}.b", self.name), &[self.out_dim]);
    }

    /// Applies to a 2-d `[rows, in_dim]` tensor.
    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, &format!("{}.w", self.name));
        let b = g.param(store, &format!("{}.b", self.name));
        let h = g.matmul(x, w);
        g.add(h, b)
    }

    /// Applies along the last axis of a 3-d `[batch, seq, in_dim]` tensor.
    pub fn apply3(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let shape = g.value(x).shape().to_vec();
        assert_eq!(shape.len(), 3);
        let flat = g.reshape(x, &[shape[0] * shape[1], shape[2]]);
        let h = self.apply(g, store, flat);
        g.reshape(h, &[shape[0], shape[1], self.out_dim])
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(name: &str, dim: usize) -> Self {
        LayerNorm {
            name: name.to_string(),
            dim,
        }
    }

    pub fn register(&self, store: &mut ParamStore, _rng: &mut ChaCha8Rng) {
        store.insert_ones(&format!("{}.g", self.name), &[self.dim]);
        store.insert_zeros(&format!("{}.b", self.name), &[self.dim]);
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = g.param(store, &format!("{}.g", self.name));
        let beta = g.param(store, &format!("{}.b", self.name));
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Dense stack with ReLU between layers and a linear final layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub name: String,
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(name: &str, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least input and output dims");
        let layers = (0..dims.len() - 1)
            .map(|k| Linear::new(&format!("{name}.l{k}"), dims[k], dims[k + 1]))
            .collect();
        Mlp {
            name: name.to_string(),
            layers,
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for l in &self.layers {
            l.register(store, rng);
        }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        for (k, l) in self.layers.iter().enumerate() {
            h = l.apply(g, store, h);
            if k + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        h
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub name: String,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(name: &str, vocab: usize, dim: usize) -> Self {
        Embedding {
            name: name.to_string(),
            vocab,
            dim,
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        store.insert_normal(&format!("{}.w", self.name), &[self.vocab, self.dim], 0.02, rng);
    }

    /// Looks up `ids` (row-major over any logical shape) and returns
    /// `[ids.len(), dim]`.
    pub fn apply(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Var {
        let table = g.param(store, &format!("{}.w", self.name));
        g.gather_rows(table, ids)
    }
}

/// Additive causal mask `[1, 1, n, n]`: position q may attend keys <= q.
pub fn causal_mask(n: usize) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(&[1, 1, n, n]), |ix| {
        if ix[3] <= ix[2] {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    })
}

/// Additive key-padding mask `[m, 1, 1, n]` hiding keys at or beyond each
/// row's length.
pub fn padding_mask(counts: &[usize], n: usize) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(&[counts.len(), 1, 1, n]), |ix| {
        if ix[3] < counts[ix[0]] {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    })
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub name: String,
    pub dim: usize,
    pub heads: usize,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl MultiHeadAttention {
    pub fn new(name: &str, dim: usize, heads: usize) -> Self {
        assert_eq!(dim % heads, 0, "model dim must divide by head count");
        MultiHeadAttention {
            name: name.to_string(),
            dim,
            heads,
            wq: Linear::new(&format!("{name}.wq"), dim, dim),
            wk: Linear::new(&format!("{name}.wk"), dim, dim),
            wv: Linear::new(&format!("{name}.wv"), dim, dim),
            wo: Linear::new(&format!("{name}.wo"), dim, dim),
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.wq.register(store, rng);
        self.wk.register(store, rng);
        self.wv.register(store, rng);
        self.wo.register(store, rng);
    }

    fn split_heads(&self, g: &mut Graph, x: Var, m: usize, n: usize) -> Var {
        let dk = self.dim / self.heads;
        let r = g.reshape(x, &[m, n, self.heads, dk]);
        let t = g.transpose(r, &[0, 2, 1, 3]);
        g.reshape(t, &[m * self.heads, n, dk])
    }

    /// `x` is `[m, n, dim]`; `mask` is additive and broadcasts against
    /// `[m, heads, n, n]`.
    pub fn apply(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mask: Option<Var>,
        p_drop: f64,
    ) -> Var {
        let shape = g.value(x).shape().to_vec();
        let (m, n) = (shape[0], shape[1]);
        let dk = self.dim / self.heads;

        let q = self.wq.apply3(g, store, x);
        let k = self.wk.apply3(g, store, x);
        let v = self.wv.apply3(g, store, x);
        let q = self.split_heads(g, q, m, n);
        let k = self.split_heads(g, k, m, n);
        let v = self.split_heads(g, v, m, n);

        let kt = g.transpose(k, &[0, 2, 1]);
        let scores = g.batch_matmul(q, kt);
        let scores = g.mul_scalar(scores, 1.0 / (dk as f64).sqrt());
        let scores = g.reshape(scores, &[m, self.heads, n, n]);
        let scores = match mask {
            Some(mk) => g.add(scores, mk),
            None => scores,
        };
        let attn = g.softmax(scores);
        let attn = g.dropout(attn, p_drop);
        let attn = g.reshape(attn, &[m * self.heads, n, n]);

        let ctx = g.batch_matmul(attn, v);
        let ctx = g.reshape(ctx, &[m, self.heads, n, dk]);
        let ctx = g.transpose(ctx, &[0, 2, 1, 3]);
        let ctx = g.reshape(ctx, &[m * n, self.dim]);
        let out = self.wo.apply(g, store, ctx);
        g.reshape(out, &[m, n, self.dim])
    }
}

/// Pre-norm transformer block: attention and feed-forward sublayers with
/// residual connections and dropout.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub name: String,
    pub attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub p_drop: f64,
}

impl TransformerBlock {
    pub fn new(name: &str, dim: usize, heads: usize, ff_dim: usize, p_drop: f64) -> Self {
        TransformerBlock {
            name: name.to_string(),
            attn: MultiHeadAttention::new(&format!("{name}.attn"), dim, heads),
            ln1: LayerNorm::new(&format!("{name}.ln1"), dim),
            ln2: LayerNorm::new(&format!("{name}.ln2"), dim),
            ff1: Linear::new(&format!("{name}.ff1"), dim, ff_dim),
            ff2: Linear::new(&format!("{name}.ff2"), ff_dim, dim),
            p_drop,
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.attn.register(store, rng);
        self.ln1.register(store, rng);
        self.ln2.register(store, rng);
        self.ff1.register(store, rng);
        self.ff2.register(store, rng);
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var, mask: Option<Var>) -> Var {
        let h = self.ln1.apply(g, store, x);
        let h = self.attn.apply(g, store, h, mask, self.p_drop);
        let h = g.dropout(h, self.p_drop);
        let x = g.add(x, h);

        let shape = g.value(x).shape().to_vec();
        let h = self.ln2.apply(g, store, x);
        let h = g.reshape(h, &[shape[0] * shape[1], shape[2]]);
        let h = self.ff1.apply(g, store, h);
        let h = g.relu(h);
        let h = g.dropout(h, self.p_drop);
        let h = self.ff2.apply(g, store, h);
        let h = g.reshape(h, &[shape[0], shape[1], shape[2]]);
        let h = g.dropout(h, self.p_drop);
        g.add(x, h)
    }
}

/// Stack of pre-norm blocks with a final layer norm.
#[derive(Debug, Clone)]
pub struct TransformerStack {
    pub name: String,
    pub blocks: Vec<TransformerBlock>,
    pub ln_out: LayerNorm,
}

impl TransformerStack {
    pub fn new(
        name: &str,
        layers: usize,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        p_drop: f64,
    ) -> Self {
        let blocks = (0..layers)
            .map(|k| TransformerBlock::new(&format!("{name}.blk{k}"), dim, heads, ff_dim, p_drop))
            .collect();
        TransformerStack {
            name: name.to_string(),
            blocks,
            ln_out: LayerNorm::new(&format!("{name}.ln_out"), dim),
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for b in &self.blocks {
            b.register(store, rng);
        }
        self.ln_out.register(store, rng);
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var, mask: Option<Var>) -> Var {
        let mut h = x;
        for b in &self.blocks {
            h = b.apply(g, store, h, mask);
        }
        self.ln_out.apply(g, store, h)
    }
}

/// Symmetric-normalized adjacency with self loops,
/// `D^{-1/2} (A + A^T + I) D^{-1/2}`, per batch item. Plain data, no tape.
pub fn normalized_adjacency(adj: &ArrayD<f64>) -> ArrayD<f64> {
    assert_eq!(adj.ndim(), 3);
    let (m, n) = (adj.shape()[0], adj.shape()[1]);
    assert_eq!(adj.shape()[2], n);
    let mut out = ArrayD::zeros(IxDyn(&[m, n, n]));
    for b in 0..m {
        let mut sym = vec![0.0; n * n];
        for i in 0..n {
            sym[i * n + i] = 1.0;
        }
        for i in 0..n {
            for j in 0..n {
                if adj[[b, i, j]] != 0.0 {
                    sym[i * n + j] = 1.0;
                    sym[j * n + i] = 1.0;
                }
            }
        }
        let deg: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|j| sym[i * n + j]).sum::<f64>())
            .collect();
        for i in 0..n {
            for j in 0..n {
                if sym[i * n + j] != 0.0 {
                    out[[b, i, j]] = sym[i * n + j] / (deg[i] * deg[j]).sqrt();
                }
            }
        }
    }
    out
}

/// In-edge-only normalized adjacency with self loops,
/// `D^{-1/2} (L + I) D^{-1/2}` where `L[i][j] = adj[j][i]` for `j < i`.
/// Row `i` mixes only vertices that feed `i` plus `i` itself, so vertex
/// `i`'s own outgoing edges never reach its row. No symmetrization: that
/// would fold edge `(i, k)` into row `i` and leak it to any pair keyed on
/// `i`. Plain data, no tape.
pub fn causal_normalized_adjacency(adj: &ArrayD<f64>) -> ArrayD<f64> {
    assert_eq!(adj.ndim(), 3);
    let (m, n) = (adj.shape()[0], adj.shape()[1]);
    assert_eq!(adj.shape()[2], n);
    let mut out = ArrayD::zeros(IxDyn(&[m, n, n]));
    for b in 0..m {
        let mut low = vec![0.0; n * n];
        for i in 0..n {
            low[i * n + i] = 1.0;
            for j in 0..i {
                if adj[[b, j, i]] != 0.0 {
                    low[i * n + j] = 1.0;
                }
            }
        }
        let deg: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|j| low[i * n + j]).sum::<f64>())
            .collect();
        for i in 0..n {
            for j in 0..=i {
                if low[i * n + j] != 0.0 {
                    out[[b, i, j]] = low[i * n + j] / (deg[i] * deg[j]).sqrt();
                }
            }
        }
    }
    out
}

/// One graph-convolution layer `relu(A_hat H W + b)` over `[m, n, dim]`
/// token grids.
#[derive(Debug, Clone)]
pub struct GraphConv {
    pub name: String,
    pub lin: Linear,
}

impl GraphConv {
    pub fn new(name: &str, in_dim: usize, out_dim: usize) -> Self {
        GraphConv {
            name: name.to_string(),
            lin: Linear::new(&format!("{name}.lin"), in_dim, out_dim),
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.lin.register(store, rng);
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, h: Var, a_hat: Var) -> Var {
        let mixed = g.batch_matmul(a_hat, h);
        let out = self.lin.apply3(g, store, mixed);
        g.relu(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, sample_standard_normal};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn gradcheck_mlp() {
        let mut r = rng(1);
        let mlp = Mlp::new("m", &[5, 7, 3]);
        let mut store = ParamStore::new();
        mlp.register(&mut store, &mut r);
        store.insert("x", sample_standard_normal(&mut r, &[4, 5]));
        let report = grad_check(
            &mut store,
            |g, s| {
                let x = g.param(s, "x");
                let y = mlp.apply(g, s, x);
                let y2 = g.mul(y, y);
                g.mean(y2)
            },
            10,
            2,
        );
        assert!(report.ok(), "{report:?}");
    }

    #[test]
    fn gradcheck_attention_with_padding_mask_and_dropout() {
        let mut r = rng(2);
        let mha = MultiHeadAttention::new("a", 8, 2);
        let mut store = ParamStore::new();
        mha.register(&mut store, &mut r);
        store.insert("x", sample_standard_normal(&mut r, &[2, 4, 8]));
        let mask = padding_mask(&[4, 2], 4);
        let report = grad_check(
            &mut store,
            move |g, s| {
                let x = g.param(s, "x");
                let mk = g.leaf(mask.clone());
                let y = mha.apply(g, s, x, Some(mk), 0.25);
                let y2 = g.mul(y, y);
                g.mean(y2)
            },
            8,
            5,
        );
        assert!(report.ok(), "{report:?}");
    }

    #[test]
    fn gradcheck_transformer_block_and_graph_conv() {
        let mut r = rng(3);
        let blk = TransformerBlock::new("t", 8, 2, 16, 0.2);
        let gc = GraphConv::new("g", 8, 8);
        let mut store = ParamStore::new();
        blk.register(&mut store, &mut r);
        gc.register(&mut store, &mut r);
        store.insert("x", sample_standard_normal(&mut r, &[2, 3, 8]));
        let mut adj = ArrayD::zeros(IxDyn(&[2, 3, 3]));
        adj[[0, 0, 1]] = 1.0;
        adj[[0, 1, 2]] = 1.0;
        adj[[1, 0, 2]] = 1.0;
        let a_hat = normalized_adjacency(&adj);
        let report = grad_check(
            &mut store,
            move |g, s| {
                let x = g.param(s, "x");
                let ah = g.leaf(a_hat.clone());
                let h = gc.apply(g, s, x, ah);
                let y = blk.apply(g, s, h, None);
                let y2 = g.mul(y, y);
                g.mean(y2)
            },
            8,
            7,
        );
        assert!(report.ok(), "{report:?}");
    }

    #[test]
    fn padding_mask_blocks_pad_content() {
        // real-query outputs must not change when padded token content does
        let mut r = rng(4);
        let stack = TransformerStack::new("s", 2, 8, 2, 16, 0.0);
        let mut store = ParamStore::new();
        stack.register(&mut store, &mut r);
        let x1 = sample_standard_normal(&mut r, &[1, 4, 8]);
        let mut x2 = x1.clone();
        for k in 0..8 {
            x2[[0, 3, k]] = 99.0 + k as f64;
        }
        let mask = padding_mask(&[3], 4);
        let run = |x: ArrayD<f64>| {
            let mut g = Graph::new(false, 0);
            let xv = g.leaf(x);
            let mk = g.leaf(mask.clone());
            let y = stack.apply(&mut g, &store, xv, Some(mk));
            g.value(y).clone()
        };
        let y1 = run(x1);
        let y2 = run(x2);
        for tok in 0..3 {
            for k in 0..8 {
                assert_eq!(y1[[0, tok, k]].to_bits(), y2[[0, tok, k]].to_bits());
            }
        }
    }

    #[test]
    fn causal_mask_blocks_future_content() {
        let mut r = rng(5);
        let stack = TransformerStack::new("c", 2, 8, 2, 16, 0.0);
        let mut store = ParamStore::new();
        stack.register(&mut store, &mut r);
        let x1 = sample_standard_normal(&mut r, &[1, 5, 8]);
        let mut x2 = x1.clone();
        for k in 0..8 {
            x2[[0, 4, k]] = -37.0 * (k + 1) as f64;
        }
        let mask = causal_mask(5);
        let run = |x: ArrayD<f64>| {
            let mut g = Graph::new(false, 0);
            let xv = g.leaf(x);
            let mk = g.leaf(mask.clone());
            let y = stack.apply(&mut g, &store, xv, Some(mk));
            g.value(y).clone()
        };
        let y1 = run(x1);
        let y2 = run(x2);
        for tok in 0..4 {
            for k in 0..8 {
                assert_eq!(y1[[0, tok, k]].to_bits(), y2[[0, tok, k]].to_bits());
            }
        }
        // the changed position itself must differ
        assert_ne!(y1[[0, 4, 0]].to_bits(), y2[[0, 4, 0]].to_bits());
    }

    #[test]
    fn normalized_adjacency_row_properties() {
        let mut adj = ArrayD::zeros(IxDyn(&[1, 3, 3]));
        adj[[0, 0, 1]] = 1.0;
        let a_hat = normalized_adjacency(&adj);
        // isolated node keeps a self loop of weight 1
        assert!((a_hat[[0, 2, 2]] - 1.0).abs() < 1e-12);
        // symmetric
        for i in 0..3 {
            for j in 0..3 {
                assert!((a_hat[[0, i, j]] - a_hat[[0, j, i]]).abs() < 1e-12);
            }
        }
        // hand value: nodes 0 and 1 have degree 2 including self loop
        assert!((a_hat[[0, 0, 1]] - 0.5).abs() < 1e-12);
        assert!((a_hat[[0, 0, 0]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn causal_adjacency_is_lower_triangular_in_edges_only() {
        let mut adj = ArrayD::zeros(IxDyn(&[1, 4, 4]));
        adj[[0, 0, 1]] = 1.0;
        adj[[0, 1, 3]] = 1.0;
        adj[[0, 2, 3]] = 1.0;
        let a_hat = causal_normalized_adjacency(&adj);
        // strictly upper entries are all zero: row i never sees its out-edges
        for i in 0..4 {
            for j in (i + 1)..4 {
                assert_eq!(a_hat[[0, i, j]], 0.0);
            }
        }
        // isolated-in-edge node keeps a unit self loop
        assert!((a_hat[[0, 2, 2]] - 1.0).abs() < 1e-12);
        assert!((a_hat[[0, 0, 0]] - 1.0).abs() < 1e-12);
        // row 1: in-degree 1 plus self loop, col 0 has degree 1
        assert!((a_hat[[0, 1, 0]] - 1.0 / (2.0f64).sqrt()).abs() < 1e-12);
        // row 3 mixes rows 1 and 2, degrees (2 + self) * source degrees
        assert!((a_hat[[0, 3, 1]] - 1.0 / (3.0 * 2.0f64).sqrt()).abs() < 1e-12);
        assert!((a_hat[[0, 3, 2]] - 1.0 / (3.0 * 1.0f64).sqrt()).abs() < 1e-12);
        assert!((a_hat[[0, 3, 3]] - 1.0 / 3.0).abs() < 1e-12);
        // edges pointing backwards are ignored rather than folded in
        let mut cyc = ArrayD::zeros(IxDyn(&[1, 2, 2]));
        cyc[[0, 1, 0]] = 1.0;
        let c_hat = causal_normalized_adjacency(&cyc);
        assert!((c_hat[[0, 0, 0]] - 1.0).abs() < 1e-12);
        assert!((c_hat[[0, 1, 1]] - 1.0).abs() < 1e-12);
        assert_eq!(c_hat[[0, 0, 1]], 0.0);
        assert_eq!(c_hat[[0, 1, 0]], 0.0);
    }
}
