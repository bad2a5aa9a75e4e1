//! Circuit DAG data model: typed nodes with positions and device
//! parameters, a flattened upper-triangular edge list, validity rules,
//! canonical ordering, topology hashing, and DOT export.

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

/// Fixed number of device-parameter slots per node.
///
/// Real subgraph blocks carry at most a few parameters; a fixed width with
/// a validity mask keeps the parameter feature a rectangular array.
pub const PARAM_WIDTH: usize = 3;

/// Number of node-type categories in a dataset vocabulary.
pub const NUM_NODE_TYPES: usize = 26;

#[derive(Debug, Error)]
pub enum CircuitError {
    #[error("index out of range: {what} = {value}, expected < {bound}")]
    OutOfRange {
        what: &'static str,
        value: usize,
        bound: usize,
    },
    #[error("edge ({j} -> {i}) violates the j < i ordering")]
    BackwardEdge { j: usize, i: usize },
    #[error("edge endpoint {index} exceeds node count {nodes}")]
    DanglingEdge { index: usize, nodes: usize },
    #[error("graph contains a cycle")]
    Cyclic,
    #[error("circuit has {nodes} nodes but the capacity is {max}")]
    Capacity { nodes: usize, max: usize },
}

/// A node-type id in `[0, NUM_NODE_TYPES)`. Which ids denote the input and
/// output terminals is declared by the dataset vocabulary, not hard-coded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodeType(pub u16);

impl NodeType {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// One vertex of a circuit DAG: an atomic subgraph block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub ty: NodeType,
    /// Position label; marks main-path membership per the dataset convention.
    pub position: u16,
    /// Device parameters, mask-padded to `PARAM_WIDTH`.
    pub params: [f64; PARAM_WIDTH],
    /// `params[k]` is meaningful iff `param_mask[k]`; masked-out slots are zero.
    pub param_mask: [bool; PARAM_WIDTH],
}

impl Node {
    /// Builds a node from the leading `values.len()` parameter slots.
    pub fn new(ty: u16, position: u16, values: &[f64]) -> Self {
        assert!(values.len() <= PARAM_WIDTH, "too many device parameters");
        let mut params = [0.0; PARAM_WIDTH];
        let mut param_mask = [false; PARAM_WIDTH];
        for (k, &v) in values.iter().enumerate() {
            params[k] = v;
            param_mask[k] = true;
        }
        Node {
            ty: NodeType(ty),
            position,
            params,
            param_mask,
        }
    }

    /// Zeroes parameter slots that the mask declares invalid.
    pub fn normalize_params(&mut self) {
        for k in 0..PARAM_WIDTH {
            if !self.param_mask[k] {
                self.params[k] = 0.0;
            }
        }
    }
}

/// IO / main-path conventions declared by a dataset vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Convention {
    /// Type id of the input terminal node.
    pub input_type: u16,
    /// Type id of the output terminal node.
    pub output_type: u16,
    /// Positions whose nodes belong to the main path.
    pub main_path_positions: Vec<u16>,
    /// When a node at this position exists, `gnd_positions` nodes are drawn
    /// attached to the virtual GND rail at export time.
    pub gnd_trigger_position: Option<u16>,
    pub gnd_positions: Vec<u16>,
}

impl Convention {
    pub fn is_input(&self, n: &Node) -> bool {
        n.ty.0 == self.input_type
    }
    pub fn is_output(&self, n: &Node) -> bool {
        n.ty.0 == self.output_type
    }
    pub fn is_io(&self, n: &Node) -> bool {
        self.is_input(n) || self.is_output(n)
    }
    pub fn on_main_path(&self, n: &Node) -> bool {
        self.main_path_positions.contains(&n.position)
    }
}

/// A circuit as a DAG over typed nodes.
///
/// Edges are directed pairs `(j, i)` of 0-based node indices with `j < i`,
/// so the stored graph is acyclic by construction. The adjacency matrix and
/// the flattened upper-triangular edge list are derived views of this set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Circuit {
    nodes: Vec<Node>,
    edges: Vec<(u16, u16)>,
}

/// Per-rule validity flags for one circuit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidityReport {
    /// No directed cycle in the edge relation.
    pub is_dag: bool,
    /// Exactly one input node and exactly one output node.
    pub single_io: bool,
    /// Every non-IO node lies on some directed input-to-output path.
    pub no_floating: bool,
    /// Main-path nodes form a forward input-to-output chain with no edge
    /// running from a higher to a lower position.
    pub main_path_ok: bool,
    /// Conjunction of all the above.
    pub is_valid_circuit: bool,
}

/// Topology digest: node types, positions, and edge set; parameters excluded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TopologyDigest(pub [u8; 32]);

impl std::fmt::Display for TopologyDigest {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

/// 0-based position of edge `(j -> i)`, `j < i`, in the flattened list.
///
/// Edges are ordered by target vertex first: for each `i`, all `j < i`.
#[inline]
pub(crate) fn flat_index0(j: usize, i: usize) -> usize {
    debug_assert!(j < i);
    i * (i - 1) / 2 + j
}

/// Position of edge `(j -> i)` in the flattened edge list, 1-based vertex
/// indices as used by the on-disk record schema.
///
/// The ordering enumerates, for each target `i` from `2..=n`, all sources
/// `j` from `1..i`; the result is `(i-1)(i-2)/2 + (j-1)`, a bijection onto
/// `[0, n(n-1)/2)`.
pub fn flatten_index(j: usize, i: usize, n: usize) -> Result<usize, CircuitError> {
    if i > n {
        return Err(CircuitError::OutOfRange {
            what: "target vertex",
            value: i,
            bound: n + 1,
        });
    }
    if j < 1 || j >= i {
        return Err(CircuitError::OutOfRange {
            what: "source vertex",
            value: j,
            bound: i,
        });
    }
    Ok(flat_index0(j - 1, i - 1))
}

impl Circuit {
    /// Builds a circuit from nodes (kept in the given order) and edges with
    /// 0-based indices satisfying `j < i`. Edges are deduplicated and sorted
    /// into flattened-list order.
    pub fn new(nodes: Vec<Node>, edges: Vec<(usize, usize)>) -> Result<Self, CircuitError> {
        let n = nodes.len();
        let mut set: Vec<(u16, u16)> = Vec::with_capacity(edges.len());
        for (j, i) in edges {
            if i >= n {
                return Err(CircuitError::DanglingEdge { index: i, nodes: n });
            }
            if j >= i {
                return Err(CircuitError::BackwardEdge { j, i });
            }
            set.push((j as u16, i as u16));
        }
        set.sort_by_key(|&(j, i)| flat_index0(j as usize, i as usize));
        set.dedup();
        let mut nodes = nodes;
        for node in &mut nodes {
            node.normalize_params();
        }
        Ok(Circuit { nodes, edges: set })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// Edges as 0-based `(j, i)` pairs in flattened-list order.
    pub fn edges(&self) -> &[(u16, u16)] {
        &self.edges
    }

    pub fn has_edge(&self, j: usize, i: usize) -> bool {
        self.edges.contains(&(j as u16, i as u16))
    }

    /// Dense adjacency matrix, `a[j][i] = true` iff edge `j -> i`.
    pub fn adjacency(&self) -> Vec<Vec<bool>> {
        let n = self.nodes.len();
        let mut a = vec![vec![false; n]; n];
        for &(j, i) in &self.edges {
            a[j as usize][i as usize] = true;
        }
        a
    }

    /// Flattened upper-triangular edge list of length `n(n-1)/2`.
    pub fn flattened_edges(&self) -> Vec<bool> {
        let n = self.nodes.len();
        let mut flat = vec![false; n * (n - 1) / 2];
        for &(j, i) in &self.edges {
            flat[flat_index0(j as usize, i as usize)] = true;
        }
        flat
    }

    /// Rebuilds the edge set from a flattened upper-triangular list.
    pub fn from_flattened(nodes: Vec<Node>, flat: &[bool]) -> Result<Self, CircuitError> {
        let n = nodes.len();
        if flat.len() != n * (n - 1) / 2 {
            return Err(CircuitError::OutOfRange {
                what: "flattened edge list length",
                value: flat.len(),
                bound: n * (n - 1) / 2 + 1,
            });
        }
        let mut edges = Vec::new();
        for i in 1..n {
            for j in 0..i {
                if flat[flat_index0(j, i)] {
                    edges.push((j, i));
                }
            }
        }
        Circuit::new(nodes, edges)
    }

    /// Canonical node order: ascending position with the input terminal
    /// first and the output terminal last; ties broken by type id, then by
    /// the current index. Returns an error if some edge would run backwards
    /// under the new order.
    pub fn canonicalize(&self, conv: &Convention) -> Result<Circuit, CircuitError> {
        let order = canonical_order(&self.nodes, conv);
        // inverse permutation: old index -> new index
        let mut new_index = vec![0usize; order.len()];
        for (new, &old) in order.iter().enumerate() {
            new_index[old] = new;
        }
        let nodes = order.iter().map(|&old| self.nodes[old].clone()).collect();
        let mut edges = Vec::with_capacity(self.edges.len());
        for &(j, i) in &self.edges {
            let (nj, ni) = (new_index[j as usize], new_index[i as usize]);
            if nj >= ni {
                return Err(CircuitError::BackwardEdge { j: nj, i: ni });
            }
            edges.push((nj, ni));
        }
        Circuit::new(nodes, edges)
    }

    pub fn validate(&self, conv: &Convention) -> ValidityReport {
        let edges: Vec<(usize, usize)> = self
            .edges
            .iter()
            .map(|&(j, i)| (j as usize, i as usize))
            .collect();
        validate(&self.nodes, &edges, conv)
    }

    /// See [`canonical_hash`]; infallible here because the stored edge set
    /// is acyclic by construction.
    pub fn canonical_hash(&self, conv: &Convention) -> TopologyDigest {
        let edges: Vec<(usize, usize)> = self
            .edges
            .iter()
            .map(|&(j, i)| (j as usize, i as usize))
            .collect();
        canonical_hash(&self.nodes, &edges, conv).expect("stored circuits are acyclic")
    }

    /// DOT rendering; `type_names[t]` labels type id `t`. Main-path nodes get
    /// a distinct shape. When the GND trigger position is present, nodes at
    /// the GND positions are drawn attached to a virtual GND rail (the rail
    /// is a rendering artifact, not a graph vertex).
    pub fn to_dot(&self, conv: &Convention, type_names: &[String], graph_name: &str) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        writeln!(out, "digraph \"{graph_name}\" {{").unwrap();
        writeln!(out, "  rankdir=LR;").unwrap();
        let gnd_active = conv
            .gnd_trigger_position
            .map(|t| self.nodes.iter().any(|n| n.position == t))
            .unwrap_or(false);
        for (idx, node) in self.nodes.iter().enumerate() {
            let name = type_names
                .get(node.ty.index())
                .cloned()
                .unwrap_or_else(|| format!("t{}", node.ty.0));
            let shape = if conv.on_main_path(node) {
                "box"
            } else {
                "ellipse"
            };
            writeln!(
                out,
                "  n{idx} [label=\"{name}@p{}\", shape={shape}];",
                node.position
            )
            .unwrap();
        }
        for &(j, i) in &self.edges {
            writeln!(out, "  n{j} -> n{i};").unwrap();
        }
        if gnd_active {
            writeln!(out, "  GND [label=\"GND\", shape=point];").unwrap();
            for (idx, node) in self.nodes.iter().enumerate() {
                if conv.gnd_positions.contains(&node.position) {
                    writeln!(out, "  n{idx} -> GND [style=dashed, arrowhead=none];").unwrap();
                }
            }
        }
        writeln!(out, "}}").unwrap();
        out
    }
}

/// Canonical permutation of node indices (see [`Circuit::canonicalize`]).
pub fn canonical_order(nodes: &[Node], conv: &Convention) -> Vec<usize> {
    let mut order: Vec<usize> = (0..nodes.len()).collect();
    let band = |n: &Node| -> u8 {
        if conv.is_input(n) {
            0
        } else if conv.is_output(n) {
            2
        } else {
            1
        }
    };
    order.sort_by_key(|&idx| {
        let n = &nodes[idx];
        (band(n), n.position, n.ty.0, idx)
    });
    order
}

/// Validates arbitrary node/edge data, including raw decoder output. Edges
/// may point anywhere (cycles and self-loops included); every rule is
/// reported independently and no input is rejected.
pub fn validate(nodes: &[Node], edges: &[(usize, usize)], conv: &Convention) -> ValidityReport {
    let n = nodes.len();
    let edges: Vec<(usize, usize)> = edges
        .iter()
        .copied()
        .filter(|&(j, i)| j < n && i < n)
        .collect();

    let is_dag = is_acyclic(n, &edges);

    let inputs: Vec<usize> = (0..n).filter(|&v| conv.is_input(&nodes[v])).collect();
    let outputs: Vec<usize> = (0..n).filter(|&v| conv.is_output(&nodes[v])).collect();
    let single_io = inputs.len() == 1 && outputs.len() == 1;

    // a non-IO node must sit on a simple input-to-output path; on a DAG
    // that is exactly forward reachability from inputs plus backward
    // reachability from outputs, since the two segments cannot collide
    // without forming a cycle
    let succ = adjacency_lists(n, &edges, false);
    let no_floating = if is_dag || n > 16 {
        let pred = adjacency_lists(n, &edges, true);
        let from_input = multi_source_reach(n, &succ, &inputs);
        let to_output = multi_source_reach(n, &pred, &outputs);
        (0..n)
            .filter(|&v| !conv.is_io(&nodes[v]))
            .all(|v| from_input[v] && to_output[v])
    } else {
        let out_flags: Vec<bool> = (0..n).map(|v| conv.is_output(&nodes[v])).collect();
        let cover = simple_path_cover(n, &succ, &inputs, &out_flags);
        (0..n)
            .filter(|&v| !conv.is_io(&nodes[v]))
            .all(|v| cover[v])
    };

    let main_path_ok = check_main_path(nodes, &edges, conv, &inputs, &outputs);

    let is_valid_circuit = is_dag && single_io && no_floating && main_path_ok;
    ValidityReport {
        is_dag,
        single_io,
        no_floating,
        main_path_ok,
        is_valid_circuit,
    }
}

/// Vertices lying on at least one simple input-to-output path, found by a
/// search over (endpoint, visited-set) states. The state space is
/// exponential, so this only serves cyclic graphs of at most 16 nodes;
/// the `j < i` storage rule never produces cycles in the first place.
fn simple_path_cover(
    n: usize,
    succ: &[Vec<usize>],
    inputs: &[usize],
    outputs: &[bool],
) -> Vec<bool> {
    let mut seen = vec![false; n << n];
    let mut queue = std::collections::VecDeque::new();
    for &s in inputs {
        let state = (s, 1u32 << s);
        if !seen[(state.1 as usize) * n + s] {
            seen[(state.1 as usize) * n + s] = true;
            queue.push_back(state);
        }
    }
    let mut cover = 0u32;
    while let Some((v, mask)) = queue.pop_front() {
        if outputs[v] {
            cover |= mask;
        }
        for &w in &succ[v] {
            if mask >> w & 1 == 0 {
                let next = mask | 1 << w;
                if !seen[(next as usize) * n + w] {
                    seen[(next as usize) * n + w] = true;
                    queue.push_back((w, next));
                }
            }
        }
    }
    (0..n).map(|v| cover >> v & 1 == 1).collect()
}

/// Digest over node types, positions, and the edge set of the canonicalized
/// graph; device parameters are excluded. Rejects cyclic inputs.
pub fn canonical_hash(
    nodes: &[Node],
    edges: &[(usize, usize)],
    conv: &Convention,
) -> Result<TopologyDigest, CircuitError> {
    let n = nodes.len();
    for &(j, i) in edges {
        if j >= n || i >= n {
            return Err(CircuitError::DanglingEdge {
                index: j.max(i),
                nodes: n,
            });
        }
    }
    if !is_acyclic(n, edges) {
        return Err(CircuitError::Cyclic);
    }
    let order = canonical_order(nodes, conv);
    let mut new_index = vec![0usize; n];
    for (new, &old) in order.iter().enumerate() {
        new_index[old] = new;
    }
    let mut hasher = Sha256::new();
    hasher.update((n as u32).to_le_bytes());
    for &old in &order {
        hasher.update(nodes[old].ty.0.to_le_bytes());
        hasher.update(nodes[old].position.to_le_bytes());
    }
    let mut mapped: Vec<(u16, u16)> = edges
        .iter()
        .map(|&(j, i)| (new_index[j] as u16, new_index[i] as u16))
        .collect();
    mapped.sort_unstable();
    mapped.dedup();
    hasher.update((mapped.len() as u32).to_le_bytes());
    for (j, i) in mapped {
        hasher.update(j.to_le_bytes());
        hasher.update(i.to_le_bytes());
    }
    Ok(TopologyDigest(hasher.finalize().into()))
}

fn adjacency_lists(n: usize, edges: &[(usize, usize)], reversed: bool) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for &(j, i) in edges {
        if reversed {
            adj[i].push(j);
        } else {
            adj[j].push(i);
        }
    }
    adj
}

fn multi_source_reach(n: usize, adj: &[Vec<usize>], sources: &[usize]) -> Vec<bool> {
    let mut seen = vec![false; n];
    let mut stack: Vec<usize> = sources.to_vec();
    for &s in sources {
        seen[s] = true;
    }
    while let Some(v) = stack.pop() {
        for &w in &adj[v] {
            if !seen[w] {
                seen[w] = true;
                stack.push(w);
            }
        }
    }
    seen
}

fn is_acyclic(n: usize, edges: &[(usize, usize)]) -> bool {
    // Kahn's algorithm; self-loops count as cycles.
    let mut indeg = vec![0usize; n];
    let succ = adjacency_lists(n, edges, false);
    for &(_, i) in edges {
        indeg[i] += 1;
    }
    let mut queue: Vec<usize> = (0..n).filter(|&v| indeg[v] == 0).collect();
    let mut removed = 0;
    while let Some(v) = queue.pop() {
        removed += 1;
        for &w in &succ[v] {
            indeg[w] -= 1;
            if indeg[w] == 0 {
                queue.push(w);
            }
        }
    }
    removed == n
}

/// Main-path rule: the input terminal, output terminal, and all nodes at
/// main-path positions must contain a directed input-to-output path, and no
/// edge between two of these nodes may run from a higher position to a lower
/// one (input counts as the lowest position, output as the highest).
fn check_main_path(
    nodes: &[Node],
    edges: &[(usize, usize)],
    conv: &Convention,
    inputs: &[usize],
    outputs: &[usize],
) -> bool {
    if inputs.is_empty() || outputs.is_empty() {
        return false;
    }
    let n = nodes.len();
    let in_set: Vec<bool> = (0..n)
        .map(|v| conv.is_io(&nodes[v]) || conv.on_main_path(&nodes[v]))
        .collect();
    // effective position: input = -1, output = +inf, otherwise the label
    let eff = |v: usize| -> i64 {
        if conv.is_input(&nodes[v]) {
            -1
        } else if conv.is_output(&nodes[v]) {
            i64::MAX
        } else {
            nodes[v].position as i64
        }
    };
    for &(j, i) in edges {
        if in_set[j] && in_set[i] && eff(j) >= eff(i) {
            return false;
        }
    }
    // forward chain must exist within the set
    let sub_edges: Vec<(usize, usize)> = edges
        .iter()
        .copied()
        .filter(|&(j, i)| in_set[j] && in_set[i])
        .collect();
    let succ = adjacency_lists(n, &sub_edges, false);
    let reach = multi_source_reach(n, &succ, inputs);
    outputs.iter().any(|&o| reach[o])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn conv() -> Convention {
        Convention {
            input_type: 0,
            output_type: 25,
            main_path_positions: vec![1, 2, 3],
            gnd_trigger_position: Some(6),
            gnd_positions: vec![5, 6, 7],
        }
    }

    fn node(ty: u16, pos: u16) -> Node {
        Node::new(ty, pos, &[])
    }

    #[test]
    fn flatten_index_examples() {
        assert_eq!(flatten_index(1, 2, 4).unwrap(), 0);
        assert_eq!(flatten_index(2, 4, 4).unwrap(), 4);
        assert!(flatten_index(2, 2, 4).is_err());
        assert!(flatten_index(0, 2, 4).is_err());
        assert!(flatten_index(3, 5, 4).is_err());
    }

    #[test]
    fn flatten_index_bijective_n6() {
        // exhaustive enumeration: all 15 pairs hit each index exactly once
        let n = 6;
        let mut hit = vec![0usize; n * (n - 1) / 2];
        for i in 2..=n {
            for j in 1..i {
                hit[flatten_index(j, i, n).unwrap()] += 1;
            }
        }
        assert!(hit.iter().all(|&c| c == 1));
    }

    #[test]
    fn validate_minimal_chain() {
        // INPUT -> R -> OUTPUT
        let nodes = vec![node(0, 0), node(3, 1), node(25, 4)];
        let edges = vec![(0, 1), (1, 2)];
        let r = validate(&nodes, &edges, &conv());
        assert!(r.is_dag && r.single_io && r.no_floating && r.main_path_ok);
        assert!(r.is_valid_circuit);
    }

    #[test]
    fn validate_cycle() {
        let nodes = vec![node(0, 0), node(3, 1), node(25, 4)];
        let edges = vec![(0, 1), (1, 0)];
        let r = validate(&nodes, &edges, &conv());
        assert!(!r.is_dag);
        assert!(!r.is_valid_circuit);
    }

    #[test]
    fn validate_floating_node() {
        // node 2 has no path to the output
        let nodes = vec![node(0, 0), node(3, 1), node(4, 2), node(25, 4)];
        let edges = vec![(0, 1), (1, 3)];
        let r = validate(&nodes, &edges, &conv());
        assert!(!r.no_floating);
        assert!(!r.is_valid_circuit);
        assert!(r.is_dag && r.single_io);
    }

    #[test]
    fn validate_single_node_is_invalid() {
        let r = validate(&[node(0, 0)], &[], &conv());
        assert!(!r.is_valid_circuit);
        assert!(!r.single_io);
        assert!(!r.main_path_ok);
    }

    #[test]
    fn validate_backward_main_path_edge() {
        // edge from position 2 back to position 1 on the main path
        let nodes = vec![node(0, 0), node(3, 1), node(4, 2), node(25, 4)];
        let edges = vec![(0, 1), (1, 2), (2, 3), (2, 1)];
        // (2, 1) is backwards in index order, so build the raw form directly
        let r = validate(&nodes, &edges, &conv());
        assert!(!r.main_path_ok);
    }

    #[test]
    fn canonical_hash_ignores_params() {
        let c = conv();
        let mk = |val: f64| {
            Circuit::new(
                vec![node(0, 0), Node::new(3, 1, &[val]), node(25, 4)],
                vec![(0, 1), (1, 2)],
            )
            .unwrap()
        };
        assert_eq!(mk(1.0).canonical_hash(&c), mk(7.5).canonical_hash(&c));
    }

    #[test]
    fn canonical_hash_detects_edge_changes() {
        let c = conv();
        let full = Circuit::new(
            vec![node(0, 0), node(3, 1), node(4, 2), node(25, 4)],
            vec![(0, 1), (1, 2), (2, 3), (0, 2)],
        )
        .unwrap();
        let missing = Circuit::new(
            vec![node(0, 0), node(3, 1), node(4, 2), node(25, 4)],
            vec![(0, 1), (1, 2), (2, 3)],
        )
        .unwrap();
        assert_ne!(full.canonical_hash(&c), missing.canonical_hash(&c));
    }

    #[test]
    fn canonical_hash_random_perturbations() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let c = conv();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let base_nodes = vec![node(0, 0), node(3, 1), node(4, 2), node(5, 3), node(25, 4)];
        let base_edges = vec![(0, 1), (1, 2), (2, 3), (3, 4), (0, 2), (1, 3)];
        let base = canonical_hash(&base_nodes, &base_edges, &c).unwrap();
        let mut collisions = 0;
        for _ in 0..1000 {
            let mut nodes = base_nodes.clone();
            let mut edges = base_edges.clone();
            match rng.gen_range(0..3) {
                0 => {
                    // drop one edge
                    let k = rng.gen_range(0..edges.len());
                    edges.remove(k);
                }
                1 => {
                    // flip a non-edge on
                    edges.push((0, 4));
                }
                _ => {
                    // change a middle node type
                    let k = rng.gen_range(1..4);
                    nodes[k].ty = NodeType(rng.gen_range(6..24));
                }
            }
            let h = canonical_hash(&nodes, &edges, &c).unwrap();
            if h == base && (nodes != base_nodes || {
                let mut e = edges.clone();
                e.sort_unstable();
                e.dedup();
                let mut b = base_edges.clone();
                b.sort_unstable();
                e != b
            }) {
                collisions += 1;
            }
        }
        assert_eq!(collisions, 0);
    }

    #[test]
    fn canonical_hash_rejects_cycles() {
        let nodes = vec![node(0, 0), node(3, 1), node(25, 4)];
        let edges = vec![(0, 1), (1, 0)];
        assert!(matches!(
            canonical_hash(&nodes, &edges, &conv()),
            Err(CircuitError::Cyclic)
        ));
    }

    #[test]
    fn canonicalize_puts_output_last() {
        // deliberately scrambled input order
        let nodes = vec![node(25, 4), node(3, 1), node(0, 0)];
        let order = canonical_order(&nodes, &conv());
        assert_eq!(order, vec![2, 1, 0]);
    }

    #[test]
    fn dot_export_marks_main_path_and_gnd() {
        let c = conv();
        let names: Vec<String> = (0..26).map(|i| format!("T{i}")).collect();
        let ckt = Circuit::new(
            vec![node(0, 0), node(3, 1), node(7, 6), node(25, 4)],
            vec![(0, 1), (1, 2), (1, 3), (2, 3)],
        )
        .unwrap();
        let dot = ckt.to_dot(&c, &names, "example");
        assert!(dot.contains("T3@p1"), "{dot}");
        assert!(dot.contains("shape=box"));
        assert!(dot.contains("GND"));
    }

    // --- brute-force oracles -------------------------------------------

    /// Cycle search by DFS from every vertex.
    pub(crate) fn brute_force_has_cycle(n: usize, edges: &[(usize, usize)]) -> bool {
        fn dfs(
            v: usize,
            adj: &[Vec<usize>],
            visiting: &mut [bool],
            done: &mut [bool],
        ) -> bool {
            if visiting[v] {
                return true;
            }
            if done[v] {
                return false;
            }
            visiting[v] = true;
            for &w in &adj[v] {
                if dfs(w, adj, visiting, done) {
                    return true;
                }
            }
            visiting[v] = false;
            done[v] = true;
            false
        }
        let adj = adjacency_lists(n, edges, false);
        let mut visiting = vec![false; n];
        let mut done = vec![false; n];
        (0..n).any(|v| dfs(v, &adj, &mut visiting, &mut done))
    }

    /// Path-enumeration floating check: a non-IO vertex must appear on some
    /// simple input-to-output path.
    pub(crate) fn brute_force_no_floating(
        nodes: &[Node],
        edges: &[(usize, usize)],
        conv: &Convention,
    ) -> bool {
        let n = nodes.len();
        let adj = adjacency_lists(n, edges, false);
        let mut on_path = vec![false; n];
        fn walk(v: usize, adj: &[Vec<usize>], path: &mut Vec<usize>, sink: &mut dyn FnMut(&[usize])) {
            if path.contains(&v) {
                return;
            }
            path.push(v);
            sink(path);
            for w in &adj[v] {
                walk(*w, adj, path, sink);
            }
            path.pop();
        }
        for input in (0..n).filter(|&v| conv.is_input(&nodes[v])) {
            let mut path = Vec::new();
            let outputs: Vec<bool> = (0..n).map(|v| conv.is_output(&nodes[v])).collect();
            let on = &mut on_path;
            walk(input, &adj, &mut path, &mut |p: &[usize]| {
                if outputs[*p.last().unwrap()] {
                    for &v in p {
                        on[v] = true;
                    }
                }
            });
        }
        (0..n)
            .filter(|&v| !conv.is_io(&nodes[v]))
            .all(|v| on_path[v])
    }

    #[test]
    fn validate_agrees_with_brute_force_small() {
        // all digraphs on 3 labeled vertices (node 0 input, node 2 output)
        let c = conv();
        let nodes = vec![node(0, 0), node(3, 1), node(25, 4)];
        let pairs: Vec<(usize, usize)> = (0..3)
            .flat_map(|a| (0..3).filter(move |&b| b != a).map(move |b| (a, b)))
            .collect();
        for mask in 0u32..(1 << pairs.len()) {
            let edges: Vec<(usize, usize)> = pairs
                .iter()
                .enumerate()
                .filter(|(k, _)| mask >> k & 1 == 1)
                .map(|(_, &e)| e)
                .collect();
            let r = validate(&nodes, &edges, &c);
            assert_eq!(r.is_dag, !brute_force_has_cycle(3, &edges), "mask {mask}");
            assert_eq!(
                r.no_floating,
                brute_force_no_floating(&nodes, &edges, &c),
                "mask {mask}"
            );
        }
    }

    proptest! {
        #[test]
        fn adjacency_flat_round_trip(n in 2usize..=8, seed in any::<u64>()) {
            use rand::prelude::*;
            use rand_chacha::ChaCha8Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let nodes: Vec<Node> = (0..n).map(|k| node(k as u16 % 26, k as u16)).collect();
            let mut edges = Vec::new();
            for i in 1..n {
                for j in 0..i {
                    if rng.gen_bool(0.4) {
                        edges.push((j, i));
                    }
                }
            }
            let ckt = Circuit::new(nodes.clone(), edges).unwrap();
            let flat = ckt.flattened_edges();
            let back = Circuit::from_flattened(nodes, &flat).unwrap();
            prop_assert_eq!(back.edges(), ckt.edges());
            prop_assert_eq!(back.adjacency(), ckt.adjacency());
        }
    }
}
