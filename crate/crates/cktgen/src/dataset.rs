//! Dataset ingestion and preparation: specification binning, JSON-lines
//! records, train/test splitting, batching with masks, and a synthetic
//! generator for desk-scale runs.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circuit::{Circuit, Convention, Node, CircuitError, NUM_NODE_TYPES, PARAM_WIDTH};

/// Type id used to pad teacher-forced sequences; never a legal node type.
pub const NONE_TYPE_ID: usize = NUM_NODE_TYPES;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: {msg}")]
    Schema { line: usize, msg: String },
    #[error("profile error: {0}")]
    Profile(String),
    #[error("infeasible arguments: {0}")]
    Infeasible(String),
    #[error(transparent)]
    Circuit(#[from] CircuitError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Raw performance triple as stored on disk. May be invalid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawSpecification {
    pub gain: f64,
    pub bw: f64,
    pub pm: f64,
}

/// Binned categorical form of a specification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BinnedSpecification {
    pub gain_cat: u16,
    pub bw_cat: u16,
    pub pm_cat: u16,
}

impl BinnedSpecification {
    pub fn new(gain_cat: u16, bw_cat: u16, pm_cat: u16) -> Self {
        BinnedSpecification {
            gain_cat,
            bw_cat,
            pm_cat,
        }
    }

    /// Flat index over the profile's category grid.
    pub fn flat_index(&self, p: &DatasetProfile) -> usize {
        self.gain_cat as usize
            + p.gain_categories * (self.bw_cat as usize + p.bw_categories * self.pm_cat as usize)
    }
}

/// One vocabulary entry: a subgraph block name and how many of the
/// `PARAM_WIDTH` device-parameter slots it uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeTypeInfo {
    pub name: String,
    pub param_arity: usize,
}

/// Everything the pipeline needs to know about one dataset: category
/// counts, the 26-entry node vocabulary, capacity, and the position
/// conventions. Loadable from JSON so conventions are never hard-coded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetProfile {
    pub name: String,
    pub gain_categories: usize,
    pub bw_categories: usize,
    pub pm_categories: usize,
    pub node_types: Vec<NodeTypeInfo>,
    pub n_max: usize,
    pub param_width: usize,
    pub convention: Convention,
}

/// Shared 26-entry op-amp subgraph vocabulary: IN, OUT, and 24 one- or
/// two-port RC / transconductor blocks.
fn standard_vocabulary() -> Vec<NodeTypeInfo> {
    let blocks: [(&str, usize); 26] = [
        ("IN", 0),
        ("R", 1),
        ("C", 1),
        ("R+C", 2),
        ("R|C", 2),
        ("+gm", 1),
        ("-gm", 1),
        ("+gm+R", 2),
        ("+gm+C", 2),
        ("+gm+R+C", 3),
        ("-gm+R", 2),
        ("-gm+C", 2),
        ("-gm+R+C", 3),
        ("+gm|R", 2),
        ("+gm|C", 2),
        ("+gm|R|C", 3),
        ("-gm|R", 2),
        ("-gm|C", 2),
        ("-gm|R|C", 3),
        ("R+R", 2),
        ("C+C", 2),
        ("R|R", 2),
        ("C|C", 2),
        ("R+C|C", 3),
        ("R|C+C", 3),
        ("OUT", 0),
    ];
    blocks
        .iter()
        .map(|&(name, param_arity)| NodeTypeInfo {
            name: name.to_string(),
            param_arity,
        })
        .collect()
}

fn standard_convention() -> Convention {
    Convention {
        input_type: 0,
        output_type: 25,
        main_path_positions: vec![1, 2, 3],
        gnd_trigger_position: Some(6),
        gnd_positions: vec![5, 6, 7],
    }
}

impl DatasetProfile {
    pub fn ckt_bench_101() -> Self {
        DatasetProfile {
            name: "ckt-bench-101".into(),
            gain_categories: 4,
            bw_categories: 32,
            pm_categories: 6,
            node_types: standard_vocabulary(),
            n_max: 16,
            param_width: PARAM_WIDTH,
            convention: standard_convention(),
        }
    }

    pub fn ckt_bench_301() -> Self {
        DatasetProfile {
            name: "ckt-bench-301".into(),
            gain_categories: 4,
            bw_categories: 19,
            pm_categories: 5,
            node_types: standard_vocabulary(),
            n_max: 16,
            param_width: PARAM_WIDTH,
            convention: standard_convention(),
        }
    }

    /// Small-capacity profile used by the synthetic generator.
    pub fn toy() -> Self {
        DatasetProfile {
            name: "toy".into(),
            gain_categories: 4,
            bw_categories: 8,
            pm_categories: 4,
            node_types: standard_vocabulary(),
            n_max: 10,
            param_width: PARAM_WIDTH,
            convention: standard_convention(),
        }
    }

    /// Resolves `101`, `301`, `toy`, or a path to a profile JSON file.
    pub fn resolve(spec: &str) -> Result<Self, DataError> {
        match spec {
            "101" | "ckt-bench-101" => Ok(Self::ckt_bench_101()),
            "301" | "ckt-bench-301" => Ok(Self::ckt_bench_301()),
            "toy" => Ok(Self::toy()),
            path => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    DataError::Profile(format!("cannot read profile {path}: {e}"))
                })?;
                let profile: DatasetProfile = serde_json::from_str(&text)
                    .map_err(|e| DataError::Profile(format!("bad profile JSON: {e}")))?;
                profile.check()?;
                Ok(profile)
            }
        }
    }

    pub fn check(&self) -> Result<(), DataError> {
        if self.node_types.len() != NUM_NODE_TYPES {
            return Err(DataError::Profile(format!(
                "vocabulary must have exactly {NUM_NODE_TYPES} types, got {}",
                self.node_types.len()
            )));
        }
        if self.param_width != PARAM_WIDTH {
            return Err(DataError::Profile(format!(
                "parameter width {} unsupported, expected {PARAM_WIDTH}",
                self.param_width
            )));
        }
        if self.node_types.iter().any(|t| t.param_arity > PARAM_WIDTH) {
            return Err(DataError::Profile("param arity exceeds width".into()));
        }
        let c = &self.convention;
        if c.input_type == c.output_type
            || c.input_type as usize >= NUM_NODE_TYPES
            || c.output_type as usize >= NUM_NODE_TYPES
        {
            return Err(DataError::Profile("bad input/output type ids".into()));
        }
        if self.gain_categories == 0 || self.bw_categories == 0 || self.pm_categories == 0 {
            return Err(DataError::Profile("category counts must be positive".into()));
        }
        if self.n_max < 2 {
            return Err(DataError::Profile("n_max must be at least 2".into()));
        }
        Ok(())
    }

    pub fn type_names(&self) -> Vec<String> {
        self.node_types.iter().map(|t| t.name.clone()).collect()
    }

    pub fn spec_category_counts(&self) -> (usize, usize, usize) {
        (
            self.gain_categories,
            self.bw_categories,
            self.pm_categories,
        )
    }

    pub fn spec_in_range(&self, s: &BinnedSpecification) -> bool {
        (s.gain_cat as usize) < self.gain_categories
            && (s.bw_cat as usize) < self.bw_categories
            && (s.pm_cat as usize) < self.pm_categories
    }

    /// Max flattened-edge-list length for this capacity.
    pub fn edge_slots(&self) -> usize {
        self.n_max * (self.n_max - 1) / 2
    }
}

fn bin_one(raw: f64, categories: usize) -> Option<u16> {
    if !raw.is_finite() {
        return None;
    }
    // the fractional part is discarded; a truncated value outside the
    // category range means the row is invalid
    let truncated = raw.trunc();
    if truncated < 0.0 || truncated >= categories as f64 {
        return None;
    }
    let cat = raw.floor().max(0.0).min((categories - 1) as f64);
    Some(cat as u16)
}

/// Bins a raw specification, or rejects it (negative phase margin or any
/// element outside the profile range after truncation). Values that only
/// dip below zero fractionally are clamped to category 0.
pub fn preprocess_spec(r: &RawSpecification, p: &DatasetProfile) -> Option<BinnedSpecification> {
    if !(r.pm >= 0.0) {
        return None;
    }
    Some(BinnedSpecification {
        gain_cat: bin_one(r.gain, p.gain_categories)?,
        bw_cat: bin_one(r.bw, p.bw_categories)?,
        pm_cat: bin_one(r.pm, p.pm_categories)?,
    })
}

// --- JSON-lines record schema ------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct NodeRecord {
    t: u16,
    p: u16,
    b: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CircuitRecord {
    nodes: Vec<NodeRecord>,
    /// 1-based `[j, i]` pairs with `j < i`.
    edges: Vec<[usize; 2]>,
    spec: RawSpecification,
}

/// Outcome of loading a JSON-lines dataset.
#[derive(Debug, Default)]
pub struct LoadReport {
    pub records: Vec<(Circuit, BinnedSpecification)>,
    pub dropped_invalid_spec: usize,
    pub dropped_invalid_structure: usize,
}

fn circuit_from_record(
    rec: &CircuitRecord,
    profile: &DatasetProfile,
    line: usize,
) -> Result<Circuit, DataError> {
    let n = rec.nodes.len();
    if n > profile.n_max {
        return Err(DataError::Schema {
            line,
            msg: format!("{n} nodes exceeds capacity {}", profile.n_max),
        });
    }
    let mut nodes = Vec::with_capacity(n);
    for nr in &rec.nodes {
        if nr.t as usize >= NUM_NODE_TYPES {
            return Err(DataError::Schema {
                line,
                msg: format!("unknown node type id {}", nr.t),
            });
        }
        if nr.p as usize >= profile.n_max {
            return Err(DataError::Schema {
                line,
                msg: format!("position {} outside [0, {})", nr.p, profile.n_max),
            });
        }
        if nr.b.len() > PARAM_WIDTH {
            return Err(DataError::Schema {
                line,
                msg: format!("{} device parameters exceeds width {PARAM_WIDTH}", nr.b.len()),
            });
        }
        nodes.push(Node::new(nr.t, nr.p, &nr.b));
    }
    let mut edges = Vec::with_capacity(rec.edges.len());
    for &[j, i] in &rec.edges {
        if j < 1 || j >= i || i > n {
            return Err(DataError::Schema {
                line,
                msg: format!("edge [{j}, {i}] violates 1 <= j < i <= {n}"),
            });
        }
        edges.push((j - 1, i - 1));
    }
    Ok(Circuit::new(nodes, edges)?)
}

fn record_from_circuit(c: &Circuit, spec: RawSpecification) -> CircuitRecord {
    CircuitRecord {
        nodes: c
            .nodes()
            .iter()
            .map(|n| {
                let arity = n.param_mask.iter().filter(|&&m| m).count();
                NodeRecord {
                    t: n.ty.0,
                    p: n.position,
                    b: n.params[..arity].to_vec(),
                }
            })
            .collect(),
        edges: c
            .edges()
            .iter()
            .map(|&(j, i)| [j as usize + 1, i as usize + 1])
            .collect(),
        spec,
    }
}

/// Loads a JSON-lines dataset, canonicalizing node order, binning
/// specifications, and dropping rows with invalid specifications (and the
/// rare row whose edges cannot be canonically ordered).
pub fn load_jsonl(path: &Path, profile: &DatasetProfile) -> Result<LoadReport, DataError> {
    let file = std::fs::File::open(path)?;
    let mut report = LoadReport::default();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let rec: CircuitRecord = serde_json::from_str(&text).map_err(|e| DataError::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let circuit = circuit_from_record(&rec, profile, line_no)?;
        let circuit = match circuit.canonicalize(&profile.convention) {
            Ok(c) => c,
            Err(_) => {
                report.dropped_invalid_structure += 1;
                continue;
            }
        };
        match preprocess_spec(&rec.spec, profile) {
            Some(spec) => report.records.push((circuit, spec)),
            None => report.dropped_invalid_spec += 1,
        }
    }
    Ok(report)
}

/// Writes records as JSON lines; binned categories are stored as the raw
/// floats they bin back to, so a reload reproduces the records exactly.
pub fn save_jsonl(
    path: &Path,
    records: &[(Circuit, BinnedSpecification)],
) -> Result<(), DataError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (circuit, spec) in records {
        let raw = RawSpecification {
            gain: spec.gain_cat as f64 + 0.5,
            bw: spec.bw_cat as f64 + 0.5,
            pm: spec.pm_cat as f64 + 0.5,
        };
        let rec = record_from_circuit(circuit, raw);
        serde_json::to_writer(&mut out, &rec).map_err(|e| DataError::Parse {
            line: 0,
            msg: e.to_string(),
        })?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Copies raw rows from `input` to `output`, binning specifications and
/// dropping invalid rows. Returns (kept, dropped_spec, dropped_structure).
pub fn preprocess_file(
    input: &Path,
    output: &Path,
    profile: &DatasetProfile,
) -> Result<(usize, usize, usize), DataError> {
    let report = load_jsonl(input, profile)?;
    save_jsonl(output, &report.records)?;
    Ok((
        report.records.len(),
        report.dropped_invalid_spec,
        report.dropped_invalid_structure,
    ))
}

/// Deterministic shuffled split into train and test partitions.
pub fn split<T: Clone>(records: &[T], train_frac: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    assert!(
        train_frac > 0.0 && train_frac < 1.0,
        "train fraction must lie in (0, 1)"
    );
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_train = ((records.len() as f64) * train_frac).round() as usize;
    let n_train = n_train.min(records.len());
    let train = order[..n_train]
        .iter()
        .map(|&k| records[k].clone())
        .collect();
    let test = order[n_train..]
        .iter()
        .map(|&k| records[k].clone())
        .collect();
    (train, test)
}

// --- synthetic dataset ---------------------------------------------------

/// Topology template: stage count on the main path, an optional parallel
/// branch, and shunt stubs attached to the virtual-GND positions.
#[derive(Debug, Clone, Copy)]
struct Topology {
    stages: usize,
    branch: bool,
    stubs: usize,
}

const TOPOLOGIES: [Topology; 12] = [
    Topology { stages: 1, branch: false, stubs: 0 },
    Topology { stages: 2, branch: false, stubs: 0 },
    Topology { stages: 3, branch: false, stubs: 0 },
    Topology { stages: 1, branch: true, stubs: 0 },
    Topology { stages: 2, branch: true, stubs: 0 },
    Topology { stages: 3, branch: true, stubs: 0 },
    Topology { stages: 2, branch: false, stubs: 1 },
    Topology { stages: 3, branch: false, stubs: 1 },
    Topology { stages: 2, branch: true, stubs: 1 },
    Topology { stages: 3, branch: true, stubs: 1 },
    Topology { stages: 2, branch: false, stubs: 2 },
    Topology { stages: 3, branch: true, stubs: 2 },
];

/// Device block id in `[1, 24]`; never an IO terminal.
fn block_type(seed: usize) -> u16 {
    (1 + seed % 24) as u16
}

fn topology_pair(label: usize) -> (usize, usize) {
    let t = TOPOLOGIES.len();
    (label % t, (label + t / 2) % t)
}

/// Smallest bucket count that makes (topology pair, bucket) identify the
/// label uniquely.
fn bucket_count(n_types: usize) -> usize {
    for q in 3..=n_types.max(3) {
        let mut seen = BTreeMap::new();
        let mut ok = true;
        for label in 0..n_types {
            let (a, b) = topology_pair(label);
            let key = (a.min(b), a.max(b), label % q);
            if seen.insert(key, label).is_some() {
                ok = false;
                break;
            }
        }
        if ok {
            return q;
        }
    }
    n_types.max(1)
}

fn label_to_spec(label: usize, p: &DatasetProfile) -> BinnedSpecification {
    let g = label % p.gain_categories;
    let rest = label / p.gain_categories;
    let b = rest % p.bw_categories;
    let m = (rest / p.bw_categories) % p.pm_categories;
    BinnedSpecification::new(g as u16, b as u16, m as u16)
}

fn toy_device(
    type_seed: usize,
    position: u16,
    class_id: usize,
    bucket_value: f64,
    types: &[NodeTypeInfo],
    rng: &mut ChaCha8Rng,
) -> Node {
    let ty = block_type(type_seed);
    let arity = types[ty as usize].param_arity;
    let values: Vec<f64> = (0..arity)
        .map(|slot| match slot {
            0 => bucket_value,
            1 => (class_id as f64 + 0.5) / TOPOLOGIES.len() as f64,
            _ => 0.3 + 0.1 * rng.gen::<f64>(),
        })
        .collect();
    Node::new(ty, position, &values)
}

fn build_toy_circuit(
    topo: Topology,
    class_id: usize,
    bucket: usize,
    n_buckets: usize,
    types: &[NodeTypeInfo],
    rng: &mut ChaCha8Rng,
) -> Circuit {
    let mut nodes = Vec::new();
    let mut edges: Vec<(usize, usize)> = Vec::new();
    let bucket_value = (bucket as f64 + 0.25 + 0.5 * rng.gen::<f64>()) / n_buckets as f64;

    // input terminal
    nodes.push(Node::new(0, 0, &[]));
    // main-path stages at positions 1..=stages, with one of two type
    // variants per slot so a single label covers several distinct circuits
    for s in 0..topo.stages {
        let variant = rng.gen_range(0..2usize);
        let seed = class_id * 5 + s * 3 + variant * 13;
        nodes.push(toy_device(seed, (s + 1) as u16, class_id, bucket_value, types, rng));
        let prev = nodes.len() - 2;
        edges.push((prev, prev + 1));
    }
    let last_stage = nodes.len() - 1;

    let mut branch_idx = None;
    if topo.branch {
        nodes.push(toy_device(class_id * 5 + 19, 5, class_id, bucket_value, types, rng));
        branch_idx = Some(nodes.len() - 1);
    }
    let mut stub_idx = Vec::new();
    for m in 0..topo.stubs {
        let seed = class_id * 5 + 23 + m * 7;
        nodes.push(toy_device(seed, (6 + m) as u16, class_id, bucket_value, types, rng));
        stub_idx.push(nodes.len() - 1);
    }
    // output terminal, canonically last
    nodes.push(Node::new(25, 4, &[]));
    let out_idx = nodes.len() - 1;

    edges.push((last_stage, out_idx));
    if let Some(b) = branch_idx {
        edges.push((0, b));
        edges.push((b, out_idx));
    }
    for &g in &stub_idx {
        edges.push((last_stage, g));
        edges.push((g, out_idx));
    }

    Circuit::new(nodes, edges).expect("toy circuits are canonical by construction")
}

/// Generates `n_circuits` fully valid circuits over `n_spec_types` distinct
/// specification labels. Every label maps to at least two topology classes,
/// and the label is a deterministic function of (topology class, parameter
/// bucket), so an encoder has a learnable signal.
pub fn synthesize_toy(
    profile: &DatasetProfile,
    n_circuits: usize,
    n_spec_types: usize,
    seed: u64,
) -> Result<Vec<(Circuit, BinnedSpecification)>, DataError> {
    if n_circuits == 0 {
        return Ok(Vec::new());
    }
    let grid = profile.gain_categories * profile.bw_categories * profile.pm_categories;
    if n_spec_types == 0 || n_spec_types > grid {
        return Err(DataError::Infeasible(format!(
            "n_spec_types {n_spec_types} outside [1, {grid}]"
        )));
    }
    if n_circuits < 2 * n_spec_types {
        return Err(DataError::Infeasible(format!(
            "need at least {} circuits to cover {} spec types with two topologies each",
            2 * n_spec_types,
            n_spec_types
        )));
    }
    if profile.n_max < 8 {
        return Err(DataError::Infeasible(format!(
            "profile capacity {} too small for toy topologies",
            profile.n_max
        )));
    }
    let n_buckets = bucket_count(n_spec_types);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n_circuits);
    for idx in 0..n_circuits {
        let label = idx % n_spec_types;
        let (topo_a, topo_b) = topology_pair(label);
        // alternate so both topologies appear for every label
        let class_id = if (idx / n_spec_types) % 2 == 0 {
            topo_a
        } else {
            topo_b
        };
        let bucket = label % n_buckets;
        let circuit = build_toy_circuit(
            TOPOLOGIES[class_id],
            class_id,
            bucket,
            n_buckets,
            &profile.node_types,
            &mut rng,
        );
        debug_assert!(circuit
            .validate(&profile.convention)
            .is_valid_circuit);
        records.push((circuit, label_to_spec(label, profile)));
    }
    Ok(records)
}

// --- batching -------------------------------------------------------------

/// A padded training batch with masks. Node slots beyond each sample's
/// length hold the `NONE_TYPE_ID` sentinel and position 0.
#[derive(Debug, Clone)]
pub struct Batch {
    pub size: usize,
    pub n_max: usize,
    pub node_counts: Vec<usize>,
    pub type_ids: Array2<usize>,
    pub position_ids: Array2<usize>,
    pub params: Array3<f64>,
    pub param_mask: Array3<f64>,
    pub adjacency: Array3<f64>,
    pub edge_targets: Array2<f64>,
    pub edge_mask: Array2<f64>,
    pub specs: Vec<BinnedSpecification>,
    pub filter_mask: Array2<bool>,
}

/// `mask[i][j]` is false iff `i != j` and the two rows share a
/// specification; such pairs are excluded from the contrastive denominator.
pub fn make_filter_mask(specs: &[BinnedSpecification]) -> Array2<bool> {
    let m = specs.len();
    Array2::from_shape_fn((m, m), |(i, j)| i == j || specs[i] != specs[j])
}

pub fn make_batch(
    records: &[(Circuit, BinnedSpecification)],
    profile: &DatasetProfile,
) -> Result<Batch, DataError> {
    let m = records.len();
    let n_max = profile.n_max;
    let e_max = profile.edge_slots();
    let mut type_ids = Array2::from_elem((m, n_max), NONE_TYPE_ID);
    let mut position_ids = Array2::zeros((m, n_max));
    let mut params = Array3::zeros((m, n_max, PARAM_WIDTH));
    let mut param_mask = Array3::zeros((m, n_max, PARAM_WIDTH));
    let mut adjacency = Array3::zeros((m, n_max, n_max));
    let mut edge_targets = Array2::zeros((m, e_max));
    let mut edge_mask = Array2::zeros((m, e_max));
    let mut node_counts = Vec::with_capacity(m);
    let mut specs = Vec::with_capacity(m);

    for (row, (circuit, spec)) in records.iter().enumerate() {
        let n = circuit.node_count();
        if n > n_max {
            return Err(DataError::Schema {
                line: row + 1,
                msg: format!("{n} nodes exceeds capacity {n_max}"),
            });
        }
        if !profile.spec_in_range(spec) {
            return Err(DataError::Schema {
                line: row + 1,
                msg: "specification categories outside profile range".into(),
            });
        }
        node_counts.push(n);
        for (k, node) in circuit.nodes().iter().enumerate() {
            type_ids[[row, k]] = node.ty.index();
            position_ids[[row, k]] = node.position as usize;
            for s in 0..PARAM_WIDTH {
                params[[row, k, s]] = node.params[s];
                param_mask[[row, k, s]] = if node.param_mask[s] { 1.0 } else { 0.0 };
            }
        }
        for &(j, i) in circuit.edges() {
            adjacency[[row, j as usize, i as usize]] = 1.0;
        }
        let flat = circuit.flattened_edges();
        for (k, &bit) in flat.iter().enumerate() {
            edge_targets[[row, k]] = if bit { 1.0 } else { 0.0 };
        }
        for k in 0..n * (n - 1) / 2 {
            edge_mask[[row, k]] = 1.0;
        }
        specs.push(*spec);
    }

    let filter_mask = make_filter_mask(&specs);
    Ok(Batch {
        size: m,
        n_max,
        node_counts,
        type_ids,
        position_ids,
        params,
        param_mask,
        adjacency,
        edge_targets,
        edge_mask,
        specs,
        filter_mask,
    })
}

/// Inverse of [`make_batch`]: padding is reversible via the stored lengths.
pub fn unbatch(batch: &Batch) -> Vec<(Circuit, BinnedSpecification)> {
    let mut out = Vec::with_capacity(batch.size);
    for row in 0..batch.size {
        let n = batch.node_counts[row];
        let mut nodes = Vec::with_capacity(n);
        for k in 0..n {
            let arity = (0..PARAM_WIDTH)
                .take_while(|&s| batch.param_mask[[row, k, s]] > 0.5)
                .count();
            let values: Vec<f64> = (0..arity).map(|s| batch.params[[row, k, s]]).collect();
            nodes.push(Node::new(
                batch.type_ids[[row, k]] as u16,
                batch.position_ids[[row, k]] as u16,
                &values,
            ));
        }
        let mut flat = vec![false; n * (n - 1) / 2];
        for (k, bit) in flat.iter_mut().enumerate() {
            *bit = batch.edge_targets[[row, k]] > 0.5;
        }
        let circuit = Circuit::from_flattened(nodes, &flat).expect("batch stores j < i edges");
        out.push((circuit, batch.specs[row]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn preprocess_discards_fractions() {
        let p = DatasetProfile::ckt_bench_101();
        let got = preprocess_spec(
            &RawSpecification {
                gain: 3.7,
                bw: 10.2,
                pm: 2.9,
            },
            &p,
        )
        .unwrap();
        assert_eq!(got, BinnedSpecification::new(3, 10, 2));
    }

    #[test]
    fn preprocess_rejects_negative_pm() {
        let p = DatasetProfile::ckt_bench_101();
        let r = RawSpecification {
            gain: 1.0,
            bw: 1.0,
            pm: -0.5,
        };
        assert!(preprocess_spec(&r, &p).is_none());
    }

    #[test]
    fn preprocess_lower_boundary() {
        let p = DatasetProfile::ckt_bench_101();
        let r = RawSpecification {
            gain: 0.0,
            bw: 0.0,
            pm: 0.0,
        };
        assert_eq!(
            preprocess_spec(&r, &p).unwrap(),
            BinnedSpecification::new(0, 0, 0)
        );
    }

    #[test]
    fn preprocess_rejects_out_of_range_and_clamps_small_negative() {
        let p = DatasetProfile::ckt_bench_101();
        // truncated value 4 falls outside [0, 4)
        assert!(preprocess_spec(
            &RawSpecification { gain: 4.0, bw: 1.0, pm: 1.0 },
            &p
        )
        .is_none());
        // -0.5 truncates to 0, stays in range, floor clamps to category 0
        let got = preprocess_spec(
            &RawSpecification { gain: -0.5, bw: 1.0, pm: 1.0 },
            &p,
        )
        .unwrap();
        assert_eq!(got.gain_cat, 0);
        // NaN is invalid
        assert!(preprocess_spec(
            &RawSpecification { gain: f64::NAN, bw: 1.0, pm: 1.0 },
            &p
        )
        .is_none());
    }

    proptest! {
        #[test]
        fn preprocess_idempotent(g in 0u16..4, b in 0u16..32, m in 0u16..6) {
            let p = DatasetProfile::ckt_bench_101();
            let binned = BinnedSpecification::new(g, b, m);
            let raw = RawSpecification {
                gain: g as f64,
                bw: b as f64,
                pm: m as f64,
            };
            prop_assert_eq!(preprocess_spec(&raw, &p).unwrap(), binned);
        }
    }

    #[test]
    fn split_sizes_and_partition() {
        let records: Vec<usize> = (0..100).collect();
        let (train, test) = split(&records, 0.9, 11);
        assert_eq!((train.len(), test.len()), (90, 10));
        let mut union: Vec<usize> = train.iter().chain(test.iter()).copied().collect();
        union.sort_unstable();
        assert_eq!(union, records);
        let (train2, test2) = split(&records, 0.9, 11);
        assert_eq!(train, train2);
        assert_eq!(test, test2);
    }

    #[test]
    fn toy_generator_postconditions() {
        let p = DatasetProfile::toy();
        let records = synthesize_toy(&p, 100, 10, 3).unwrap();
        assert_eq!(records.len(), 100);
        let mut by_label: BTreeMap<BinnedSpecification, Vec<&Circuit>> = BTreeMap::new();
        for (c, s) in &records {
            assert!(c.validate(&p.convention).is_valid_circuit);
            by_label.entry(*s).or_default().push(c);
        }
        assert_eq!(by_label.len(), 10);
        for (label, circuits) in &by_label {
            let mut shapes: Vec<usize> = circuits.iter().map(|c| c.node_count()).collect();
            let mut hashes: Vec<_> = circuits
                .iter()
                .map(|c| c.canonical_hash(&p.convention))
                .collect();
            hashes.sort_by_key(|h| h.0);
            hashes.dedup();
            shapes.sort_unstable();
            shapes.dedup();
            assert!(
                hashes.len() >= 2,
                "label {label:?} has fewer than two topologies"
            );
        }
    }

    #[test]
    fn toy_generator_deterministic_and_edge_cases() {
        let p = DatasetProfile::toy();
        let a = synthesize_toy(&p, 40, 5, 9).unwrap();
        let b = synthesize_toy(&p, 40, 5, 9).unwrap();
        assert_eq!(a, b);
        assert!(synthesize_toy(&p, 0, 5, 9).unwrap().is_empty());
        assert!(synthesize_toy(&p, 5, 5, 9).is_err());
        assert!(synthesize_toy(&p, 10, 1000, 9).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let p = DatasetProfile::toy();
        let records = synthesize_toy(&p, 30, 6, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.jsonl");
        save_jsonl(&path, &records).unwrap();
        let report = load_jsonl(&path, &p).unwrap();
        assert_eq!(report.records, records);
        assert_eq!(report.dropped_invalid_spec, 0);
    }

    #[test]
    fn jsonl_drops_invalid_spec_rows() {
        let p = DatasetProfile::toy();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.jsonl");
        let good = r#"{"nodes":[{"t":0,"p":0,"b":[]},{"t":1,"p":1,"b":[0.5]},{"t":25,"p":4,"b":[]}],"edges":[[1,2],[2,3]],"spec":{"gain":1.2,"bw":3.4,"pm":1.0}}"#;
        let bad_pm = r#"{"nodes":[{"t":0,"p":0,"b":[]},{"t":1,"p":1,"b":[0.5]},{"t":25,"p":4,"b":[]}],"edges":[[1,2],[2,3]],"spec":{"gain":1.2,"bw":3.4,"pm":-0.5}}"#;
        std::fs::write(&path, format!("{good}\n{bad_pm}\n{good}\n")).unwrap();
        let report = load_jsonl(&path, &p).unwrap();
        assert_eq!(report.records.len(), 2);
        assert_eq!(report.dropped_invalid_spec, 1);
    }

    #[test]
    fn jsonl_empty_file() {
        let p = DatasetProfile::toy();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        let report = load_jsonl(&path, &p).unwrap();
        assert!(report.records.is_empty());
        assert_eq!(report.dropped_invalid_spec, 0);
    }

    #[test]
    fn jsonl_reports_parse_and_schema_errors() {
        let p = DatasetProfile::toy();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{not json}\n").unwrap();
        match load_jsonl(&path, &p) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
        let unknown_type = r#"{"nodes":[{"t":77,"p":0,"b":[]}],"edges":[],"spec":{"gain":1.0,"bw":1.0,"pm":1.0}}"#;
        std::fs::write(&path, format!("{unknown_type}\n")).unwrap();
        match load_jsonl(&path, &p) {
            Err(DataError::Schema { line, msg }) => {
                assert_eq!(line, 1);
                assert!(msg.contains("unknown node type"));
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn filter_mask_definition() {
        let a = BinnedSpecification::new(0, 0, 0);
        let b = BinnedSpecification::new(1, 0, 0);
        let mask = make_filter_mask(&[a, b, a]);
        assert!(mask[[0, 0]] && mask[[1, 1]] && mask[[2, 2]]);
        assert!(!mask[[0, 2]] && !mask[[2, 0]]);
        assert!(mask[[0, 1]] && mask[[1, 0]] && mask[[1, 2]] && mask[[2, 1]]);

        let all_distinct = make_filter_mask(&[a, b]);
        assert!(all_distinct.iter().all(|&v| v));

        let same = make_filter_mask(&[a, a]);
        assert!(same[[0, 0]] && same[[1, 1]] && !same[[0, 1]] && !same[[1, 0]]);
    }

    proptest! {
        #[test]
        fn filter_mask_symmetric_true_diagonal(labels in proptest::collection::vec(0u16..4, 1..12)) {
            let specs: Vec<BinnedSpecification> =
                labels.iter().map(|&g| BinnedSpecification::new(g, 0, 0)).collect();
            let mask = make_filter_mask(&specs);
            for i in 0..specs.len() {
                prop_assert!(mask[[i, i]]);
                for j in 0..specs.len() {
                    prop_assert_eq!(mask[[i, j]], mask[[j, i]]);
                }
            }
        }
    }

    #[test]
    fn batch_round_trip() {
        let p = DatasetProfile::toy();
        let records = synthesize_toy(&p, 24, 6, 4).unwrap();
        let batch = make_batch(&records, &p).unwrap();
        assert_eq!(batch.size, 24);
        let back = unbatch(&batch);
        assert_eq!(back, records);
    }
}
