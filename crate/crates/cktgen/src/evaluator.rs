//! Evaluation metrics and experiment protocols: cross-modal retrieval,
//! classifier-checked specification accuracy, latent Fréchet distance,
//! multimodal distance, diversity, reconstruction accuracy, and
//! unconditional generation statistics.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayD, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::circuit::{Circuit, TopologyDigest};
use crate::dataset::{make_batch, BinnedSpecification, DataError};
use crate::decoder::Sampler;
use crate::encoders::reparameterize_array;
use crate::model::ModelState;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("argument: {0}")]
    Argument(String),
    #[error("numeric: {0}")]
    Numeric(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Metric results; conditional and reconstruction/unconditional runs fill
/// different subsets of fields.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub entries: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_at_1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_at_2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_at_3: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_at_5: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spec_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mm_distance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fid: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid_circuit_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diversity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reconstruction_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid_dag_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub novel_circuit_rate: Option<f64>,
}

const ENCODE_CHUNK: usize = 32;

fn l2_normalized_rows(x: &Array2<f64>) -> Result<Array2<f64>, EvalError> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 0.0 || !norm.is_finite() {
            return Err(EvalError::Numeric("zero-norm latent row".into()));
        }
        row.mapv_inplace(|v| v / norm);
    }
    Ok(out)
}

fn cosine_matrix(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>, EvalError> {
    if a.ncols() != b.ncols() {
        return Err(EvalError::Argument("latent widths differ".into()));
    }
    let an = l2_normalized_rows(a)?;
    let bn = l2_normalized_rows(b)?;
    Ok(an.dot(&bn.t()))
}

/// For each generated latent, ranks all specification latents by cosine
/// similarity (ties broken by index order) and reports the fraction whose
/// true row ranks inside the top k, for each requested k.
pub fn retrieval_precision(
    gen_latents: &Array2<f64>,
    spec_latents: &Array2<f64>,
    ks: &[usize],
) -> Result<Vec<f64>, EvalError> {
    let k_rows = gen_latents.nrows();
    if k_rows == 0 || k_rows != spec_latents.nrows() {
        return Err(EvalError::Argument("paired latent sets required".into()));
    }
    let sim = cosine_matrix(gen_latents, spec_latents)?;
    let mut hits = vec![0usize; ks.len()];
    for i in 0..k_rows {
        let own = sim[[i, i]];
        let rank = (0..k_rows)
            .filter(|&j| sim[[i, j]] > own || (sim[[i, j]] == own && j < i))
            .count();
        for (slot, &k) in ks.iter().enumerate() {
            if rank < k {
                hits[slot] += 1;
            }
        }
    }
    Ok(hits.iter().map(|&h| h as f64 / k_rows as f64).collect())
}

/// Mean of (1 - cosine similarity) over paired rows; 0 is best.
pub fn mm_distance(
    gen_latents: &Array2<f64>,
    spec_latents: &Array2<f64>,
) -> Result<f64, EvalError> {
    let n = gen_latents.nrows();
    if n == 0 || n != spec_latents.nrows() {
        return Err(EvalError::Argument("paired latent sets required".into()));
    }
    let sim = cosine_matrix(gen_latents, spec_latents)?;
    Ok((0..n).map(|i| 1.0 - sim[[i, i]]).sum::<f64>() / n as f64)
}

fn mean_cov(x: &Array2<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = x.dim();
    let mean = x.mean_axis(Axis(0)).unwrap();
    let mut cov = DMatrix::zeros(d, d);
    for row in x.rows() {
        let c: Vec<f64> = row
            .iter()
            .zip(mean.iter())
            .map(|(v, m)| v - m)
            .collect();
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += c[i] * c[j];
            }
        }
    }
    cov /= (n - 1) as f64;
    if n < d + 1 {
        // shrinkage keeps tiny-sample covariances full rank
        for i in 0..d {
            cov[(i, i)] += 1e-6;
        }
    }
    (DVector::from_iterator(d, mean.iter().cloned()), cov)
}

fn sqrtm_psd(c: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = c.clone().symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between the Gaussian fits of two latent sets:
/// `||m_a - m_b||^2 + tr(C_a + C_b - 2 (C_a C_b)^{1/2})`, eigenvalues
/// clipped at zero, clamped to be nonnegative.
pub fn fid_latent(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64, EvalError> {
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(EvalError::Argument(
            "need at least two samples per set".into(),
        ));
    }
    if a.ncols() != b.ncols() {
        return Err(EvalError::Argument("latent widths differ".into()));
    }
    let (ma, ca) = mean_cov(a);
    let (mb, cb) = mean_cov(b);
    let dm = &ma - &mb;
    let sa = sqrtm_psd(&ca);
    let inner = &sa * &cb * &sa;
    let cross = sqrtm_psd(&inner);
    let fid = dm.dot(&dm) + ca.trace() + cb.trace() - 2.0 * cross.trace();
    Ok(fid.max(0.0))
}

/// Mean L2 distance over `n_pairs` uniformly sampled pairs of latents
/// drawn from different groups.
pub fn diversity(
    latents: &Array2<f64>,
    groups: &[usize],
    n_pairs: usize,
    seed: u64,
) -> Result<f64, EvalError> {
    let n = latents.nrows();
    if groups.len() != n {
        return Err(EvalError::Argument("group labels must match rows".into()));
    }
    let distinct: HashSet<usize> = groups.iter().cloned().collect();
    if distinct.len() < 2 {
        return Err(EvalError::Argument(
            "diversity needs at least two specification types".into(),
        ));
    }
    if n_pairs == 0 {
        return Err(EvalError::Argument("need at least one pair".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..n_pairs {
        let (i, j) = loop {
            let i = rng.gen_range(0..n);
            let j = rng.gen_range(0..n);
            if groups[i] != groups[j] {
                break (i, j);
            }
        };
        let d2: f64 = latents
            .row(i)
            .iter()
            .zip(latents.row(j).iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        total += d2.sqrt();
    }
    Ok(total / n_pairs as f64)
}

/// Encodes circuits to their circuit-latent Gaussians and returns
/// (mu, logvar) matrices, eval mode.
pub fn encode_circuits(
    state: &ModelState,
    records: &[(Circuit, BinnedSpecification)],
) -> Result<(Array2<f64>, Array2<f64>), EvalError> {
    let d = state.config.d_latent;
    let mut mu = Array2::zeros((records.len(), d));
    let mut lv = Array2::zeros((records.len(), d));
    let mut row = 0;
    for chunk in records.chunks(ENCODE_CHUNK) {
        let batch = make_batch(chunk, &state.profile)?;
        let mut g = Graph::new(false, 0);
        let lat = state.enc_c.apply(&mut g, &state.store, &batch);
        let mv = g.value(lat.mu);
        let vv = g.value(lat.logvar);
        for b in 0..batch.size {
            for k in 0..d {
                mu[[row, k]] = mv[[b, k]];
                lv[[row, k]] = vv[[b, k]];
            }
            row += 1;
        }
    }
    Ok((mu, lv))
}

/// Encodes specifications to their spec-latent Gaussians.
pub fn encode_specs(
    state: &ModelState,
    specs: &[BinnedSpecification],
) -> Result<(Array2<f64>, Array2<f64>), EvalError> {
    let d = state.config.d_latent;
    let mut mu = Array2::zeros((specs.len(), d));
    let mut lv = Array2::zeros((specs.len(), d));
    let mut row = 0;
    for chunk in specs.chunks(ENCODE_CHUNK) {
        let mut g = Graph::new(false, 0);
        let lat = state
            .enc_s
            .apply(&mut g, &state.store, chunk)
            .map_err(EvalError::Argument)?;
        let mv = g.value(lat.mu);
        let vv = g.value(lat.logvar);
        for b in 0..chunk.len() {
            for k in 0..d {
                mu[[row, k]] = mv[[b, k]];
                lv[[row, k]] = vv[[b, k]];
            }
            row += 1;
        }
    }
    Ok((mu, lv))
}

fn maybe_sample(
    mu: &Array2<f64>,
    logvar: &Array2<f64>,
    use_mean: bool,
    rng: &mut ChaCha8Rng,
) -> Array2<f64> {
    if use_mean {
        return mu.clone();
    }
    let noise = crate::autodiff::sample_standard_normal(rng, &[mu.nrows(), mu.ncols()]);
    reparameterize_array(
        &mu.clone().into_dyn(),
        &logvar.clone().into_dyn(),
        &noise,
    )
    .into_dimensionality()
    .unwrap()
}

/// Argmax categories from the three classifier heads over circuit-latent
/// means.
pub fn classifier_predictions(
    state: &ModelState,
    circuits: &[Circuit],
    fill: &[BinnedSpecification],
) -> Result<Vec<BinnedSpecification>, EvalError> {
    assert_eq!(circuits.len(), fill.len());
    let mut out = Vec::with_capacity(circuits.len());
    let records: Vec<(Circuit, BinnedSpecification)> = circuits
        .iter()
        .cloned()
        .zip(fill.iter().cloned())
        .collect();
    for chunk in records.chunks(ENCODE_CHUNK) {
        let batch = make_batch(chunk, &state.profile)?;
        let mut g = Graph::new(false, 0);
        let lat = state.enc_c.apply(&mut g, &state.store, &batch);
        let (lg, lb, lp) = state.heads.apply(&mut g, &state.store, lat.mu);
        let (vg, vb, vp) = (g.value(lg).clone(), g.value(lb).clone(), g.value(lp).clone());
        for b in 0..batch.size {
            let pick = |v: &ArrayD<f64>| -> u16 {
                let cols = v.shape()[1];
                let mut best = 0;
                for c in 0..cols {
                    if v[[b, c]] > v[[b, best]] {
                        best = c;
                    }
                }
                best as u16
            };
            out.push(BinnedSpecification::new(pick(&vg), pick(&vb), pick(&vp)));
        }
    }
    Ok(out)
}

/// Fraction of circuits whose three predicted categories all equal the
/// conditioning categories.
pub fn specification_accuracy(
    state: &ModelState,
    circuits: &[Circuit],
    conditions: &[BinnedSpecification],
) -> Result<f64, EvalError> {
    if circuits.is_empty() || circuits.len() != conditions.len() {
        return Err(EvalError::Argument(
            "need one condition per circuit".into(),
        ));
    }
    let preds = classifier_predictions(state, circuits, conditions)?;
    let hits = preds
        .iter()
        .zip(conditions.iter())
        .filter(|(p, c)| p == c)
        .count();
    Ok(hits as f64 / circuits.len() as f64)
}

/// A circuit counts as reconstructed when decoded types, positions, and
/// edges all exactly match; device parameters are continuous and excluded.
pub fn structure_matches(a: &Circuit, b: &Circuit) -> bool {
    a.node_count() == b.node_count()
        && a.nodes()
            .iter()
            .zip(b.nodes().iter())
            .all(|(x, y)| x.ty == y.ty && x.position == y.position)
        && a.edges() == b.edges()
}

/// Decodes each test circuit from its encoding and reports the exact-match
/// rate. `n_latent_samples == 0` decodes once from the mean; otherwise each
/// circuit is decoded from that many posterior samples.
pub fn reconstruction_accuracy(
    state: &ModelState,
    records: &[(Circuit, BinnedSpecification)],
    n_latent_samples: usize,
    seed: u64,
) -> Result<f64, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Argument("empty test split".into()));
    }
    let (mu, lv) = encode_circuits(state, records)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = state.config.d_latent;
    let mut hits = 0usize;
    let mut total = 0usize;
    for (row, (truth, _)) in records.iter().enumerate() {
        let zs: Vec<Vec<f64>> = if n_latent_samples == 0 {
            vec![mu.row(row).to_vec()]
        } else {
            (0..n_latent_samples)
                .map(|_| {
                    (0..d)
                        .map(|k| {
                            let eps: f64 = rng.sample(rand_distr::StandardNormal);
                            mu[[row, k]] + (0.5 * lv[[row, k]]).exp() * eps
                        })
                        .collect()
                })
                .collect()
        };
        for z in zs {
            let decoded = state.decoder.generate(
                &state.store,
                &state.profile,
                &z,
                state.profile.n_max,
                Sampler::Greedy,
                &mut rng,
            );
            if structure_matches(&decoded, truth) {
                hits += 1;
            }
            total += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct UnconditionalStats {
    pub valid_dag_rate: f64,
    pub valid_circuit_rate: f64,
    pub novel_circuit_rate: f64,
}

/// Decodes from standard-normal latents; novelty requires a valid circuit
/// whose canonical digest is unseen in training.
pub fn unconditional_eval(
    state: &ModelState,
    n_samples: usize,
    train_hashes: &HashSet<TopologyDigest>,
    seed: u64,
) -> Result<UnconditionalStats, EvalError> {
    if n_samples == 0 {
        return Err(EvalError::Argument("need at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = state.config.d_latent;
    let conv = &state.profile.convention;
    let (mut dags, mut valid, mut novel) = (0usize, 0usize, 0usize);
    for _ in 0..n_samples {
        let z: Vec<f64> = (0..d)
            .map(|_| rng.sample(rand_distr::StandardNormal))
            .collect();
        let c = state.decoder.generate(
            &state.store,
            &state.profile,
            &z,
            state.profile.n_max,
            Sampler::Greedy,
            &mut rng,
        );
        let report = c.validate(conv);
        dags += report.is_dag as usize;
        if report.is_valid_circuit {
            valid += 1;
            if !train_hashes.contains(&c.canonical_hash(conv)) {
                novel += 1;
            }
        }
    }
    let n = n_samples as f64;
    Ok(UnconditionalStats {
        valid_dag_rate: dags as f64 / n,
        valid_circuit_rate: valid as f64 / n,
        novel_circuit_rate: novel as f64 / n,
    })
}

/// One conditional-generation case: a specification type, the latent that
/// conditioned the decoder, the generated circuit, and one ground-truth
/// circuit of that type.
#[derive(Debug, Clone)]
pub struct GenerationEntry {
    pub spec: BinnedSpecification,
    pub latent: Vec<f64>,
    pub generated: Circuit,
    pub reference: Circuit,
}

#[derive(Debug, Clone)]
pub struct GenerationEvalSet {
    pub entries: Vec<GenerationEntry>,
}

fn group_by_spec(
    records: &[(Circuit, BinnedSpecification)],
) -> Vec<(BinnedSpecification, Vec<usize>)> {
    let mut groups: indexmap::IndexMap<BinnedSpecification, Vec<usize>> =
        indexmap::IndexMap::new();
    for (k, (_, s)) in records.iter().enumerate() {
        groups.entry(*s).or_default().push(k);
    }
    let mut out: Vec<(BinnedSpecification, Vec<usize>)> = groups.into_iter().collect();
    out.sort_by_key(|(s, _)| (s.gain_cat, s.bw_cat, s.pm_cat));
    out
}

/// Builds one generated circuit per specification type present in the test
/// split, conditioning on a sampled spec latent, with one ground-truth
/// reference per type.
pub fn build_generation_set(
    generator: &ModelState,
    records: &[(Circuit, BinnedSpecification)],
    sampler: Sampler,
    seed: u64,
) -> Result<GenerationEvalSet, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Argument("empty test split".into()));
    }
    let groups = group_by_spec(records);
    let specs: Vec<BinnedSpecification> = groups.iter().map(|(s, _)| *s).collect();
    let (mu, lv) = encode_specs(generator, &specs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latents = maybe_sample(&mu, &lv, false, &mut rng);
    let mut entries = Vec::with_capacity(groups.len());
    for (row, (spec, members)) in groups.iter().enumerate() {
        let z = latents.row(row).to_vec();
        let generated = generator.decoder.generate(
            &generator.store,
            &generator.profile,
            &z,
            generator.profile.n_max,
            sampler,
            &mut rng,
        );
        let reference = records[members[rng.gen_range(0..members.len())]].0.clone();
        entries.push(GenerationEntry {
            spec: *spec,
            latent: z,
            generated,
            reference,
        });
    }
    Ok(GenerationEvalSet { entries })
}

/// Scores a generation set with a frozen evaluator model: retrieval
/// precision, specification accuracy, MM distance, latent FID against the
/// references, validity rate, and cross-spec diversity.
pub fn conditional_metrics(
    evaluator: &ModelState,
    set: &GenerationEvalSet,
    use_mean_latents: bool,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    if set.entries.is_empty() {
        return Err(EvalError::Argument("empty generation set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fill: Vec<BinnedSpecification> = set.entries.iter().map(|e| e.spec).collect();
    let gen_records: Vec<(Circuit, BinnedSpecification)> = set
        .entries
        .iter()
        .map(|e| (e.generated.clone(), e.spec))
        .collect();
    let ref_records: Vec<(Circuit, BinnedSpecification)> = set
        .entries
        .iter()
        .map(|e| (e.reference.clone(), e.spec))
        .collect();

    let (gen_mu, gen_lv) = encode_circuits(evaluator, &gen_records)?;
    let gen_lat = maybe_sample(&gen_mu, &gen_lv, use_mean_latents, &mut rng);
    let (spec_mu, spec_lv) = encode_specs(evaluator, &fill)?;
    let spec_lat = maybe_sample(&spec_mu, &spec_lv, use_mean_latents, &mut rng);
    let (ref_mu, ref_lv) = encode_circuits(evaluator, &ref_records)?;
    let ref_lat = maybe_sample(&ref_mu, &ref_lv, use_mean_latents, &mut rng);

    let r = retrieval_precision(&gen_lat, &spec_lat, &[1, 2, 3])?;
    let gen_circuits: Vec<Circuit> = set.entries.iter().map(|e| e.generated.clone()).collect();
    let spec_acc = specification_accuracy(evaluator, &gen_circuits, &fill)?;
    let mmd = mm_distance(&gen_lat, &spec_lat)?;
    let fid = fid_latent(&gen_lat, &ref_lat)?;
    let valid = set
        .entries
        .iter()
        .filter(|e| {
            e.generated
                .validate(&evaluator.profile.convention)
                .is_valid_circuit
        })
        .count() as f64
        / set.entries.len() as f64;
    let groups: Vec<usize> = (0..set.entries.len()).collect();
    let div = if set.entries.len() >= 2 {
        Some(diversity(&gen_lat, &groups, 512, seed.wrapping_add(1))?)
    } else {
        None
    };

    Ok(EvalReport {
        mode: "conditional".into(),
        entries: set.entries.len(),
        r_at_1: Some(r[0]),
        r_at_2: Some(r[1]),
        r_at_3: Some(r[2]),
        spec_accuracy: Some(spec_acc),
        mm_distance: Some(mmd),
        fid: Some(fid),
        valid_circuit_rate: Some(valid),
        diversity: div,
        ..EvalReport::default()
    })
}

/// Cross-modal retrieval over the test split: one seeded circuit per
/// specification type, ranked against all spec latents; Top-1/3/5.
pub fn retrieval_experiment(
    state: &ModelState,
    records: &[(Circuit, BinnedSpecification)],
    seed: u64,
) -> Result<EvalReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Argument("empty test split".into()));
    }
    let groups = group_by_spec(records);
    if groups.len() < 2 {
        return Err(EvalError::Argument(
            "retrieval needs at least two specification types".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: Vec<(Circuit, BinnedSpecification)> = groups
        .iter()
        .map(|(s, members)| {
            let k = members[rng.gen_range(0..members.len())];
            (records[k].0.clone(), *s)
        })
        .collect();
    let specs: Vec<BinnedSpecification> = groups.iter().map(|(s, _)| *s).collect();
    let (gen_mu, _) = encode_circuits(state, &chosen)?;
    let (spec_mu, _) = encode_specs(state, &specs)?;
    let r = retrieval_precision(&gen_mu, &spec_mu, &[1, 3, 5])?;
    Ok(EvalReport {
        mode: "retrieval".into(),
        entries: groups.len(),
        r_at_1: Some(r[0]),
        r_at_3: Some(r[1]),
        r_at_5: Some(r[2]),
        ..EvalReport::default()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::Node;
    use crate::dataset::{synthesize_toy, DatasetProfile};
    use crate::model::ModelConfig;

    fn tiny_state(seed: u64) -> ModelState {
        let config = ModelConfig {
            d_model: 8,
            d_latent: 6,
            d_hidden: 12,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            ff_dim: 8,
            gnn_layers: 1,
            p_drop_embed: 0.0,
            p_drop_gnn: 0.0,
            p_drop_enc: 0.0,
            p_drop_dec: 0.0,
            edge_pair_latent: false,
        };
        ModelState::init(&config, &DatasetProfile::toy(), seed).unwrap()
    }

    #[test]
    fn retrieval_identity_and_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_fn((6, 4), |_| rng.gen_range(-1.0..1.0f64));
        let r = retrieval_precision(&x, &x, &[1, 2, 3]).unwrap();
        assert_eq!(r[0], 1.0);
        assert_eq!(r[1], 1.0);
        assert_eq!(r[2], 1.0);

        let y = Array2::from_shape_fn((6, 4), |_| rng.gen_range(-1.0..1.0f64));
        let r = retrieval_precision(&x, &y, &[1, 2, 3]).unwrap();
        assert!(r[0] <= r[1] && r[1] <= r[2]);
        for v in r {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn retrieval_tie_breaks_by_index() {
        // spec rows 0 and 1 are duplicates; index order decides the tie
        let mut spec = Array2::zeros((4, 3));
        spec[[0, 0]] = 1.0;
        spec[[1, 0]] = 1.0;
        spec[[2, 1]] = 1.0;
        spec[[3, 2]] = 1.0;
        let gen = spec.clone();
        let r = retrieval_precision(&gen, &spec, &[1, 2, 3]).unwrap();
        assert_eq!(r[0], 0.75, "row 1 loses its tie to row 0");
        assert_eq!(r[1], 1.0);

        let zero = Array2::zeros((2, 3));
        assert!(retrieval_precision(&zero, &zero, &[1]).is_err());
    }

    #[test]
    fn mm_distance_extremes() {
        let mut a = Array2::zeros((3, 2));
        a[[0, 0]] = 1.0;
        a[[1, 1]] = 2.0;
        a[[2, 0]] = -0.5;
        let d = mm_distance(&a, &a).unwrap();
        assert!(d.abs() < 1e-12);
        let b = a.mapv(|v| -v);
        let d = mm_distance(&a, &b).unwrap();
        assert!((d - 2.0).abs() < 1e-12);
    }

    // plain cyclic Jacobi eigensolver used as the independent oracle
    fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
        let n = a.len();
        let mut v = vec![vec![0.0; n]; n];
        for (i, row) in v.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        for _ in 0..200 {
            let mut off = 0.0;
            for i in 0..n {
                for j in i + 1..n {
                    off += a[i][j] * a[i][j];
                }
            }
            if off < 1e-26 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[k][p];
                        let akq = a[k][q];
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[p][k];
                        let aqk = a[q][k];
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                    for k in 0..n {
                        let vkp = v[k][p];
                        let vkq = v[k][q];
                        v[k][p] = c * vkp - s * vkq;
                        v[k][q] = s * vkp + c * vkq;
                    }
                }
            }
        }
        ((0..n).map(|i| a[i][i]).collect(), v)
    }

    fn oracle_sqrtm(c: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = c.len();
        let (vals, vecs) = jacobi_eigen(c.to_vec());
        let roots: Vec<f64> = vals.iter().map(|&l| l.max(0.0).sqrt()).collect();
        let mut out = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                out[i][j] = (0..n).map(|k| vecs[i][k] * roots[k] * vecs[j][k]).sum();
            }
        }
        out
    }

    fn oracle_fid(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let d = a.ncols();
        let stats = |x: &Array2<f64>| {
            let n = x.nrows();
            let mut m = vec![0.0; d];
            for row in x.rows() {
                for (k, v) in row.iter().enumerate() {
                    m[k] += v / n as f64;
                }
            }
            let mut c = vec![vec![0.0; d]; d];
            for row in x.rows() {
                for i in 0..d {
                    for j in 0..d {
                        c[i][j] += (row[i] - m[i]) * (row[j] - m[j]) / (n as f64 - 1.0);
                    }
                }
            }
            if n < d + 1 {
                for (i, row) in c.iter_mut().enumerate() {
                    row[i] += 1e-6;
                }
            }
            (m, c)
        };
        let (ma, ca) = stats(a);
        let (mb, cb) = stats(b);
        let sa = oracle_sqrtm(&ca);
        let mut inner = vec![vec![0.0; d]; d];
        for i in 0..d {
            for j in 0..d {
                inner[i][j] = (0..d)
                    .map(|k| {
                        (0..d)
                            .map(|l| sa[i][k] * cb[k][l] * sa[l][j])
                            .sum::<f64>()
                    })
                    .sum();
            }
        }
        let cross = oracle_sqrtm(&inner);
        let dm2: f64 = (0..d).map(|k| (ma[k] - mb[k]).powi(2)).sum();
        let tr = |m: &[Vec<f64>]| (0..d).map(|i| m[i][i]).sum::<f64>();
        (dm2 + tr(&ca) + tr(&cb) - 2.0 * tr(&cross)).max(0.0)
    }

    #[test]
    fn fid_self_shift_and_guards() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array2::from_shape_fn((30, 4), |_| rng.gen_range(-1.0..1.0f64));
        assert!(fid_latent(&x, &x).unwrap().abs() < 1e-6);

        // equal-covariance Gaussians separated by m give roughly ||m||^2
        let shift = [0.9, -0.4, 0.6, 0.2];
        let m2: f64 = shift.iter().map(|v| v * v).sum();
        let a = Array2::from_shape_fn((4000, 4), |_| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let mut b = a.clone();
        for mut row in b.rows_mut() {
            for (k, v) in row.iter_mut().enumerate() {
                *v += shift[k];
            }
        }
        let f = fid_latent(&a, &b).unwrap();
        assert!((f - m2).abs() < 0.05, "{f} vs {m2}");

        let one = Array2::zeros((1, 4));
        assert!(fid_latent(&one, &x).is_err());
    }

    #[test]
    fn fid_matches_independent_oracle_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let n_a = rng.gen_range(5..25);
            let n_b = rng.gen_range(5..25);
            let d = rng.gen_range(2..6);
            let a = Array2::from_shape_fn((n_a, d), |_| rng.gen_range(-2.0..2.0f64));
            let b = Array2::from_shape_fn((n_b, d), |_| rng.gen_range(-2.0..2.0f64));
            let got = fid_latent(&a, &b).unwrap();
            let want = oracle_fid(&a, &b);
            assert!(
                (got - want).abs() <= 1e-8 * want.abs().max(1.0),
                "{got} vs {want}"
            );
            let rev = fid_latent(&b, &a).unwrap();
            assert!((got - rev).abs() < 1e-8);
            assert!(got >= 0.0);
        }
    }

    #[test]
    fn diversity_cases() {
        let mut x = Array2::zeros((2, 3));
        x[[1, 0]] = 3.0;
        x[[1, 1]] = 4.0;
        let d = diversity(&x, &[0, 1], 100, 7).unwrap();
        assert!((d - 5.0).abs() < 1e-12, "two singleton clusters at L2 = 5");

        let same = Array2::from_elem((6, 3), 0.25);
        let d = diversity(&same, &[0, 0, 1, 1, 2, 2], 64, 3).unwrap();
        assert_eq!(d, 0.0);

        assert!(diversity(&same, &[0; 6], 64, 3).is_err());
        let d1 = diversity(&x, &[0, 1], 50, 11).unwrap();
        let d2 = diversity(&x, &[0, 1], 50, 11).unwrap();
        assert_eq!(d1, d2, "seeded determinism");
    }

    #[test]
    fn spec_accuracy_echo_and_bound() {
        let state = tiny_state(5);
        let profile = state.profile.clone();
        let records = synthesize_toy(&profile, 12, 4, 3).unwrap();
        let circuits: Vec<Circuit> = records.iter().map(|(c, _)| c.clone()).collect();
        let conditions: Vec<BinnedSpecification> = records.iter().map(|(_, s)| *s).collect();

        // force every head to echo one fixed answer and condition on it
        let mut echo = state.clone();
        let fixed = BinnedSpecification::new(2, 5, 1);
        for (head, cat) in [
            ("cg.f_gain", fixed.gain_cat),
            ("cg.f_bw", fixed.bw_cat),
            ("cg.f_pm", fixed.pm_cat),
        ] {
            let w = echo.store.get_mut(&format!("{head}.l1.w"));
            w.fill(0.0);
            let b = echo.store.get_mut(&format!("{head}.l1.b"));
            b.fill(0.0);
            b[[cat as usize]] = 1e4;
        }
        let same: Vec<BinnedSpecification> = vec![fixed; circuits.len()];
        let acc = specification_accuracy(&echo, &circuits, &same).unwrap();
        assert_eq!(acc, 1.0);

        // one element forced wrong everywhere drops the conjunction to zero
        let mut wrong = vec![fixed; circuits.len()];
        for w in &mut wrong {
            w.pm_cat = (fixed.pm_cat + 1) % 4;
        }
        let acc = specification_accuracy(&echo, &circuits, &wrong).unwrap();
        assert_eq!(acc, 0.0);

        // strict conjunction is bounded by each per-element accuracy
        let preds = classifier_predictions(&state, &circuits, &conditions).unwrap();
        let joint = specification_accuracy(&state, &circuits, &conditions).unwrap();
        let n = circuits.len() as f64;
        let eg = preds
            .iter()
            .zip(&conditions)
            .filter(|(p, c)| p.gain_cat == c.gain_cat)
            .count() as f64
            / n;
        let eb = preds
            .iter()
            .zip(&conditions)
            .filter(|(p, c)| p.bw_cat == c.bw_cat)
            .count() as f64
            / n;
        let ep = preds
            .iter()
            .zip(&conditions)
            .filter(|(p, c)| p.pm_cat == c.pm_cat)
            .count() as f64
            / n;
        assert!(joint <= eg.min(eb).min(ep) + 1e-12);
    }

    #[test]
    fn untrained_reconstruction_is_near_zero() {
        let state = tiny_state(7);
        let records = synthesize_toy(&state.profile, 12, 4, 5).unwrap();
        let acc = reconstruction_accuracy(&state, &records, 0, 3).unwrap();
        assert!(acc < 0.2, "untrained model should almost never match: {acc}");
        let acc2 = reconstruction_accuracy(&state, &records, 2, 3).unwrap();
        assert!((0.0..=1.0).contains(&acc2));
    }

    #[test]
    fn unconditional_stats_and_memorization() {
        let state = tiny_state(11);
        let empty = HashSet::new();
        let stats = unconditional_eval(&state, 40, &empty, 13).unwrap();
        assert_eq!(stats.valid_dag_rate, 1.0, "j < i decoding is acyclic");
        assert!(stats.valid_circuit_rate >= 0.0 && stats.valid_circuit_rate <= 1.0);
        assert!(stats.novel_circuit_rate <= stats.valid_circuit_rate);

        // treating this model's own outputs as the training set kills novelty
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let conv = state.profile.convention.clone();
        let mut seen = HashSet::new();
        for _ in 0..40 {
            let z: Vec<f64> = (0..state.config.d_latent)
                .map(|_| rng.sample(rand_distr::StandardNormal))
                .collect();
            let c = state.decoder.generate(
                &state.store,
                &state.profile,
                &z,
                state.profile.n_max,
                Sampler::Greedy,
                &mut rng,
            );
            seen.insert(c.canonical_hash(&conv));
        }
        let replay = unconditional_eval(&state, 40, &seen, 13).unwrap();
        assert_eq!(replay.novel_circuit_rate, 0.0);
    }

    #[test]
    fn conditional_and_retrieval_reports_are_deterministic() {
        let state = tiny_state(17);
        let records = synthesize_toy(&state.profile, 24, 6, 9).unwrap();
        let set = build_generation_set(&state, &records, Sampler::Greedy, 21).unwrap();
        assert_eq!(
            set.entries.len(),
            group_by_spec(&records).len(),
            "one entry per spec type"
        );
        let a = conditional_metrics(&state, &set, true, 5).unwrap();
        let b = conditional_metrics(&state, &set, true, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.r_at_1 <= a.r_at_2 && a.r_at_2 <= a.r_at_3);
        for v in [
            a.r_at_1.unwrap(),
            a.r_at_2.unwrap(),
            a.r_at_3.unwrap(),
            a.spec_accuracy.unwrap(),
            a.valid_circuit_rate.unwrap(),
        ] {
            assert!((0.0..=1.0).contains(&v));
        }
        assert!(a.fid.unwrap() >= 0.0);

        let r1 = retrieval_experiment(&state, &records, 3).unwrap();
        let r2 = retrieval_experiment(&state, &records, 3).unwrap();
        assert_eq!(r1, r2);
        assert!(r1.r_at_1 <= r1.r_at_3 && r1.r_at_3 <= r1.r_at_5);

        let json = serde_json::to_string(&a).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(a, back);
    }

    #[test]
    fn structure_match_ignores_parameters() {
        let a = Circuit::new(
            vec![
                Node::new(0, 0, &[]),
                Node::new(1, 1, &[0.4]),
                Node::new(25, 4, &[]),
            ],
            vec![(0, 1), (1, 2)],
        )
        .unwrap();
        let b = Circuit::new(
            vec![
                Node::new(0, 0, &[]),
                Node::new(1, 1, &[0.9]),
                Node::new(25, 4, &[]),
            ],
            vec![(0, 1), (1, 2)],
        )
        .unwrap();
        assert!(structure_matches(&a, &b));
        let c = Circuit::new(
            vec![
                Node::new(0, 0, &[]),
                Node::new(2, 1, &[0.9, 0.1]),
                Node::new(25, 4, &[]),
            ],
            vec![(0, 1), (1, 2)],
        )
        .unwrap();
        assert!(!structure_matches(&a, &c));
    }
}
