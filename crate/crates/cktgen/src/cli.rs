//! Command-line surface: dataset preparation, training, generation,
//! evaluation, retrieval, and DOT export. Every artifact is written next to
//! a config snapshot that reproduces it, and failures exit with a stable
//! category code: 2 usage, 3 data/schema, 4 numeric.

use std::collections::HashSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::circuit::Circuit;
use crate::dataset::{
    load_jsonl, preprocess_file, save_jsonl, split, BinnedSpecification, DataError,
    DatasetProfile,
};
use crate::decoder::Sampler;
use crate::evaluator::{
    build_generation_set, conditional_metrics, encode_specs, reconstruction_accuracy,
    retrieval_experiment, unconditional_eval, EvalError, EvalReport,
};
use crate::model::{load_checkpoint, CheckpointError, ModelConfig, ModelState};
use crate::trainer::{fit, Ablation, TrainConfig, TrainError, TrainMode};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Usage,
    Data,
    Numeric,
}

impl ErrorCategory {
    pub fn code(self) -> i32 {
        match self {
            ErrorCategory::Usage => EXIT_USAGE,
            ErrorCategory::Data => EXIT_DATA,
            ErrorCategory::Numeric => EXIT_NUMERIC,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorCategory::Usage => "usage",
            ErrorCategory::Data => "data",
            ErrorCategory::Numeric => "numeric",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub category: ErrorCategory,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError {
            category: ErrorCategory::Usage,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        CliError {
            category: ErrorCategory::Data,
            message: message.into(),
        }
    }

    fn numeric(message: impl Into<String>) -> Self {
        CliError {
            category: ErrorCategory::Numeric,
            message: message.into(),
        }
    }

    /// Single-line machine-readable form, printed to stderr on failure.
    pub fn as_json_line(&self) -> String {
        serde_json::json!({
            "error": self.category.name(),
            "message": self.message,
        })
        .to_string()
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match &e {
            TrainError::NonFinite { .. } | TrainError::Latent(_) => {
                CliError::numeric(e.to_string())
            }
            TrainError::Config(_) | TrainError::Mismatch(_) => CliError::usage(e.to_string()),
            _ => CliError::data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match &e {
            EvalError::Numeric(_) => CliError::numeric(e.to_string()),
            _ => CliError::data(e.to_string()),
        }
    }
}

/// Snapshot serialized next to every artifact; replaying the same snapshot
/// in deterministic mode reproduces the artifact bit-exactly.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub profile: String,
    pub seed: u64,
    pub deterministic: bool,
    pub args: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
}

/// Directories get `config.json`; file artifacts get a `<stem>.config.json`
/// sibling so several artifacts can share a directory.
pub fn artifact_config_path(artifact: &Path) -> PathBuf {
    if artifact.is_dir() {
        return artifact.join("config.json");
    }
    let stem = artifact
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "artifact".into());
    artifact.with_file_name(format!("{stem}.config.json"))
}

fn write_run_config(artifact: &Path, config: &RunConfig) -> Result<(), CliError> {
    let path = artifact_config_path(artifact);
    let text = serde_json::to_string_pretty(config)?;
    fs::write(&path, text + "\n")?;
    Ok(())
}

/// `CKTGEN_DETERMINISTIC=1` forces deterministic mode regardless of flags.
pub fn deterministic_forced() -> bool {
    std::env::var("CKTGEN_DETERMINISTIC").map(|v| v == "1").unwrap_or(false)
}

#[derive(Debug, Parser)]
#[command(
    name = "cktgen",
    version,
    about = "Specification-conditioned analog circuit generation"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate, rebin, and rewrite a raw JSON-lines circuit dataset.
    Preprocess {
        /// Input JSON-lines file.
        #[arg(long = "in")]
        input: PathBuf,
        /// Output JSON-lines file.
        #[arg(long)]
        out: PathBuf,
        /// Dataset profile: 101, 301, toy, or a profile JSON path.
        #[arg(long, default_value = "101")]
        profile: String,
    },
    /// Generate a labeled synthetic dataset of valid circuits.
    SynthData {
        /// Number of circuits.
        #[arg(long)]
        n: usize,
        /// Number of distinct specification types.
        #[arg(long)]
        types: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output JSON-lines file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "toy")]
        profile: String,
    },
    /// Train a model and write checkpoints plus a JSON-lines log.
    Train(TrainArgs),
    /// Decode circuits conditioned on a binned specification.
    Generate(GenerateArgs),
    /// Score a trained model and write a metrics report.
    Evaluate(EvaluateArgs),
    /// Cross-modal retrieval experiment over a labeled dataset.
    Retrieve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional report file; the report always prints to stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Render circuits from a JSON-lines file as Graphviz DOT.
    Export {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "101")]
        profile: String,
    },
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Labeled JSON-lines dataset.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "toy")]
    profile: String,
    /// Objective: cond (conditional/retrieval) or uncond.
    #[arg(long, default_value = "cond")]
    mode: String,
    /// Ablation: none, nce_cg, vae, or filter.
    #[arg(long, default_value = "none")]
    ablate: String,
    /// Output directory for checkpoints, log, and config snapshot.
    #[arg(long)]
    out: PathBuf,
    /// JSON overrides file; file values win over flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Architecture preset: desk or full.
    #[arg(long, default_value = "desk")]
    model: String,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Early-stop patience in epochs; 0 disables.
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction held out for validation; 0 trains on everything.
    #[arg(long, default_value_t = 0.1)]
    val_frac: f64,
    /// Resume from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Allow nondeterministic per-epoch shuffling and noise.
    #[arg(long)]
    nondeterministic: bool,
    /// Suppress the per-step log stream on stdout.
    #[arg(long)]
    quiet: bool,
}

/// Optional JSON config file for `train`; unknown keys are rejected.
#[derive(Debug, Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainOverrides {
    model: Option<ModelConfig>,
    lr: Option<f64>,
    weight_decay: Option<f64>,
    batch_size: Option<usize>,
    epochs: Option<usize>,
    seed: Option<u64>,
    patience: Option<usize>,
    deterministic: Option<bool>,
    lambda_kl: Option<f64>,
    tau: Option<f64>,
    lambda_t: Option<f64>,
    lambda_p: Option<f64>,
    lambda_b: Option<f64>,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Binned specification "gain,bw,pm" (category indices).
    #[arg(long)]
    spec: String,
    /// Number of circuits to decode.
    #[arg(long, default_value_t = 1)]
    n: usize,
    /// greedy or sample.
    #[arg(long, default_value = "greedy")]
    sampler: String,
    /// Sampling temperature (sample mode only).
    #[arg(long, default_value_t = 1.0)]
    temp: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file, .jsonl or .dot.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Checkpoint of the model being scored.
    #[arg(long)]
    gen_ckpt: PathBuf,
    /// Frozen scorer checkpoint; defaults to --gen-ckpt.
    #[arg(long)]
    eval_ckpt: Option<PathBuf>,
    /// Labeled test split.
    #[arg(long)]
    data: PathBuf,
    /// cond, recon, uncond, or retrieval.
    #[arg(long)]
    mode: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Unconditional sample count (uncond mode only).
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Report JSON output path.
    #[arg(long)]
    report: PathBuf,
}

/// Parses argv and runs one command; returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return if code == 0 { EXIT_OK } else { EXIT_USAGE };
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{}", e.as_json_line());
            e.category.code()
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Preprocess {
            input,
            out,
            profile,
        } => run_preprocess(&input, &out, &profile),
        Command::SynthData {
            n,
            types,
            seed,
            out,
            profile,
        } => run_synth_data(n, types, seed, &out, &profile),
        Command::Train(args) => run_train(&args),
        Command::Generate(args) => run_generate(&args),
        Command::Evaluate(args) => run_evaluate(&args),
        Command::Retrieve {
            ckpt,
            data,
            seed,
            report,
        } => run_retrieve(&ckpt, &data, seed, report.as_deref()),
        Command::Export {
            input,
            out,
            profile,
        } => run_export(&input, &out, &profile),
    }
}

fn run_preprocess(input: &Path, out: &Path, profile: &str) -> Result<(), CliError> {
    let profile = DatasetProfile::resolve(profile)?;
    let (kept, dropped_spec, dropped_structure) = preprocess_file(input, out, &profile)?;
    write_run_config(
        out,
        &RunConfig {
            command: "preprocess".into(),
            profile: profile.name.clone(),
            seed: 0,
            deterministic: true,
            args: serde_json::json!({
                "in": input, "out": out,
            }),
            train: None,
            model: None,
        },
    )?;
    println!(
        "{}",
        serde_json::json!({
            "kept": kept,
            "dropped_invalid_spec": dropped_spec,
            "dropped_invalid_structure": dropped_structure,
            "out": out,
        })
    );
    Ok(())
}

fn run_synth_data(
    n: usize,
    types: usize,
    seed: u64,
    out: &Path,
    profile: &str,
) -> Result<(), CliError> {
    let profile = DatasetProfile::resolve(profile)?;
    let records = crate::dataset::synthesize_toy(&profile, n, types, seed)?;
    save_jsonl(out, &records)?;
    write_run_config(
        out,
        &RunConfig {
            command: "synth-data".into(),
            profile: profile.name.clone(),
            seed,
            deterministic: true,
            args: serde_json::json!({ "n": n, "types": types, "out": out }),
            train: None,
            model: None,
        },
    )?;
    println!(
        "{}",
        serde_json::json!({ "circuits": records.len(), "out": out })
    );
    Ok(())
}

fn model_preset(name: &str) -> Result<ModelConfig, CliError> {
    match name {
        "desk" => Ok(ModelConfig::desk()),
        "full" => Ok(ModelConfig::full()),
        other => Err(CliError::usage(format!(
            "unknown model preset {other}; expected desk or full"
        ))),
    }
}

fn run_train(args: &TrainArgs) -> Result<(), CliError> {
    let profile = DatasetProfile::resolve(&args.profile)?;
    let mode: TrainMode = args.mode.parse().map_err(CliError::usage)?;
    let ablation: Ablation = args.ablate.parse().map_err(CliError::usage)?;
    if !(0.0..1.0).contains(&args.val_frac) {
        return Err(CliError::usage("val-frac must lie in [0, 1)".to_string()));
    }

    let mut cfg = TrainConfig::new(&profile, mode).with_ablation(ablation);
    cfg.seed = args.seed;
    cfg.deterministic = !args.nondeterministic;
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = args.patience {
        cfg.patience = v;
    }
    let mut model_config = model_preset(&args.model)?;

    if let Some(path) = &args.config {
        let text = fs::read_to_string(path)?;
        let over: TrainOverrides = serde_json::from_str(&text)
            .map_err(|e| CliError::usage(format!("bad config file {}: {e}", path.display())))?;
        if let Some(m) = over.model {
            model_config = m;
        }
        if let Some(v) = over.lr {
            cfg.lr = v;
        }
        if let Some(v) = over.weight_decay {
            cfg.weight_decay = v;
        }
        if let Some(v) = over.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = over.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = over.seed {
            cfg.seed = v;
        }
        if let Some(v) = over.patience {
            cfg.patience = v;
        }
        if let Some(v) = over.deterministic {
            cfg.deterministic = v;
        }
        if let Some(v) = over.lambda_kl {
            cfg.weights.lambda_kl = v;
        }
        if let Some(v) = over.tau {
            cfg.weights.tau = v;
        }
        if let Some(v) = over.lambda_t {
            cfg.weights.lambda_t = v;
        }
        if let Some(v) = over.lambda_p {
            cfg.weights.lambda_p = v;
        }
        if let Some(v) = over.lambda_b {
            cfg.weights.lambda_b = v;
        }
    }
    if deterministic_forced() {
        cfg.deterministic = true;
    }

    let report = load_jsonl(&args.data, &profile)?;
    if report.records.is_empty() {
        return Err(CliError::data(format!(
            "no usable records in {}",
            args.data.display()
        )));
    }
    let (train, val) = if args.val_frac == 0.0 {
        (report.records.clone(), Vec::new())
    } else {
        split(&report.records, 1.0 - args.val_frac, cfg.seed)
    };

    fs::create_dir_all(&args.out)?;
    write_run_config(
        &args.out,
        &RunConfig {
            command: "train".into(),
            profile: profile.name.clone(),
            seed: cfg.seed,
            deterministic: cfg.deterministic,
            args: serde_json::json!({
                "data": args.data,
                "mode": args.mode,
                "ablate": args.ablate,
                "val_frac": args.val_frac,
                "resume": args.resume,
            }),
            train: Some(cfg.clone()),
            model: Some(model_config.clone()),
        },
    )?;

    let log_path = args.out.join("train_log.jsonl");
    let mut log_file = std::io::BufWriter::new(fs::File::create(&log_path)?);
    let quiet = args.quiet;
    let mut sink = move |rec: &crate::trainer::TrainLogRecord| {
        let line = serde_json::to_string(rec).expect("log record serializes");
        let _ = writeln!(log_file, "{line}");
        if !quiet {
            println!("{line}");
        }
    };
    let (_, model_path) = fit(
        &train,
        &val,
        &model_config,
        &profile,
        &cfg,
        &args.out,
        args.resume.as_deref(),
        &mut sink,
    )?;
    println!(
        "{}",
        serde_json::json!({
            "model": model_path,
            "train_records": train.len(),
            "val_records": val.len(),
            "log": log_path,
        })
    );
    Ok(())
}

/// Parses a "gain,bw,pm" triple of category indices.
pub fn parse_spec_triple(s: &str) -> Result<BinnedSpecification, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected gain,bw,pm but got {s:?}"));
    }
    let mut vals = [0u16; 3];
    for (slot, part) in vals.iter_mut().zip(&parts) {
        *slot = part
            .parse::<u16>()
            .map_err(|_| format!("{part:?} is not a category index"))?;
    }
    Ok(BinnedSpecification::new(vals[0], vals[1], vals[2]))
}

fn load_model(path: &Path) -> Result<ModelState, CliError> {
    let (state, _, _) = load_checkpoint(path)?;
    Ok(state)
}

fn run_generate(args: &GenerateArgs) -> Result<(), CliError> {
    if args.n == 0 {
        return Err(CliError::usage("need n >= 1".to_string()));
    }
    let sampler = match args.sampler.as_str() {
        "greedy" => Sampler::Greedy,
        "sample" => {
            if !(args.temp > 0.0) {
                return Err(CliError::usage("temperature must be positive".to_string()));
            }
            Sampler::Categorical {
                temperature: args.temp,
            }
        }
        other => Err(CliError::usage(format!(
            "unknown sampler {other}; expected greedy or sample"
        )))?,
    };
    let state = load_model(&args.ckpt)?;
    let spec = parse_spec_triple(&args.spec).map_err(CliError::usage)?;
    if !state.profile.spec_in_range(&spec) {
        return Err(CliError::usage(format!(
            "specification {spec:?} outside profile {} category ranges",
            state.profile.name
        )));
    }

    let (mu, lv) = encode_specs(&state, &[spec])?;
    let d = state.config.d_latent;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut records: Vec<(Circuit, BinnedSpecification)> = Vec::with_capacity(args.n);
    for _ in 0..args.n {
        let z: Vec<f64> = (0..d)
            .map(|k| {
                let eps: f64 = rng.sample(rand_distr::StandardNormal);
                mu[[0, k]] + (0.5 * lv[[0, k]]).exp() * eps
            })
            .collect();
        let c = state.decoder.generate(
            &state.store,
            &state.profile,
            &z,
            state.profile.n_max,
            sampler,
            &mut rng,
        );
        records.push((c, spec));
    }

    let ext = args
        .out
        .extension()
        .map(|e| e.to_string_lossy().into_owned())
        .unwrap_or_default();
    match ext.as_str() {
        "jsonl" => save_jsonl(&args.out, &records)?,
        "dot" => {
            let names: Vec<String> = state
                .profile
                .node_types
                .iter()
                .map(|t| t.name.clone())
                .collect();
            let conv = &state.profile.convention;
            let text: String = records
                .iter()
                .enumerate()
                .map(|(k, (c, _))| c.to_dot(conv, &names, &format!("ckt_{k}")))
                .collect::<Vec<_>>()
                .join("\n");
            fs::write(&args.out, text)?;
        }
        other => {
            return Err(CliError::usage(format!(
                "output extension .{other} unsupported; use .jsonl or .dot"
            )))
        }
    }

    let valid = records
        .iter()
        .filter(|(c, _)| c.validate(&state.profile.convention).is_valid_circuit)
        .count();
    write_run_config(
        &args.out,
        &RunConfig {
            command: "generate".into(),
            profile: state.profile.name.clone(),
            seed: args.seed,
            deterministic: true,
            args: serde_json::json!({
                "ckpt": args.ckpt,
                "spec": args.spec,
                "n": args.n,
                "sampler": args.sampler,
                "temp": args.temp,
                "out": args.out,
            }),
            train: None,
            model: Some(state.config.clone()),
        },
    )?;
    println!(
        "{}",
        serde_json::json!({ "generated": records.len(), "valid": valid, "out": args.out })
    );
    Ok(())
}

fn run_evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let gen_state = load_model(&args.gen_ckpt)?;
    let eval_state = match &args.eval_ckpt {
        Some(p) => {
            let s = load_model(p)?;
            if s.profile != gen_state.profile {
                return Err(CliError::usage(
                    "generator and evaluator checkpoints use different profiles".to_string(),
                ));
            }
            s
        }
        None => gen_state.clone(),
    };
    let report_data = load_jsonl(&args.data, &gen_state.profile)?;
    let records = report_data.records;

    let report = match args.mode.as_str() {
        "cond" | "conditional" => {
            let set = build_generation_set(&gen_state, &records, Sampler::Greedy, args.seed)?;
            conditional_metrics(&eval_state, &set, true, args.seed)?
        }
        "recon" | "reconstruction" => {
            let acc = reconstruction_accuracy(&gen_state, &records, 0, args.seed)?;
            EvalReport {
                mode: "reconstruction".into(),
                entries: records.len(),
                reconstruction_accuracy: Some(acc),
                ..EvalReport::default()
            }
        }
        "uncond" | "unconditional" => {
            if args.n == 0 {
                return Err(CliError::usage("need n >= 1".to_string()));
            }
            let conv = &gen_state.profile.convention;
            let hashes: HashSet<_> = records
                .iter()
                .map(|(c, _)| c.canonical_hash(conv))
                .collect();
            let stats = unconditional_eval(&gen_state, args.n, &hashes, args.seed)?;
            EvalReport {
                mode: "unconditional".into(),
                entries: args.n,
                valid_dag_rate: Some(stats.valid_dag_rate),
                valid_circuit_rate: Some(stats.valid_circuit_rate),
                novel_circuit_rate: Some(stats.novel_circuit_rate),
                ..EvalReport::default()
            }
        }
        "retrieval" => retrieval_experiment(&gen_state, &records, args.seed)?,
        other => {
            return Err(CliError::usage(format!(
                "unknown mode {other}; expected cond, recon, uncond, or retrieval"
            )))
        }
    };

    let text = serde_json::to_string_pretty(&report)?;
    fs::write(&args.report, text + "\n")?;
    write_run_config(
        &args.report,
        &RunConfig {
            command: "evaluate".into(),
            profile: gen_state.profile.name.clone(),
            seed: args.seed,
            deterministic: true,
            args: serde_json::json!({
                "gen_ckpt": args.gen_ckpt,
                "eval_ckpt": args.eval_ckpt,
                "data": args.data,
                "mode": args.mode,
                "n": args.n,
                "report": args.report,
            }),
            train: None,
            model: Some(gen_state.config.clone()),
        },
    )?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn run_retrieve(
    ckpt: &Path,
    data: &Path,
    seed: u64,
    report_path: Option<&Path>,
) -> Result<(), CliError> {
    let state = load_model(ckpt)?;
    let records = load_jsonl(data, &state.profile)?.records;
    let report = retrieval_experiment(&state, &records, seed)?;
    if let Some(path) = report_path {
        let text = serde_json::to_string_pretty(&report)?;
        fs::write(path, text + "\n")?;
        write_run_config(
            path,
            &RunConfig {
                command: "retrieve".into(),
                profile: state.profile.name.clone(),
                seed,
                deterministic: true,
                args: serde_json::json!({ "ckpt": ckpt, "data": data }),
                train: None,
                model: Some(state.config.clone()),
            },
        )?;
    }
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn run_export(input: &Path, out: &Path, profile: &str) -> Result<(), CliError> {
    let profile = DatasetProfile::resolve(profile)?;
    let records = load_jsonl(input, &profile)?.records;
    if records.is_empty() {
        return Err(CliError::data(format!(
            "no usable records in {}",
            input.display()
        )));
    }
    let names: Vec<String> = profile.node_types.iter().map(|t| t.name.clone()).collect();
    let text: String = records
        .iter()
        .enumerate()
        .map(|(k, (c, _))| c.to_dot(&profile.convention, &names, &format!("ckt_{k}")))
        .collect::<Vec<_>>()
        .join("\n");
    fs::write(out, text)?;
    println!(
        "{}",
        serde_json::json!({ "exported": records.len(), "out": out })
    );
    Ok(())
}
