//! Command-line front end: corpus preparation, training, evaluation,
//! architectural probes, loss-curve stage analysis, and experiment matrices.
//!
//! Exit codes: 0 on success, 1 on usage errors (bad flags, malformed
//! values), 2 on runtime failures (missing files, diverging runs). Every
//! artifact is byte-deterministic given the flags and `--seed`, except for
//! wall-clock columns.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use mlmlab::data::{binarize, generate_synthetic, pairing_from_seed, CorpusShard, SyntheticSpec};
use mlmlab::error::{Error, Result};
use mlmlab::model::{
    load_checkpoint, ModelConfig, ModelParams, PositionEncodingKind, Precision, Preset,
};
use mlmlab::probe::{
    causal_flow_check, equivariance_report, probe_default_config, CausalFlowReport, ProbeResult,
};
use mlmlab::trainer::{
    detect_stages, resume, run_experiment_matrix, train, LossLog, MatrixCell, StageParams,
    TrainConfig, DEFAULT_SMOOTH_WINDOW,
};

#[derive(Parser)]
#[command(
    name = "mlmlab",
    version,
    about = "Train, evaluate, and probe small masked/causal language models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Binarize a newline-delimited byte-level text corpus into a shard
    Binarize(BinarizeArgs),
    /// Generate a synthetic key-value corpus shard
    Synth(SynthArgs),
    /// Train per a run-config file, writing checkpoints and loss CSVs
    Train(TrainArgs),
    /// Compute validation loss and perplexity for a checkpoint on a shard
    Eval(EvalArgs),
    /// Run an architectural probe and emit its report as CSV
    Probe(ProbeArgs),
    /// Locate the four loss-curve stages in a training log CSV
    Stages(StagesArgs),
    /// Train a grid of (preset, position-encoding, seed) cells and tabulate
    Matrix(MatrixArgs),
}

#[derive(Args)]
struct BinarizeArgs {
    /// Input text file; documents separated by newlines
    #[arg(long)]
    input: PathBuf,
    /// Output shard path
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Output shard path
    #[arg(long)]
    output: PathBuf,
    /// Number of distinct keys
    #[arg(long, default_value_t = 32)]
    n_keys: u32,
    /// Tokens per sequence (even: alternating key/value positions)
    #[arg(long, default_value_t = 32)]
    seq_len: usize,
    /// Number of sequences to generate
    #[arg(long)]
    n_sequences: usize,
    /// Seed for key draws
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Seed for the key-to-value pairing permutation
    #[arg(long, default_value_t = 11)]
    pairing_seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Run-config file (flat key=value text)
    #[arg(long, required_unless_present = "resume", conflicts_with = "resume")]
    config: Option<PathBuf>,
    /// Continue a checkpointed run to its configured end
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Directory for checkpoints and loss CSVs
    #[arg(long)]
    out_dir: PathBuf,
    /// Override the config file's seed
    #[arg(long, conflicts_with = "resume")]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate
    #[arg(long)]
    checkpoint: PathBuf,
    /// Shard to evaluate on
    #[arg(long)]
    shard: PathBuf,
}

#[derive(Args)]
struct ProbeArgs {
    /// Which probe to run
    #[arg(long, default_value = "equivariance", value_parser = parse_probe_kind)]
    probe: ProbeKind,
    /// Probe a trained checkpoint instead of fresh seeded weights
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Mask-schedule preset for fresh-weight probes
    #[arg(long, default_value = "bert", value_parser = parse_preset)]
    preset: Preset,
    /// Position encoding for fresh-weight probes
    #[arg(long, default_value = "absent", value_parser = parse_pe)]
    pe: PositionEncodingKind,
    /// Layers for fresh-weight probes
    #[arg(long, default_value_t = 2)]
    n_layers: usize,
    /// Model width for fresh-weight probes
    #[arg(long, default_value_t = 128)]
    d_model: usize,
    /// Attention heads for fresh-weight probes
    #[arg(long, default_value_t = 4)]
    n_heads: usize,
    /// Feed-forward width for fresh-weight probes
    #[arg(long, default_value_t = 256)]
    d_ffn: usize,
    /// Vocabulary size for fresh-weight probes
    #[arg(long, default_value_t = 259)]
    vocab_size: usize,
    /// Sequence length to probe at
    #[arg(long, default_value_t = 16)]
    seq_len: usize,
    /// Random permutation trials (equivariance probe)
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    trials: u64,
    /// Seed for weight init and trial draws
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Divergence threshold separating the verdicts
    #[arg(long, default_value_t = 1e-4)]
    threshold: f64,
    /// Write the report CSV here instead of stdout
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy)]
enum ProbeKind {
    Equivariance,
    CausalFlow,
}

fn parse_probe_kind(s: &str) -> Result<ProbeKind> {
    match s {
        "equivariance" => Ok(ProbeKind::Equivariance),
        "causal-flow" => Ok(ProbeKind::CausalFlow),
        other => Err(Error::Config(format!(
            "unknown probe {other:?} (equivariance|causal-flow)"
        ))),
    }
}

fn parse_preset(s: &str) -> Result<Preset> {
    Preset::from_str(s)
}

fn parse_pe(s: &str) -> Result<PositionEncodingKind> {
    PositionEncodingKind::from_str(s)
}

#[derive(Args)]
struct StagesArgs {
    /// Training-log CSV (step,train_loss,lr,wall_clock_s)
    #[arg(long)]
    input: PathBuf,
    /// Centered moving-average width, in logged steps
    #[arg(long, default_value_t = DEFAULT_SMOOTH_WINDOW)]
    smooth_window: usize,
    /// Plateau slope threshold in loss per step (default: scale-free)
    #[arg(long)]
    theta_plateau: Option<f64>,
    /// Dive slope threshold in loss per step (default: scale-free)
    #[arg(long)]
    theta_dive: Option<f64>,
    /// Write the report CSV here instead of stdout
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct MatrixArgs {
    /// Base run-config file shared by every cell
    #[arg(long)]
    config: PathBuf,
    /// Cell as `preset,pe,seed[,objective]`; repeatable
    #[arg(long = "cell", required = true, value_parser = parse_cell)]
    cells: Vec<MatrixCell>,
    /// Directory for per-cell artifacts and the table CSV
    #[arg(long)]
    out_dir: PathBuf,
}

fn parse_cell(s: &str) -> Result<MatrixCell> {
    MatrixCell::from_str(s)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Binarize(args) => cmd_binarize(&args),
        Command::Synth(args) => cmd_synth(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Probe(args) => cmd_probe(&args),
        Command::Stages(args) => cmd_stages(&args),
        Command::Matrix(args) => cmd_matrix(&args),
    }
}

fn emit(output: Option<&Path>, text: &str) -> Result<()> {
    match output {
        Some(path) => std::fs::write(path, text).map_err(|e| Error::io(path, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn print_shard_summary(shard: &CorpusShard) {
    println!(
        "tokens={} documents={} vocab_size={}",
        shard.tokens().len(),
        shard.n_documents(),
        shard.vocab_size()
    );
}

fn cmd_binarize(args: &BinarizeArgs) -> Result<()> {
    let text = std::fs::read(&args.input).map_err(|e| Error::io(&args.input, e))?;
    let shard = binarize(&text)?;
    shard.write_to_path(&args.output)?;
    print_shard_summary(&shard);
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let mut spec = SyntheticSpec::with_seeded_pairing(args.n_sequences, args.seed, args.pairing_seed);
    spec.n_keys = args.n_keys;
    spec.pairing = pairing_from_seed(args.n_keys, args.pairing_seed);
    spec.seq_len = args.seq_len;
    let shard = generate_synthetic(&spec)?;
    shard.write_to_path(&args.output)?;
    print_shard_summary(&shard);
    Ok(())
}

fn read_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    TrainConfig::from_text(&text)
}

fn print_run_summary(log: &LossLog) {
    match log.entries().last() {
        Some(e) => println!("steps={} final_train_loss={}", e.step + 1, e.train_loss),
        None => println!("steps=0"),
    }
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let log = if let Some(ckpt) = &args.resume {
        match checkpoint_precision(ckpt)? {
            Precision::F32 => resume::<f32>(ckpt, Some(&args.out_dir))?.1.log,
            Precision::F64 => resume::<f64>(ckpt, Some(&args.out_dir))?.1.log,
        }
    } else {
        let mut cfg = read_config(args.config.as_ref().expect("clap requires --config"))?;
        if let Some(seed) = args.seed {
            cfg.seed = seed;
        }
        match cfg.model.precision {
            Precision::F32 => train::<f32>(&cfg, Some(&args.out_dir))?.log,
            Precision::F64 => train::<f64>(&cfg, Some(&args.out_dir))?.log,
        }
    };
    print_run_summary(&log);
    Ok(())
}

/// The precision recorded in a checkpoint's embedded run config.
fn checkpoint_precision(path: &Path) -> Result<Precision> {
    let data = load_checkpoint::<f32>(path)?;
    Ok(TrainConfig::from_text(&data.config_text)?.model.precision)
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let shard = CorpusShard::read_from_path(&args.shard)?;
    let (loss, ppl) = match checkpoint_precision(&args.checkpoint)? {
        Precision::F32 => eval_as::<f32>(&args.checkpoint, &shard)?,
        Precision::F64 => eval_as::<f64>(&args.checkpoint, &shard)?,
    };
    println!("valid_loss={loss} valid_ppl={ppl}");
    Ok(())
}

fn eval_as<T: mlmlab::Scalar>(checkpoint: &Path, shard: &CorpusShard) -> Result<(f64, f64)> {
    let data = load_checkpoint::<T>(checkpoint)?;
    let cfg = TrainConfig::from_text(&data.config_text)?;
    let params = mlmlab::model::rebuild_params(&cfg.model, &data.params)?;
    mlmlab::trainer::evaluate_ppl(&params, &cfg, shard)
}

/// Model under probe: either a checkpoint's weights or fresh seeded weights
/// at the flag-specified shape. Probes always compute in 64-bit; the claims
/// under test are architectural, so checkpoint weights are upconverted.
fn probe_subject(args: &ProbeArgs) -> Result<(ModelParams<f64>, ModelConfig, String)> {
    if let Some(ckpt) = &args.checkpoint {
        let data = load_checkpoint::<f64>(ckpt)?;
        let cfg = TrainConfig::from_text(&data.config_text)?;
        let params = mlmlab::model::rebuild_params(&cfg.model, &data.params)?;
        let id = format!("{}/{}@step{}", cfg.preset, cfg.model.pe_kind, data.step);
        let mut model = cfg.model;
        model.max_seq_len = model.max_seq_len.min(args.seq_len.max(2));
        Ok((params, model, id))
    } else {
        let mut cfg = probe_default_config();
        cfg.n_layers = args.n_layers;
        cfg.d_model = args.d_model;
        cfg.n_heads = args.n_heads;
        cfg.d_ffn = args.d_ffn;
        cfg.vocab_size = args.vocab_size;
        cfg.max_seq_len = args.seq_len;
        cfg.pe_kind = args.pe;
        cfg.precision = Precision::F64;
        let cfg = mlmlab::model::preset(args.preset, &cfg)?;
        let params = ModelParams::<f64>::init(&cfg, args.seed)?;
        let id = format!("{}/{}", args.preset, args.pe);
        Ok((params, cfg, id))
    }
}

const EQUIVARIANCE_CSV_HEADER: &str =
    "model,probe,trials,max_divergence,mean_divergence,threshold,verdict";
const CAUSAL_FLOW_CSV_HEADER: &str =
    "model,probe,passed,vacuous,excluded_pairs,reachable_pairs";

fn equivariance_csv(r: &ProbeResult) -> String {
    format!(
        "{EQUIVARIANCE_CSV_HEADER}\n{},{},{},{},{},{},{}\n",
        r.model_id,
        r.probe,
        r.n_trials,
        r.max_divergence,
        r.mean_divergence,
        r.threshold,
        r.verdict()
    )
}

fn causal_flow_csv(model_id: &str, r: &CausalFlowReport) -> String {
    format!(
        "{CAUSAL_FLOW_CSV_HEADER}\n{model_id},causal_flow,{},{},{},{}\n",
        r.passed, r.vacuous, r.n_excluded_pairs, r.n_reachable_pairs
    )
}

fn cmd_probe(args: &ProbeArgs) -> Result<()> {
    let (params, config, model_id) = probe_subject(args)?;
    let csv = match args.probe {
        ProbeKind::Equivariance => {
            let report = equivariance_report(
                &params,
                &config,
                args.trials as usize,
                args.seed,
                args.threshold,
                &model_id,
            )?;
            equivariance_csv(&report)
        }
        ProbeKind::CausalFlow => {
            let report = causal_flow_check(&params, &config)?;
            if let Some(v) = &report.first_violation {
                eprintln!(
                    "causal-flow violation: perturbing position {} {} position {} (divergence {})",
                    v.perturbed,
                    if v.leaked { "leaked into excluded" } else { "did not reach reachable" },
                    v.observed,
                    v.divergence
                );
            }
            causal_flow_csv(&model_id, &report)
        }
    };
    emit(args.output.as_deref(), &csv)
}

fn cmd_stages(args: &StagesArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.input).map_err(|e| Error::io(&args.input, e))?;
    let entries = LossLog::parse_train_csv(&text)?;
    let params = StageParams {
        smooth_window: args.smooth_window,
        theta_plateau: args.theta_plateau,
        theta_dive: args.theta_dive,
    };
    let report = detect_stages(&entries, &params)?;
    emit(args.output.as_deref(), &report.csv())
}

fn cmd_matrix(args: &MatrixArgs) -> Result<()> {
    let base = read_config(&args.config)?;
    let table = match base.model.precision {
        Precision::F32 => run_experiment_matrix::<f32>(&base, &args.cells, Some(&args.out_dir))?,
        Precision::F64 => run_experiment_matrix::<f64>(&base, &args.cells, Some(&args.out_dir))?,
    };
    let mut failures = String::new();
    for row in &table.rows {
        if let mlmlab::trainer::CellStatus::Failed(reason) = &row.status {
            let _ = writeln!(failures, "cell {} failed: {reason}", row.cell);
        }
    }
    if !failures.is_empty() {
        eprint!("{failures}");
    }
    print!("{}", table.csv());
    Ok(())
}
