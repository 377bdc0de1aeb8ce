use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bixt_core::harness::listops::{self, GeneratorSpec};
use bixt_core::harness::train::{self, TrainConfig, CHECKPOINT_FILE, METRICS_FILE};
use bixt_core::instrumentation::cost::{self, FlopConvention, ShapeSpec, SCALING_SHAPES};
use bixt_core::instrumentation::{dof, export, gradient, symmetry};
use bixt_core::model::{checkpoint, init_model, ForwardOptions, ModelConfig};
use bixt_core::nn::ForwardCtx;
use bixt_core::tensor::{Tape, Tensor};
use bixt_core::tokenizers::{TokenInput, TokenizerConfig};
use clap::{Parser, Subcommand};
use serde::Deserialize;
use serde_json::{json, Value};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] bixt_core::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numeric() => 3,
            CliError::Numeric(_) => 3,
            _ => 2,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "bixt", version, about = "Bi-directional cross-attention transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a sequence classifier from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy of a checkpoint on a tab-separated dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
    },
    /// Parameter, FLOP and activation counts.
    Flops {
        #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        /// Comma-separated shapes such as 224/p16 or 2048.
        #[arg(long, value_delimiter = ',')]
        shapes: Vec<String>,
        /// Report ratios relative to this shape.
        #[arg(long)]
        baseline: Option<String>,
        #[arg(long)]
        convention: Option<FlopConvention>,
    },
    /// Degrees of freedom of an M x N attention matrix.
    Dof {
        #[arg(long)]
        latents: usize,
        #[arg(long)]
        tokens: usize,
    },
    /// Finite-difference check of every parameter gradient.
    Gradcheck {
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// Only `toy` is available.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        batch: usize,
        #[arg(long, default_value_t = gradient::TOL)]
        tol: f64,
    },
    /// Write a synthetic ListOps split in the LRA tab-separated format.
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 128)]
        max_len: usize,
        #[arg(long, default_value_t = 3)]
        max_depth: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a freshly initialised checkpoint.
    Init {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump latent-token attention maps of one input as CSV and PGM files.
    InspectAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON with `ids`, `source`, or `shape` plus `data`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "per-head")]
        pgm: PgmArg,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum PgmArg {
    PerHead,
    PerLatent,
    None,
}

impl From<PgmArg> for export::PgmMode {
    fn from(a: PgmArg) -> Self {
        match a {
            PgmArg::PerHead => export::PgmMode::PerHead,
            PgmArg::PerLatent => export::PgmMode::PerLatent,
            PgmArg::None => export::PgmMode::None,
        }
    }
}

/// Worker cap from `BIXT_THREADS`, else the machine's parallelism.
fn thread_cap() -> CliResult<usize> {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("BIXT_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Usage(format!("BIXT_THREADS must be a positive integer, got '{v}'"))),
        },
        Err(_) => Ok(available),
    }
}

fn read_file(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))
}

fn parse_json<T: for<'de> Deserialize<'de>>(path: &Path, text: &str) -> CliResult<T> {
    serde_json::from_str(text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn read_run_config(path: &Path) -> CliResult<TrainConfig> {
    let config: TrainConfig = parse_json(path, &read_file(path)?)?;
    config
        .validate()
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    Ok(config)
}

/// Accepts either a bare model config or a run config with a `model` key.
fn read_model_config(path: &Path) -> CliResult<ModelConfig> {
    let text = read_file(path)?;
    let value: Value = parse_json(path, &text)?;
    let config: ModelConfig = if value.get("model").is_some() {
        parse_json::<TrainConfig>(path, &text)?.model
    } else {
        parse_json(path, &text)?
    };
    config
        .validate_dims()
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    Ok(config)
}

fn print_json(value: &impl serde::Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(bixt_core::Error::from)?;
    println!("{text}");
    Ok(())
}

fn write_file(path: &Path, contents: &[u8]) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
}

fn cmd_train(config: &Path, seed: Option<u64>, out: &Path) -> CliResult<()> {
    let mut config = read_run_config(config)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    fs::create_dir_all(out).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", out.display())))?;
    // A fresh run must not append to an older metrics file.
    let metrics = out.join(METRICS_FILE);
    if metrics.exists() {
        fs::remove_file(&metrics).map_err(|e| CliError::Usage(format!("cannot replace {}: {e}", metrics.display())))?;
    }
    let frozen = serde_json::to_string_pretty(&config).map_err(bixt_core::Error::from)?;
    write_file(&out.join("config.json"), format!("{frozen}\n").as_bytes())?;
    let cap = thread_cap()?;
    config.eval_threads = match config.eval_threads {
        0 => cap,
        n => n.min(cap),
    };

    let splits = config.data.load(config.seed)?;
    log::info!(
        "train {} / val {} / test {} samples",
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );
    let outcome = train::train(&config, &splits, Some(out))?;
    let best = &outcome.history[outcome.best_epoch - 1];
    let test = if splits.test.is_empty() {
        None
    } else {
        Some(train::evaluate(&outcome.best, &splits.test, config.batch_size, config.eval_threads)?)
    };
    print_json(&json!({
        "epochs": outcome.history.len(),
        "best_epoch": outcome.best_epoch,
        "best_val_acc": best.val_acc,
        "final_train_acc": outcome.history.last().map(|m| m.train_acc),
        "test": test,
        "checkpoint": out.join(CHECKPOINT_FILE),
        "metrics": metrics,
    }))
}

fn cmd_eval(checkpoint: &Path, data: &Path, batch_size: usize) -> CliResult<()> {
    let samples = listops::load_lra_tsv(data)?;
    let model = train::load_for_eval(checkpoint, &samples)?;
    let report = train::evaluate(&model, &samples, batch_size, thread_cap()?)?;
    print_json(&report)
}

fn cmd_flops(
    config: Option<&Path>,
    preset: Option<&str>,
    shapes: &[String],
    baseline: Option<&str>,
    convention: Option<FlopConvention>,
) -> CliResult<()> {
    let (config, preset_convention) = match (config, preset) {
        (Some(path), _) => (read_model_config(path)?, FlopConvention::default()),
        (None, Some(name)) => cost::preset(name)?,
        (None, None) => return Err(CliError::Usage("either --config or --preset is required".into())),
    };
    let convention = convention.unwrap_or(preset_convention);
    let parse = |s: &str| s.parse::<ShapeSpec>().map_err(CliError::from);
    let mut shapes: Vec<ShapeSpec> = shapes.iter().map(|s| parse(s)).collect::<CliResult<_>>()?;
    let baseline = baseline.map(parse).transpose()?;
    if shapes.is_empty() && baseline.is_some() {
        shapes = SCALING_SHAPES.iter().map(|s| parse(s)).collect::<CliResult<_>>()?;
    }

    if let Some(baseline) = baseline {
        let rows = cost::scaling_table(&config, &shapes, baseline, convention)?;
        eprintln!("{:<10} {:>8} {:>12} {:>14} {:>8} {:>8}", "shape", "tokens", "GFLOPs", "activations", "flops x", "acts x");
        for r in &rows {
            eprintln!(
                "{:<10} {:>8} {:>12.3} {:>14} {:>8.3} {:>8.3}",
                r.shape,
                r.seq_len,
                r.flops as f64 / 1e9,
                r.activations,
                r.flop_ratio,
                r.activation_ratio
            );
        }
        return print_json(&json!({ "baseline": baseline.to_string(), "convention": convention, "rows": rows }));
    }

    let targets: Vec<Option<ShapeSpec>> = if shapes.is_empty() {
        vec![None]
    } else {
        shapes.into_iter().map(Some).collect()
    };
    let mut reports = Vec::new();
    for shape in targets {
        let (c, n) = match shape {
            Some(s) => s.apply(&config)?,
            None => (config.clone(), None),
        };
        let report = cost::flop_count(&c, n, convention)?;
        eprintln!(
            "{:<10} tokens {:>7}  params {:>11}  GFLOPs {:>9.4}  activations {:>12}",
            shape.map_or_else(|| "config".to_string(), |s| s.to_string()),
            report.seq_len,
            report.params,
            report.flops as f64 / 1e9,
            report.activations
        );
        for e in &report.breakdown {
            eprintln!("  {:<14} {:>16} {:>14}", e.name, e.flops, e.activations);
        }
        reports.push(json!({ "shape": shape.map(|s| s.to_string()), "report": report }));
    }
    print_json(&json!({ "convention": convention, "reports": reports }))
}

fn cmd_dof(latents: usize, tokens: usize) -> CliResult<()> {
    let r = dof::dof_calc(latents, tokens)?;
    eprintln!("total / shared / unique: {}/{}/{}", r.total, r.shared, r.unique);
    print_json(&json!({
        "total": r.total,
        "shared": r.shared,
        "unique": r.unique,
        "summary": format!("{}/{}/{}", r.total, r.shared, r.unique),
    }))
}

fn cmd_gradcheck(config: Option<&Path>, preset: Option<&str>, seed: u64, batch: usize, tol: f64) -> CliResult<()> {
    let config = match (config, preset) {
        (Some(path), _) => read_model_config(path)?,
        (None, None | Some("toy")) => ModelConfig::toy(),
        (None, Some(other)) => return Err(CliError::Usage(format!("unknown gradcheck preset '{other}'"))),
    };
    let report = gradient::model_grad_check(&config, seed, batch.max(1), gradient::STEP, tol)?;
    for p in report.params.iter() {
        eprintln!(
            "{:<40} rel {:.2e} abs {:.2e} {}",
            p.name,
            p.max_rel_err,
            p.max_abs_err,
            if p.passed { "ok" } else { "FAIL" }
        );
    }
    let worst = report.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
    let failed: Vec<&str> = report.failures().map(|p| p.name.as_str()).collect();
    print_json(&json!({
        "passed": failed.is_empty(),
        "tol": tol,
        "params": report.params.len(),
        "max_rel_err": worst,
        "failed": failed,
    }))?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!("{} parameter gradients exceed {tol:e}", failed.len())))
    }
}

fn cmd_gen_data(n: usize, seed: u64, max_len: usize, max_depth: usize, out: &Path) -> CliResult<()> {
    let spec = GeneratorSpec::new(max_len, max_depth);
    let rows = listops::listops_generate_sources(n, &spec, seed)?;
    listops::write_lra_tsv(out, &rows)?;
    let tokens: usize = rows.iter().map(|(s, _)| listops::split_tokens(s).len()).sum();
    print_json(&json!({
        "path": out,
        "n": rows.len(),
        "mean_tokens": if rows.is_empty() { 0.0 } else { tokens as f64 / rows.len() as f64 },
    }))
}

fn cmd_init(config: &Path, seed: u64, out: &Path) -> CliResult<()> {
    let config = read_model_config(config)?;
    config
        .validate()
        .map_err(|e| CliError::Usage(format!("{}: {e}", out.display())))?;
    let model = init_model::<f32>(&config, seed)?;
    checkpoint::save(&model, json!({ "source": "init" }), out)?;
    print_json(&json!({ "path": out, "params": model.num_params() }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InputFile {
    #[serde(default)]
    ids: Option<Vec<usize>>,
    #[serde(default)]
    source: Option<String>,
    #[serde(default)]
    shape: Option<Vec<usize>>,
    #[serde(default)]
    data: Option<Vec<f64>>,
}

fn read_input(path: &Path, tokenizer: &TokenizerConfig) -> CliResult<TokenInput<f32>> {
    let file: InputFile = parse_json(path, &read_file(path)?)?;
    let bad = |msg: &str| CliError::Usage(format!("{}: {msg}", path.display()));
    match tokenizer {
        TokenizerConfig::Ids { .. } => {
            let ids = match (file.ids, file.source) {
                (Some(ids), None) => ids,
                (None, Some(source)) => listops::tokenize(&source)?,
                _ => return Err(bad("id models need exactly one of `ids` or `source`")),
            };
            Ok(TokenInput::Ids(vec![ids]))
        }
        TokenizerConfig::Patch(_) | TokenizerConfig::Points { .. } => {
            let (Some(shape), Some(data)) = (file.shape, file.data) else {
                return Err(bad("image and point models need `shape` and `data`"));
            };
            let mut batched = vec![1];
            batched.extend(shape);
            let tensor = Tensor::from_f64(batched, &data).map_err(bixt_core::Error::from)?;
            Ok(match tokenizer {
                TokenizerConfig::Patch(_) => TokenInput::Images(tensor),
                _ => TokenInput::Points(tensor),
            })
        }
    }
}

fn cmd_inspect_attention(checkpoint: &Path, input: &Path, out: &Path, pgm: PgmArg) -> CliResult<()> {
    let (model, _) = checkpoint::load::<f32>(checkpoint)?;
    let input = read_input(input, &model.config.tokenizer)?;
    let tape = Tape::new();
    let p = model.params.bind_frozen(&tape);
    let opts = ForwardOptions {
        export_attention: true,
        token_hook: None,
    };
    let output = model.forward(&p, &ForwardCtx::eval(), &input, &opts)?;
    if output.attention.is_empty() {
        return Err(CliError::Usage("model has no latent-token attention to export".into()));
    }
    let summary = export::export_attention(&output.attention, 0, output.grid, pgm.into(), out)?;
    let symmetry = symmetry::symmetry_score(&output.attention).ok();
    eprintln!(
        "wrote {} csv and {} pgm files to {}",
        summary.csv_files.len(),
        summary.pgm_files.len(),
        out.display()
    );
    print_json(&json!({
        "grid": output.grid,
        "csv_files": summary.csv_files.len(),
        "pgm_files": summary.pgm_files.len(),
        "symmetry": symmetry,
    }))
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { config, seed, out } => cmd_train(&config, seed, &out),
        Command::Eval {
            checkpoint,
            data,
            batch_size,
        } => cmd_eval(&checkpoint, &data, batch_size),
        Command::Flops {
            config,
            preset,
            shapes,
            baseline,
            convention,
        } => cmd_flops(config.as_deref(), preset.as_deref(), &shapes, baseline.as_deref(), convention),
        Command::Dof { latents, tokens } => cmd_dof(latents, tokens),
        Command::Gradcheck {
            config,
            preset,
            seed,
            batch,
            tol,
        } => cmd_gradcheck(config.as_deref(), preset.as_deref(), seed, batch, tol),
        Command::GenData {
            n,
            seed,
            max_len,
            max_depth,
            out,
        } => cmd_gen_data(n, seed, max_len, max_depth, &out),
        Command::Init { config, seed, out } => cmd_init(&config, seed, &out),
        Command::InspectAttention {
            checkpoint,
            input,
            out,
            pgm,
        } => cmd_inspect_attention(&checkpoint, &input, &out, pgm),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
