use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use molex_core::embedding::{load_table, save_table, EmbeddingTable, OovPolicy};
use molex_core::gselfies::{read_dataset, write_dataset, Molecule};
use molex_core::pipeline::{sweep, train, Pipeline, PipelineBundle, PipelineConfig, SweepAxis};
use molex_core::synth::{generate, SynthSpec};
use molex_core::{Exec, MolexError, Result};

#[derive(Parser, Debug)]
#[command(
    name = "molex",
    version,
    about = "Explainable molecular property prediction"
)]
struct Cli {
    /// Run every map stage on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a pipeline and write the bundle plus stage metrics.
    Train(TrainArgs),
    /// Write `id,prob,class` for every molecule.
    Predict(ApplyArgs),
    /// Write one contribution report per molecule as JSON Lines.
    Explain(ApplyArgs),
    /// Accuracy, explanation AUC, confusion matrix and timing as JSON.
    Evaluate(ApplyArgs),
    /// Train one pipeline per value of an axis and write a CSV.
    Sweep(SweepArgs),
    /// Generate a planted-signal dataset and embedding table.
    Synth(SynthArgs),
    /// Validate an embedding file and report its shape and fingerprint.
    ExportCheck(ExportCheckArgs),
}

#[derive(Args, Debug, Default)]
struct Overrides {
    /// JSON config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long = "K", alias = "components")]
    components: Option<usize>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    early_stop: bool,
    #[arg(long, value_parser = parse_oov)]
    oov: Option<OovPolicy>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Bundle output path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Stage metrics output; defaults to `<out>.metrics.json`.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ApplyArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    /// Use the explainable model alone.
    #[arg(long)]
    no_calibration: bool,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// One of n, K, rho, beta, iterations.
    #[arg(long)]
    axis: String,
    /// Comma-separated values.
    #[arg(long, allow_hyphen_values = true)]
    values: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 12)]
    vocab: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 200)]
    molecules: usize,
    #[arg(long, default_value_t = 0)]
    active_token: usize,
    #[arg(long, default_value_t = 3)]
    min_len: usize,
    #[arg(long, default_value_t = 8)]
    max_len: usize,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON Lines dataset output.
    #[arg(long)]
    dataset_out: PathBuf,
    /// Embedding table output; `.csv` selects CSV, anything else MOLXEMB1.
    #[arg(long)]
    embeddings_out: PathBuf,
}

#[derive(Args, Debug)]
struct ExportCheckArgs {
    embeddings: PathBuf,
    /// Second export of the same model that must be byte-identical.
    #[arg(long)]
    compare: Option<PathBuf>,
}

fn parse_oov(s: &str) -> std::result::Result<OovPolicy, String> {
    match s {
        "strict" => Ok(OovPolicy::Strict),
        "zero" => Ok(OovPolicy::Zero),
        other => Err(format!(
            "unknown oov policy {other:?}; expected strict or zero"
        )),
    }
}

fn exit_code(e: &MolexError) -> u8 {
    match e.root() {
        MolexError::Mismatch(_) | MolexError::Format(_) => 3,
        MolexError::Numeric(_) | MolexError::DegenerateData(_) => 4,
        _ => 2,
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path)
        .map_err(|e| MolexError::Argument(format!("cannot read {}: {e}", path.display())))
}

fn load_dataset(path: &Path) -> Result<Vec<Molecule>> {
    let file = fs::File::open(path)
        .map_err(|e| MolexError::Argument(format!("cannot open {}: {e}", path.display())))?;
    read_dataset(BufReader::new(file))
}

fn load_embeddings(path: &Path) -> Result<EmbeddingTable> {
    if !path.exists() {
        return Err(MolexError::Argument(format!(
            "embedding file {} does not exist",
            path.display()
        )));
    }
    load_table(path)
}

/// Writes via a sibling temporary file so a failed run leaves nothing behind.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            let mut stdout = std::io::stdout().lock();
            match stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
            {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
                _ => Ok(()),
            }
        }
    }
}

struct Resolved {
    config: PipelineConfig,
    dataset: PathBuf,
    embeddings: PathBuf,
}

fn resolve(o: &Overrides) -> Result<Resolved> {
    let mut config = match &o.config {
        Some(p) => PipelineConfig::from_json(&read_text(p)?)?,
        None => PipelineConfig::default(),
    };
    if let Some(v) = o.seed {
        config.seed = v;
    }
    if let Some(v) = o.n {
        config.n = v;
    }
    if let Some(v) = o.components {
        config.efpca.components = v;
    }
    if let Some(v) = o.rho {
        config.efpca.rho = v;
    }
    if let Some(v) = o.beta {
        config.beta = v;
    }
    if let Some(v) = o.gamma {
        config.efpca.gamma = v;
    }
    if let Some(v) = o.latent_dim {
        config.latent_dim = v;
    }
    if let Some(v) = o.iterations {
        config.calibration.iterations = v;
    }
    if o.early_stop {
        config.calibration.early_stop = true;
    }
    if let Some(v) = o.oov {
        config.oov = v;
    }
    if let Some(p) = &o.dataset {
        config.paths.dataset = Some(p.display().to_string());
    }
    if let Some(p) = &o.embeddings {
        config.paths.embeddings = Some(p.display().to_string());
    }
    config.validate()?;
    let dataset = config
        .paths
        .dataset
        .clone()
        .ok_or_else(|| MolexError::Config("no dataset path given".into()))?;
    let embeddings = config
        .paths
        .embeddings
        .clone()
        .ok_or_else(|| MolexError::Config("no embeddings path given".into()))?;
    Ok(Resolved {
        config,
        dataset: dataset.into(),
        embeddings: embeddings.into(),
    })
}

fn cmd_train(args: &TrainArgs, exec: Exec) -> Result<()> {
    let r = resolve(&args.overrides)?;
    let out = args
        .out
        .clone()
        .or_else(|| r.config.paths.model_out.clone().map(PathBuf::from))
        .ok_or_else(|| MolexError::Config("no bundle output path given".into()))?;
    let molecules = load_dataset(&r.dataset)?;
    let table = load_embeddings(&r.embeddings)?;
    let (bundle, report) = train(&r.config, &molecules, &table, exec)?;
    let metrics_path = args.metrics.clone().unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".metrics.json");
        PathBuf::from(p)
    });
    write_atomic(&out, bundle.to_json()?.as_bytes())?;
    write_atomic(
        &metrics_path,
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    eprintln!(
        "trained {} molecules: train accuracy {:.4} ({:.4} uncalibrated)",
        molecules.len(),
        report.train_accuracy,
        report.train_accuracy_uncalibrated
    );
    Ok(())
}

fn load_pipeline(args: &ApplyArgs) -> Result<(Pipeline, EmbeddingTable, Vec<Molecule>)> {
    let bundle = PipelineBundle::from_json(&read_text(&args.bundle)?)?;
    let table = load_embeddings(&args.embeddings)?;
    let pipeline = Pipeline::with_table(bundle, &table)?;
    let molecules = load_dataset(&args.dataset)?;
    Ok((pipeline, table, molecules))
}

fn cmd_predict(args: &ApplyArgs, exec: Exec) -> Result<()> {
    let (pipeline, table, molecules) = load_pipeline(args)?;
    let preds = pipeline.predict(&table, &molecules, !args.no_calibration, exec)?;
    let mut csv = String::from("id,prob,class\n");
    for (m, p) in molecules.iter().zip(&preds) {
        csv.push_str(&format!("{},{},{}\n", m.id, p.prob, p.class));
    }
    emit(args.out.as_deref(), &csv)
}

fn cmd_explain(args: &ApplyArgs, exec: Exec) -> Result<()> {
    let (pipeline, table, molecules) = load_pipeline(args)?;
    let reports = pipeline.explain(&table, &molecules, !args.no_calibration, exec)?;
    let mut out = String::new();
    for r in &reports {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    emit(args.out.as_deref(), &out)
}

fn cmd_evaluate(args: &ApplyArgs, exec: Exec) -> Result<()> {
    let (pipeline, table, molecules) = load_pipeline(args)?;
    if molecules.is_empty() {
        return Err(MolexError::Data(
            "evaluation needs a non-empty dataset".into(),
        ));
    }
    let report = pipeline.evaluate(&table, &molecules, !args.no_calibration, exec)?;
    emit(
        args.out.as_deref(),
        &(serde_json::to_string_pretty(&report)? + "\n"),
    )
}

fn parse_values(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| MolexError::Argument(format!("cannot parse sweep value {s:?}")))
        })
        .collect()
}

fn cmd_sweep(args: &SweepArgs, exec: Exec) -> Result<()> {
    let axis: SweepAxis = args.axis.parse()?;
    let values = parse_values(&args.values)?;
    if values.is_empty() {
        return Err(MolexError::Argument(
            "sweep needs at least one value".into(),
        ));
    }
    let r = resolve(&args.overrides)?;
    let molecules = load_dataset(&r.dataset)?;
    let table = load_embeddings(&r.embeddings)?;
    let result = sweep(&r.config, axis, &values, &molecules, &table, exec)?;
    emit(args.out.as_deref(), &result.to_csv())?;
    if !result.failures.is_empty() {
        eprintln!("warning: {} sweep value(s) failed", result.failures.len());
        for (v, e) in &result.failures {
            eprintln!("  {v}: {e}");
        }
    }
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        vocab: args.vocab,
        dim: args.dim,
        molecules: args.molecules,
        active_token: args.active_token,
        min_len: args.min_len,
        max_len: args.max_len,
        noise: args.noise,
        seed: args.seed,
    };
    let data = generate(&spec)?;
    let mut buf = Vec::new();
    write_dataset(&mut buf, &data.molecules)?;
    write_atomic(&args.dataset_out, &buf)?;
    save_table(&data.table, &args.embeddings_out)?;
    Ok(())
}

fn cmd_export_check(args: &ExportCheckArgs) -> Result<()> {
    let table = load_embeddings(&args.embeddings)?;
    if let Some(other) = &args.compare {
        if fs::read(&args.embeddings)? != fs::read(other)? {
            return Err(MolexError::Mismatch(format!(
                "{} and {} differ",
                args.embeddings.display(),
                other.display()
            )));
        }
    }
    let summary = serde_json::json!({
        "vocab": table.vocab().len(),
        "dim": table.dim(),
        "fingerprint": table.fingerprint(),
    });
    println!("{summary}");
    Ok(())
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("MOLEX_THREADS") else {
        return Ok(());
    };
    let threads: usize = value.parse().ok().filter(|&t| t > 0).ok_or_else(|| {
        MolexError::Config(format!(
            "MOLEX_THREADS must be a positive integer, got {value:?}"
        ))
    })?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| MolexError::Config(format!("thread pool: {e}")))?;
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    };
    match &cli.command {
        Command::Train(a) => cmd_train(a, exec),
        Command::Predict(a) => cmd_predict(a, exec),
        Command::Explain(a) => cmd_explain(a, exec),
        Command::Evaluate(a) => cmd_evaluate(a, exec),
        Command::Sweep(a) => cmd_sweep(a, exec),
        Command::Synth(a) => cmd_synth(a),
        Command::ExportCheck(a) => cmd_export_check(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
