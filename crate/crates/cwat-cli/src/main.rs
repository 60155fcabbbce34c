//! Operator entry point: data generation, preprocessing, training,
//! evaluation, cost reporting, and latent export.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data or parse
//! error, 3 numeric failure (non-finite loss or gradient).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use cwat_core::cae::{CaeConfig, CaeParams, LayerSpec};
use cwat_core::classifier::{TransformerConfig, TransformerParams};
use cwat_core::edfio::{parse_edf, to_recording, Label};
use cwat_core::evaluation::{
    evaluation_report, model_cost, render_cost_table, render_eval_table, SignalPred,
};
use cwat_core::preprocess::{
    load_dataset, preprocess_recording, write_dataset, PreprocessConfig, Segment,
};
use cwat_core::synth::{generate_segments, write_edf_fixtures, SynthSpec};
use cwat_core::training::{
    build_checkpoint, classify_latent, config_snapshot, decode_latent, encode_latent,
    metrics_csv, read_checkpoint, restore_checkpoint, split_by_subject, train, write_checkpoint,
    Checkpoint, TrainConfig, TrainError, TrainPhase,
};

#[derive(Parser)]
#[command(
    name = "cwat",
    version,
    about = "Channelwise autoencoder + single-head transformer EEG pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic EEG dataset.
    Synth(SynthArgs),
    /// Convert a directory of EDF files into the segment cache format.
    Preprocess(PreprocessArgs),
    /// Run one training phase and write a run directory.
    Train(TrainArgs),
    /// Score a checkpoint on a cached dataset and emit a report.
    Eval(EvalArgs),
    /// Print the analytical FLOPs/parameter report.
    Flops(FlopsArgs),
    /// Export raw/reconstruction/latent/attention rows as CSV.
    ExportLatents(ExportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of cases (one subject each, labels alternating).
    #[arg(long, default_value_t = 100)]
    cases: usize,
    #[arg(long, default_value_t = 4)]
    segments_per_case: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Sampling rate of the generated recordings.
    #[arg(long, default_value_t = 100.0)]
    rate_hz: f64,
    /// Gaussian noise level in microvolts.
    #[arg(long, default_value_t = 8.0)]
    noise_std: f64,
    /// "cache" writes preprocessed segments + manifest; "edf" writes one
    /// EDF fixture file per case.
    #[arg(long, default_value = "cache")]
    format: String,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Directory of .edf files.
    #[arg(long)]
    data: PathBuf,
    /// Output cache directory.
    #[arg(long)]
    out: PathBuf,
    /// Drop recordings shorter than this many minutes.
    #[arg(long, default_value_t = 15.0)]
    min_minutes: f64,
    /// Parallel file workers (output order is input order regardless).
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Cache directory (or manifest.tsv path) from synth/preprocess.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory to create (default: <run root>/<timestamp>-<phase>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// key=value config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to initialize model weights from (e.g. a pretrained
    /// encoder before the classifier phase).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    phase: Option<TrainPhase>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    val_fraction: Option<f64>,
    /// Accepted for interface stability; training is single-threaded.
    #[arg(long, default_value_t = 1)]
    #[allow(dead_code)]
    workers: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Cache directory (or manifest.tsv path).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Where to write report.json (default: the checkpoint's directory).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Which side of the subject split to score: val, train, or all.
    #[arg(long, default_value = "val")]
    split: String,
}

#[derive(Args)]
struct FlopsArgs {
    /// "paper-defaults" is the only preset.
    #[arg(long, default_value = "paper-defaults")]
    preset: String,
    /// Emit the report as JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Export at most this many segments.
    #[arg(long, default_value_t = 8)]
    limit: usize,
}

enum AppError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl AppError {
    fn code(&self) -> i32 {
        match self {
            AppError::Usage(_) => 1,
            AppError::Data(_) => 2,
            AppError::Numeric(_) => 3,
        }
    }
    fn message(&self) -> &str {
        match self {
            AppError::Usage(m) | AppError::Data(m) | AppError::Numeric(m) => m,
        }
    }
}

impl From<TrainError> for AppError {
    fn from(e: TrainError) -> Self {
        match &e {
            TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteGradient { .. } => {
                AppError::Numeric(e.to_string())
            }
            TrainError::InvalidConfig(_) => AppError::Usage(e.to_string()),
            _ => AppError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::Data(e.to_string())
    }
}

macro_rules! data_err {
    ($ty:ty) => {
        impl From<$ty> for AppError {
            fn from(e: $ty) -> Self {
                AppError::Data(e.to_string())
            }
        }
    };
}
data_err!(cwat_core::edfio::EdfError);
data_err!(cwat_core::preprocess::PreprocessError);
data_err!(cwat_core::synth::SynthError);
data_err!(cwat_core::cae::CaeError);
data_err!(cwat_core::classifier::ClassifierError);
data_err!(serde_json::Error);

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Preprocess(args) => cmd_preprocess(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Flops(args) => cmd_flops(args),
        Command::ExportLatents(args) => cmd_export_latents(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

// ── config resolution ────────────────────────────────────────────────────

struct Effective {
    train: TrainConfig,
    cae: CaeConfig,
    tx: TransformerConfig,
    data: Option<PathBuf>,
}

/// Parses a canonical key=value config file; every key must be known.
fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>, AppError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| AppError::Usage(format!("config {}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(AppError::Usage(format!(
                "config {} line {}: expected key=value, got {line:?}",
                path.display(),
                lineno + 1
            )));
        };
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, AppError> {
    v.parse()
        .map_err(|_| AppError::Usage(format!("config key {key}: cannot parse {v:?}")))
}

/// Layer spec in the snapshot form k<kernel>s<stride>f<multiplier>.
fn parse_layer_spec(key: &str, v: &str) -> Result<LayerSpec, AppError> {
    let err = || AppError::Usage(format!("config key {key}: expected kKsSfF, got {v:?}"));
    let rest = v.strip_prefix('k').ok_or_else(err)?;
    let (kernel, rest) = rest.split_once('s').ok_or_else(err)?;
    let (stride, mult) = rest.split_once('f').ok_or_else(err)?;
    Ok(LayerSpec {
        kernel_size: parse_value(key, kernel)?,
        stride: parse_value(key, stride)?,
        feature_multiplier: parse_value(key, mult)?,
    })
}

/// Builds the effective configs: defaults, then config file, then flags.
fn resolve_configs(args: &TrainArgs) -> Result<Effective, AppError> {
    let mut train = TrainConfig::default();
    let mut cae = CaeConfig::default();
    let mut tx = TransformerConfig::default();
    let mut data: Option<PathBuf> = None;

    if let Some(path) = &args.config {
        let map = parse_config_file(path)?;
        let mut layer_specs: BTreeMap<usize, LayerSpec> = BTreeMap::new();
        for (k, v) in &map {
            match k.as_str() {
                "phase" => {
                    train.phase = v
                        .parse()
                        .map_err(|e: String| AppError::Usage(format!("config key phase: {e}")))?
                }
                "lr" => train.lr = parse_value(k, v)?,
                "weight_decay" => train.weight_decay = parse_value(k, v)?,
                "batch_size" => train.batch_size = parse_value(k, v)?,
                "epochs" => train.epochs = parse_value(k, v)?,
                "warmup_steps" => train.warmup_steps = parse_value(k, v)?,
                "seed" => train.seed = parse_value(k, v)?,
                "val_fraction" => train.val_fraction = parse_value(k, v)?,
                "freeze_encoder" => train.freeze_encoder = parse_value(k, v)?,
                "decoupled_weight_decay" => {
                    train.decoupled_weight_decay = parse_value(k, v)?
                }
                "data" => data = Some(PathBuf::from(v)),
                "cae.channels" => cae.channels = parse_value(k, v)?,
                "cae.input_length" => cae.input_length = parse_value(k, v)?,
                "cae.latent_per_channel" => cae.latent_per_channel = parse_value(k, v)?,
                "classifier.input_dim" => tx.input_dim = parse_value(k, v)?,
                "classifier.model_dim" => tx.model_dim = parse_value(k, v)?,
                "classifier.key_dim" => tx.key_dim = parse_value(k, v)?,
                "classifier.ff_dim" => tx.ff_dim = parse_value(k, v)?,
                "classifier.n_layers" => tx.n_layers = parse_value(k, v)?,
                "classifier.dropout_rate" => tx.dropout_rate = parse_value(k, v)?,
                _ => {
                    if let Some(idx) = k.strip_prefix("cae.layer") {
                        let i: usize = parse_value(k, idx)?;
                        layer_specs.insert(i, parse_layer_spec(k, v)?);
                    } else {
                        return Err(AppError::Usage(format!(
                            "config {}: unknown key {k:?}",
                            path.display()
                        )));
                    }
                }
            }
        }
        if !layer_specs.is_empty() {
            let n = layer_specs.len();
            if layer_specs.keys().copied().ne(0..n) {
                return Err(AppError::Usage(
                    "config cae.layer indices must be contiguous from 0".to_string(),
                ));
            }
            cae.layer_specs = layer_specs.into_values().collect();
        }
    }

    if let Some(p) = args.phase {
        train.phase = p;
    }
    if let Some(v) = args.seed {
        train.seed = v;
    }
    if let Some(v) = args.epochs {
        train.epochs = v;
    }
    if let Some(v) = args.batch_size {
        train.batch_size = v;
    }
    if let Some(v) = args.lr {
        train.lr = v;
    }
    if let Some(v) = args.warmup_steps {
        train.warmup_steps = v;
    }
    if let Some(v) = args.weight_decay {
        train.weight_decay = v;
    }
    if let Some(v) = args.val_fraction {
        train.val_fraction = v;
    }
    if let Some(d) = &args.data {
        data = Some(d.clone());
    }
    Ok(Effective { train, cae, tx, data })
}

// ── commands ─────────────────────────────────────────────────────────────

fn cmd_synth(args: SynthArgs) -> Result<(), AppError> {
    let spec = SynthSpec {
        n_cases: args.cases,
        segments_per_case: args.segments_per_case,
        seed: args.seed,
        rate_hz: args.rate_hz,
        noise_std: args.noise_std,
        ..SynthSpec::default()
    };
    match args.format.as_str() {
        "cache" => {
            let segments = generate_segments(&spec)?;
            let manifest = write_dataset(&args.out, &segments)?;
            println!(
                "wrote {} segments from {} cases to {}",
                segments.len(),
                args.cases,
                manifest.display()
            );
        }
        "edf" => {
            let paths = write_edf_fixtures(&spec, &args.out)?;
            println!("wrote {} EDF fixtures to {}", paths.len(), args.out.display());
        }
        other => {
            return Err(AppError::Usage(format!(
                "unknown --format {other:?}; expected cache or edf"
            )))
        }
    }
    Ok(())
}

fn cmd_preprocess(args: PreprocessArgs) -> Result<(), AppError> {
    if args.workers == 0 {
        return Err(AppError::Usage("--workers must be at least 1".to_string()));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&args.data)
        .map_err(|e| AppError::Data(format!("{}: {e}", args.data.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext.eq_ignore_ascii_case("edf")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(AppError::Data(format!(
            "no .edf files in {}",
            args.data.display()
        )));
    }

    let cfg = PreprocessConfig::default();
    let min_seconds = args.min_minutes * 60.0;
    let process = |path: &Path| -> Result<Vec<Segment>, AppError> {
        let bytes = std::fs::read(path)?;
        let rec = to_recording(&parse_edf(&bytes).map_err(|e| {
            AppError::Data(format!("{}: {e}", path.display()))
        })?);
        if rec.duration_seconds < min_seconds {
            return Ok(Vec::new());
        }
        preprocess_recording(&rec, &cfg)
            .map_err(|e| AppError::Data(format!("{}: {e}", path.display())))
    };

    // Workers split the file list; results are flattened in input order
    // so worker count never changes the output.
    let workers = args.workers.min(paths.len());
    let mut per_file: Vec<Vec<Segment>> = Vec::with_capacity(paths.len());
    if workers <= 1 {
        for p in &paths {
            per_file.push(process(p)?);
        }
    } else {
        let chunk = paths.len().div_ceil(workers);
        let results: Vec<Result<Vec<Vec<Segment>>, AppError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = paths
                .chunks(chunk)
                .map(|slice| scope.spawn(move || slice.iter().map(|p| process(p)).collect()))
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        for r in results {
            per_file.extend(r?);
        }
    }

    let skipped = per_file.iter().filter(|s| s.is_empty()).count();
    let segments: Vec<Segment> = per_file.into_iter().flatten().collect();
    if segments.is_empty() {
        return Err(AppError::Data(format!(
            "no segments produced: all {} recordings were shorter than {} min or empty",
            paths.len(),
            args.min_minutes
        )));
    }
    let manifest = write_dataset(&args.out, &segments)?;
    println!(
        "wrote {} segments from {} files ({} skipped) to {}",
        segments.len(),
        paths.len(),
        skipped,
        manifest.display()
    );
    Ok(())
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("manifest.tsv")
    } else {
        data.to_path_buf()
    }
}

fn run_root() -> PathBuf {
    std::env::var_os("CWAT_RUN_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn load_checkpoint_file(path: &Path) -> Result<Checkpoint, AppError> {
    let bytes = std::fs::read(path)
        .map_err(|e| AppError::Data(format!("checkpoint {}: {e}", path.display())))?;
    read_checkpoint(&bytes).map_err(AppError::from)
}

/// Rebuilds configs and parameters from a checkpoint's config snapshot.
fn model_from_checkpoint(
    cp: &Checkpoint,
) -> Result<(CaeConfig, TransformerConfig, TrainConfig, CaeParams, TransformerParams), AppError> {
    let tmp = tempfile_config(&cp.config_text)?;
    let args = TrainArgs {
        data: None,
        out: None,
        config: Some(tmp.path().to_path_buf()),
        checkpoint: None,
        phase: None,
        seed: None,
        epochs: None,
        batch_size: None,
        lr: None,
        warmup_steps: None,
        weight_decay: None,
        val_fraction: None,
        workers: 1,
    };
    let eff = resolve_configs(&args)?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut cae = CaeParams::init(&eff.cae, &mut rng)?;
    let mut tx = TransformerParams::init(&eff.tx, &mut rng)?;
    restore_checkpoint(cp, &mut cae, &mut tx)?;
    Ok((eff.cae, eff.tx, eff.train, cae, tx))
}

struct TempConfig {
    path: PathBuf,
}

impl TempConfig {
    fn path(&self) -> &Path {
        &self.path
    }
}

impl Drop for TempConfig {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn tempfile_config(text: &str) -> Result<TempConfig, AppError> {
    let path = std::env::temp_dir().join(format!(
        "cwat-config-{}-{:x}.txt",
        std::process::id(),
        text.len()
    ));
    std::fs::write(&path, text)?;
    Ok(TempConfig { path })
}

fn cmd_train(args: TrainArgs) -> Result<(), AppError> {
    let checkpoint = args.checkpoint.as_deref().map(load_checkpoint_file).transpose()?;
    let eff = resolve_configs(&args)?;
    let Some(data) = eff.data.clone() else {
        return Err(AppError::Usage(
            "--data (or a data= config line) is required".to_string(),
        ));
    };

    // A checkpoint fixes the model shape; flags/config still set the
    // training knobs.
    let (cae_cfg, tx_cfg, mut cae, mut tx) = match &checkpoint {
        Some(cp) => {
            let (cae_cfg, tx_cfg, _, cae, tx) = model_from_checkpoint(cp)?;
            (cae_cfg, tx_cfg, cae, tx)
        }
        None => {
            let mut rng =
                <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(eff.train.seed);
            let cae = CaeParams::init(&eff.cae, &mut rng)?;
            let tx = TransformerParams::init(&eff.tx, &mut rng)?;
            (eff.cae.clone(), eff.tx.clone(), cae, tx)
        }
    };
    let train_cfg = eff.train.clone();

    let segments = load_dataset(&manifest_path(&data))?;
    let (train_idx, val_idx) =
        split_by_subject(&segments, train_cfg.val_fraction, train_cfg.seed)?;

    let run_dir = match &args.out {
        Some(dir) => dir.clone(),
        None => {
            let stamp = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            run_root().join(format!("{stamp}-{}", train_cfg.phase.as_str()))
        }
    };
    let config_path = run_dir.join("config.txt");
    if config_path.exists() {
        return Err(AppError::Usage(format!(
            "{} already exists; run directories are immutable",
            config_path.display()
        )));
    }
    std::fs::create_dir_all(&run_dir)?;
    let mut snapshot = config_snapshot(&cae_cfg, &tx_cfg, &train_cfg);
    snapshot.push_str(&format!("data={}\n", data.display()));
    std::fs::write(&config_path, &snapshot)?;

    let outcome = train(
        &mut cae,
        &mut tx,
        &cae_cfg,
        &tx_cfg,
        &train_cfg,
        &segments,
        &train_idx,
        &val_idx,
    )?;

    std::fs::write(run_dir.join("metrics.csv"), metrics_csv(&outcome.rows))?;
    std::fs::write(
        run_dir.join("checkpoint.ck"),
        write_checkpoint(&outcome.checkpoint),
    )?;
    // The final (last-epoch) weights matter for phase chaining; the best
    // snapshot stays the primary artifact.
    let final_cp = build_checkpoint(&cae, &tx, None, &snapshot);
    std::fs::write(run_dir.join("checkpoint-final.ck"), write_checkpoint(&final_cp))?;

    for row in outcome.rows.iter().rev().take(2).collect::<Vec<_>>().into_iter().rev() {
        println!(
            "epoch {} {} loss {:.6}{}",
            row.epoch,
            row.split,
            row.loss,
            row.accuracy
                .map(|a| format!(" accuracy {a:.4}"))
                .unwrap_or_default()
        );
    }
    println!(
        "best {} loss {:.6} at epoch {}; run dir {}",
        if val_idx.is_empty() { "train" } else { "val" },
        outcome.best_loss,
        outcome.best_epoch,
        run_dir.display()
    );
    Ok(())
}

fn predictions(
    segments: &[Segment],
    idx: &[usize],
    cae: &CaeParams,
    tx: &TransformerParams,
    cae_cfg: &CaeConfig,
    tx_cfg: &TransformerConfig,
) -> Result<Vec<SignalPred>, AppError> {
    let mut preds = Vec::with_capacity(idx.len());
    for &i in idx {
        let seg = &segments[i];
        let z = encode_latent(cae, cae_cfg, &seg.data)?;
        let (logits, _) = classify_latent(tx, tx_cfg, &z)?;
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(AppError::Numeric(format!(
                "non-finite logits on segment {} of case {}",
                seg.segment_index, seg.case_id
            )));
        }
        preds.push(SignalPred {
            case_id: seg.case_id.clone(),
            label: seg.label,
            pred: if logits[1] > logits[0] { Label::Abnormal } else { Label::Normal },
        });
    }
    Ok(preds)
}

fn cmd_eval(args: EvalArgs) -> Result<(), AppError> {
    let cp = load_checkpoint_file(&args.checkpoint)?;
    let (cae_cfg, tx_cfg, train_cfg, cae, tx) = model_from_checkpoint(&cp)?;
    let segments = load_dataset(&manifest_path(&args.data))?;

    let idx: Vec<usize> = match args.split.as_str() {
        "all" => (0..segments.len()).collect(),
        "train" | "val" => {
            let (train_idx, val_idx) =
                split_by_subject(&segments, train_cfg.val_fraction, train_cfg.seed)?;
            if args.split == "train" { train_idx } else { val_idx }
        }
        other => {
            return Err(AppError::Usage(format!(
                "unknown --split {other:?}; expected val, train, or all"
            )))
        }
    };
    if idx.is_empty() {
        return Err(AppError::Data(format!(
            "split {:?} selected no segments",
            args.split
        )));
    }

    let preds = predictions(&segments, &idx, &cae, &tx, &cae_cfg, &tx_cfg)?;
    let report = evaluation_report(&preds, &cae_cfg, &tx_cfg)
        .map_err(|e| AppError::Data(e.to_string()))?;

    print!("{}", render_eval_table(&report));
    let out_dir = args
        .out
        .clone()
        .unwrap_or_else(|| args.checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf());
    std::fs::create_dir_all(&out_dir)?;
    let report_path = out_dir.join("report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
    println!("report written to {}", report_path.display());
    Ok(())
}

fn cmd_flops(args: FlopsArgs) -> Result<(), AppError> {
    if args.preset != "paper-defaults" {
        return Err(AppError::Usage(format!(
            "unknown --preset {:?}; expected paper-defaults",
            args.preset
        )));
    }
    let report = model_cost(&CaeConfig::default(), &TransformerConfig::default());
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", render_cost_table(&report));
    }
    Ok(())
}

fn write_matrix_csv(path: &Path, shape: &[usize], data: &[f64]) -> Result<(), AppError> {
    let (rows, cols) = match shape {
        [r, c] => (*r, *c),
        [n] => (1, *n),
        other => {
            return Err(AppError::Data(format!(
                "cannot export rank-{} tensor as CSV",
                other.len()
            )))
        }
    };
    let mut out = String::new();
    for r in 0..rows {
        let row: Vec<String> = (0..cols).map(|c| data[r * cols + c].to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn cmd_export_latents(args: ExportArgs) -> Result<(), AppError> {
    let cp = load_checkpoint_file(&args.checkpoint)?;
    let (cae_cfg, tx_cfg, _, cae, tx) = model_from_checkpoint(&cp)?;
    let segments = load_dataset(&manifest_path(&args.data))?;
    std::fs::create_dir_all(&args.out)?;

    let mut written = 0;
    for seg in segments.iter().take(args.limit) {
        let z = encode_latent(&cae, &cae_cfg, &seg.data)?;
        let recon = decode_latent(&cae, &cae_cfg, &z)?;
        let (_, attention) = classify_latent(&tx, &tx_cfg, &z)?;
        let stem = format!("{}_{:04}", seg.case_id, seg.segment_index);
        write_matrix_csv(
            &args.out.join(format!("{stem}_raw.csv")),
            seg.data.shape(),
            seg.data.data(),
        )?;
        write_matrix_csv(
            &args.out.join(format!("{stem}_recon.csv")),
            recon.shape(),
            recon.data(),
        )?;
        write_matrix_csv(&args.out.join(format!("{stem}_latent.csv")), z.shape(), z.data())?;
        for (l, attn) in attention.iter().enumerate() {
            write_matrix_csv(
                &args.out.join(format!("{stem}_attention_layer{l}.csv")),
                attn.shape(),
                attn.data(),
            )?;
        }
        written += 1;
    }
    println!("exported {written} segments to {}", args.out.display());
    Ok(())
}
