//! The `linvit` command line: train, eval, bench, embed, count-params and
//! synth. Each subcommand is a thin layer over `linvit-core`.

pub mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use linvit::attention::AttentionMode;
use linvit::bench::{self, BenchResult};
use linvit::data::{write_synthetic_dataset, Dataset, PreprocConfig};
use linvit::train::{self, EpochStats, History, MetricsReport};
use linvit::vit::{closed_form_params, count_params, write_atomic};
use linvit::{Checkpoint, Task, ViTConfig, ViTModel};
use serde::Serialize;
use serde_json::json;

pub use config::{Overrides, RunConfig, SplitConfig};

/// Failure with the process exit code it maps to: 2 for usage errors,
/// 1 for everything else.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(msg: impl std::fmt::Display) -> Self {
        CliError {
            code: 2,
            message: msg.to_string(),
        }
    }

    pub fn run(msg: impl std::fmt::Display) -> Self {
        CliError {
            code: 1,
            message: msg.to_string(),
        }
    }
}

impl From<linvit::Error> for CliError {
    fn from(e: linvit::Error) -> Self {
        CliError::run(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

#[derive(Parser, Debug)]
#[command(name = "linvit", version, about = "Linear-attention ViT for lung ultrasound frames")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model on `DATA/<class>/*.png|jpg` and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset and print a metrics report.
    Eval(EvalArgs),
    /// Time attention scaling or whole-model throughput.
    Bench(BenchArgs),
    /// Export per-frame class-token embeddings as CSV.
    Embed(EmbedArgs),
    /// Compare actual, closed-form and reference parameter counts.
    CountParams(CountArgs),
    /// Write a synthetic three-class dataset of PNG frames.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset root with one directory per class.
    #[arg(long)]
    pub data: PathBuf,
    /// Architecture preset [default: binary, or the config file's task].
    #[arg(long)]
    pub task: Option<Task>,
    /// JSON run configuration layered over the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint path; history goes to `<out>.history.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated class directories, in label order.
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<String>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Seeds initialization, shuffling, dropout and the split.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub layers: Option<usize>,
    /// Model input size; also sets the preprocessing target size.
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub attention_mode: Option<AttentionMode>,
    /// Sequence projection rank in linear mode.
    #[arg(long)]
    pub proj_rank: Option<usize>,
    /// Train with an unweighted loss.
    #[arg(long)]
    pub no_class_weights: bool,
    /// Subsample every class to the smallest class size before splitting.
    #[arg(long)]
    pub balance_classes: bool,
    /// Suppress per-epoch progress on standard error.
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Json,
    Text,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitPart {
    /// Every sample under the dataset root.
    All,
    Train,
    Val,
    Test,
}

#[derive(Args, Debug)]
pub struct DataSelection {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated class directories [default: all under DATA].
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<String>>,
    /// Restrict to one part of the split recorded in the checkpoint.
    #[arg(long, value_enum, default_value_t = SplitPart::All)]
    pub split: SplitPart,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub sel: DataSelection,
    #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
    pub report: ReportFormat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BenchMode {
    Standard,
    Linear,
    Model,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Csv,
    Json,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, value_enum)]
    pub mode: BenchMode,
    /// Ascending sequence lengths for attention modes, e.g. 256,512,1024.
    #[arg(long, value_delimiter = ',')]
    pub seq_lens: Option<Vec<usize>>,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 8)]
    pub heads: usize,
    /// Projection rank for linear mode.
    #[arg(long, default_value_t = 64)]
    pub k: usize,
    #[arg(long, default_value_t = bench::MIN_REPS)]
    pub reps: usize,
    /// Preset for model mode.
    #[arg(long)]
    pub task: Option<Task>,
    /// Run configuration for model mode.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint for model mode (takes precedence over --task/--config).
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = bench::MIN_FRAMES)]
    pub frames: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    /// Worker threads. Benchmarks are single-threaded; only 1 is accepted.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[arg(long, value_enum, default_value_t = OutputFormat::Csv)]
    pub format: OutputFormat,
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    #[command(flatten)]
    pub sel: DataSelection,
    /// Output CSV: path,label,e0..e{d-1}.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CountArgs {
    #[arg(long, conflicts_with = "config")]
    pub task: Option<Task>,
    /// Run configuration whose model section is counted.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub per_class: usize,
    #[arg(long, default_value_t = 224)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Runs one command, writing its primary output to `out`.
pub fn run(cli: Cli, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    let text = match cli.command {
        Command::Train(a) => cmd_train(a)?,
        Command::Eval(a) => cmd_eval(a)?,
        Command::Bench(a) => cmd_bench(a)?,
        Command::Embed(a) => cmd_embed(a)?,
        Command::CountParams(a) => cmd_count_params(a)?,
        Command::Synth(a) => cmd_synth(a)?,
    };
    out.write_all(text.as_bytes()).map_err(CliError::run)
}

/// `<out>.history.json` next to the checkpoint.
pub fn history_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".history.json");
    PathBuf::from(s)
}

#[derive(Serialize)]
struct TrainRecord<'a> {
    run_config: &'a RunConfig,
    class_names: &'a [String],
    split_sizes: [usize; 3],
    history: &'a History,
    test_report: &'a MetricsReport,
}

fn cmd_train(a: TrainArgs) -> Result<String, CliError> {
    let flags = Overrides {
        classes: a.classes.clone(),
        layers: a.layers,
        image_size: a.image_size,
        attention_mode: a.attention_mode,
        proj_rank: a.proj_rank,
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        seed: a.seed,
        no_class_weights: a.no_class_weights,
        balance_classes: a.balance_classes,
    };
    let mut cfg = RunConfig::resolve(a.task, a.config.as_deref(), &flags)?;
    let selected = match &cfg.classes {
        Some(c) => c.clone(),
        None => discover(&a.data)?,
    };
    if cfg.task == Task::Multiclass && cfg.model.num_classes != selected.len() && !selects_num_classes(&a) {
        cfg.model.num_classes = selected.len();
    }
    cfg.validate(selected.len())?;
    cfg.classes = Some(selected.clone());

    let ds = recorded_subset(Dataset::from_dir(&a.data, Some(&selected))?, &cfg.split)?;
    let (tr, va, te) = ds.split(cfg.split.ratios, cfg.split.seed)?;
    let (tr_set, va_set, te_set) = (
        tr.load(&cfg.preprocessing)?,
        va.load(&cfg.preprocessing)?,
        te.load(&cfg.preprocessing)?,
    );
    let init = ViTModel::init(&cfg.model, cfg.model.seed)?;
    let quiet = a.quiet;
    let (best, history) = train::train_with(&init, &tr_set, &va_set, &cfg.training, |s: &EpochStats| {
        if !quiet {
            eprintln!(
                "epoch {:>3}  train loss {:.4} acc {:.3}  val loss {:.4} acc {:.3}",
                s.epoch, s.train_loss, s.train_accuracy, s.val_loss, s.val_accuracy
            );
        }
    })?;
    let report = train::evaluate(&best, &te_set)?;

    let record = TrainRecord {
        run_config: &cfg,
        class_names: &selected,
        split_sizes: [tr.len(), va.len(), te.len()],
        history: &history,
        test_report: &report,
    };
    let history_json = serde_json::to_vec_pretty(&record).map_err(CliError::run)?;
    let mut ck = Checkpoint::new(best, selected.clone());
    ck.metadata = json!({
        "run_config": cfg,
        "best_epoch": history.best_epoch,
        "split_sizes": record.split_sizes,
    });
    let bytes = ck.to_bytes()?;
    // Both artifacts are serialized before either is written, and each write
    // is an atomic rename.
    write_atomic(&history_path(&a.out), &history_json)?;
    write_atomic(&a.out, &bytes)?;
    Ok(format!(
        "wrote {} (best epoch {}, test accuracy {:.4})\n",
        a.out.display(),
        history.best_epoch,
        report.accuracy
    ))
}

fn recorded_subset(ds: Dataset, split: &SplitConfig) -> Result<Dataset, CliError> {
    Ok(if split.balance_classes { ds.balanced(split.seed)? } else { ds })
}

fn selects_num_classes(a: &TrainArgs) -> bool {
    a.config
        .as_ref()
        .and_then(|p| std::fs::read_to_string(p).ok())
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .is_some_and(|v| v.pointer("/model/num_classes").is_some())
}

fn discover(root: &Path) -> Result<Vec<String>, CliError> {
    Ok(Dataset::from_dir(root, None)?.class_names().to_vec())
}

/// A checkpoint plus the dataset it is applied to, checked for matching
/// classes and preprocessed the way the model was trained.
struct Loaded {
    ck: Checkpoint,
    ds: Dataset,
    preproc: PreprocConfig,
    provenance: serde_json::Value,
}

fn load_selection(sel: &DataSelection) -> Result<Loaded, CliError> {
    let ck = Checkpoint::load(&sel.model)?;
    let data_classes = match &sel.classes {
        Some(c) => c.clone(),
        None => discover(&sel.data)?,
    };
    let mut a = data_classes.clone();
    let mut b = ck.class_names.clone();
    a.sort();
    b.sort();
    if a != b {
        return Err(CliError::run(format!(
            "class mismatch: dataset has [{}], checkpoint has [{}]",
            data_classes.join(", "),
            ck.class_names.join(", ")
        )));
    }
    let run_cfg: Option<RunConfig> = ck
        .metadata
        .get("run_config")
        .and_then(|v| serde_json::from_value(v.clone()).ok());
    let preproc = match &run_cfg {
        Some(r) => r.preprocessing.clone(),
        None => PreprocConfig {
            target_size: ck.model.config().image_size,
            ..Default::default()
        },
    };
    // Labels follow the checkpoint's class order.
    let full = Dataset::from_dir(&sel.data, Some(&ck.class_names))?;
    let ds = match sel.split {
        SplitPart::All => full,
        part => {
            let split = run_cfg.as_ref().map(|r| r.split.clone()).ok_or_else(|| {
                CliError::usage("--split needs a checkpoint that records its split configuration")
            })?;
            let (tr, va, te) = recorded_subset(full, &split)?.split(split.ratios, split.seed)?;
            match part {
                SplitPart::Train => tr,
                SplitPart::Val => va,
                _ => te,
            }
        }
    };
    let provenance = json!({
        "checkpoint": sel.model,
        "data": sel.data,
        "split": format!("{:?}", sel.split).to_lowercase(),
        "run_config": ck.metadata.get("run_config").cloned().unwrap_or(serde_json::Value::Null),
        "model_config": ck.model.config(),
    });
    Ok(Loaded {
        ck,
        ds,
        preproc,
        provenance,
    })
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    #[serde(flatten)]
    report: &'a MetricsReport,
    provenance: &'a serde_json::Value,
}

fn cmd_eval(a: EvalArgs) -> Result<String, CliError> {
    let l = load_selection(&a.sel)?;
    let set = l.ds.load(&l.preproc)?;
    let report = train::evaluate(&l.ck.model, &set)?;
    Ok(match a.report {
        ReportFormat::Json => {
            let out = EvalOutput {
                report: &report,
                provenance: &l.provenance,
            };
            serde_json::to_string_pretty(&out).map_err(CliError::run)? + "\n"
        }
        ReportFormat::Text => format!(
            "{}\nsamples {}  checkpoint {}\n",
            report.to_text(),
            report.total(),
            a.sel.model.display()
        ),
    })
}

fn cmd_embed(a: EmbedArgs) -> Result<String, CliError> {
    let l = load_selection(&a.sel)?;
    let set = l.ds.load(&l.preproc)?;
    let emb = train::embeddings(&l.ck.model, &set, 16)?;
    let d = emb.shape()[1];
    let mut csv = String::from("path,label");
    for i in 0..d {
        let _ = write!(csv, ",e{i}");
    }
    csv.push('\n');
    for (i, s) in l.ds.samples().iter().enumerate() {
        let _ = write!(csv, "{},{}", csv_field(&s.path.display().to_string()), csv_field(&l.ds.class_names()[s.label]));
        for v in &emb.data()[i * d..(i + 1) * d] {
            let _ = write!(csv, ",{v}");
        }
        csv.push('\n');
    }
    write_atomic(&a.out, csv.as_bytes())?;
    Ok(format!("wrote {} rows of {d} dimensions to {}\n", l.ds.len(), a.out.display()))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Serialize)]
struct BenchOutput<'a> {
    threads: usize,
    results: &'a [BenchResult],
    #[serde(skip_serializing_if = "Option::is_none")]
    time_slope: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    flop_slope: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    throughput: Option<&'a bench::ThroughputReport>,
}

fn cmd_bench(a: BenchArgs) -> Result<String, CliError> {
    if a.threads != 1 {
        return Err(CliError::usage("benchmarks are single-threaded; --threads must be 1"));
    }
    if a.reps < bench::MIN_REPS {
        return Err(CliError::usage(format!("--reps must be at least {}", bench::MIN_REPS)));
    }
    let (results, tp) = match a.mode {
        BenchMode::Standard | BenchMode::Linear => {
            let lens = a
                .seq_lens
                .as_deref()
                .ok_or_else(|| CliError::usage("--seq-lens is required for attention modes"))?;
            bench::check_seq_lens(lens).map_err(CliError::usage)?;
            let mode = if a.mode == BenchMode::Standard {
                AttentionMode::Standard
            } else {
                AttentionMode::Linear
            };
            (bench::attention_scaling(mode, lens, a.d_model, a.heads, a.k, a.reps)?, None)
        }
        BenchMode::Model => {
            if a.frames < bench::MIN_FRAMES {
                return Err(CliError::usage(format!("--frames must be at least {}", bench::MIN_FRAMES)));
            }
            let model = match &a.model {
                Some(p) => Checkpoint::load(p)?.model,
                None => {
                    let cfg = RunConfig::resolve(a.task, a.config.as_deref(), &Overrides::default())?;
                    cfg.model.validate().map_err(CliError::usage)?;
                    ViTModel::init(&cfg.model, cfg.model.seed)?
                }
            };
            let r = bench::throughput_with_reps(&model, a.frames, a.batch_size, a.reps)?;
            (vec![r.model.clone(), r.end_to_end.clone()], Some(r))
        }
    };
    Ok(match a.format {
        OutputFormat::Csv => bench::to_csv(&results),
        OutputFormat::Json => {
            let attn = a.mode != BenchMode::Model;
            let out = BenchOutput {
                threads: a.threads,
                results: &results,
                time_slope: attn.then(|| bench::time_slope(&results)).transpose()?,
                flop_slope: attn.then(|| bench::flop_slope(&results)).transpose()?,
                throughput: tp.as_ref(),
            };
            serde_json::to_string_pretty(&out).map_err(CliError::run)? + "\n"
        }
    })
}

/// Rows of (model, actual, closed form, reference) plus a gap annotation.
pub fn param_table(rows: &[(String, ViTConfig, Option<u64>)]) -> Result<String, CliError> {
    let mut s = format!("{:<12} {:>12} {:>12} {:>12}  note\n", "model", "actual", "closed_form", "reference");
    for (name, c, reference) in rows {
        let actual = count_params(c).map_err(CliError::usage)?;
        let closed = closed_form_params(c);
        let (ref_col, note) = match reference {
            Some(r) => (
                format!("{:.1}M", *r as f64 / 1e6),
                format!("gap {:+.2}M vs reference", (actual as f64 - *r as f64) / 1e6),
            ),
            None => ("-".into(), String::new()),
        };
        let note = if actual == closed {
            note
        } else {
            format!("actual differs from closed form; {note}")
        };
        let _ = writeln!(s, "{name:<12} {actual:>12} {closed:>12} {ref_col:>12}  {note}");
    }
    Ok(s)
}

fn cmd_count_params(a: CountArgs) -> Result<String, CliError> {
    let rows = match (&a.task, &a.config) {
        (_, Some(p)) => {
            let cfg = RunConfig::resolve(None, Some(p), &Overrides::default())?;
            vec![("config".to_string(), cfg.model, None)]
        }
        (Some(t), None) => vec![(t.to_string(), t.preset(), Some(t.reference_param_count()))],
        (None, None) => [Task::Binary, Task::Multiclass]
            .iter()
            .map(|t| (t.to_string(), t.preset(), Some(t.reference_param_count())))
            .collect(),
    };
    param_table(&rows)
}

fn cmd_synth(a: SynthArgs) -> Result<String, CliError> {
    if a.per_class == 0 || a.size == 0 {
        return Err(CliError::usage("--per-class and --size must be positive"));
    }
    let ds = write_synthetic_dataset(&a.out, a.per_class, a.size, a.seed)?;
    Ok(format!(
        "wrote {} frames in {} classes to {}\n",
        ds.len(),
        ds.num_classes(),
        a.out.display()
    ))
}
