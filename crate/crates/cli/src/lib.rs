//! Command-line front end: ingest parses, generate synthetic data, train,
//! evaluate and check gradients.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use transgat_core::checkpoint;
use transgat_core::conllu::{conllu_to_record_at, split_documents};
use transgat_core::data::{read_jsonl, write_jsonl, DatasetSplit, SplitRole, TraitScores, ESSAYS_FILE};
use transgat_core::model::model_gradcheck;
use transgat_core::synth::gen_synthetic;
use transgat_core::train::{self, write_history_csv, PreparedSplit};
use transgat_core::{GatConfig, TrainConfig};

pub mod config;
pub mod scores;

use config::{env_seed, resolve_seed, set, FileConfig};

/// Largest relative gradient error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug)]
pub enum CliError {
    /// Malformed or inconsistent input; exit code 2.
    BadInput(String),
    /// Anything else; exit code 1.
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::BadInput(_) => 2,
            CliError::Internal(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::BadInput(m) | CliError::Internal(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<transgat_core::Error> for CliError {
    fn from(e: transgat_core::Error) -> Self {
        if e.is_bad_input() {
            CliError::BadInput(e.to_string())
        } else {
            CliError::Internal(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Internal(e.to_string())
    }
}

/// Errors while reading user-supplied files are input errors, tagged with
/// the path.
fn input<T>(path: &Path, r: transgat_core::Result<T>) -> Result<T, CliError> {
    r.map_err(|e| CliError::BadInput(format!("{}: {e}", path.display())))
}

#[derive(Debug, Parser)]
#[command(name = "transgat", version, about = "Graph-attention analytic essay scoring")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert CoNLL-U parses (and optional gold scores) into essay JSONL.
    Ingest(IngestArgs),
    /// Write a synthetic dataset directory.
    GenSynth(GenSynthArgs),
    /// Train a model and write its checkpoint and history.
    Train(Box<TrainArgs>),
    /// Score a checkpoint (or a predictions file) against gold scores.
    Eval(EvalArgs),
    /// Finite-difference check of the model gradient on a tiny random problem.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// CoNLL-U file; split into essays at `# newdoc id = ...` lines.
    #[arg(long)]
    pub conllu: PathBuf,
    /// Gold scores CSV: id,cohesion,syntax,vocabulary,phraseology,grammar,conventions.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Output JSONL path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    /// Number of essays [default: 64].
    #[arg(long)]
    pub n: Option<usize>,
    /// Embedding width, at least 4 [default: 16].
    #[arg(long)]
    pub dim: Option<usize>,
    /// Shortest essay in words [default: 10].
    #[arg(long)]
    pub min_tokens: Option<usize>,
    /// Longest essay in words [default: 30].
    #[arg(long)]
    pub max_tokens: Option<usize>,
    /// Falls back to the config file, then TRANSGAT_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    /// TOML config file with a [synth] section.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainFlags {
    /// Falls back to the config file, then TRANSGAT_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Passes over the training set [default: 6].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Essays per optimizer step [default: 4].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Peak learning rate of the cosine schedule [default: 1e-3].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Decoupled AdamW weight decay [default: 0].
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// First-moment decay [default: 0.9].
    #[arg(long)]
    pub beta1: Option<f64>,
    /// Second-moment decay [default: 0.999].
    #[arg(long)]
    pub beta2: Option<f64>,
    /// AdamW denominator epsilon [default: 1e-8].
    #[arg(long)]
    pub adam_eps: Option<f64>,
    /// Keep the essay-stream head at its initial values.
    #[arg(long)]
    pub freeze_essay_head: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GatFlags {
    /// Graph attention layers [default: 2].
    #[arg(long)]
    pub num_layers: Option<usize>,
    /// Attention heads per layer [default: 4].
    #[arg(long)]
    pub num_heads: Option<usize>,
    /// Width of every attention head [default: 64].
    #[arg(long)]
    pub d_head: Option<usize>,
    /// LeakyReLU slope inside attention scores [default: 0.2].
    #[arg(long)]
    pub attention_slope: Option<f64>,
    /// LeakyReLU slope on node features and output heads [default: 0.01].
    #[arg(long)]
    pub activation_slope: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Training directory with essays.jsonl and embeddings.tgeb.
    #[arg(long)]
    pub data: PathBuf,
    /// Validation directory, same layout.
    #[arg(long)]
    pub val: PathBuf,
    /// Checkpoint path for the best model.
    #[arg(long)]
    pub out: PathBuf,
    /// History CSV path; defaults to the checkpoint path with extension `history.csv`.
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// TOML config file with [train] and [gat] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub gat: GatFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory with essays.jsonl (and embeddings.tgeb when scoring a checkpoint).
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to score.
    #[arg(long, required_unless_present = "predictions")]
    pub ckpt: Option<PathBuf>,
    /// Score a predictions CSV (scores format) instead of a checkpoint.
    #[arg(long, conflicts_with = "ckpt")]
    pub predictions: Option<PathBuf>,
    /// Write the checkpoint's raw predictions as CSV.
    #[arg(long, requires = "ckpt")]
    pub write_predictions: Option<PathBuf>,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Falls back to TRANSGAT_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Runs a parsed command, writing user-facing output to `out`. Returns the
/// process exit code.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<u8, CliError> {
    match cli.command {
        Command::Ingest(a) => cmd_ingest(&a, out).map(|_| 0),
        Command::GenSynth(a) => cmd_gen_synth(&a, out).map(|_| 0),
        Command::Train(a) => cmd_train(&a, out).map(|_| 0),
        Command::Eval(a) => cmd_eval(&a, out).map(|_| 0),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out).map(|ok| if ok { 0 } else { 1 }),
    }
}

pub fn cmd_ingest(args: &IngestArgs, out: &mut dyn Write) -> Result<usize, CliError> {
    let text = std::fs::read_to_string(&args.conllu)
        .map_err(|e| CliError::BadInput(format!("{}: {e}", args.conllu.display())))?;
    let docs = split_documents(&text);
    let stem = args
        .conllu
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "essay".into());
    if docs.is_empty() {
        return Err(CliError::BadInput(format!("{}: no sentences", args.conllu.display())));
    }
    let mut records = Vec::with_capacity(docs.len());
    for (i, doc) in docs.iter().enumerate() {
        let id = match (&doc.id, docs.len()) {
            (Some(id), _) => id.clone(),
            (None, 1) => stem.clone(),
            (None, _) => format!("{stem}-{}", i + 1),
        };
        records.push(input(&args.conllu, conllu_to_record_at(&doc.text, &id, doc.first_line))?);
    }
    let mut seen = std::collections::BTreeSet::new();
    if let Some(r) = records.iter().find(|r| !seen.insert(r.id.clone())) {
        return Err(CliError::BadInput(format!("duplicate essay id {:?}", r.id)));
    }

    if let Some(path) = &args.scores {
        let mut table = scores::read_scores(path)?;
        for r in &mut records {
            let values = table
                .remove(&r.id)
                .ok_or_else(|| CliError::BadInput(format!("{}: no scores for essay {:?}", path.display(), r.id)))?;
            let gold = TraitScores(values);
            gold.check_gold()
                .map_err(|m| CliError::BadInput(format!("{}: essay {:?}: {m}", path.display(), r.id)))?;
            r.gold = Some(gold);
        }
        for id in table.keys() {
            eprintln!("warning: scores for unknown essay {id:?} ignored");
        }
    }

    let mut buf = Vec::new();
    write_jsonl(&mut buf, &records)?;
    std::fs::write(&args.out, buf)?;
    let tokens: usize = records.iter().map(|r| r.tokens.len()).sum();
    let sentences: usize = records.iter().map(|r| r.sentence_spans.len()).sum();
    writeln!(
        out,
        "wrote {} records ({sentences} sentences, {tokens} words) to {}",
        records.len(),
        args.out.display()
    )?;
    Ok(records.len())
}

pub fn cmd_gen_synth(args: &GenSynthArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let file = FileConfig::load(args.config.as_deref())?;
    let mut config = file.synth();
    set(&mut config.num_essays, args.n);
    set(&mut config.dim, args.dim);
    set(&mut config.min_tokens, args.min_tokens);
    set(&mut config.max_tokens, args.max_tokens);
    config.seed = resolve_seed(args.seed, file.synth.seed, &file, env_seed().as_deref())?;
    let ds = gen_synthetic(&config).map_err(|e| CliError::BadInput(e.to_string()))?;
    ds.write_dir(&args.out)?;
    writeln!(
        out,
        "wrote {} essays (d={}, seed {}) to {}",
        ds.records.len(),
        config.dim,
        config.seed,
        args.out.display()
    )?;
    Ok(())
}

/// Resolved training and architecture settings for `train`.
pub fn train_settings(args: &TrainArgs, env: Option<&str>) -> Result<(TrainConfig, GatConfig), CliError> {
    let file = FileConfig::load(args.config.as_deref())?;
    let mut t = file.train();
    let f = &args.train;
    set(&mut t.epochs, f.epochs);
    set(&mut t.batch_size, f.batch_size);
    set(&mut t.lr, f.lr);
    set(&mut t.adamw.weight_decay, f.weight_decay);
    set(&mut t.adamw.beta1, f.beta1);
    set(&mut t.adamw.beta2, f.beta2);
    set(&mut t.adamw.eps, f.adam_eps);
    t.freeze_essay_head |= f.freeze_essay_head;
    t.seed = resolve_seed(f.seed, file.train.seed, &file, env)?;
    t.validate().map_err(|e| CliError::BadInput(e.to_string()))?;

    let mut g = file.gat();
    let gf = &args.gat;
    set(&mut g.num_layers, gf.num_layers);
    set(&mut g.num_heads, gf.num_heads);
    set(&mut g.d_head, gf.d_head);
    set(&mut g.attention_slope, gf.attention_slope);
    set(&mut g.activation_slope, gf.activation_slope);
    g.validate().map_err(|e| CliError::BadInput(e.to_string()))?;
    Ok((t, g))
}

pub fn history_path(args: &TrainArgs) -> PathBuf {
    args.history
        .clone()
        .unwrap_or_else(|| args.out.with_extension("history.csv"))
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let (tc, gc) = train_settings(args, env_seed().as_deref())?;
    let train_split = input(&args.data, DatasetSplit::load_dir(&args.data, SplitRole::Train))?;
    let val_split = input(&args.val, DatasetSplit::load_dir(&args.val, SplitRole::Validation))?;
    if train_split.is_empty() || val_split.is_empty() {
        return Err(CliError::BadInput("training and validation splits must be non-empty".into()));
    }
    let d = input(&args.data, train_split.dim())?;
    if input(&args.val, val_split.dim())? != d {
        return Err(CliError::BadInput(format!(
            "{} and {} have different embedding widths",
            args.data.display(),
            args.val.display()
        )));
    }
    let train_p = input(&args.data, PreparedSplit::new(&train_split))?;
    let val_p = input(&args.val, PreparedSplit::new(&val_split))?;
    input(&args.data, train_p.gold_scores())?;
    input(&args.val, val_p.gold_scores())?;

    let model = transgat_core::ScoringModel::init(gc, d, tc.seed)?;
    writeln!(
        out,
        "training on {} essays (validation {}), d={d}, {} parameters, seed {}",
        train_p.len(),
        val_p.len(),
        model.num_parameters(),
        tc.seed
    )?;
    let fit = train::fit_model(model, &train_p, &val_p, &tc)?;
    for h in &fit.history {
        writeln!(
            out,
            "epoch {:>3}  train_loss {:.6}  val_avg_qwk {:.4}",
            h.epoch, h.train_loss, h.val.average
        )?;
    }

    checkpoint::write_file(&args.out, &fit.best)?;
    let hist = history_path(args);
    let mut csv = Vec::new();
    write_history_csv(&mut csv, &fit.history)?;
    std::fs::write(&hist, csv)?;
    let best = &fit.history[fit.best_epoch - 1];
    writeln!(out, "best epoch {} on validation:", fit.best_epoch)?;
    writeln!(out, "{}", best.val.to_table())?;
    writeln!(out, "checkpoint: {}\nhistory: {}", args.out.display(), hist.display())?;
    Ok(())
}

fn print_report(report: &transgat_core::QwkReport, json: bool, out: &mut dyn Write) -> Result<(), CliError> {
    if json {
        writeln!(out, "{:#}", report.to_json())?;
    } else {
        writeln!(out, "{}", report.to_table())?;
    }
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if let Some(pred_path) = &args.predictions {
        let jsonl = args.data.join(ESSAYS_FILE);
        let records = input(&jsonl, read_jsonl(&jsonl))?;
        if records.is_empty() {
            return Err(CliError::BadInput(format!("{}: no essays", jsonl.display())));
        }
        let table: BTreeMap<String, [f64; 6]> = scores::read_scores(pred_path)?;
        let mut preds = Vec::with_capacity(records.len());
        let mut gold = Vec::with_capacity(records.len());
        for r in &records {
            let p = table
                .get(&r.id)
                .ok_or_else(|| CliError::BadInput(format!("{}: no prediction for essay {:?}", pred_path.display(), r.id)))?;
            preds.push(p.to_vec());
            gold.push(
                r.gold
                    .ok_or_else(|| CliError::BadInput(format!("essay {:?} has no gold scores", r.id)))?,
            );
        }
        let report = train::qwk_report(&preds, &gold).map_err(|e| CliError::BadInput(e.to_string()))?;
        return print_report(&report, args.json, out);
    }

    let ckpt_path = args
        .ckpt
        .as_ref()
        .ok_or_else(|| CliError::BadInput("eval needs --ckpt or --predictions".into()))?;
    let model = input(ckpt_path, checkpoint::read_file(ckpt_path))?;
    let split = input(&args.data, DatasetSplit::load_dir(&args.data, SplitRole::Test))?;
    if split.is_empty() {
        return Err(CliError::BadInput(format!("{}: no essays", args.data.display())));
    }
    let d = input(&args.data, split.dim())?;
    if d != model.d_in {
        return Err(CliError::BadInput(format!(
            "checkpoint expects embedding width {}, data has {d}",
            model.d_in
        )));
    }
    let prepared = input(&args.data, PreparedSplit::new(&split))?;
    let preds = train::predict(&prepared, &model)?;
    if let Some(path) = &args.write_predictions {
        let rows: Vec<(String, Vec<f64>)> = prepared.ids.iter().cloned().zip(preds.iter().cloned()).collect();
        scores::write_scores(path, &rows)?;
    }
    let gold = input(&args.data, prepared.gold_scores())?;
    let report = train::qwk_report(&preds, &gold)?;
    print_report(&report, args.json, out)
}

/// Prints per-parameter errors; true when the worst is within tolerance.
pub fn cmd_gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> Result<bool, CliError> {
    let seed = resolve_seed(args.seed, None, &FileConfig::default(), env_seed().as_deref())?;
    let report = model_gradcheck(seed)?;
    writeln!(out, "{:<24} {:>7} {:>12}", "parameter", "coords", "max rel err")?;
    for e in &report.entries {
        writeln!(out, "{:<24} {:>7} {:>12.3e}", e.name, e.coords, e.max_rel_err)?;
    }
    let worst = report.max_rel_err();
    let ok = worst <= GRADCHECK_TOLERANCE;
    writeln!(
        out,
        "seed {seed}: max rel err {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:e}) {}",
        if ok { "PASS" } else { "FAIL" }
    )?;
    Ok(ok)
}
