//! Command-line front end. Each subcommand resolves a [`RunConfig`]
//! (flags over `--config` file over defaults), validates it, then runs.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{require, EmbedMode, RunConfig};
use crate::dataio::{encode_pair, pkd_to_kd, preprocess, read_affinity_csv, Dataset, SplitName};
use crate::embedding::{synthetic_embed, EmbeddingStore};
use crate::error::{Error, Result};
use crate::gradcheck::{self, GradCheckConfig};
use crate::metrics::{evaluate, AucPolicy, Scale};
use crate::model::{checkpoint_precision, load_checkpoint, save_checkpoint, Model, StreamInput, Variant};
use crate::synthetic::synthetic_store;
use crate::tensor::{Precision, Scalar};
use crate::train::{build_examples, predict_examples, train, write_curves};

#[derive(Debug, Parser)]
#[command(name = "duadeep", version, about = "Antigen-antibody affinity regression from sequence embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Clean, filter, transform and split an affinity CSV into a dataset directory.
    Preprocess(PreprocessArgs),
    /// Write one embedding record per dataset sequence.
    Embed(EmbedArgs),
    /// Train a model and write the best-validation checkpoint plus curves.
    Train(TrainArgs),
    /// Score a checkpoint on one dataset split.
    Eval(EvalArgs),
    /// Predict affinity for a single antigen/antibody pair.
    Predict(PredictArgs),
    /// Compare analytic gradients with finite differences on a toy model.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<EmbedMode>,
    #[arg(long = "d-e")]
    pub d_e: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Embedding file to import from.
    #[arg(long)]
    pub from: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub curves: Option<PathBuf>,
    /// Sets both the initialization and the training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub precision: Option<Precision>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<SplitName>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long = "auc-policy")]
    pub auc_policy: Option<AucPolicy>,
    #[arg(long)]
    pub scale: Option<Scale>,
    /// Report path; the report is printed either way.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub antigen: String,
    #[arg(long)]
    pub heavy: String,
    #[arg(long)]
    pub light: String,
    #[arg(long, conflicts_with = "synthetic")]
    pub embeddings: Option<PathBuf>,
    /// Embed the pair with the synthetic embedder instead of a file.
    #[arg(long)]
    pub synthetic: bool,
    #[arg(long = "d-e", requires = "synthetic")]
    pub d_e: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long = "d-e", default_value_t = 16)]
    pub d_e: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "64")]
    pub precision: Precision,
}

/// Runs one parsed command, writing human-readable output to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Preprocess(a) => cmd_preprocess(a, out),
        Command::Embed(a) => cmd_embed(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Predict(a) => cmd_predict(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
    }
}

fn say(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn set_path(slot: &mut Option<PathBuf>, flag: Option<PathBuf>) {
    if flag.is_some() {
        *slot = flag;
    }
}

pub fn cmd_preprocess(a: PreprocessArgs, out: &mut dyn Write) -> Result<()> {
    let mut c = RunConfig::load(a.config.as_deref())?;
    set_path(&mut c.paths.input, a.input);
    set_path(&mut c.paths.dataset, a.out);
    set(&mut c.data.seed, a.seed);
    c.validate()?;
    let input = require(&c.paths.input, "--input")?;
    let dir = require(&c.paths.dataset, "--out")?;

    let records = read_affinity_csv(input, &c.data.columns)?;
    let processed = preprocess(records, &c.data.preprocess_config())?;
    let ds = Dataset::write(dir, &processed)?;
    c.echo(dir)?;

    let n = &ds.manifest.counts;
    let d = &ds.manifest.dropped;
    say(
        out,
        &format!(
            "rows {}  retained {}  train {}  val {}  test {}\n\
             dropped {}: missing_kd {}  invalid_kd {}  kd_out_of_range {}  empty_sequence {}\n\
             scaler mean {}  std {}\n",
            n.input_rows,
            n.retained,
            n.train,
            n.val,
            n.test,
            d.total(),
            d.missing_kd,
            d.invalid_kd,
            d.kd_out_of_range,
            d.empty_sequence,
            ds.manifest.scaler.mean,
            ds.manifest.scaler.std
        ),
    )
}

pub fn cmd_embed(a: EmbedArgs, out: &mut dyn Write) -> Result<()> {
    let mut c = RunConfig::load(a.config.as_deref())?;
    set_path(&mut c.paths.dataset, a.dataset);
    set_path(&mut c.paths.embeddings, a.out);
    set(&mut c.embed.mode, a.mode);
    set(&mut c.embed.d_e, a.d_e);
    set(&mut c.embed.seed, a.seed);
    set_path(&mut c.embed.from, a.from);
    c.validate()?;
    let ds = Dataset::open(require(&c.paths.dataset, "--dataset")?)?;
    let dest = require(&c.paths.embeddings, "--out")?;

    let store = match c.embed.mode {
        EmbedMode::Synthetic => {
            let all: Vec<_> = [SplitName::Train, SplitName::Val, SplitName::Test]
                .into_iter()
                .flat_map(|s| ds.split.part(s).iter().cloned())
                .collect();
            synthetic_store(&all, c.embed.d_e, c.embed.seed)?
        }
        EmbedMode::Import => {
            let src = require(&c.embed.from, "--from")?;
            if same_file(src, dest) {
                return Err(Error::Config("--from and --out name the same file".into()));
            }
            let source = EmbeddingStore::read(src)?;
            source.check_covers(&ds.manifest.sequences)?;
            source.subset(&ds.manifest.sequences)?
        }
    };
    store.check_covers(&ds.manifest.sequences)?;
    store.write(dest)?;
    c.echo(dest)?;
    say(out, &format!("wrote {} embeddings (d_e {}) to {}\n", store.len(), store.d_e(), dest.display()))
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

pub fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut c = RunConfig::load(a.config.as_deref())?;
    set_path(&mut c.paths.dataset, a.dataset);
    set_path(&mut c.paths.embeddings, a.embeddings);
    set_path(&mut c.paths.checkpoint, a.out);
    set_path(&mut c.paths.curves, a.curves);
    set(&mut c.model.variant, a.variant);
    if let Some(s) = a.seed {
        c.model.seed = s;
        c.train.seed = s;
    }
    set(&mut c.train.precision, a.precision);
    c.validate()?;
    let ckpt = require(&c.paths.checkpoint, "--out")?.to_path_buf();
    if c.paths.curves.is_none() {
        let mut name = ckpt.file_name().unwrap_or_default().to_os_string();
        name.push(".curves.csv");
        c.paths.curves = Some(ckpt.with_file_name(name));
    }
    let ds = Dataset::open(require(&c.paths.dataset, "--dataset")?)?;
    let store = EmbeddingStore::read(require(&c.paths.embeddings, "--embeddings")?)?;
    store.check_d_e(c.model.d_e)?;
    match c.train.precision {
        Precision::F32 => train_typed::<f32>(&c, &ds, &store, out),
        Precision::F64 => train_typed::<f64>(&c, &ds, &store, out),
    }
}

fn train_typed<T: Scalar>(c: &RunConfig, ds: &Dataset, store: &EmbeddingStore, out: &mut dyn Write) -> Result<()> {
    let train_set = build_examples::<T>(&ds.split.train, store)?;
    let val_set = build_examples::<T>(&ds.split.val, store)?;
    let model = Model::<T>::init(c.model.clone())?;
    say(
        out,
        &format!(
            "variant {}  parameters {}  train {}  val {}\n",
            c.model.variant,
            model.param_count(),
            train_set.len(),
            val_set.len()
        ),
    )?;
    let mut printed = Ok(());
    let outcome = train(model, &c.train, &train_set, &val_set, &mut |r| {
        if printed.is_ok() {
            printed = say(
                out,
                &format!("epoch {:>3}  train_rmse {:.6}  val_rmse {:.6}\n", r.epoch, r.train_rmse, r.val_rmse),
            );
        }
    })?;
    printed?;
    let ckpt = c.paths.checkpoint.as_deref().expect("checked by caller");
    let curves = c.paths.curves.as_deref().expect("filled by caller");
    save_checkpoint(ckpt, &outcome.best, Some(ds.scaler()))?;
    write_curves(curves, &outcome.curves)?;
    c.echo(ckpt)?;
    say(
        out,
        &format!(
            "best epoch {}  best val_rmse {:.6}  stopped: {:?}\n",
            outcome.best_epoch, outcome.best_val_rmse, outcome.stop
        ),
    )
}

pub fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let mut c = RunConfig::load(a.config.as_deref())?;
    set_path(&mut c.paths.checkpoint, a.checkpoint);
    set_path(&mut c.paths.dataset, a.dataset);
    set_path(&mut c.paths.embeddings, a.embeddings);
    set_path(&mut c.paths.report, a.out);
    set(&mut c.eval.split, a.split);
    set(&mut c.eval.auc_policy, a.auc_policy);
    set(&mut c.eval.scale, a.scale);
    c.validate()?;
    let ckpt = require(&c.paths.checkpoint, "--checkpoint")?;
    let ds = Dataset::open(require(&c.paths.dataset, "--dataset")?)?;
    let store = EmbeddingStore::read(require(&c.paths.embeddings, "--embeddings")?)?;
    let report = match checkpoint_precision(ckpt)? {
        Precision::F32 => eval_typed::<f32>(&c, ckpt, &ds, &store)?,
        Precision::F64 => eval_typed::<f64>(&c, ckpt, &ds, &store)?,
    };
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    if let Some(path) = &c.paths.report {
        std::fs::write(path, &json).map_err(|e| Error::io(path, e))?;
        c.echo(path)?;
    }
    say(out, &json)
}

fn eval_typed<T: Scalar>(c: &RunConfig, ckpt: &Path, ds: &Dataset, store: &EmbeddingStore) -> Result<crate::metrics::EvalReport> {
    let loaded = load_checkpoint::<T>(ckpt)?;
    let model = loaded.model;
    store.check_d_e(model.config().d_e)?;
    let records = ds.split.part(c.eval.split);
    let examples = build_examples::<T>(records, store)?;
    let pred = predict_examples(&model, &examples)?;
    let target: Vec<f64> = records.iter().map(|r| r.pkd).collect();
    let mut report = evaluate(&pred, &target, &ds.scaler(), c.eval.scale, c.eval.auc_policy)?;
    report.split = Some(c.eval.split.to_string());
    report.variant = Some(model.config().variant.to_string());
    if loaded.scaler.is_some_and(|s| s != ds.scaler()) {
        report
            .warnings
            .push("checkpoint was trained against a different target scaler".into());
    }
    Ok(report)
}

#[derive(Debug, Serialize)]
struct Prediction {
    antigen_id: String,
    antibody_id: String,
    standardized: f64,
    pkd: f64,
    kd_nm: f64,
}

pub fn cmd_predict(a: PredictArgs, out: &mut dyn Write) -> Result<()> {
    let pair = encode_pair(&a.antigen, &a.heavy, &a.light)?;
    let (ag, ab) = if a.synthetic {
        let d_e = a
            .d_e
            .ok_or_else(|| Error::Config("--synthetic needs --d-e".into()))?;
        (
            synthetic_embed(&pair.antigen_id, &pair.antigen_tokens, d_e, a.seed)?,
            synthetic_embed(&pair.antibody_id, &pair.antibody_tokens, d_e, a.seed)?,
        )
    } else {
        let path = a
            .embeddings
            .as_deref()
            .ok_or_else(|| Error::Config("give --embeddings <file> or --synthetic".into()))?;
        let store = EmbeddingStore::read(path)?;
        (store.get(&pair.antigen_id)?.clone(), store.get(&pair.antibody_id)?.clone())
    };
    let (score, scaler) = match checkpoint_precision(&a.checkpoint)? {
        Precision::F32 => predict_typed::<f32>(&a.checkpoint, &ag, &ab)?,
        Precision::F64 => predict_typed::<f64>(&a.checkpoint, &ag, &ab)?,
    };
    let scaler = scaler.ok_or_else(|| {
        Error::ConfigMismatch("checkpoint carries no target scaler; cannot report pK_d".into())
    })?;
    let pkd = scaler.invert(score);
    let p = Prediction {
        antigen_id: pair.antigen_id,
        antibody_id: pair.antibody_id,
        standardized: score,
        pkd,
        kd_nm: pkd_to_kd(pkd),
    };
    let mut json = serde_json::to_string_pretty(&p)?;
    json.push('\n');
    say(out, &json)
}

fn predict_typed<T: Scalar>(
    ckpt: &Path,
    ag: &crate::embedding::EmbeddingMatrix,
    ab: &crate::embedding::EmbeddingMatrix,
) -> Result<(f64, Option<crate::dataio::Scaler>)> {
    let loaded = load_checkpoint::<T>(ckpt)?;
    let d_e = loaded.model.config().d_e;
    if ag.d_e() != d_e {
        return Err(Error::ConfigMismatch(format!(
            "embeddings have d_e {}, checkpoint expects {d_e}",
            ag.d_e()
        )));
    }
    let y = loaded
        .model
        .predict(&StreamInput::from_matrix(ag), &StreamInput::from_matrix(ab))?;
    Ok((y.as_f64(), loaded.scaler))
}

pub fn cmd_gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> Result<()> {
    let c = GradCheckConfig {
        d_e: a.d_e,
        seed: a.seed,
        precision: a.precision,
        ..GradCheckConfig::default()
    };
    let report = gradcheck::run(&c)?;
    say(out, &gradcheck::render(&report))?;
    report.ensure_passed()
}
