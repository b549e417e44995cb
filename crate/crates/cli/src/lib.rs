//! Command-line surface: dataset generation, bank building, training,
//! synthesis, evaluation and ablation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use foleygen::data::{generate_synthetic_corpus, load_bank, save_bank, Checkpoint, DatasetManifest, RunConfig, Split};
use foleygen::dsp::{normalized_cross_correlation, wav_write};
use foleygen::eval::{
    ablation_run, classification_report, model_retrieval, parse_ablation_grid, synthesis_report, NccReport, Table,
};
use foleygen::pipeline::{
    bank_from_clips, prepare_clip, prepare_dataset, split_refs, synthesize_prediction, Model, ModelKind,
};
use foleygen::synth::ClassSpectrogramBank;
use foleygen::Error;
use serde_json::{json, Value};

#[derive(Debug, Parser)]
#[command(
    name = "foleygen",
    version,
    about = "Generate Foley soundtracks for silent video clips"
)]
pub struct Cli {
    /// Print machine-readable JSON metrics instead of text.
    #[arg(long, global = true)]
    pub json: bool,
    /// Report per-epoch progress on stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Fslstm,
    Trn,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Fslstm => ModelKind::FsLstm,
            ModelArg::Trn => ModelKind::Trn,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Confusion,
    Ncc,
    Retrieval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TableFormat {
    Text,
    Csv,
    Tsv,
}

#[derive(Debug, Clone, clap::Args)]
pub struct ConfigArgs {
    /// Run configuration file (`[section]` headers with `key = value` lines).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one setting, e.g. `--set train.epochs=50`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> foleygen::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the procedural audio-visual corpus and its manifest.
    GenDataset {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        clips_per_class: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 12)]
        classes: usize,
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
    },
    /// Average the training clips' spectrograms per class.
    BuildBank {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train Model 1 (`fslstm`) or Model 2 (`trn`) and write a checkpoint.
    Train {
        #[arg(long, value_enum)]
        model: ModelArg,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Class bank for Model 1; rebuilt from the manifest when absent.
        #[arg(long)]
        bank: Option<PathBuf>,
        /// Also write the metrics JSON to this file.
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Synthesize the soundtrack of one clip.
    Synth {
        #[arg(long, value_enum)]
        model: Option<ModelArg>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        clip: String,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        bank: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long, value_enum)]
        mode: EvalMode,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = TableFormat::Text)]
        format: TableFormat,
        /// Directory for table files (CSV and TSV alongside the text).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Train every grid variant over several seeds and rank them.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = TableFormat::Text)]
        format: TableFormat,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::UnknownClip(_) => 2,
        _ => 1,
    }
}

/// One-line rendering of an error for stderr.
pub fn diagnostic(e: &Error) -> String {
    let msg = e.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
    format!("foleygen: {msg}")
}

fn render(table: &Table, format: TableFormat) -> String {
    match format {
        TableFormat::Text => table.to_aligned(),
        TableFormat::Csv => table.to_csv(),
        TableFormat::Tsv => table.to_tsv(),
    }
}

fn write_tables(dir: &Path, stem: &str, table: &Table) -> foleygen::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{stem}.txt")), table.to_aligned())?;
    fs::write(dir.join(format!("{stem}.csv")), table.to_csv())?;
    fs::write(dir.join(format!("{stem}.tsv")), table.to_tsv())?;
    Ok(())
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json values always serialize");
    s.push('\n');
    s
}

fn load_model(ckpt: &Path, expected: Option<ModelArg>) -> foleygen::Result<Model> {
    let ck = Checkpoint::load(ckpt)?;
    let model = Model::from_checkpoint(&ck)?;
    if let Some(m) = expected {
        let kind = ModelKind::from(m);
        if kind != model.kind {
            return Err(Error::Config(format!(
                "checkpoint holds a {} model, not {}",
                model.kind, kind
            )));
        }
    }
    Ok(model)
}

fn bank_for(
    bank: Option<&Path>,
    clips: &[foleygen::pipeline::PreparedClip],
    cfg: &RunConfig,
) -> foleygen::Result<ClassSpectrogramBank> {
    let bank = match bank {
        Some(p) => load_bank(p)?,
        None => bank_from_clips(clips, cfg)?,
    };
    let names: Vec<&str> = bank.entries.iter().map(|e| e.name.as_str()).collect();
    if names != cfg.classes.iter().map(String::as_str).collect::<Vec<_>>() || bank.num_bins() != cfg.num_bins() {
        return Err(Error::Config(
            "bank does not match the configured classes or bins".into(),
        ));
    }
    Ok(bank)
}

fn ncc_json(r: &NccReport) -> Value {
    json!({
        "classes": r.classes.iter().map(|c| json!({"class": c.class, "pairs": c.pairs, "mean": c.mean})).collect::<Vec<_>>(),
        "grand_average": r.grand_average,
    })
}

/// Runs one command and returns what it prints on stdout.
pub fn run(cli: &Cli) -> foleygen::Result<String> {
    let mut out = String::new();
    match &cli.command {
        Command::GenDataset {
            out: dir,
            clips_per_class,
            seed,
            classes,
            test_fraction,
        } => {
            let m = generate_synthetic_corpus(dir, *classes, *clips_per_class, *seed, *test_fraction)?;
            let train = m.split(Split::Train).count();
            let test = m.split(Split::Test).count();
            let path = dir.join("manifest.tsv");
            if cli.json {
                out = pretty(&json!({
                    "clips": m.entries.len(), "train": train, "test": test,
                    "classes": m.labels().len(), "manifest": path.display().to_string(),
                }));
            } else {
                let _ = writeln!(
                    out,
                    "wrote {} clips ({train} train, {test} test) to {}",
                    m.entries.len(),
                    path.display()
                );
            }
        }
        Command::BuildBank {
            manifest,
            out: path,
            cfg,
        } => {
            let cfg = cfg.load()?;
            let m = DatasetManifest::load(manifest)?;
            let clips = prepare_dataset(&m, &cfg)?;
            let bank = bank_from_clips(&clips, &cfg)?;
            save_bank(path, &bank)?;
            if cli.json {
                out = pretty(&json!({
                    "classes": bank.num_classes(), "frames": bank.num_frames(), "bins": bank.num_bins(),
                    "clips": bank.entries.iter().map(|e| json!({"class": e.name, "clips": e.clip_count})).collect::<Vec<_>>(),
                }));
            } else {
                let _ = writeln!(
                    out,
                    "bank of {} classes x {} frames x {} bins written to {}",
                    bank.num_classes(),
                    bank.num_frames(),
                    bank.num_bins(),
                    path.display()
                );
            }
        }
        Command::Train {
            model,
            manifest,
            out: path,
            bank,
            metrics,
            cfg,
        } => {
            let cfg = cfg.load()?;
            let kind = ModelKind::from(*model);
            let m = DatasetManifest::load(manifest)?;
            let clips = prepare_dataset(&m, &cfg)?;
            let bank = match kind {
                ModelKind::FsLstm => Some(bank_for(bank.as_deref(), &clips, &cfg)?),
                ModelKind::Trn => None,
            };
            let mut net = Model::new(kind, &cfg)?;
            let train = split_refs(&clips, Split::Train);
            let test = split_refs(&clips, Split::Test);
            let verbose = cli.verbose;
            let history = net.train(&train, bank.as_ref(), |s| {
                if verbose {
                    eprintln!(
                        "epoch {:>3}  loss {:.4}  train acc {:.3}",
                        s.epoch, s.loss, s.train_accuracy
                    );
                }
            })?;
            net.to_checkpoint().save(path)?;
            let train_report = classification_report(&net, &train)?;
            let test_report = if test.is_empty() {
                None
            } else {
                Some(classification_report(&net, &test)?)
            };
            let last = history.last().copied();
            let value = json!({
                "model": kind.name(),
                "config_hash": cfg.hash(),
                "seed": cfg.seed,
                "epochs_run": history.len(),
                "steps": net.step,
                "final_loss": last.map(|s| s.loss),
                "train_accuracy": train_report.accuracy,
                "train_log_loss": train_report.log_loss,
                "test_accuracy": test_report.as_ref().map(|r| r.accuracy),
                "test_log_loss": test_report.as_ref().map(|r| r.log_loss),
                "history": history.iter().map(|s| json!({"epoch": s.epoch, "loss": s.loss, "train_accuracy": s.train_accuracy})).collect::<Vec<_>>(),
            });
            if let Some(p) = metrics {
                fs::write(p, pretty(&value))?;
            }
            if cli.json {
                out = pretty(&value);
            } else {
                let _ = writeln!(
                    out,
                    "{} trained for {} epochs: train accuracy {:.3}, test accuracy {}; checkpoint {}",
                    kind,
                    history.len(),
                    train_report.accuracy,
                    test_report.map_or("n/a".to_string(), |r| format!("{:.3}", r.accuracy)),
                    path.display()
                );
            }
        }
        Command::Synth {
            model,
            ckpt,
            clip,
            manifest,
            out: path,
            bank,
        } => {
            let m = DatasetManifest::load(manifest)?;
            let entry = m.find(clip)?.clone();
            let net = load_model(ckpt, *model)?;
            let cfg = net.config.clone();
            let bank = match bank {
                Some(_) => bank_for(bank.as_deref(), &[], &cfg)?,
                None => bank_for(None, &prepare_dataset(&m, &cfg)?, &cfg)?,
            };
            let prepared = prepare_clip(&m, &entry, &cfg)?;
            let pred = net.predict(&[&prepared])?.remove(0);
            let audio = synthesize_prediction(&pred, &bank, &cfg)?;
            wav_write(&audio, path)?;
            let ncc = normalized_cross_correlation(&prepared.audio, &audio).ok();
            let predicted = &cfg.classes[pred.class];
            if cli.json {
                out = pretty(&json!({
                    "clip": entry.clip_id, "true_class": entry.label, "predicted_class": predicted,
                    "confidence": pred.probabilities[pred.class], "ncc": ncc,
                    "samples": audio.len(), "sample_rate": audio.sample_rate, "wav": path.display().to_string(),
                }));
            } else {
                let _ = writeln!(
                    out,
                    "{}: predicted {} (true {}), {} samples written to {}",
                    entry.clip_id,
                    predicted,
                    entry.label,
                    audio.len(),
                    path.display()
                );
            }
        }
        Command::Eval {
            mode,
            manifest,
            ckpt,
            bank,
            format,
            out_dir,
        } => {
            let m = DatasetManifest::load(manifest)?;
            let net = load_model(ckpt, None)?;
            let cfg = net.config.clone();
            let clips = prepare_dataset(&m, &cfg)?;
            let train = split_refs(&clips, Split::Train);
            let test = split_refs(&clips, Split::Test);
            match mode {
                EvalMode::Confusion => {
                    let r = classification_report(&net, &test)?;
                    let raw = r.confusion.table(&cfg.classes, false);
                    let norm = r.confusion.table(&cfg.classes, true);
                    if let Some(d) = out_dir {
                        write_tables(d, "confusion_counts", &raw)?;
                        write_tables(d, "confusion_normalized", &norm)?;
                    }
                    if cli.json {
                        out = pretty(&json!({
                            "model": net.kind.name(), "clips": test.len(),
                            "accuracy": r.accuracy, "log_loss": r.log_loss,
                            "classes": cfg.classes, "counts": r.confusion.counts, "normalized": r.confusion.normalized,
                        }));
                    } else {
                        let _ = writeln!(
                            out,
                            "{} on {} test clips: accuracy {:.4}, log loss {:.4}\n",
                            net.kind,
                            test.len(),
                            r.accuracy,
                            r.log_loss
                        );
                        out.push_str(&render(&raw, *format));
                        out.push('\n');
                        out.push_str(&render(&norm, *format));
                    }
                }
                EvalMode::Ncc => {
                    let bank = bank_for(bank.as_deref(), &clips, &cfg)?;
                    let r = synthesis_report(&net, &test, &bank)?;
                    let (pt, tt) = (r.predicted.table(), r.true_residual.table());
                    if let Some(d) = out_dir {
                        write_tables(d, "ncc_predicted", &pt)?;
                        write_tables(d, "ncc_true_residual", &tt)?;
                    }
                    if cli.json {
                        out = pretty(&json!({
                            "model": net.kind.name(), "clips": test.len(),
                            "predicted": ncc_json(&r.predicted), "true_residual": ncc_json(&r.true_residual),
                        }));
                    } else {
                        out.push_str("model syntheses\n");
                        out.push_str(&render(&pt, *format));
                        out.push_str("\ntrue-residual syntheses\n");
                        out.push_str(&render(&tt, *format));
                    }
                }
                EvalMode::Retrieval => {
                    let bank = bank_for(bank.as_deref(), &clips, &cfg)?;
                    let r = model_retrieval(&net, &train, &test, &bank)?;
                    let mut t = Table::new(&["input", "clips", "top1_accuracy"]);
                    t.push(vec![
                        "synthesized".into(),
                        r.synthesized_count.to_string(),
                        format!("{:.4}", r.synthesized_accuracy),
                    ]);
                    t.push(vec![
                        "real held-out".into(),
                        r.real_count.to_string(),
                        format!("{:.4}", r.real_accuracy),
                    ]);
                    if let Some(d) = out_dir {
                        write_tables(d, "retrieval", &t)?;
                    }
                    if cli.json {
                        out = pretty(&json!({
                            "model": net.kind.name(),
                            "synthesized_accuracy": r.synthesized_accuracy, "real_accuracy": r.real_accuracy,
                            "synthesized_clips": r.synthesized_count, "real_clips": r.real_count,
                            "classifier_epochs": r.epochs_run,
                        }));
                    } else {
                        out.push_str(&render(&t, *format));
                    }
                }
            }
        }
        Command::Ablate {
            grid,
            seeds,
            manifest,
            format,
            cfg,
        } => {
            let base = cfg.load()?;
            let text = fs::read_to_string(grid)?;
            let variants = parse_ablation_grid(&text)?;
            let m = DatasetManifest::load(manifest)?;
            if *seeds == 0 {
                return Err(Error::InvalidArgument("--seeds must be at least 1".into()));
            }
            let seed_list: Vec<u64> = (0..*seeds).map(|i| base.seed + i).collect();
            let table = ablation_run(&variants, &base, &m, &seed_list, |n| eprintln!("foleygen: {n}"))?;
            if cli.json {
                out = pretty(&json!({
                    "seeds": table.seeds,
                    "ranked": table.ranked().iter().map(|r| json!({
                        "variant": r.name, "model": r.kind.name(), "mean_accuracy": r.mean, "accuracies": r.accuracies,
                    })).collect::<Vec<_>>(),
                    "skipped": table.skipped.iter().map(|(n, why)| json!({"variant": n, "reason": why})).collect::<Vec<_>>(),
                }));
            } else {
                out.push_str(&render(&table.table(), *format));
            }
        }
    }
    Ok(out)
}
