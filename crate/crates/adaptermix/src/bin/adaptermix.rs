use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adaptermix::checkpoint::{file_sha256, Checkpoint};
use adaptermix::config::ExperimentConfig;
use adaptermix::experiment::{self, ParamsReport};
use adaptermix::{corpus_io, records, Error};
use adaptermix_core::data::Corpus;
use adaptermix_core::model::{ModelConfig, StrategyKind};
use adaptermix_core::training::LossRecord;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "adaptermix", version, about = "Speaker adaptation with mixtures of adapters on a toy TTS backbone")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Override a configuration value, e.g. `--set adapt.steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Suppress progress output on stderr.
    #[arg(short, long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output file [default: <output_dir>/corpus.jsonl]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the backbone on the pretraining speakers.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Corpus file; regenerated from the config when omitted.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// [default: <output_dir>/backbone.json]
        #[arg(long)]
        out: Option<PathBuf>,
        /// [default: <output_dir>/pretrain_history.jsonl]
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Insert adapters (or not, for finetune) and adapt to one new speaker.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Pretrained backbone checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Strategy kind [default: strategy.kind from the config]
        #[arg(long)]
        strategy: Option<String>,
        /// New speaker id [default: first new speaker]
        #[arg(long)]
        speaker: Option<usize>,
        /// Adaptation budget in minutes [default: first of compare.budgets_minutes]
        #[arg(long)]
        budget: Option<usize>,
        /// [default: <output_dir>/adapted_<strategy>_s<speaker>_<budget>min.json]
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Held-out metrics of one checkpoint for one speaker.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Speaker id [default: the checkpoint's adapted speaker, else the first new speaker]
        #[arg(long)]
        speaker: Option<usize>,
        /// Also write the metrics as one JSON line.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Adapt every (strategy, budget) cell and write the comparison report.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Pretrained backbone checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// [default: <output_dir>/report.jsonl]
        #[arg(long)]
        out: Option<PathBuf>,
        /// [default: <output_dir>/report.txt]
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Print parameter counts and trainable fractions.
    Params {
        #[command(flatten)]
        common: Common,
        /// Strategy kind; all three when omitted.
        #[arg(long)]
        strategy: Option<String>,
        /// Use the full-size dimensions (4/6 layers, d_model 256) instead of the config's.
        #[arg(long)]
        paper_dims: bool,
        /// Count from the closed form only, without building the model.
        #[arg(long)]
        closed_form: bool,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig, Error> {
    ExperimentConfig::load(&c.config, &c.overrides)
}

fn load_corpus(cfg: &ExperimentConfig, path: Option<&Path>) -> Result<Corpus, Error> {
    match path {
        Some(p) => corpus_io::load(p),
        None => experiment::gen_data(cfg),
    }
}

fn parse_kind(s: &str) -> Result<StrategyKind, Error> {
    StrategyKind::parse(s).ok_or_else(|| Error::Config {
        field: "strategy".into(),
        reason: format!("unknown strategy `{s}` (expected finetune, single_adapter or adapter_mix)"),
    })
}

fn progress(quiet: bool, label: &'static str, total: usize) -> impl FnMut(&LossRecord) {
    let every = (total / 20).max(1);
    move |r: &LossRecord| {
        if !quiet && (r.step.is_multiple_of(every) || r.step == total) {
            eprintln!("{label} step {:>6}/{total} lr {:.3e} loss {:.6}", r.step, r.lr, r.loss);
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData { common, out } => {
            let cfg = load_config(&common)?;
            let corpus = experiment::gen_data(&cfg)?;
            let out = out.unwrap_or_else(|| cfg.output_dir.join("corpus.jsonl"));
            corpus_io::save(&corpus, &out)?;
            println!("wrote {} utterances to {}", corpus.utterances.len(), out.display());
        }
        Command::Pretrain {
            common,
            corpus,
            out,
            history,
        } => {
            let cfg = load_config(&common)?;
            let corpus = load_corpus(&cfg, corpus.as_deref())?;
            let steps = cfg.pretrain.steps;
            let done = experiment::pretrain(&cfg, &corpus, progress(common.quiet, "pretrain", steps))?;
            let out = out.unwrap_or_else(|| cfg.output_dir.join("backbone.json"));
            let history = history.unwrap_or_else(|| cfg.output_dir.join("pretrain_history.jsonl"));
            done.checkpoint.save(&out)?;
            records::save_history(&done.history, &history)?;
            let first = done.history.first().map_or(f64::NAN, |r| r.loss);
            let last = done.history.last().map_or(f64::NAN, |r| r.loss);
            println!("pretrained {steps} steps, loss {first:.6} -> {last:.6}; wrote {}", out.display());
        }
        Command::Adapt {
            common,
            corpus,
            checkpoint,
            strategy,
            speaker,
            budget,
            out,
            history,
        } => {
            let cfg = load_config(&common)?;
            let corpus = load_corpus(&cfg, corpus.as_deref())?;
            let parent = Checkpoint::load(&checkpoint)?;
            let kind = match strategy {
                Some(s) => parse_kind(&s)?,
                None => cfg.strategy.kind,
            };
            let strategy = cfg.strategy.strategy(kind);
            let speaker = speaker.unwrap_or(cfg.corpus.n_speakers);
            let budget = budget
                .or_else(|| cfg.compare.budgets_minutes.first().copied())
                .ok_or_else(|| Error::Config {
                    field: "compare.budgets_minutes".into(),
                    reason: "no budget given".into(),
                })?;
            let steps = cfg.adapt.steps;
            let done = experiment::adapt(
                &cfg,
                &corpus,
                &parent,
                Some(file_sha256(&checkpoint)?),
                &strategy,
                speaker,
                budget,
                progress(common.quiet, "adapt", steps),
            )?;
            let name = format!("adapted_{}_s{speaker}_{budget}min", kind.name());
            let out = out.unwrap_or_else(|| cfg.output_dir.join(format!("{name}.json")));
            let history = history.unwrap_or_else(|| cfg.output_dir.join(format!("{name}_history.jsonl")));
            done.checkpoint.save(&out)?;
            records::save_history(&done.history, &history)?;
            let parent_digests = parent.digests();
            let unchanged = done
                .frozen_before
                .iter()
                .filter(|(k, v)| parent_digests.get(*k) == Some(v))
                .count();
            println!(
                "adapted {} to speaker {speaker} on {budget}min: trainable {} of {} ({:.2}%); {unchanged} frozen backbone tensors match the parent digests; wrote {}",
                kind.name(),
                done.count.trainable,
                done.count.total,
                100.0 * done.count.fraction(),
                out.display()
            );
        }
        Command::Eval {
            common,
            corpus,
            checkpoint,
            speaker,
            out,
        } => {
            let cfg = load_config(&common)?;
            let corpus = load_corpus(&cfg, corpus.as_deref())?;
            let ck = Checkpoint::load(&checkpoint)?;
            let model = ck.to_model()?;
            let speaker = speaker
                .or(ck.provenance.speaker)
                .unwrap_or(cfg.corpus.n_speakers);
            let m = experiment::evaluate(&cfg, &corpus, &model, speaker)?;
            println!(
                "speaker {} ({} held-out utterances): mcd {:.4} dB, cosine {:.4}, held-out loss {:.6}",
                m.speaker, m.heldout_utterances, m.mcd_db, m.cosine, m.heldout_loss
            );
            if let Some(p) = out {
                let line = records::jsonl(std::slice::from_ref(&m));
                std::fs::write(&p, line).map_err(|e| Error::Io { path: p, source: e })?;
            }
        }
        Command::Compare {
            common,
            corpus,
            checkpoint,
            out,
            table,
        } => {
            let cfg = load_config(&common)?;
            let corpus = load_corpus(&cfg, corpus.as_deref())?;
            let model = Checkpoint::load(&checkpoint)?.to_model()?;
            let quiet = common.quiet;
            let report = experiment::compare(&cfg, &corpus, &model, |r| {
                if !quiet {
                    eprintln!("{} {}min: held-out loss {:.6}", r.strategy, r.budget_minutes, r.heldout_loss);
                }
            })?;
            let out = out.unwrap_or_else(|| cfg.output_dir.join("report.jsonl"));
            let table = table.unwrap_or_else(|| cfg.output_dir.join("report.txt"));
            records::save_report(&report, &out, Some(&table))?;
            print!("{}", report.to_table());
        }
        Command::Params {
            common,
            strategy,
            paper_dims,
            closed_form,
        } => {
            let mut overrides = Vec::new();
            if paper_dims {
                let p = ModelConfig::paper_dims();
                overrides.extend([
                    format!("backbone.n_encoder_layers={}", p.n_encoder_layers),
                    format!("backbone.n_decoder_layers={}", p.n_decoder_layers),
                    format!("backbone.d_model={}", p.d_model),
                    format!("backbone.n_heads={}", p.n_heads),
                    format!("backbone.d_ffn={}", p.d_ffn),
                ]);
            }
            overrides.extend(common.overrides.iter().cloned());
            let cfg = ExperimentConfig::load(&common.config, &overrides)?;
            let config = if paper_dims {
                ModelConfig::paper_dims()
            } else {
                cfg.model_config()
            };
            let kinds = match strategy {
                Some(s) => vec![parse_kind(&s)?],
                None => vec![StrategyKind::Finetune, StrategyKind::SingleAdapter, StrategyKind::AdapterMix],
            };
            for kind in kinds {
                let r: ParamsReport = experiment::params(&config, &cfg, kind, !closed_form)?;
                println!("{}", r.line());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
