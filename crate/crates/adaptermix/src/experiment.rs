//! The work behind each command, independent of argument parsing.

use std::collections::BTreeMap;

use adaptermix_core::data::{generate_corpus, Corpus};
use adaptermix_core::evaluation::{self, ComparisonReport, ReportRow, SpeakerEmbedder};
use adaptermix_core::model::{closed_form_count, AdaptationStrategy, BackboneModel, ModelConfig, ParamCount, StrategyKind, TrainableMask};
use adaptermix_core::training::{train_with, LossRecord};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{frozen_digests, Checkpoint, Provenance};
use crate::config::ExperimentConfig;
use crate::{Error, Result};

pub fn gen_data(cfg: &ExperimentConfig) -> Result<Corpus> {
    Ok(generate_corpus(&cfg.corpus)?)
}

fn check_corpus(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<()> {
    if corpus.config != cfg.corpus {
        return Err(Error::config(
            "corpus",
            "corpus file was generated with a different [corpus] section",
        ));
    }
    Ok(())
}

pub struct Pretrained {
    pub model: BackboneModel,
    pub history: Vec<LossRecord>,
    pub checkpoint: Checkpoint,
}

/// Trains a fresh backbone on the pretraining speakers.
pub fn pretrain(cfg: &ExperimentConfig, corpus: &Corpus, mut on_step: impl FnMut(&LossRecord)) -> Result<Pretrained> {
    check_corpus(cfg, corpus)?;
    let mut model = BackboneModel::new(cfg.model_config(), cfg.backbone.seed)?;
    let mask = TrainableMask::all(model.store().len());
    let tc = cfg.pretrain_config();
    let history = train_with(&mut model, &corpus.pretraining(), &tc, &mask, &mut on_step)?;
    let provenance = Provenance {
        command: "pretrain".into(),
        corpus_seed: corpus.config.seed,
        train_seed: Some(tc.seed),
        steps: tc.total_steps,
        final_loss: history.last().map(|r| r.loss),
        ..Provenance::default()
    };
    let checkpoint = Checkpoint::from_model(&model, &mask, provenance);
    Ok(Pretrained {
        model,
        history,
        checkpoint,
    })
}

pub struct Adapted {
    pub model: BackboneModel,
    pub mask: TrainableMask,
    pub history: Vec<LossRecord>,
    pub checkpoint: Checkpoint,
    pub count: ParamCount,
    /// Digests of every frozen tensor, taken before training.
    pub frozen_before: BTreeMap<String, String>,
}

/// Inserts adapters per `strategy` (or none for finetune), trains on the
/// first `budget_minutes` of `speaker`'s adaptation pool and checks that
/// no frozen tensor changed.
#[allow(clippy::too_many_arguments)]
pub fn adapt(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    pretrained: &Checkpoint,
    parent_sha256: Option<String>,
    strategy: &AdaptationStrategy,
    speaker: usize,
    budget_minutes: usize,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<Adapted> {
    check_corpus(cfg, corpus)?;
    if pretrained.strategy.is_some() {
        return Err(Error::config("checkpoint", "expected a backbone checkpoint without adapters"));
    }
    if !corpus.config.new_speaker_ids().contains(&speaker) {
        return Err(Error::config(
            "speaker",
            format!("{speaker} is not a new speaker (expected {:?})", corpus.config.new_speaker_ids()),
        ));
    }
    let mut model = pretrained.to_model()?;
    if strategy.uses_adapters() {
        model.insert_adapters(strategy, cfg.adapt.seed)?;
    }
    let mask = model.build_trainable_mask(strategy, speaker)?;
    let frozen_before = frozen_digests(model.store(), &mask);
    let (train_set, _) = evaluation::speaker_split(
        corpus,
        speaker,
        corpus.config.budget_frames(budget_minutes),
        cfg.compare.heldout_utterances,
    )?;
    let tc = cfg.adapt_config();
    let history = train_with(&mut model, &train_set, &tc, &mask, &mut on_step)?;
    let frozen_after = frozen_digests(model.store(), &mask);
    if frozen_after != frozen_before {
        let changed: Vec<&String> = frozen_before
            .iter()
            .filter(|(k, v)| frozen_after.get(*k) != Some(v))
            .map(|(k, _)| k)
            .collect();
        return Err(Error::Core(adaptermix_core::Error::State(format!(
            "frozen tensors changed during adaptation: {changed:?}"
        ))));
    }
    let count = model.count_parameters(&mask);
    let provenance = Provenance {
        command: "adapt".into(),
        corpus_seed: corpus.config.seed,
        train_seed: Some(tc.seed),
        steps: tc.total_steps,
        final_loss: history.last().map(|r| r.loss),
        speaker: Some(speaker),
        budget_minutes: Some(budget_minutes),
        parent_sha256,
    };
    let checkpoint = Checkpoint::from_model(&model, &mask, provenance);
    Ok(Adapted {
        model,
        mask,
        history,
        checkpoint,
        count,
        frozen_before,
    })
}

/// The speaker embedder used by `eval` and `compare`.
pub fn embedder(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<SpeakerEmbedder> {
    Ok(SpeakerEmbedder::train(&corpus.pretraining(), &cfg.embedder)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub speaker: usize,
    pub heldout_utterances: usize,
    pub mcd_db: f64,
    pub cosine: f64,
    pub heldout_loss: f64,
}

pub fn evaluate(cfg: &ExperimentConfig, corpus: &Corpus, model: &BackboneModel, speaker: usize) -> Result<Metrics> {
    check_corpus(cfg, corpus)?;
    let emb = embedder(cfg, corpus)?;
    let (_, heldout) = evaluation::speaker_split(corpus, speaker, 1, cfg.compare.heldout_utterances)?;
    let (mcd_db, cosine, heldout_loss) = evaluation::evaluate_speaker(model, &emb, &heldout)?;
    Ok(Metrics {
        speaker,
        heldout_utterances: heldout.len(),
        mcd_db,
        cosine,
        heldout_loss,
    })
}

pub fn compare(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    pretrained: &BackboneModel,
    on_row: impl FnMut(&ReportRow),
) -> Result<ComparisonReport> {
    check_corpus(cfg, corpus)?;
    let emb = embedder(cfg, corpus)?;
    Ok(evaluation::compare_with(pretrained, corpus, &emb, &cfg.compare_config(), on_row)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamsReport {
    pub strategy: String,
    pub decoder_r: usize,
    pub variance_r: usize,
    pub n_adapters: usize,
    pub total: usize,
    pub trainable: usize,
    pub fraction: f64,
    /// Whether the count came from an instantiated model.
    pub built: bool,
}

/// Parameter accounting for `kind` under `config`. With `build` the model
/// is instantiated and its mask counted; the result must equal the closed
/// form.
pub fn params(config: &ModelConfig, cfg: &ExperimentConfig, kind: StrategyKind, build: bool) -> Result<ParamsReport> {
    let strategy = cfg.strategy.strategy(kind);
    strategy.validate(config.d_model)?;
    let closed = closed_form_count(config, &strategy);
    if build {
        let mut model = BackboneModel::new(config.clone(), cfg.backbone.seed)?;
        if strategy.uses_adapters() {
            model.insert_adapters(&strategy, cfg.adapt.seed)?;
        }
        let mask = model.build_trainable_mask(&strategy, 0)?;
        let counted = model.count_parameters(&mask);
        if counted != closed {
            return Err(Error::Core(adaptermix_core::Error::State(format!(
                "built model has {counted:?} parameters, closed form says {closed:?}"
            ))));
        }
    }
    Ok(ParamsReport {
        strategy: kind.name().into(),
        decoder_r: strategy.decoder_r,
        variance_r: strategy.variance_r,
        n_adapters: strategy.n_adapters,
        total: closed.total,
        trainable: closed.trainable,
        fraction: closed.fraction(),
        built: build,
    })
}

impl ParamsReport {
    pub fn line(&self) -> String {
        format!(
            "{:<16} r={}/{} N={} trainable {} of {} ({:.2}%)",
            self.strategy,
            self.decoder_r,
            self.variance_r,
            self.n_adapters,
            self.trainable,
            self.total,
            100.0 * self.fraction
        )
    }
}
