//! The TOML experiment configuration.
//!
//! Every seed must be written out explicitly; everything else has a desk-scale
//! default. `--set section.key=value` overrides are applied to the parsed
//! TOML tree before it is interpreted, so they obey the same schema. See
//! `docs/config.md` for the full schema.

use std::fs;
use std::path::{Path, PathBuf};

use adaptermix_core::data::CorpusConfig;
use adaptermix_core::evaluation::{CompareConfig, EmbedderConfig};
use adaptermix_core::model::{AdaptationStrategy, ModelConfig, StrategyKind};
use adaptermix_core::training::{Phase, TrainConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::{Error, Result};

/// Seeds that must appear in every configuration file.
pub const REQUIRED_SEEDS: [&str; 4] = ["backbone.seed", "corpus.seed", "pretrain.seed", "adapt.seed"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneSection {
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub seed: u64,
}

impl Default for BackboneSection {
    fn default() -> Self {
        let d = ModelConfig::desk();
        Self {
            n_encoder_layers: d.n_encoder_layers,
            n_decoder_layers: d.n_decoder_layers,
            d_model: d.d_model,
            n_heads: d.n_heads,
            d_ffn: d.d_ffn,
            seed: 0,
        }
    }
}

/// Optimizer and schedule. Omitted warmup and anneal steps follow the
/// full-length shape: warmup over 40% of the run, ×`anneal_rate` at 60%, 70%
/// and 80%.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub steps: usize,
    pub base_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup_steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub anneal_steps: Option<Vec<usize>>,
    pub anneal_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl TrainSection {
    fn preset(cfg: &TrainConfig) -> Self {
        Self {
            steps: cfg.total_steps,
            base_lr: cfg.base_lr,
            batch_size: cfg.batch_size,
            seed: cfg.seed,
            warmup_steps: None,
            anneal_steps: None,
            anneal_rate: cfg.anneal_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }

    pub fn to_train_config(&self, phase: Phase) -> TrainConfig {
        let base = TrainConfig::scaled(phase, self.steps, self.base_lr, self.batch_size, self.seed);
        TrainConfig {
            warmup_steps: self.warmup_steps.unwrap_or(base.warmup_steps),
            anneal_steps: self.anneal_steps.clone().unwrap_or(base.anneal_steps),
            anneal_rate: self.anneal_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            ..base
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        Self::preset(&TrainConfig::desk_adapt())
    }
}

fn default_pretrain() -> TrainSection {
    TrainSection::preset(&TrainConfig::desk_pretrain())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrategySection {
    pub kind: StrategyKind,
    pub decoder_r: usize,
    pub variance_r: usize,
    pub n_adapters: usize,
    pub capacity: f64,
}

impl Default for StrategySection {
    fn default() -> Self {
        Self {
            kind: StrategyKind::AdapterMix,
            decoder_r: 8,
            variance_r: 4,
            n_adapters: 4,
            capacity: 4.0,
        }
    }
}

impl StrategySection {
    /// The strategy of `kind` with this section's sizes. Single adapters
    /// always use `N = 1`, `c = 1`.
    pub fn strategy(&self, kind: StrategyKind) -> AdaptationStrategy {
        AdaptationStrategy::of_kind(kind, self.decoder_r, self.variance_r, self.n_adapters, self.capacity)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompareSection {
    pub strategies: Vec<StrategyKind>,
    pub budgets_minutes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub speakers: Vec<usize>,
    pub heldout_utterances: usize,
}

impl Default for CompareSection {
    fn default() -> Self {
        Self {
            strategies: vec![StrategyKind::Finetune, StrategyKind::SingleAdapter, StrategyKind::AdapterMix],
            budgets_minutes: vec![1, 10, 15],
            seeds: vec![0],
            speakers: Vec::new(),
            heldout_utterances: 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub backbone: BackboneSection,
    pub corpus: CorpusConfig,
    #[serde(default = "default_pretrain")]
    pub pretrain: TrainSection,
    pub adapt: TrainSection,
    pub strategy: StrategySection,
    pub compare: CompareSection,
    pub embedder: EmbedderConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs"),
            backbone: BackboneSection::default(),
            corpus: CorpusConfig::default(),
            pretrain: default_pretrain(),
            adapt: TrainSection::default(),
            strategy: StrategySection::default(),
            compare: CompareSection::default(),
            embedder: EmbedderConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Backbone dimensions; vocabulary, speakers, mel size and maximum
    /// duration come from the corpus section.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_encoder_layers: self.backbone.n_encoder_layers,
            n_decoder_layers: self.backbone.n_decoder_layers,
            d_model: self.backbone.d_model,
            n_heads: self.backbone.n_heads,
            d_ffn: self.backbone.d_ffn,
            vocab_size: self.corpus.vocab_size,
            n_speakers: self.corpus.total_speakers(),
            mel_dim: self.corpus.mel_dim,
            max_duration: self.corpus.max_duration,
        }
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        self.pretrain.to_train_config(Phase::Pretrain)
    }

    pub fn adapt_config(&self) -> TrainConfig {
        self.adapt.to_train_config(Phase::Adapt)
    }

    pub fn strategy(&self) -> AdaptationStrategy {
        self.strategy.strategy(self.strategy.kind)
    }

    pub fn compare_config(&self) -> CompareConfig {
        CompareConfig {
            strategies: self.compare.strategies.iter().map(|&k| self.strategy.strategy(k)).collect(),
            budgets_minutes: self.compare.budgets_minutes.clone(),
            seeds: self.compare.seeds.clone(),
            adapt: self.adapt_config(),
            speakers: self.compare.speakers.clone(),
            heldout_utterances: self.compare.heldout_utterances,
        }
    }

    /// Semantic checks, each naming the offending field.
    pub fn validate(&self) -> Result<()> {
        let section = |prefix: &str, r: adaptermix_core::Result<()>| -> Result<()> {
            r.map_err(|e| match e {
                adaptermix_core::Error::Config { field, reason } => Error::config(format!("{prefix}.{field}"), reason),
                other => Error::config(prefix, other),
            })
        };
        section("corpus", self.corpus.validate())?;
        section("backbone", self.model_config().validate())?;
        section("pretrain", self.pretrain_config().validate())?;
        section("adapt", self.adapt_config().validate())?;
        section("strategy", self.strategy().validate(self.backbone.d_model))?;
        if self.compare.seeds.is_empty() {
            return Err(Error::config("compare.seeds", "at least one seed is required"));
        }
        if self.compare.strategies.is_empty() {
            return Err(Error::config("compare.strategies", "at least one strategy is required"));
        }
        for &s in &self.compare.speakers {
            if !self.corpus.new_speaker_ids().contains(&s) {
                return Err(Error::config(
                    "compare.speakers",
                    format!("{s} is not a new speaker (expected {:?})", self.corpus.new_speaker_ids()),
                ));
            }
        }
        if self.compare.heldout_utterances == 0 || self.compare.heldout_utterances >= self.corpus.new_speaker_utterances {
            return Err(Error::config(
                "compare.heldout_utterances",
                format!("must be in 1..{}", self.corpus.new_speaker_utterances),
            ));
        }
        for &m in &self.compare.budgets_minutes {
            if m == 0 {
                return Err(Error::config("compare.budgets_minutes", "budgets must be positive"));
            }
        }
        if self.embedder.embedding_dim < 8 {
            return Err(Error::config("embedder.embedding_dim", "must be at least 8"));
        }
        Ok(())
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, overrides)
    }

    /// Parses `text`, applies `key=value` overrides, checks for unknown keys
    /// and missing seeds, then validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: Table = text.parse().map_err(|e: toml::de::Error| {
            let field = e.span().map(|s| key_at(text, s.start)).unwrap_or_default();
            Error::config(if field.is_empty() { "<file>".into() } else { field }, one_line(e.message()))
        })?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        for seed in REQUIRED_SEEDS {
            if lookup(&table, seed).is_none() {
                return Err(Error::config(seed, "missing; every seed must be set explicitly"));
            }
        }
        if let Some(Value::Table(pre)) = table.get_mut("pretrain") {
            // Keys missing from a partial [pretrain] table take the pretraining
            // preset, not the adaptation one `TrainSection::default` gives.
            if let Value::Table(preset) = Value::try_from(default_pretrain()).expect("preset serializes") {
                for (k, v) in preset {
                    pre.entry(k).or_insert(v);
                }
            }
        }
        let cfg: ExperimentConfig = Value::Table(table.clone())
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(field_of(&e), one_line(e.message())))?;
        let canonical = Value::try_from(&cfg).expect("config serializes");
        if let Some(unknown) = first_unknown(&table, &canonical, "") {
            return Err(Error::config(unknown, "unknown field"));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn field_of(e: &toml::de::Error) -> String {
    let msg = e.message();
    if let Some(rest) = msg.strip_prefix("missing field `") {
        return rest.split('`').next().unwrap_or_default().to_string();
    }
    if let Some(rest) = msg.split("unknown variant `").nth(1) {
        return format!("variant `{}`", rest.split('`').next().unwrap_or_default());
    }
    "<config>".into()
}

/// `section.key` of the line containing byte `offset` of `src`.
fn key_at(src: &str, offset: usize) -> String {
    let before = &src[..offset.min(src.len())];
    let line_start = before.rfind('\n').map_or(0, |i| i + 1);
    let line = src[line_start..].lines().next().unwrap_or("");
    let key = line.split('=').next().unwrap_or("").trim();
    let section = before[..line_start]
        .lines()
        .rev()
        .find_map(|l| {
            let l = l.trim();
            l.strip_prefix('[').and_then(|r| r.strip_suffix(']')).map(str::to_string)
        });
    match (section, key.is_empty() || key.starts_with('[')) {
        (Some(s), false) => format!("{s}.{key}"),
        (None, false) => key.to_string(),
        (Some(s), true) => s,
        (None, true) => String::new(),
    }
}

fn lookup<'a>(table: &'a Table, dotted: &str) -> Option<&'a Value> {
    let mut parts = dotted.split('.');
    let mut cur = table.get(parts.next()?)?;
    for p in parts {
        cur = cur.as_table()?.get(p)?;
    }
    Some(cur)
}

/// Applies `a.b.c=value`. The value is read as a TOML literal, falling back
/// to a bare string.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(spec, "override must look like section.key=value"))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "empty path segment in override"));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{p}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn first_unknown(given: &Table, known: &Value, prefix: &str) -> Option<String> {
    let known = known.as_table()?;
    for (k, v) in given {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match known.get(k) {
            None => return Some(path),
            Some(kv) => {
                if let (Value::Table(g), Value::Table(_)) = (v, kv) {
                    if let Some(u) = first_unknown(g, kv, &path) {
                        return Some(u);
                    }
                }
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "
[backbone]
seed = 1
[corpus]
seed = 2024
[pretrain]
seed = 3
[adapt]
seed = 4
";

    fn field(r: Result<ExperimentConfig>) -> String {
        match r {
            Err(Error::Config { field, .. }) => field,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = ExperimentConfig::from_toml(MINIMAL, &[]).unwrap();
        assert_eq!(cfg.backbone.seed, 1);
        assert_eq!(cfg.pretrain.steps, TrainConfig::desk_pretrain().total_steps);
        assert_eq!(cfg.adapt.steps, TrainConfig::desk_adapt().total_steps);
        assert_eq!(cfg.model_config().n_speakers, cfg.corpus.total_speakers());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ExperimentConfig::from_toml(MINIMAL, &["adapt.warmup_steps=10".into()]).unwrap();
        let again = ExperimentConfig::from_toml(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn missing_seed_is_named() {
        let text = MINIMAL.replace("seed = 3", "");
        assert_eq!(field(ExperimentConfig::from_toml(&text, &[])), "pretrain.seed");
    }

    #[test]
    fn unknown_and_invalid_fields_are_named() {
        let text = format!("{MINIMAL}\n[strategy]\ncapasity = 2.0\n");
        assert_eq!(field(ExperimentConfig::from_toml(&text, &[])), "strategy.capasity");
        let bad = ExperimentConfig::from_toml(MINIMAL, &["adapt.anneal_rate=1.5".into()]);
        assert_eq!(field(bad), "adapt.anneal_rate");
        let bad = ExperimentConfig::from_toml(MINIMAL, &["strategy.capacity=0".into()]);
        assert_eq!(field(bad), "strategy.capacity");
        let bad = ExperimentConfig::from_toml(MINIMAL, &["adapt.steps=\"many\"".into()]);
        assert!(matches!(bad, Err(Error::Config { .. })));
    }

    #[test]
    fn syntax_errors_point_at_the_line() {
        let text = "[backbone]\nseed = = 1\n";
        assert_eq!(field(ExperimentConfig::from_toml(text, &[])), "backbone.seed");
    }

    #[test]
    fn overrides_take_precedence() {
        let cfg = ExperimentConfig::from_toml(
            MINIMAL,
            &["adapt.steps=20".into(), "strategy.kind=single_adapter".into(), "output_dir=out/x".into()],
        )
        .unwrap();
        assert_eq!(cfg.adapt.steps, 20);
        assert_eq!(cfg.strategy.kind, StrategyKind::SingleAdapter);
        assert_eq!(cfg.output_dir, PathBuf::from("out/x"));
    }
}
