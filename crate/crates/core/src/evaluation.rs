//! Objective metrics and the strategy/budget comparison grid.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{split_by_budget, Corpus, Utterance};
use crate::model::{AdaptationStrategy, BackboneModel, TrainableMask};
use crate::numerics::Tensor;
use crate::params::{ParamId, ParamStore, Session};
use crate::rng::{derive_seed, Rng};
use crate::training::{adam_step, mean_loss, train, AdamState, TrainConfig};
use crate::{Error, Result};

/// `10 / ln 10`, the dB conversion factor of mel-cepstral distortion.
pub const MCD_SCALE: f64 = 10.0 / core::f64::consts::LN_10;

/// Mel-cepstral distortion in dB over the first `min(len)` frames.
pub fn mcd(reference: &Tensor, synthesized: &Tensor) -> Result<f64> {
    let (nr, dr) = reference.dims2()?;
    let (ns, ds) = synthesized.dims2()?;
    if dr != ds {
        return Err(Error::Dimension {
            op: "mcd",
            left: reference.shape().to_vec(),
            right: synthesized.shape().to_vec(),
        });
    }
    let n = nr.min(ns);
    if n == 0 || dr == 0 {
        return Err(Error::DegenerateInput("mcd needs at least one overlapping frame"));
    }
    let mut total = 0.0;
    for t in 0..n {
        let sq: f64 = reference
            .row(t)
            .iter()
            .zip(synthesized.row(t))
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        total += libm::sqrt(2.0 * sq);
    }
    Ok(MCD_SCALE * total / n as f64)
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            op: "cosine_similarity",
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|x| x * x).sum());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateInput("cosine similarity of a zero vector"));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub embedding_dim: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 64,
            steps: 400,
            lr: 1e-2,
            seed: 7,
        }
    }
}

/// Mean-pool → tanh hidden layer → speaker logits. The hidden activation
/// is the embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerEmbedder {
    store: ParamStore,
    w_hidden: ParamId,
    b_hidden: ParamId,
    w_out: ParamId,
    b_out: ParamId,
    speakers: Vec<usize>,
    mel_dim: usize,
}

fn mean_pool(frames: &Tensor) -> Result<Vec<f64>> {
    let (n, d) = frames.dims2()?;
    if n == 0 {
        return Err(Error::DegenerateInput("cannot embed an empty frame sequence"));
    }
    let mut out = vec![0.0; d];
    for t in 0..n {
        for (o, x) in out.iter_mut().zip(frames.row(t)) {
            *o += x;
        }
    }
    for o in &mut out {
        *o /= n as f64;
    }
    Ok(out)
}

impl SpeakerEmbedder {
    /// Trains on `utterances` with full-batch Adam over the pooled frames.
    pub fn train(utterances: &[Utterance], cfg: &EmbedderConfig) -> Result<Self> {
        if cfg.embedding_dim < 8 {
            return Err(Error::Config {
                field: "embedding_dim",
                reason: format!("{} is below the minimum of 8", cfg.embedding_dim),
            });
        }
        let mut speakers: Vec<usize> = utterances.iter().map(|u| u.speaker).collect();
        speakers.sort_unstable();
        speakers.dedup();
        if speakers.len() < 2 {
            return Err(Error::Contract("speaker embedder needs at least two speakers".into()));
        }
        let mel_dim = utterances[0].frames.cols();
        let class_of: BTreeMap<usize, usize> = speakers.iter().enumerate().map(|(c, &s)| (s, c)).collect();
        let labels: Vec<usize> = utterances.iter().map(|u| class_of[&u.speaker]).collect();
        let mut pooled = Vec::with_capacity(utterances.len() * mel_dim);
        for u in utterances {
            pooled.extend(mean_pool(&u.frames)?);
        }
        let inputs = Tensor::new(vec![utterances.len(), mel_dim], pooled)?;

        let h = cfg.embedding_dim;
        let k = speakers.len();
        let mut rng = Rng::derived(cfg.seed, &[0x656d626564]);
        let mut uniform = |rows: usize, cols: usize| -> Result<Tensor> {
            let bound = 1.0 / libm::sqrt(rows as f64);
            Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.uniform_range(-bound, bound)).collect())
        };
        let mut store = ParamStore::new();
        let w_hidden = store.add("w_hidden", uniform(mel_dim, h)?)?;
        let b_hidden = store.add("b_hidden", Tensor::zeros(&[h]))?;
        let w_out = store.add("w_out", uniform(h, k)?)?;
        let b_out = store.add("b_out", Tensor::zeros(&[k]))?;
        let mut model = Self {
            store,
            w_hidden,
            b_hidden,
            w_out,
            b_out,
            speakers,
            mel_dim,
        };

        let opt = TrainConfig {
            base_lr: cfg.lr,
            ..TrainConfig::desk_adapt()
        };
        let mask = TrainableMask::all(model.store.len());
        let mut state = AdamState::new(model.store.len());
        for _ in 0..cfg.steps {
            let mut s = Session::new(&model.store);
            let x = s.graph_mut().constant(inputs.clone());
            let logits = model.logits(&mut s, x)?;
            let loss = s.graph_mut().cross_entropy(logits, &labels)?;
            let grads = s.backward(loss)?;
            adam_step(&mut model.store, &grads, &mut state, &mask, cfg.lr, &opt)?;
        }
        Ok(model)
    }

    fn hidden(&self, s: &mut Session<'_>, x: crate::Var) -> Result<crate::Var> {
        let w = s.param(self.w_hidden);
        let b = s.param(self.b_hidden);
        let g = s.graph_mut();
        let z = g.matmul(x, w)?;
        let z = g.add_row(z, b)?;
        Ok(g.tanh(z))
    }

    fn logits(&self, s: &mut Session<'_>, x: crate::Var) -> Result<crate::Var> {
        let h = self.hidden(s, x)?;
        let w = s.param(self.w_out);
        let b = s.param(self.b_out);
        let g = s.graph_mut();
        let z = g.matmul(h, w)?;
        g.add_row(z, b)
    }

    pub fn embedding_dim(&self) -> usize {
        self.store.get(self.b_hidden).numel()
    }

    pub fn speakers(&self) -> &[usize] {
        &self.speakers
    }

    pub fn embed(&self, frames: &Tensor) -> Result<Vec<f64>> {
        let pooled = mean_pool(frames)?;
        if pooled.len() != self.mel_dim {
            return Err(Error::Dimension {
                op: "embed",
                left: frames.shape().to_vec(),
                right: vec![self.mel_dim],
            });
        }
        let mut s = Session::inference(&self.store);
        let x = s.graph_mut().constant(Tensor::new(vec![1, self.mel_dim], pooled)?);
        let h = self.hidden(&mut s, x)?;
        Ok(s.graph().value(h).data().to_vec())
    }

    /// Speaker id with the largest logit.
    pub fn classify(&self, frames: &Tensor) -> Result<usize> {
        let pooled = mean_pool(frames)?;
        let mut s = Session::inference(&self.store);
        let x = s.graph_mut().constant(Tensor::new(vec![1, self.mel_dim], pooled)?);
        let z = self.logits(&mut s, x)?;
        let z = s.graph().value(z).data();
        let mut best = 0;
        for (i, &v) in z.iter().enumerate() {
            if v > z[best] {
                best = i;
            }
        }
        Ok(self.speakers[best])
    }

    pub fn accuracy(&self, utterances: &[Utterance]) -> Result<f64> {
        if utterances.is_empty() {
            return Err(Error::DegenerateInput("accuracy of an empty set"));
        }
        let mut hits = 0;
        for u in utterances {
            if self.classify(&u.frames)? == u.speaker {
                hits += 1;
            }
        }
        Ok(hits as f64 / utterances.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    pub strategies: Vec<AdaptationStrategy>,
    pub budgets_minutes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub adapt: TrainConfig,
    /// Speakers to adapt to. Empty means every new speaker of the corpus.
    #[serde(default)]
    pub speakers: Vec<usize>,
    /// Utterances at the end of each speaker's list that are never trained on.
    pub heldout_utterances: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub strategy: String,
    pub budget_minutes: usize,
    pub train_frames: usize,
    pub trainable_params: usize,
    pub total_params: usize,
    pub trainable_fraction: f64,
    pub mcd_db: f64,
    pub cosine: f64,
    pub heldout_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ReportRow>,
}

impl ComparisonReport {
    pub fn row(&self, strategy: &str, budget_minutes: usize) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.strategy == strategy && r.budget_minutes == budget_minutes)
    }

    /// Fixed-width table with one line per row.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16} {:>6} {:>7} {:>10} {:>9} {:>9} {:>8} {:>12}",
            "strategy", "budget", "frames", "trainable", "fraction", "mcd_db", "cosine", "heldout_loss"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<16} {:>6} {:>7} {:>10} {:>8.2}% {:>9.4} {:>8.4} {:>12.6}",
                r.strategy,
                format!("{}min", r.budget_minutes),
                r.train_frames,
                r.trainable_params,
                100.0 * r.trainable_fraction,
                r.mcd_db,
                r.cosine,
                r.heldout_loss
            );
        }
        out
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct CellMetrics {
    mcd: f64,
    cosine: f64,
    loss: f64,
}

/// Mean MCD and reference/synthesis embedding cosine over `heldout`, using
/// predicted durations, plus the teacher-forced loss.
pub fn evaluate_speaker(model: &BackboneModel, embedder: &SpeakerEmbedder, heldout: &[Utterance]) -> Result<(f64, f64, f64)> {
    if heldout.is_empty() {
        return Err(Error::DegenerateInput("no held-out utterances"));
    }
    let mut m = CellMetrics::default();
    for u in heldout {
        let syn = model.synthesize(&u.tokens, u.speaker)?;
        m.mcd += mcd(&u.frames, &syn.frames)?;
        m.cosine += cosine_similarity(&embedder.embed(&u.frames)?, &embedder.embed(&syn.frames)?)?;
    }
    let n = heldout.len() as f64;
    Ok((m.mcd / n, m.cosine / n, mean_loss(model, heldout)?))
}

/// Adaptation set and held-out set of `speaker` at `budget_frames`.
pub fn speaker_split(corpus: &Corpus, speaker: usize, budget_frames: usize, heldout: usize) -> Result<(Vec<Utterance>, Vec<Utterance>)> {
    let utts = corpus.of_speaker(speaker);
    if heldout == 0 || heldout >= utts.len() {
        return Err(Error::Config {
            field: "heldout_utterances",
            reason: format!("{heldout} must be in 1..{}", utts.len()),
        });
    }
    let (pool, test) = utts.split_at(utts.len() - heldout);
    let (train, _) = split_by_budget(pool, budget_frames)?;
    Ok((train, test.to_vec()))
}

/// Adapts a fresh copy of `pretrained` for every (strategy, budget) cell,
/// averaging metrics over speakers and seeds. The first row is the
/// unadapted backbone, listed with budget 0.
pub fn compare(pretrained: &BackboneModel, corpus: &Corpus, embedder: &SpeakerEmbedder, cfg: &CompareConfig) -> Result<ComparisonReport> {
    compare_with(pretrained, corpus, embedder, cfg, |_| {})
}

/// [`compare`] with a callback receiving each finished row.
pub fn compare_with(
    pretrained: &BackboneModel,
    corpus: &Corpus,
    embedder: &SpeakerEmbedder,
    cfg: &CompareConfig,
    mut on_row: impl FnMut(&ReportRow),
) -> Result<ComparisonReport> {
    if cfg.seeds.is_empty() {
        return Err(Error::Config {
            field: "seeds",
            reason: "at least one seed is required".into(),
        });
    }
    if pretrained.strategy().is_some() {
        return Err(Error::State("compare needs a backbone without adapters".into()));
    }
    let speakers: Vec<usize> = if cfg.speakers.is_empty() {
        corpus.config.new_speaker_ids().collect()
    } else {
        cfg.speakers.clone()
    };
    if speakers.is_empty() {
        return Err(Error::Config {
            field: "speakers",
            reason: "no speakers to adapt to".into(),
        });
    }
    cfg.adapt.validate()?;

    let mut report = ComparisonReport::default();
    let total = pretrained.store().total_numel();
    let mut base = CellMetrics::default();
    for &spk in &speakers {
        let (_, test) = speaker_split(corpus, spk, 1, cfg.heldout_utterances)?;
        let (m, c, l) = evaluate_speaker(pretrained, embedder, &test)?;
        base.mcd += m;
        base.cosine += c;
        base.loss += l;
    }
    let ns = speakers.len() as f64;
    let row = ReportRow {
        strategy: "unadapted".into(),
        budget_minutes: 0,
        train_frames: 0,
        trainable_params: 0,
        total_params: total,
        trainable_fraction: 0.0,
        mcd_db: base.mcd / ns,
        cosine: base.cosine / ns,
        heldout_loss: base.loss / ns,
    };
    on_row(&row);
    report.rows.push(row);

    for strategy in &cfg.strategies {
        for &minutes in &cfg.budgets_minutes {
            let budget = corpus.config.budget_frames(minutes);
            let mut acc = CellMetrics::default();
            let mut frames = 0;
            let mut count = None;
            for &spk in &speakers {
                let (train_set, test) = speaker_split(corpus, spk, budget, cfg.heldout_utterances)?;
                frames += train_set.iter().map(Utterance::n_frames).sum::<usize>();
                for &seed in &cfg.seeds {
                    let cell_seed = derive_seed(seed, &[spk as u64, minutes as u64]);
                    let mut model = pretrained.clone();
                    if strategy.uses_adapters() {
                        model.insert_adapters(strategy, cell_seed)?;
                    }
                    let mask = model.build_trainable_mask(strategy, spk)?;
                    count = Some(model.count_parameters(&mask));
                    let adapt = TrainConfig {
                        seed: cell_seed,
                        ..cfg.adapt.clone()
                    };
                    train(&mut model, &train_set, &adapt, &mask)?;
                    let (m, c, l) = evaluate_speaker(&model, embedder, &test)?;
                    acc.mcd += m;
                    acc.cosine += c;
                    acc.loss += l;
                }
            }
            let runs = (speakers.len() * cfg.seeds.len()) as f64;
            let count = count.expect("at least one run");
            let row = ReportRow {
                strategy: strategy.kind.name().into(),
                budget_minutes: minutes,
                train_frames: frames / speakers.len(),
                trainable_params: count.trainable,
                total_params: count.total,
                trainable_fraction: count.fraction(),
                mcd_db: acc.mcd / runs,
                cosine: acc.cosine / runs,
                heldout_loss: acc.loss / runs,
            };
            on_row(&row);
            report.rows.push(row);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, CorpusConfig};

    #[test]
    fn mcd_examples() {
        let x = Tensor::from_rows(&[&[0.3, -1.0, 2.0], &[0.0, 0.5, 0.1]]).unwrap();
        assert_eq!(mcd(&x, &x).unwrap(), 0.0);
        let a = Tensor::from_rows(&[&[1.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[&[0.0, 0.0]]).unwrap();
        assert!((mcd(&a, &b).unwrap() - 6.141851).abs() < 1e-6);
    }

    #[test]
    fn mcd_truncates_and_rejects_empty() {
        let a = Tensor::from_rows(&[&[1.0], &[5.0]]).unwrap();
        let b = Tensor::from_rows(&[&[0.0]]).unwrap();
        assert_eq!(mcd(&a, &b).unwrap(), mcd(&b, &a).unwrap());
        assert!((mcd(&a, &b).unwrap() - MCD_SCALE * libm::sqrt(2.0)).abs() < 1e-12);
        let empty = Tensor::zeros(&[0, 1]);
        assert!(matches!(mcd(&a, &empty), Err(Error::DegenerateInput(_))));
        let wide = Tensor::zeros(&[1, 2]);
        assert!(matches!(mcd(&a, &wide), Err(Error::Dimension { .. })));
    }

    #[test]
    fn cosine_examples() {
        let a = [1.0, 2.0, -0.5];
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!((cosine_similarity(&a, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(cosine_similarity(&a, &[0.0; 3]), Err(Error::DegenerateInput(_))));
    }

    fn tiny_corpus() -> Corpus {
        generate_corpus(&CorpusConfig {
            n_speakers: 4,
            n_new_speakers: 1,
            utterances_per_speaker: 20,
            new_speaker_utterances: 30,
            ..CorpusConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn embedder_separates_speakers() {
        let corpus = tiny_corpus();
        let train_set = corpus.pretraining();
        let emb = SpeakerEmbedder::train(&train_set, &EmbedderConfig::default()).unwrap();
        assert_eq!(emb.embedding_dim(), 64);
        assert!(emb.accuracy(&train_set).unwrap() >= 0.9);

        let (mut same, mut n_same, mut cross, mut n_cross) = (0.0, 0, 0.0, 0);
        let e: Vec<Vec<f64>> = train_set.iter().map(|u| emb.embed(&u.frames).unwrap()).collect();
        for i in 0..e.len() {
            for j in i + 1..e.len() {
                let c = cosine_similarity(&e[i], &e[j]).unwrap();
                if train_set[i].speaker == train_set[j].speaker {
                    same += c;
                    n_same += 1;
                } else {
                    cross += c;
                    n_cross += 1;
                }
            }
        }
        assert!(same / n_same as f64 > cross / n_cross as f64);
    }

    #[test]
    fn embedding_ignores_frame_order() {
        let corpus = tiny_corpus();
        let emb = SpeakerEmbedder::train(
            &corpus.pretraining(),
            &EmbedderConfig {
                steps: 20,
                ..EmbedderConfig::default()
            },
        )
        .unwrap();
        let f = &corpus.utterances[0].frames;
        let rows: Vec<&[f64]> = (0..f.rows()).rev().map(|t| f.row(t)).collect();
        let reversed = Tensor::from_rows(&rows).unwrap();
        let a = emb.embed(f).unwrap();
        let b = emb.embed(&reversed).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(a, emb.embed(f).unwrap());
    }

    #[test]
    fn embedder_needs_two_speakers() {
        let corpus = tiny_corpus();
        let one = corpus.of_speaker(0);
        assert!(matches!(
            SpeakerEmbedder::train(&one, &EmbedderConfig::default()),
            Err(Error::Contract(_))
        ));
    }
}
