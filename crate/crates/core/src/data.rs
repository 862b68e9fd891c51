//! Deterministic synthetic multi-speaker corpus.
//!
//! Every token id owns a base frame pattern, a base duration and a base
//! pitch. A speaker is a hidden affine map `A_s·x + b_s` on frames together
//! with an integer duration offset and a pitch offset. Frames of an
//! utterance are the token patterns (with a within-token ramp, a trace of
//! the previous token and a pitch term) pushed through the speaker's map.
//!
//! Pretraining speakers use ids `0..n_speakers`; adaptation ("new")
//! speakers follow them, so their ids never occur in the pretraining split.
//! All randomness derives from the corpus seed through per-purpose
//! sub-streams.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    /// Speakers seen during pretraining.
    pub n_speakers: usize,
    /// Held-back speakers used only for adaptation.
    pub n_new_speakers: usize,
    pub utterances_per_speaker: usize,
    pub new_speaker_utterances: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub vocab_size: usize,
    pub mel_dim: usize,
    pub max_duration: usize,
    /// Frames standing in for one minute of speech.
    pub frames_per_minute: usize,
    /// Adaptation budgets in minutes.
    pub budgets_minutes: Vec<usize>,
    /// Standard deviation of additive frame noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_speakers: 10,
            n_new_speakers: 2,
            utterances_per_speaker: 80,
            new_speaker_utterances: 360,
            min_tokens: 4,
            max_tokens: 10,
            vocab_size: 40,
            mel_dim: 16,
            max_duration: 4,
            frames_per_minute: 250,
            budgets_minutes: vec![1, 10, 15],
            noise: 0.05,
            seed: 2024,
        }
    }
}

impl CorpusConfig {
    pub fn total_speakers(&self) -> usize {
        self.n_speakers + self.n_new_speakers
    }

    pub fn new_speaker_ids(&self) -> core::ops::Range<usize> {
        self.n_speakers..self.total_speakers()
    }

    pub fn budget_frames(&self, minutes: usize) -> usize {
        minutes * self.frames_per_minute
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_speakers", self.n_speakers),
            ("utterances_per_speaker", self.utterances_per_speaker),
            ("min_tokens", self.min_tokens),
            ("vocab_size", self.vocab_size),
            ("max_duration", self.max_duration),
            ("frames_per_minute", self.frames_per_minute),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::Config {
                    field,
                    reason: "must be at least 1".into(),
                });
            }
        }
        if self.mel_dim < 2 {
            return Err(Error::Config {
                field: "mel_dim",
                reason: "must be at least 2".into(),
            });
        }
        if self.max_tokens < self.min_tokens {
            return Err(Error::Config {
                field: "max_tokens",
                reason: format!("{} < min_tokens {}", self.max_tokens, self.min_tokens),
            });
        }
        if self.budgets_minutes.contains(&0) {
            return Err(Error::Config {
                field: "budgets_minutes",
                reason: "budgets must be positive".into(),
            });
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config {
                field: "noise",
                reason: format!("{} is not a non-negative number", self.noise),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerProfile {
    pub id: usize,
    /// `[mel×mel]`, `I + R` with `‖R‖_F = 0.5`, so singular values lie in
    /// `[0.5, 1.5]` and the condition number is at most 3.
    pub transform: Tensor,
    pub offset: Vec<f64>,
    pub duration_bias: i64,
    pub pitch_offset: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub speaker: usize,
    pub tokens: Vec<usize>,
    pub durations: Vec<usize>,
    pub pitch: Vec<f64>,
    /// `[T×mel]` with `T = Σ durations`.
    pub frames: Tensor,
}

impl Utterance {
    pub fn n_frames(&self) -> usize {
        self.frames.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub speakers: Vec<SpeakerProfile>,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn of_speaker(&self, speaker: usize) -> Vec<Utterance> {
        self.utterances.iter().filter(|u| u.speaker == speaker).cloned().collect()
    }

    /// Utterances of the pretraining speakers.
    pub fn pretraining(&self) -> Vec<Utterance> {
        self.utterances
            .iter()
            .filter(|u| u.speaker < self.config.n_speakers)
            .cloned()
            .collect()
    }
}

struct TokenTable {
    pattern: Vec<Vec<f64>>,
    ramp: Vec<Vec<f64>>,
    duration: Vec<usize>,
    pitch: Vec<f64>,
    pitch_direction: Vec<f64>,
}

const STREAM_TOKENS: u64 = 1;
const STREAM_SPEAKER: u64 = 2;
const STREAM_UTTERANCES: u64 = 3;

fn token_table(cfg: &CorpusConfig) -> TokenTable {
    let mut rng = Rng::derived(cfg.seed, &[STREAM_TOKENS]);
    let m = cfg.mel_dim;
    let normal_vec = |scale: f64, rng: &mut Rng| -> Vec<f64> { (0..m).map(|_| scale * rng.normal()).collect() };
    let pattern = (0..cfg.vocab_size).map(|_| normal_vec(1.0, &mut rng)).collect();
    let ramp = (0..cfg.vocab_size).map(|_| normal_vec(0.5, &mut rng)).collect();
    let duration = (0..cfg.vocab_size)
        .map(|_| 1 + rng.below(3.min(cfg.max_duration)))
        .collect();
    let pitch = (0..cfg.vocab_size).map(|_| rng.normal()).collect();
    let pitch_direction = normal_vec(1.0 / libm::sqrt(m as f64), &mut rng);
    TokenTable {
        pattern,
        ramp,
        duration,
        pitch,
        pitch_direction,
    }
}

/// Hidden profile of `speaker`, a pure function of `(cfg.seed, speaker)`.
pub fn speaker_profile(cfg: &CorpusConfig, speaker: usize) -> SpeakerProfile {
    let seed = crate::rng::derive_seed(cfg.seed, &[STREAM_SPEAKER, speaker as u64]);
    let mut rng = Rng::new(seed);
    let m = cfg.mel_dim;
    let mut r: Vec<f64> = (0..m * m).map(|_| rng.normal()).collect();
    let fro = libm::sqrt(r.iter().map(|v| v * v).sum::<f64>());
    r.iter_mut().for_each(|v| *v *= 0.5 / fro);
    for i in 0..m {
        r[i * m + i] += 1.0;
    }
    let offset = (0..m).map(|_| rng.normal()).collect();
    let duration_bias = rng.below(3) as i64 - 1;
    let pitch_offset = 0.5 * rng.normal();
    SpeakerProfile {
        id: speaker,
        transform: Tensor::new(vec![m, m], r).expect("m·m values"),
        offset,
        duration_bias,
        pitch_offset,
        seed,
    }
}

fn render(cfg: &CorpusConfig, table: &TokenTable, profile: &SpeakerProfile, tokens: Vec<usize>, rng: &mut Rng) -> Utterance {
    let m = cfg.mel_dim;
    let durations: Vec<usize> = tokens
        .iter()
        .map(|&t| {
            let d = table.duration[t] as i64 + profile.duration_bias;
            d.clamp(1, cfg.max_duration as i64) as usize
        })
        .collect();
    let pitch: Vec<f64> = tokens.iter().map(|&t| table.pitch[t] + profile.pitch_offset).collect();
    let n_frames: usize = durations.iter().sum();
    let mut frames = Vec::with_capacity(n_frames * m);
    let mut pattern = vec![0.0; m];
    for (i, (&t, &d)) in tokens.iter().zip(&durations).enumerate() {
        for j in 0..d {
            let phase = (j as f64 + 0.5) / d as f64;
            for c in 0..m {
                let mut v = table.pattern[t][c] + phase * table.ramp[t][c] + pitch[i] * table.pitch_direction[c];
                if i > 0 {
                    v += 0.3 * table.pattern[tokens[i - 1]][c];
                }
                pattern[c] = v;
            }
            for c in 0..m {
                let row = &profile.transform.data()[c * m..(c + 1) * m];
                let mapped: f64 = row.iter().zip(&pattern).map(|(a, x)| a * x).sum();
                frames.push(mapped + profile.offset[c] + cfg.noise * rng.normal());
            }
        }
    }
    Utterance {
        speaker: profile.id,
        tokens,
        durations,
        pitch,
        frames: Tensor::new(vec![n_frames, m], frames).expect("T·mel values"),
    }
}

/// Generates the corpus: pretraining speakers first, then new speakers,
/// each speaker's utterances from its own stream.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let table = token_table(cfg);
    let speakers: Vec<SpeakerProfile> = (0..cfg.total_speakers()).map(|s| speaker_profile(cfg, s)).collect();
    let mut utterances = Vec::new();
    for profile in &speakers {
        let count = if profile.id < cfg.n_speakers {
            cfg.utterances_per_speaker
        } else {
            cfg.new_speaker_utterances
        };
        let mut rng = Rng::derived(cfg.seed, &[STREAM_UTTERANCES, profile.id as u64]);
        for _ in 0..count {
            let len = cfg.min_tokens + rng.below(cfg.max_tokens - cfg.min_tokens + 1);
            let tokens = (0..len).map(|_| rng.below(cfg.vocab_size)).collect();
            utterances.push(render(cfg, &table, profile, tokens, &mut rng));
        }
    }
    Ok(Corpus {
        config: cfg.clone(),
        speakers,
        utterances,
    })
}

/// Takes utterances in order into the adaptation set until it holds at
/// least `frame_budget` frames; the remainder is held out.
pub fn split_by_budget(utterances: &[Utterance], frame_budget: usize) -> Result<(Vec<Utterance>, Vec<Utterance>)> {
    let available: usize = utterances.iter().map(Utterance::n_frames).sum();
    if frame_budget > available || utterances.is_empty() {
        return Err(Error::Budget {
            requested: frame_budget,
            available,
        });
    }
    let mut taken = 0;
    let mut cut = 0;
    for u in utterances {
        if taken >= frame_budget && cut > 0 {
            break;
        }
        taken += u.n_frames();
        cut += 1;
    }
    Ok((utterances[..cut].to_vec(), utterances[cut..].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> CorpusConfig {
        CorpusConfig {
            n_speakers: 3,
            n_new_speakers: 1,
            utterances_per_speaker: 6,
            new_speaker_utterances: 10,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_corpus(&small_cfg()).unwrap();
        let b = generate_corpus(&small_cfg()).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(&CorpusConfig { seed: 7, ..small_cfg() }).unwrap();
        assert_ne!(a.utterances, c.utterances);
    }

    #[test]
    fn frame_count_matches_durations() {
        let c = generate_corpus(&small_cfg()).unwrap();
        assert_eq!(c.utterances.len(), 3 * 6 + 10);
        for u in &c.utterances {
            assert_eq!(u.n_frames(), u.durations.iter().sum::<usize>());
            assert_eq!(u.tokens.len(), u.durations.len());
            assert!(u.durations.iter().all(|&d| (1..=4).contains(&d)));
            assert!(u.frames.is_finite());
        }
    }

    #[test]
    fn speakers_render_the_same_tokens_differently() {
        let cfg = small_cfg();
        let table = token_table(&cfg);
        let tokens = vec![1, 5, 9, 2];
        let mut frames = Vec::new();
        for s in 0..2 {
            // no noise so the only difference is the speaker
            let cfg = CorpusConfig { noise: 0.0, ..cfg.clone() };
            let p = speaker_profile(&cfg, s);
            let mut p2 = p.clone();
            p2.duration_bias = 0;
            frames.push(render(&cfg, &table, &p2, tokens.clone(), &mut Rng::new(0)).frames);
        }
        let l2: f64 = frames[0]
            .data()
            .iter()
            .zip(frames[1].data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        assert!(l2 > 0.0);
    }

    #[test]
    fn speaker_transform_is_well_conditioned() {
        // ‖R‖₂ ≤ ‖R‖_F = 0.5, so ‖(I+R)x‖ ∈ [0.5, 1.5]·‖x‖ for all x.
        let cfg = small_cfg();
        for s in 0..4 {
            let p = speaker_profile(&cfg, s);
            let m = cfg.mel_dim;
            let mut r = p.transform.data().to_vec();
            for i in 0..m {
                r[i * m + i] -= 1.0;
            }
            let fro = libm::sqrt(r.iter().map(|v| v * v).sum::<f64>());
            assert!((fro - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn new_speakers_stay_out_of_pretraining() {
        let c = generate_corpus(&small_cfg()).unwrap();
        let pre = c.pretraining();
        assert!(pre.iter().all(|u| u.speaker < 3));
        assert_eq!(c.of_speaker(3).len(), 10);
    }

    #[test]
    fn budget_split_partitions() {
        let c = generate_corpus(&small_cfg()).unwrap();
        let utts = c.of_speaker(3);
        let total: usize = utts.iter().map(Utterance::n_frames).sum();

        let (adapt, held) = split_by_budget(&utts, 1).unwrap();
        assert_eq!(adapt.len(), 1);
        assert_eq!(held.len(), utts.len() - 1);

        let last = utts.last().unwrap().n_frames();
        let (adapt, held) = split_by_budget(&utts, total - last).unwrap();
        assert_eq!(held.len(), 1);
        assert_eq!(adapt.len() + held.len(), utts.len());

        for budget in [1, 17, total / 2, total] {
            let (adapt, held) = split_by_budget(&utts, budget).unwrap();
            let frames: usize = adapt.iter().map(Utterance::n_frames).sum();
            assert!(frames >= budget);
            let mut joined = adapt.clone();
            joined.extend(held);
            assert_eq!(joined, utts);
        }
        assert!(matches!(split_by_budget(&utts, total + 1), Err(Error::Budget { .. })));
    }

    #[test]
    fn invalid_config_names_field() {
        let bad = CorpusConfig { max_tokens: 2, ..small_cfg() };
        assert!(matches!(generate_corpus(&bad), Err(Error::Config { field: "max_tokens", .. })));
    }
}
