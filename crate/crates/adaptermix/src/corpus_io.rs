//! Corpus files: one JSON header line with the generator configuration,
//! then one JSON line per utterance. Speaker profiles are not stored; they
//! are a pure function of the configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use adaptermix_core::data::{speaker_profile, Corpus, CorpusConfig, Utterance};
use adaptermix_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_file;
use crate::{Error, Result};

pub const FORMAT: &str = "adaptermix-corpus";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    utterances: usize,
    config: CorpusConfig,
}

#[derive(Serialize, Deserialize)]
struct Record {
    speaker: usize,
    tokens: Vec<usize>,
    durations: Vec<usize>,
    pitch: Vec<f64>,
    frames: Vec<Vec<f64>>,
}

pub fn to_jsonl(corpus: &Corpus) -> String {
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        utterances: corpus.utterances.len(),
        config: corpus.config.clone(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for u in &corpus.utterances {
        let rec = Record {
            speaker: u.speaker,
            tokens: u.tokens.clone(),
            durations: u.durations.clone(),
            pitch: u.pitch.clone(),
            frames: (0..u.frames.rows()).map(|t| u.frames.row(t).to_vec()).collect(),
        };
        let _ = writeln!(out, "{}", serde_json::to_string(&rec).expect("utterance serializes"));
    }
    out
}

pub fn save(corpus: &Corpus, path: &Path) -> Result<()> {
    write_file(path, to_jsonl(corpus).as_bytes())
}

pub fn load(path: &Path) -> Result<Corpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, first) = lines.next().ok_or_else(|| Error::format(path, "empty corpus file"))?;
    let header: Header = serde_json::from_str(first).map_err(|e| Error::format(path, format!("line 1: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(Error::format(path, format!("not a {FORMAT} v{VERSION} file")));
    }
    let cfg = header.config;
    let mut utterances = Vec::with_capacity(header.utterances);
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        let frames = if rec.frames.is_empty() {
            Tensor::zeros(&[0, cfg.mel_dim])
        } else {
            Tensor::from_rows(&rec.frames).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?
        };
        utterances.push(Utterance {
            speaker: rec.speaker,
            tokens: rec.tokens,
            durations: rec.durations,
            pitch: rec.pitch,
            frames,
        });
    }
    if utterances.len() != header.utterances {
        return Err(Error::format(
            path,
            format!("header announces {} utterances, found {}", header.utterances, utterances.len()),
        ));
    }
    let speakers = (0..cfg.total_speakers()).map(|s| speaker_profile(&cfg, s)).collect();
    Ok(Corpus {
        config: cfg,
        speakers,
        utterances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use adaptermix_core::data::generate_corpus;

    #[test]
    fn round_trip_is_exact() {
        let cfg = CorpusConfig {
            n_speakers: 2,
            n_new_speakers: 1,
            utterances_per_speaker: 3,
            new_speaker_utterances: 4,
            ..CorpusConfig::default()
        };
        let corpus = generate_corpus(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        save(&corpus, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back, corpus);
        assert_eq!(to_jsonl(&back), to_jsonl(&corpus));
    }
}
