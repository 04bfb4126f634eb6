//! JSON-lines corpus files.
//!
//! One record per line with fields `id`, `seed`, `language`, `text`,
//! `gain`, `frames` and `render` (the [`RenderParams`] used). Features are
//! not stored; [`CorpusRecord::materialize`] regenerates them from the seed.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{generate_sample, render_features, tokenize, DataError, GenConfig, PairedSample, RenderParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusSplit {
    Pretrain,
    Train,
    Dev,
    Test,
}

impl CorpusSplit {
    pub const ALL: [CorpusSplit; 4] = [Self::Pretrain, Self::Train, Self::Dev, Self::Test];

    pub fn name(self) -> &'static str {
        match self {
            Self::Pretrain => "pretrain",
            Self::Train => "train",
            Self::Dev => "dev",
            Self::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }

    /// Sample seed for position `index` of this split. Splits live in
    /// disjoint seed ranges (the split tag occupies the top byte).
    pub fn sample_seed(self, corpus_seed: u64, index: usize) -> u64 {
        (self.tag() << 56) | ((corpus_seed & 0xFFFF) << 32) | index as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub id: String,
    pub seed: u64,
    pub language: String,
    pub text: String,
    pub gain: f64,
    pub frames: usize,
    pub render: RenderParams,
}

impl CorpusRecord {
    pub fn from_sample(sample: &PairedSample, render: &RenderParams) -> Self {
        Self {
            id: sample.id.clone(),
            seed: sample.seed,
            language: sample.language.clone(),
            text: sample.text.clone(),
            gain: sample.gain,
            frames: sample.duration_frames(),
            render: render.clone(),
        }
    }

    /// Regenerates features for this record.
    pub fn materialize(&self) -> Result<PairedSample, DataError> {
        let (vocal, mixture, gain) = render_features(self.seed, &self.text, &self.render)?;
        Ok(PairedSample {
            id: self.id.clone(),
            seed: self.seed,
            language: self.language.clone(),
            tokens: tokenize(&self.text)?,
            text: self.text.clone(),
            vocal,
            mixture,
            gain,
        })
    }
}

/// Generates `count` records of `split` with `cfg`.
pub fn generate_split(cfg: &GenConfig, split: CorpusSplit, count: usize) -> Result<Vec<CorpusRecord>, DataError> {
    cfg.validate()?;
    (0..count)
        .map(|i| {
            let seed = split.sample_seed(cfg.corpus_seed, i);
            let mut s = generate_sample(seed, cfg)?;
            s.id = format!("{}-{i:05}", split.name());
            Ok(CorpusRecord::from_sample(&s, &cfg.render))
        })
        .collect()
}

pub fn write_corpus(path: &Path, records: &[CorpusRecord]) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| DataError::Corpus {
            path: path.display().to_string(),
            line: 0,
            msg: e.to_string(),
        })?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<CorpusRecord>, DataError> {
    let file = File::open(path).map_err(|e| DataError::Corpus {
        path: path.display().to_string(),
        line: 0,
        msg: format!("cannot open: {e}"),
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord = serde_json::from_str(&line).map_err(|e| DataError::Corpus {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_regenerate_identical_features() {
        let cfg = GenConfig::finetuning();
        let recs = generate_split(&cfg, CorpusSplit::Test, 5).unwrap();
        for r in &recs {
            let s = r.materialize().unwrap();
            assert_eq!(s.gain, r.gain);
            assert_eq!(s.duration_frames(), r.frames);
            let direct = generate_sample(r.seed, &cfg).unwrap();
            assert_eq!(direct.vocal, s.vocal);
            assert_eq!(direct.mixture, s.mixture);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let recs = generate_split(&GenConfig::pretraining(), CorpusSplit::Pretrain, 4).unwrap();
        write_corpus(&path, &recs).unwrap();
        assert_eq!(read_corpus(&path).unwrap(), recs);
    }

    #[test]
    fn split_seeds_are_disjoint() {
        let mut seen = std::collections::HashSet::new();
        for split in CorpusSplit::ALL {
            for i in 0..1000 {
                assert!(seen.insert(split.sample_seed(7, i)));
            }
        }
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let recs = generate_split(&GenConfig::pretraining(), CorpusSplit::Dev, 1).unwrap();
        let mut v = serde_json::to_value(&recs[0]).unwrap();
        v["extra"] = serde_json::json!(1);
        std::fs::write(&path, v.to_string()).unwrap();
        let err = read_corpus(&path).unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }
}
