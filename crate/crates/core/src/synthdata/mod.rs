//! Seeded generator of paired vocal/mixture feature sequences with lyrics.
//!
//! Vocal features render each lyric character through a fixed embedding
//! table, held for `frames_per_token` frames, plus a slow "vibrato" drift
//! and Gaussian jitter. The mixture adds a scaled accompaniment: an
//! independent character stream rendered through a second table.

mod corpus;
mod preprocess;
mod tokenizer;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;
use crate::{seeded_rng, RngStream};

pub use corpus::{generate_split, read_corpus, write_corpus, CorpusRecord, CorpusSplit};
pub use preprocess::{clean_lyrics, merge_segments, LineTooLong, Segment};
pub use tokenizer::{
    char_id, detokenize, id_char, symbols, tokenize, TokenizeError, ALPHABET_SIZE, BOS, EOS, PAD,
    SPACE, VOCAB_SIZE,
};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
    #[error(transparent)]
    Segment(#[from] LineTooLong),
    #[error("corpus {path}: line {line}: {msg}")]
    Corpus { path: String, line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A toy language: a tag used for per-subset reporting and its word list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageSpec {
    pub tag: String,
    pub weight: f64,
    pub lexicon: Vec<String>,
}

/// Everything needed to turn a lyric string into features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderParams {
    pub feature_dim: usize,
    pub frames_per_token: usize,
    /// Standard deviation of per-element Gaussian jitter.
    pub jitter: f64,
    /// Accompaniment gain is drawn uniformly from `[lo, hi]`.
    pub gain_range: [f64; 2],
    /// Amplitude of the slow drift along a fixed direction.
    pub vibrato_gain: f64,
    pub vibrato_period: f64,
    pub voice_embedding_seed: u64,
    pub distractor_embedding_seed: u64,
    pub distractor_frames_per_token: usize,
    /// Accompaniment lives in a random subspace of this dimension, at the
    /// same energy per frame; `None` uses the full feature space.
    #[serde(default)]
    pub distractor_rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub languages: Vec<LanguageSpec>,
    pub words_per_line: [usize; 2],
    pub lines_per_song: [usize; 2],
    /// Probability that a word carries an over-repeated vowel before cleaning.
    pub elongation_prob: f64,
    /// Segment length limit used when packing lines.
    pub max_frames: usize,
    pub corpus_seed: u64,
    pub render: RenderParams,
}

fn words(list: &[&str]) -> Vec<String> {
    list.iter().map(|w| w.to_string()).collect()
}

fn default_languages() -> Vec<LanguageSpec> {
    vec![
        LanguageSpec {
            tag: "en".into(),
            weight: 0.6,
            lexicon: words(&[
                "love", "you", "me", "night", "fire", "heart", "baby", "dance", "sky", "home",
                "rain", "day", "go", "oh", "yeah", "feel", "time", "light", "run", "free",
            ]),
        },
        LanguageSpec {
            tag: "it".into(),
            weight: 0.2,
            lexicon: words(&[
                "amore", "cuore", "notte", "sole", "mare", "vita", "luna", "io", "te", "mio",
                "ciao", "sei", "bella", "cielo",
            ]),
        },
        LanguageSpec {
            tag: "pt".into(),
            weight: 0.2,
            lexicon: words(&[
                "amor", "vida", "mar", "sol", "noite", "lua", "meu", "tu", "sim", "paz", "bem",
                "luz", "dia", "fado",
            ]),
        },
    ]
}

impl GenConfig {
    /// Clean, low-jitter vocal-like data without accompaniment.
    pub fn pretraining() -> Self {
        Self {
            languages: default_languages(),
            words_per_line: [1, 2],
            lines_per_song: [1, 2],
            elongation_prob: 0.0,
            max_frames: 60,
            corpus_seed: 1,
            render: RenderParams {
                feature_dim: 16,
                frames_per_token: 3,
                jitter: 0.1,
                gain_range: [0.0, 0.0],
                vibrato_gain: 0.0,
                vibrato_period: 12.0,
                voice_embedding_seed: 101,
                distractor_embedding_seed: 202,
                distractor_frames_per_token: 4,
                distractor_rank: None,
            },
        }
    }

    /// Singing-like data: stronger jitter, vibrato drift and accompaniment.
    pub fn finetuning() -> Self {
        let mut cfg = Self::pretraining();
        cfg.elongation_prob = 0.2;
        cfg.corpus_seed = 2;
        cfg.render.jitter = 0.3;
        cfg.render.gain_range = [0.6, 1.2];
        cfg.render.vibrato_gain = 2.5;
        cfg.render.distractor_frames_per_token = 32;
        cfg.render.distractor_rank = Some(8);
        cfg
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |m: &str| Err(DataError::Config(m.to_string()));
        if self.languages.is_empty() || self.languages.iter().any(|l| l.lexicon.is_empty()) {
            return fail("every language needs a non-empty lexicon");
        }
        if self.languages.iter().any(|l| !(l.weight > 0.0)) {
            return fail("language weights must be positive");
        }
        for l in &self.languages {
            for w in &l.lexicon {
                if w.is_empty() || w.chars().any(|c| !c.is_ascii_lowercase()) {
                    return fail("lexicon words must be non-empty lowercase a-z");
                }
            }
        }
        let [wlo, whi] = self.words_per_line;
        let [llo, lhi] = self.lines_per_song;
        if wlo == 0 || wlo > whi || llo == 0 || llo > lhi {
            return fail("word and line ranges need 1 <= lo <= hi");
        }
        let r = &self.render;
        if !(r.jitter >= 0.0) {
            return fail("jitter must be non-negative");
        }
        if !(0.0 <= r.gain_range[0] && r.gain_range[0] <= r.gain_range[1]) {
            return fail("gain range needs 0 <= lo <= hi");
        }
        if r.frames_per_token == 0 || r.distractor_frames_per_token == 0 || r.feature_dim == 0 {
            return fail("frame rates and feature_dim must be positive");
        }
        if !(0.0..=1.0).contains(&self.elongation_prob) {
            return fail("elongation_prob must lie in [0, 1]");
        }
        let longest_word = self
            .languages
            .iter()
            .flat_map(|l| l.lexicon.iter().map(String::len))
            .max()
            .unwrap_or(0);
        let longest_line = whi * longest_word + whi;
        if longest_line * r.frames_per_token > self.max_frames {
            return fail("the longest possible line does not fit in max_frames");
        }
        Ok(())
    }

    /// Upper bound on lyric characters in one sample.
    pub fn max_chars(&self) -> usize {
        self.max_frames / self.render.frames_per_token
    }
}

/// One lyric segment with paired vocal and mixture features.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub id: String,
    pub seed: u64,
    pub language: String,
    pub text: String,
    /// `[BOS, ..., EOS]`.
    pub tokens: Vec<usize>,
    pub vocal: Tensor,
    pub mixture: Tensor,
    pub gain: f64,
}

impl PairedSample {
    pub fn duration_frames(&self) -> usize {
        self.vocal.rows()
    }
}

fn table(seed: u64, rows: usize, dim: usize) -> Vec<f64> {
    let mut rng = seeded_rng(seed, RngStream::Embedding);
    (0..rows * dim).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit_vector(seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = seeded_rng(seed, RngStream::Direction);
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// `k` orthonormal rows of length `dim` by Gram-Schmidt on Gaussian draws.
fn orthonormal_basis(seed: u64, k: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut rng = seeded_rng(seed, RngStream::Direction);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

/// Projects each row onto the span of `basis`, rescaled by `sqrt(dim/k)`.
fn project(rows: &[f64], basis: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let gain = (dim as f64 / basis.len() as f64).sqrt();
    let mut out = vec![0.0; rows.len()];
    for (src, dst) in rows.chunks(dim).zip(out.chunks_mut(dim)) {
        for b in basis {
            let d: f64 = src.iter().zip(b).map(|(x, y)| x * y).sum();
            dst.iter_mut().zip(b).for_each(|(o, y)| *o += gain * d * y);
        }
    }
    out
}

/// Symbol index in `0..ALPHABET_SIZE` for a vocabulary id.
fn alphabet_index(id: usize) -> usize {
    id - SPACE
}

/// Vocal and mixture features for `text`, fully determined by `seed`.
/// Returns `(vocal, mixture, gain)`.
pub fn render_features(seed: u64, text: &str, params: &RenderParams) -> Result<(Tensor, Tensor, f64), DataError> {
    let syms = symbols(text)?;
    let f = params.feature_dim;
    let fpt = params.frames_per_token;
    let frames = syms.len() * fpt;
    let voice = table(params.voice_embedding_seed, ALPHABET_SIZE, f);
    let accomp = match params.distractor_rank {
        Some(k) if k < f => project(
            &table(params.distractor_embedding_seed, ALPHABET_SIZE, f),
            &orthonormal_basis(params.distractor_embedding_seed, k, f),
            f,
        ),
        _ => table(params.distractor_embedding_seed, ALPHABET_SIZE, f),
    };
    let drift_dir = unit_vector(params.voice_embedding_seed, f);

    let mut rng = seeded_rng(seed, RngStream::Render);
    let gain = if params.gain_range[1] > params.gain_range[0] {
        rng.gen_range(params.gain_range[0]..=params.gain_range[1])
    } else {
        params.gain_range[0]
    };
    let drift_offset: f64 = rng.gen_range(-1.0..=1.0);
    let drift_phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);

    let mut vocal = vec![0.0; frames * f];
    for t in 0..frames {
        let row = alphabet_index(syms[t / fpt]);
        let drift = params.vibrato_gain
            * (drift_offset
                + (std::f64::consts::TAU * t as f64 / params.vibrato_period + drift_phase).sin());
        for c in 0..f {
            let noise: f64 = StandardNormal.sample(&mut rng);
            vocal[t * f + c] = voice[row * f + c] + drift * drift_dir[c] + params.jitter * noise;
        }
    }

    let dfpt = params.distractor_frames_per_token;
    let accomp_syms: Vec<usize> = (0..frames.div_ceil(dfpt))
        .map(|_| rng.gen_range(0..ALPHABET_SIZE))
        .collect();
    let mut mixture = vocal.clone();
    for t in 0..frames {
        let row = accomp_syms[t / dfpt];
        for c in 0..f {
            mixture[t * f + c] += gain * accomp[row * f + c];
        }
    }
    Ok((
        Tensor::new(vec![frames, f], vocal).expect("shape"),
        Tensor::new(vec![frames, f], mixture).expect("shape"),
        gain,
    ))
}

fn elongate<R: Rng + ?Sized>(word: &str, rng: &mut R) -> String {
    let bytes = word.as_bytes();
    // Vowels already doubled ("free") would change spelling once cleaned.
    let vowels: Vec<usize> = (0..bytes.len())
        .filter(|&i| b"aeiou".contains(&bytes[i]))
        .filter(|&i| (i == 0 || bytes[i - 1] != bytes[i]) && bytes.get(i + 1) != Some(&bytes[i]))
        .collect();
    let Some(&at) = vowels.choose(rng) else {
        return word.to_string();
    };
    let extra = rng.gen_range(2..=4);
    let c = &word[at..at + 1];
    format!("{}{}{}", &word[..at + 1], c.repeat(extra), &word[at + 1..])
}

/// Draws the raw (uncleaned) lines of one song.
pub fn draw_lines(seed: u64, cfg: &GenConfig) -> (String, Vec<String>) {
    let mut rng = seeded_rng(seed, RngStream::Text);
    let total: f64 = cfg.languages.iter().map(|l| l.weight).sum();
    let mut pick = rng.gen_range(0.0..total);
    let mut lang = &cfg.languages[cfg.languages.len() - 1];
    for l in &cfg.languages {
        if pick < l.weight {
            lang = l;
            break;
        }
        pick -= l.weight;
    }
    let n_lines = rng.gen_range(cfg.lines_per_song[0]..=cfg.lines_per_song[1]);
    let lines = (0..n_lines)
        .map(|_| {
            let n_words = rng.gen_range(cfg.words_per_line[0]..=cfg.words_per_line[1]);
            (0..n_words)
                .map(|_| {
                    let w = lang.lexicon.choose(&mut rng).expect("non-empty lexicon");
                    if rng.gen::<f64>() < cfg.elongation_prob {
                        elongate(w, &mut rng)
                    } else {
                        w.clone()
                    }
                })
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    (lang.tag.clone(), lines)
}

/// Lyric text for `seed`: raw lines are cleaned, packed into segments no
/// longer than `max_frames`, and the first segment is kept.
pub fn sample_text(seed: u64, cfg: &GenConfig) -> Result<(String, String), DataError> {
    let (language, raw) = draw_lines(seed, cfg);
    let fpt = cfg.render.frames_per_token;
    let lines: Vec<(String, usize)> = raw
        .iter()
        .map(|l| {
            let c = clean_lyrics(l);
            // One extra symbol for the space that joins lines in a segment.
            let frames = (c.chars().count() + 1) * fpt;
            (c, frames)
        })
        .collect();
    let segments = merge_segments(&lines, cfg.max_frames)?;
    let text = segments.first().map(Segment::text).unwrap_or_default();
    Ok((language, text))
}

pub fn generate_sample(seed: u64, cfg: &GenConfig) -> Result<PairedSample, DataError> {
    let (language, text) = sample_text(seed, cfg)?;
    let (vocal, mixture, gain) = render_features(seed, &text, &cfg.render)?;
    Ok(PairedSample {
        id: format!("s{seed:016x}"),
        seed,
        language,
        tokens: tokenize(&text)?,
        text,
        vocal,
        mixture,
        gain,
    })
}
