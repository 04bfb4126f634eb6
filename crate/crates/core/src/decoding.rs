//! Greedy autoregressive decoding and long-form windowed transcription.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{ModelError, TranscriberModel};
use crate::numerics::{kernels, Graph, Tensor};
use crate::synthdata::{detokenize, BOS, EOS};

#[derive(Debug, thiserror::Error)]
pub enum DecodeError {
    #[error("invalid decode config: {0}")]
    Config(String),
    #[error("input of {frames} frames exceeds the window of {window} frames")]
    TooLong { frames: usize, window: usize },
    #[error("cannot decode an input with no frames")]
    Empty,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("transcripts {path}: line {line}: {msg}")]
    Transcript { path: String, line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    /// Length cap of the output sequence, BOS included.
    pub max_tokens: usize,
    /// Frames per long-form window.
    pub window_frames: usize,
    /// The decoder is never told which domain it is hearing.
    pub domain_agnostic: bool,
    /// Windows decoded together in one batch.
    #[serde(default = "default_batch")]
    pub batch_windows: usize,
}

fn default_batch() -> usize {
    64
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            max_tokens: 24,
            window_frames: 64,
            domain_agnostic: true,
            batch_windows: default_batch(),
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self, model: &TranscriberModel) -> Result<(), DecodeError> {
        let cfg = model.config();
        if self.window_frames == 0 || self.window_frames > cfg.max_audio_frames {
            return Err(DecodeError::Config(format!(
                "window_frames must lie in 1..={}, got {}",
                cfg.max_audio_frames, self.window_frames
            )));
        }
        if self.max_tokens < 2 || self.max_tokens > cfg.max_token_len {
            return Err(DecodeError::Config(format!(
                "max_tokens must lie in 2..={}, got {}",
                cfg.max_token_len, self.max_tokens
            )));
        }
        if !self.domain_agnostic {
            return Err(DecodeError::Config("decoding is always domain-agnostic".into()));
        }
        if self.batch_windows == 0 {
            return Err(DecodeError::Config("batch_windows must be at least 1".into()));
        }
        Ok(())
    }
}

/// Starts at BOS and appends the argmax token (lowest id on ties) until EOS
/// or `cfg.max_tokens` tokens.
pub fn greedy_decode(model: &TranscriberModel, x: &Tensor, cfg: &DecodeConfig) -> Result<Vec<usize>, DecodeError> {
    Ok(greedy_decode_batch(model, &[x], cfg)?.remove(0))
}

/// [`greedy_decode`] for several inputs at once; results are identical to
/// decoding each input alone.
pub fn greedy_decode_batch(
    model: &TranscriberModel,
    xs: &[&Tensor],
    cfg: &DecodeConfig,
) -> Result<Vec<Vec<usize>>, DecodeError> {
    cfg.validate(model)?;
    for x in xs {
        if x.rows() == 0 {
            return Err(DecodeError::Empty);
        }
        if x.rows() > cfg.window_frames {
            return Err(DecodeError::TooLong {
                frames: x.rows(),
                window: cfg.window_frames,
            });
        }
    }
    let mut out = Vec::with_capacity(xs.len());
    for chunk in xs.chunks(cfg.batch_windows) {
        out.extend(decode_chunk(model, chunk, cfg)?);
    }
    Ok(out)
}

fn decode_chunk(model: &TranscriberModel, xs: &[&Tensor], cfg: &DecodeConfig) -> Result<Vec<Vec<usize>>, DecodeError> {
    let frames: Vec<usize> = xs.iter().map(|x| x.rows()).collect();
    let states = {
        let g = Graph::new();
        let bound = model.bind(&g);
        let s = bound.encode_batch(xs, None)?;
        g.tensor(s)
    };
    let vocab = model.config().vocab_size;
    let mut seqs: Vec<Vec<usize>> = vec![vec![BOS]; xs.len()];
    let mut done = vec![false; xs.len()];
    while seqs[0].len() < cfg.max_tokens && done.iter().any(|d| !d) {
        let g = Graph::new();
        let bound = model.bind(&g);
        let sv = g.leaf(&states);
        let inputs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
        let logits = bound.decode_batch(sv, &frames, &inputs, None)?;
        let len = seqs[0].len();
        let next: Vec<usize> = g.with_value(logits, |v| {
            (0..seqs.len())
                .map(|i| {
                    let row = (i + 1) * len - 1;
                    kernels::argmax(&v[row * vocab..(row + 1) * vocab])
                })
                .collect()
        });
        for (i, tok) in next.into_iter().enumerate() {
            // Finished rows keep a placeholder so every row has equal length.
            seqs[i].push(if done[i] { EOS } else { tok });
            done[i] |= tok == EOS;
        }
    }
    Ok(seqs
        .into_iter()
        .map(|mut s| {
            if let Some(p) = s.iter().position(|&t| t == EOS) {
                s.truncate(p + 1);
            }
            s
        })
        .collect())
}

/// `[start, end)` frame ranges of consecutive non-overlapping windows.
pub fn windows(frames: usize, window: usize) -> Vec<(usize, usize)> {
    (0..frames)
        .step_by(window.max(1))
        .map(|s| (s, (s + window).min(frames)))
        .collect()
}

/// Splits `x` into windows, greedy-decodes each, and joins the window texts
/// with single spaces.
pub fn longform_decode(model: &TranscriberModel, x: &Tensor, cfg: &DecodeConfig) -> Result<String, DecodeError> {
    Ok(longform_decode_batch(model, &[x], cfg)?.remove(0))
}

pub fn longform_decode_batch(
    model: &TranscriberModel,
    xs: &[&Tensor],
    cfg: &DecodeConfig,
) -> Result<Vec<String>, DecodeError> {
    cfg.validate(model)?;
    let mut pieces = Vec::new();
    let mut owner = Vec::new();
    for (i, x) in xs.iter().enumerate() {
        if x.rows() == 0 {
            return Err(DecodeError::Empty);
        }
        for (s, e) in windows(x.rows(), cfg.window_frames) {
            pieces.push(slice_rows(x, s, e));
            owner.push(i);
        }
    }
    let refs: Vec<&Tensor> = pieces.iter().collect();
    let decoded = greedy_decode_batch(model, &refs, cfg)?;
    let mut texts: Vec<Vec<String>> = vec![Vec::new(); xs.len()];
    for (i, toks) in owner.into_iter().zip(decoded) {
        texts[i].push(detokenize(&toks));
    }
    Ok(texts.into_iter().map(|t| t.join(" ")).collect())
}

fn slice_rows(x: &Tensor, start: usize, end: usize) -> Tensor {
    let c = x.cols();
    Tensor::new(vec![end - start, c], x.data()[start * c..end * c].to_vec()).expect("rows within bounds")
}

/// Which input a transcript was decoded from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Mix,
    Voc,
}

impl Condition {
    pub const ALL: [Condition; 2] = [Condition::Mix, Condition::Voc];

    pub fn name(self) -> &'static str {
        match self {
            Self::Mix => "mix",
            Self::Voc => "voc",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mix" => Some(Self::Mix),
            "voc" => Some(Self::Voc),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranscriptRecord {
    pub id: String,
    pub condition: Condition,
    pub hypothesis: String,
}

pub fn write_transcripts(path: &Path, records: &[TranscriptRecord]) -> Result<(), DecodeError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r).expect("plain record serializes"))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_transcripts(path: &Path) -> Result<Vec<TranscriptRecord>, DecodeError> {
    let file = std::fs::File::open(path).map_err(|e| DecodeError::Transcript {
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
        out.push(serde_json::from_str(&line).map_err(|e| DecodeError::Transcript {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}
