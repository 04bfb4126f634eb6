//! Python bindings: data generation, text metrics, and a transcriber model
//! that can be fine-tuned, decoded and checkpointed.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use ::dualora::decoding::{greedy_decode, longform_decode, DecodeConfig};
use ::dualora::losses::Strategy;
use ::dualora::model::{load_checkpoint, save_checkpoint, LoraConfig, ModelConfig, TranscriberModel};
use ::dualora::numerics::Tensor;
use ::dualora::synthdata::{self, generate_split, CorpusSplit, GenConfig, PairedSample};
use ::dualora::training::{make_schedule, run_experiment, TrainPlan};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.data().chunks(t.cols()).map(<[f64]>::to_vec).collect()
}

fn tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(err)
}

fn gen_config(finetune: bool) -> GenConfig {
    if finetune {
        GenConfig::finetuning()
    } else {
        GenConfig::pretraining()
    }
}

/// One synthetic lyric segment with paired vocal and mixture features.
#[pyclass(module = "dualora", frozen, get_all)]
struct Sample {
    id: String,
    language: String,
    text: String,
    tokens: Vec<usize>,
    vocal: Vec<Vec<f64>>,
    mixture: Vec<Vec<f64>>,
    gain: f64,
}

impl From<&PairedSample> for Sample {
    fn from(s: &PairedSample) -> Self {
        Self {
            id: s.id.clone(),
            language: s.language.clone(),
            text: s.text.clone(),
            tokens: s.tokens.clone(),
            vocal: rows(&s.vocal),
            mixture: rows(&s.mixture),
            gain: s.gain,
        }
    }
}

#[pyclass(module = "dualora", frozen, get_all)]
struct WerDetail {
    substitutions: usize,
    deletions: usize,
    insertions: usize,
    ref_words: usize,
    wer: f64,
}

/// Generate one sample. `finetune=False` gives clean pretraining-style data.
#[pyfunction]
#[pyo3(signature = (seed, finetune = true))]
fn generate_sample(seed: u64, finetune: bool) -> PyResult<Sample> {
    let s = synthdata::generate_sample(seed, &gen_config(finetune)).map_err(err)?;
    Ok(Sample::from(&s))
}

#[pyfunction]
fn tokenize(text: &str) -> PyResult<Vec<usize>> {
    synthdata::tokenize(text).map_err(err)
}

#[pyfunction]
fn detokenize(tokens: Vec<usize>) -> String {
    synthdata::detokenize(&tokens)
}

#[pyfunction]
fn clean_lyrics(text: &str) -> String {
    synthdata::clean_lyrics(text)
}

#[pyfunction]
fn normalize_text(text: &str) -> String {
    ::dualora::evaluation::normalize_text(text)
}

#[pyfunction]
fn wer(reference: &str, hypothesis: &str) -> WerDetail {
    let d = ::dualora::evaluation::wer(reference, hypothesis);
    WerDetail {
        substitutions: d.substitutions,
        deletions: d.deletions,
        insertions: d.insertions,
        ref_words: d.ref_words,
        wer: d.wer,
    }
}

/// Learning rate at `step` of a linear warmup/decay schedule.
#[pyfunction]
fn learning_rate(step: usize, total_steps: usize, peak: f64, warmup_frac: f64) -> PyResult<f64> {
    Ok(make_schedule(total_steps, peak, warmup_frac).map_err(err)?.lr(step))
}

/// The toy encoder-decoder transcriber.
#[pyclass(module = "dualora")]
struct Model {
    inner: TranscriberModel,
}

#[pymethods]
impl Model {
    /// Fresh model with default toy dimensions, initialized from `seed`.
    #[new]
    #[pyo3(signature = (seed = 0))]
    fn new(seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: TranscriberModel::from_seed(ModelConfig::default(), seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: load_checkpoint(path.as_ref()).map_err(err)?.model,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(&self.inner, path.as_ref()).map_err(err)
    }

    /// Digest of the frozen base weights.
    fn base_digest(&self) -> String {
        self.inner.base_digest()
    }

    /// Digest of base weights and adapters.
    fn digest(&self) -> String {
        self.inner.full_digest()
    }

    fn adapter_targets(&self) -> Vec<String> {
        self.inner.adapter_targets()
    }

    fn has_adapters(&self) -> bool {
        self.inner.has_adapters()
    }

    /// Train all base weights on `samples` clean samples for `steps` steps.
    #[pyo3(signature = (steps, samples = 500, seed = 0))]
    fn pretrain(&mut self, steps: usize, samples: usize, seed: u64) -> PyResult<Vec<f64>> {
        let corpus = corpus(&GenConfig::pretraining(), CorpusSplit::Pretrain, samples)?;
        let plan = TrainPlan {
            total_steps: steps,
            ..TrainPlan::pretrain(seed)
        };
        self.train(&plan, &corpus, None)
    }

    /// Fine-tune low-rank adapters with `strategy` (e.g. "voc", "both",
    /// "cns-l2-w1.0"). Returns the per-step total loss.
    #[pyo3(signature = (strategy, steps, samples = 200, seed = 0, rank = 4, alpha = 4.0, dropout = 0.1))]
    #[allow(clippy::too_many_arguments)]
    fn finetune(
        &mut self,
        strategy: &str,
        steps: usize,
        samples: usize,
        seed: u64,
        rank: usize,
        alpha: f64,
        dropout: f64,
    ) -> PyResult<Vec<f64>> {
        let strategy = Strategy::parse(strategy).ok_or_else(|| err(format!("unknown strategy {strategy:?}")))?;
        let corpus = corpus(&GenConfig::finetuning(), CorpusSplit::Train, samples)?;
        let plan = TrainPlan {
            total_steps: steps,
            ..TrainPlan::finetune(strategy, seed)
        };
        let lora = LoraConfig { rank, alpha, dropout };
        self.train(&plan, &corpus, Some(&lora))
    }

    /// Greedy token ids for `features` (rows of feature vectors).
    fn greedy_decode(&self, features: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        greedy_decode(&self.inner, &tensor(features)?, &DecodeConfig::default()).map_err(err)
    }

    /// Window-by-window transcription of arbitrarily long `features`.
    #[pyo3(signature = (features, window_frames = 64))]
    fn transcribe(&self, features: Vec<Vec<f64>>, window_frames: usize) -> PyResult<String> {
        let cfg = DecodeConfig {
            window_frames,
            ..DecodeConfig::default()
        };
        longform_decode(&self.inner, &tensor(features)?, &cfg).map_err(err)
    }
}

impl Model {
    fn train(&mut self, plan: &TrainPlan, corpus: &[PairedSample], lora: Option<&LoraConfig>) -> PyResult<Vec<f64>> {
        let out = run_experiment(plan, corpus, self.inner.clone(), lora).map_err(err)?;
        self.inner = out.model;
        Ok(out.metrics.iter().map(|m| m.total).collect())
    }
}

fn corpus(cfg: &GenConfig, split: CorpusSplit, count: usize) -> PyResult<Vec<PairedSample>> {
    generate_split(cfg, split, count)
        .map_err(err)?
        .iter()
        .map(|r| r.materialize().map_err(err))
        .collect()
}

#[pymodule]
fn dualora(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_class::<Sample>()?;
    m.add_class::<WerDetail>()?;
    m.add_function(wrap_pyfunction!(generate_sample, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(detokenize, m)?)?;
    m.add_function(wrap_pyfunction!(clean_lyrics, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_text, m)?)?;
    m.add_function(wrap_pyfunction!(wer, m)?)?;
    m.add_function(wrap_pyfunction!(learning_rate, m)?)?;
    Ok(())
}
