//! One training step and the full training run.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::losses::{alt_loss, combined_loss_var, consistency_loss, LossBreakdown, Strategy};
use crate::model::{BoundModel, LoraConfig, ParamId, Phase, TranscriberModel};
use crate::numerics::{Graph, Tensor, Var};
use crate::synthdata::PairedSample;
use crate::{seeded_rng, RngStream};

use super::{make_schedule, select_inputs, Adam, Domain, Schedule, TrainError};

/// Everything that determines a training run besides data and the input model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub phase: Phase,
    pub strategy: Strategy,
    pub peak_lr: f64,
    pub total_steps: usize,
    pub warmup_frac: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl TrainPlan {
    /// Full-weight training on vocal inputs.
    pub fn pretrain(seed: u64) -> Self {
        Self {
            phase: Phase::Pretrain,
            strategy: Strategy::Voc,
            peak_lr: 3e-3,
            total_steps: 2000,
            warmup_frac: 0.1,
            batch_size: 16,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed,
        }
    }

    /// Adapter-only training with `strategy`.
    pub fn finetune(strategy: Strategy, seed: u64) -> Self {
        Self {
            phase: Phase::Finetune,
            strategy,
            peak_lr: 1e-3,
            total_steps: 1000,
            ..Self::pretrain(seed)
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        make_schedule(self.total_steps, self.peak_lr, self.warmup_frac)?;
        if self.batch_size == 0 {
            return Err(TrainError::Plan("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(TrainError::Plan("need 0 <= beta < 1 and eps > 0".into()));
        }
        self.strategy.validate().map_err(TrainError::Plan)
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    #[serde(rename = "L_v")]
    pub alt_vocal: Option<f64>,
    #[serde(rename = "L_m")]
    pub alt_mixture: Option<f64>,
    #[serde(rename = "L_CNS")]
    pub consistency: Option<f64>,
    #[serde(rename = "L_total")]
    pub total: f64,
    /// Mean of `L_total` over all steps so far.
    pub running_mean: f64,
}

impl StepMetrics {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            alt_vocal: self.alt_vocal,
            alt_mixture: self.alt_mixture,
            consistency: self.consistency,
            total: self.total,
        }
    }
}

/// Endless uniform shuffling: a fresh permutation every epoch.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed, RngStream::Shuffle);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size && !self.order.is_empty() {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Mutable state carried across steps.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub adam: Adam,
    pub schedule: Schedule,
    /// Completed steps.
    pub step: usize,
    pub coin: ChaCha8Rng,
    pub dropout: ChaCha8Rng,
    total_sum: f64,
}

impl TrainState {
    pub fn new(plan: &TrainPlan) -> Result<Self, TrainError> {
        Ok(Self {
            adam: Adam::new(plan.beta1, plan.beta2, plan.eps),
            schedule: make_schedule(plan.total_steps, plan.peak_lr, plan.warmup_frac)?,
            step: 0,
            coin: seeded_rng(plan.seed, RngStream::DomainCoin),
            dropout: seeded_rng(plan.seed, RngStream::Dropout),
            total_sum: 0.0,
        })
    }
}

#[derive(Default)]
struct DomainBatch<'a> {
    inputs: Vec<&'a Tensor>,
    tokens: Vec<&'a [usize]>,
    targets: Vec<usize>,
    logits: Option<Var>,
    states: Option<Var>,
}

impl<'a> DomainBatch<'a> {
    fn push(&mut self, x: &'a Tensor, tokens: &'a [usize]) {
        self.inputs.push(x);
        self.tokens.push(&tokens[..tokens.len() - 1]);
        self.targets.extend_from_slice(&tokens[1..]);
    }

    fn forward(&mut self, bound: &BoundModel<'_>, rng: &mut ChaCha8Rng) -> Result<(), TrainError> {
        if self.inputs.is_empty() {
            return Ok(());
        }
        let states = bound.encode_batch(&self.inputs, Some(&mut *rng))?;
        let frames: Vec<usize> = self.inputs.iter().map(|x| x.rows()).collect();
        self.logits = Some(bound.decode_batch(states, &frames, &self.tokens, Some(rng))?);
        self.states = Some(states);
        Ok(())
    }

    fn alt(&self, g: &Graph) -> Result<Option<Var>, TrainError> {
        match self.logits {
            Some(l) => Ok(Some(alt_loss(g, l, &self.targets)?)),
            None => Ok(None),
        }
    }
}

/// Loss nodes of one step. Per-domain terms absent from a strategy are `None`.
#[derive(Debug, Clone, Copy)]
pub struct StepLoss {
    pub total: Var,
    pub vocal: Option<Var>,
    pub mixture: Option<Var>,
    pub consistency: Option<Var>,
}

/// Records the forward passes and the loss of `strategy` on `batch`.
/// `coin` decides domains for the random strategy; `dropout` drives the
/// adapter dropout masks.
pub fn record_step_loss(
    bound: &BoundModel<'_>,
    batch: &[&PairedSample],
    strategy: &Strategy,
    coin: &mut ChaCha8Rng,
    dropout: &mut ChaCha8Rng,
) -> Result<StepLoss, TrainError> {
    let g = bound.graph();
    let mut vocal = DomainBatch::default();
    let mut mixture = DomainBatch::default();
    for sample in batch {
        for (domain, x) in select_inputs(strategy, sample, coin) {
            match domain {
                Domain::Vocal => vocal.push(x, &sample.tokens),
                Domain::Mixture => mixture.push(x, &sample.tokens),
            }
        }
    }
    vocal.forward(bound, dropout)?;
    mixture.forward(bound, dropout)?;
    let (total, lv, lm, lc) = match *strategy {
        Strategy::Voc => {
            let lv = vocal.alt(g)?.expect("vocal rows");
            (lv, Some(lv), None, None)
        }
        Strategy::Mix => {
            let lm = mixture.alt(g)?.expect("mixture rows");
            (lm, None, Some(lm), None)
        }
        Strategy::Random => {
            let all: Vec<Var> = vocal.logits.iter().chain(&mixture.logits).copied().collect();
            // Token mean over both domains' rows.
            let targets: Vec<usize> = vocal.targets.iter().chain(&mixture.targets).copied().collect();
            let total = alt_loss(g, g.concat_rows(&all)?, &targets)?;
            // Recorded after the total, so backward never visits them.
            (total, vocal.alt(g)?, mixture.alt(g)?, None)
        }
        Strategy::Both => {
            let lv = vocal.alt(g)?.expect("vocal rows");
            let lm = mixture.alt(g)?.expect("mixture rows");
            let zero = g.constant(vec![1], vec![0.0])?;
            (combined_loss_var(g, lv, lm, zero, 0.0)?, Some(lv), Some(lm), None)
        }
        Strategy::Cns { kind, weight } => {
            let lv = vocal.alt(g)?.expect("vocal rows");
            let lm = mixture.alt(g)?.expect("mixture rows");
            let (sv, sm) = (vocal.states.expect("vocal states"), mixture.states.expect("mixture states"));
            let mask = vec![true; g.shape(sv)[0]];
            let lc = consistency_loss(g, sv, sm, kind, &mask)?;
            (combined_loss_var(g, lv, lm, lc, weight)?, Some(lv), Some(lm), Some(lc))
        }
    };
    Ok(StepLoss {
        total,
        vocal: lv,
        mixture: lm,
        consistency: lc,
    })
}

/// Zeroes gradients, runs the forward passes required by `plan.strategy`
/// on `batch`, back-propagates the total loss once and takes one Adam step
/// with the learning rate of the step being completed.
pub fn train_step(
    model: &mut TranscriberModel,
    batch: &[&PairedSample],
    plan: &TrainPlan,
    state: &mut TrainState,
) -> Result<StepMetrics, TrainError> {
    model.zero_grad();
    let g = Graph::new();
    let trainable = model.trainable_parameters(plan.phase);
    let (metrics, grads, vars) = {
        let bound = model.bind(&g);
        let StepLoss {
            total,
            vocal: lv,
            mixture: lm,
            consistency: lc,
        } = record_step_loss(&bound, batch, &plan.strategy, &mut state.coin, &mut state.dropout)?;
        let value = g.scalar(total);
        if !value.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step: state.step + 1,
                value,
                last_good: model.full_digest(),
            });
        }
        let grads = g.backward(total)?;
        let vars: Vec<(ParamId, Var)> = trainable.iter().map(|&id| (id, bound.var(id))).collect();
        let read = |v: Option<Var>| v.map(|v| g.scalar(v));
        let partial = (read(lv), read(lm), read(lc), value);
        (partial, grads, vars)
    };
    for (id, v) in vars {
        grads.accumulate_into(v, model.param_mut(id));
    }
    let step = state.step + 1;
    let lr = state.schedule.lr(step);
    state.adam.step(&mut model.trainable_tensors_mut(plan.phase), lr)?;
    state.step = step;
    let (alt_vocal, alt_mixture, consistency, total) = metrics;
    state.total_sum += total;
    Ok(StepMetrics {
        step,
        lr,
        alt_vocal,
        alt_mixture,
        consistency,
        total,
        running_mean: state.total_sum / step as f64,
    })
}

pub struct TrainOutcome {
    pub model: TranscriberModel,
    pub metrics: Vec<StepMetrics>,
}

/// Trains `model` on `corpus` for `plan.total_steps` steps.
///
/// Fine-tuning attaches adapters drawn from `lora` when the model has none
/// and fails if the base weights change.
pub fn run_experiment(
    plan: &TrainPlan,
    corpus: &[PairedSample],
    mut model: TranscriberModel,
    lora: Option<&LoraConfig>,
) -> Result<TrainOutcome, TrainError> {
    plan.validate()?;
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    if plan.phase == Phase::Finetune && !model.has_adapters() {
        let cfg = lora.ok_or(TrainError::MissingLora)?;
        model.attach_lora(cfg, &mut seeded_rng(plan.seed, RngStream::AdapterInit))?;
    }
    model.set_phase(plan.phase);
    let base = model.base_digest();
    let mut state = TrainState::new(plan)?;
    let mut sampler = BatchSampler::new(corpus.len(), plan.seed);
    let mut metrics = Vec::with_capacity(plan.total_steps);
    for _ in 0..plan.total_steps {
        let batch: Vec<&PairedSample> = sampler
            .next_batch(plan.batch_size)
            .into_iter()
            .map(|i| &corpus[i])
            .collect();
        metrics.push(train_step(&mut model, &batch, plan, &mut state)?);
    }
    model.zero_grad();
    if plan.phase == Phase::Finetune && model.base_digest() != base {
        return Err(TrainError::BaseMutated);
    }
    let stage = match plan.phase {
        Phase::Pretrain => "pretrain".to_string(),
        Phase::Finetune => format!("finetune:{}", plan.strategy.id()),
    };
    model.push_lineage(stage, plan.seed);
    Ok(TrainOutcome { model, metrics })
}

pub fn write_metrics(path: &Path, metrics: &[StepMetrics]) -> Result<(), TrainError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for m in metrics {
        let line = serde_json::to_string(m).map_err(|e| TrainError::Metrics(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>, TrainError> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| TrainError::Metrics(format!("{}: line {}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}
