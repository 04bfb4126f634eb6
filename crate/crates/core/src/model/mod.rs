//! Whisper-shaped toy encoder-decoder transcriber with LoRA adapters on the
//! query and value projections of every attention layer.
//!
//! The encoder maps `[T×F]` features to `[T×H]` states (no downsampling).
//! The decoder is a pre-norm transformer with causal self-attention and
//! cross-attention over the encoder states.

mod checkpoint;
mod config;
mod lora;

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::numerics::{Graph, NumericsError, Tensor, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, LineageEntry, CHECKPOINT_VERSION};
pub use config::{LoraConfig, ModelConfig};
pub use lora::{lora_linear, LoraAdapter};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(
        "input has {frames} frames but the encoder accepts at most {max}; split it into windows (see decoding::longform_decode)"
    )]
    TooManyFrames { frames: usize, max: usize },
    #[error("token sequence of length {len} exceeds max_token_len {max}")]
    TooManyTokens { len: usize, max: usize },
    #[error("decoder input must begin with BOS")]
    MissingBos,
    #[error("feature width {got} does not match feature_dim {expected}")]
    FeatureWidth { got: usize, expected: usize },
    #[error("input features contain non-finite values")]
    NonFinite,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which parameters an optimizer may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

/// Identifies one trainable tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    Base(usize),
    LoraA(usize),
    LoraB(usize),
}

/// Encoder states for one input, with a per-frame validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub states: Tensor,
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    ln_attn: Norm,
    attn: Attention,
    ln_mlp: Norm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    ln_self: Norm,
    self_attn: Attention,
    ln_cross: Norm,
    cross_attn: Attention,
    ln_mlp: Norm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone)]
struct Layout {
    input_proj: Linear,
    encoder: Vec<EncoderBlock>,
    encoder_ln: Norm,
    token_embedding: usize,
    decoder_positions: usize,
    decoder: Vec<DecoderBlock>,
    decoder_ln: Norm,
    output_proj: Linear,
}

/// Names and tensors of the base weights, in registration order.
#[derive(Debug, Clone, PartialEq)]
struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

enum Init {
    Gaussian(f64),
    Zeros,
    Ones,
}

struct Builder<'r, R: Rng + ?Sized> {
    params: ParamSet,
    rng: &'r mut R,
}

impl<R: Rng + ?Sized> Builder<'_, R> {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Gaussian(std) => {
                let normal = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| normal.sample(self.rng)).collect()
            }
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
        };
        self.params.names.push(name);
        self.params
            .tensors
            .push(Tensor::new(shape, data).expect("shape matches"));
        self.params.tensors.len() - 1
    }

    fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Linear {
        let weight = self.add(
            format!("{name}.weight"),
            vec![d_out, d_in],
            Init::Gaussian(1.0 / (d_in as f64).sqrt()),
        );
        let bias = self.add(format!("{name}.bias"), vec![d_out], Init::Zeros);
        Linear { weight, bias }
    }

    fn norm(&mut self, name: &str, dim: usize) -> Norm {
        Norm {
            gain: self.add(format!("{name}.gain"), vec![dim], Init::Ones),
            bias: self.add(format!("{name}.bias"), vec![dim], Init::Zeros),
        }
    }

    fn attention(&mut self, name: &str, h: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), h, h),
            k: self.linear(&format!("{name}.k"), h, h),
            v: self.linear(&format!("{name}.v"), h, h),
            o: self.linear(&format!("{name}.o"), h, h),
        }
    }
}

fn build<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> (ParamSet, Layout) {
    let h = cfg.hidden_dim;
    let mut b = Builder {
        params: ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        },
        rng,
    };
    let input_proj = b.linear("encoder.input_proj", cfg.feature_dim, h);
    let encoder = (0..cfg.encoder_layers)
        .map(|i| EncoderBlock {
            ln_attn: b.norm(&format!("encoder.{i}.ln_attn"), h),
            attn: b.attention(&format!("encoder.{i}.self_attn"), h),
            ln_mlp: b.norm(&format!("encoder.{i}.ln_mlp"), h),
            fc1: b.linear(&format!("encoder.{i}.fc1"), h, cfg.ffn_dim),
            fc2: b.linear(&format!("encoder.{i}.fc2"), cfg.ffn_dim, h),
        })
        .collect();
    let encoder_ln = b.norm("encoder.ln_post", h);
    let token_embedding = b.add(
        "decoder.token_embedding".into(),
        vec![cfg.vocab_size, h],
        Init::Gaussian(0.3),
    );
    let decoder_positions = b.add(
        "decoder.positions".into(),
        vec![cfg.max_token_len, h],
        Init::Gaussian(0.1),
    );
    let decoder = (0..cfg.decoder_layers)
        .map(|i| DecoderBlock {
            ln_self: b.norm(&format!("decoder.{i}.ln_self"), h),
            self_attn: b.attention(&format!("decoder.{i}.self_attn"), h),
            ln_cross: b.norm(&format!("decoder.{i}.ln_cross"), h),
            cross_attn: b.attention(&format!("decoder.{i}.cross_attn"), h),
            ln_mlp: b.norm(&format!("decoder.{i}.ln_mlp"), h),
            fc1: b.linear(&format!("decoder.{i}.fc1"), h, cfg.ffn_dim),
            fc2: b.linear(&format!("decoder.{i}.fc2"), cfg.ffn_dim, h),
        })
        .collect();
    let decoder_ln = b.norm("decoder.ln_post", h);
    let output_proj = b.linear("decoder.output_proj", h, cfg.vocab_size);
    let layout = Layout {
        input_proj,
        encoder,
        encoder_ln,
        token_embedding,
        decoder_positions,
        decoder,
        decoder_ln,
        output_proj,
    };
    (b.params, layout)
}

/// Frozen base transcriber plus optional LoRA adapters.
#[derive(Debug, Clone)]
pub struct TranscriberModel {
    config: ModelConfig,
    base: ParamSet,
    layout: Layout,
    /// Adapter target weight name → adapter, kept sorted by name.
    adapters: Vec<(String, LoraAdapter)>,
    adapter_of: HashMap<usize, usize>,
    lineage: Vec<LineageEntry>,
}

impl PartialEq for TranscriberModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.base == other.base
            && self.adapters == other.adapters
            && self.lineage == other.lineage
    }
}

impl TranscriberModel {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let (base, layout) = build(&config, rng);
        Ok(Self {
            config,
            base,
            layout,
            adapters: Vec::new(),
            adapter_of: HashMap::new(),
            lineage: Vec::new(),
        })
    }

    /// Deterministic construction from a seed, recorded in the lineage.
    pub fn from_seed(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let mut rng = crate::seeded_rng(seed, crate::RngStream::ModelInit);
        let mut model = Self::new(config, &mut rng)?;
        model.lineage.push(LineageEntry {
            stage: "init".into(),
            seed,
        });
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn lineage(&self) -> &[LineageEntry] {
        &self.lineage
    }

    pub fn push_lineage(&mut self, stage: impl Into<String>, seed: u64) {
        self.lineage.push(LineageEntry {
            stage: stage.into(),
            seed,
        });
    }

    /// Names of the weights that receive adapters: q and v of every
    /// self- and cross-attention layer.
    pub fn adapter_targets(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut add = |att: &Attention| {
            out.push(self.base.names[att.q.weight].clone());
            out.push(self.base.names[att.v.weight].clone());
        };
        for blk in &self.layout.encoder {
            add(&blk.attn);
        }
        for blk in &self.layout.decoder {
            add(&blk.self_attn);
            add(&blk.cross_attn);
        }
        out
    }

    /// Attaches fresh adapters (`B = 0`) to every target weight, replacing
    /// any existing ones.
    pub fn attach_lora<R: Rng + ?Sized>(&mut self, cfg: &LoraConfig, rng: &mut R) -> Result<(), ModelError> {
        cfg.validate()?;
        let mut adapters = Vec::new();
        for name in self.adapter_targets() {
            let idx = self.base_index(&name).expect("target exists");
            let shape = self.base.tensors[idx].shape();
            let (d_out, d_in) = (shape[0], shape[1]);
            adapters.push((name, LoraAdapter::new(d_in, d_out, cfg, rng)));
        }
        self.set_adapters(adapters)
    }

    fn set_adapters(&mut self, mut adapters: Vec<(String, LoraAdapter)>) -> Result<(), ModelError> {
        adapters.sort_by(|a, b| a.0.cmp(&b.0));
        let mut adapter_of = HashMap::new();
        for (i, (name, ad)) in adapters.iter().enumerate() {
            let idx = self
                .base_index(name)
                .ok_or_else(|| ModelError::Checkpoint(format!("adapter targets unknown weight {name}")))?;
            let shape = self.base.tensors[idx].shape();
            if shape != [ad.d_out(), ad.d_in()] {
                return Err(ModelError::Checkpoint(format!(
                    "adapter for {name} has shape {}x{} but weight is {:?}",
                    ad.d_out(),
                    ad.d_in(),
                    shape
                )));
            }
            adapter_of.insert(idx, i);
        }
        self.adapters = adapters;
        self.adapter_of = adapter_of;
        Ok(())
    }

    pub fn adapters(&self) -> &[(String, LoraAdapter)] {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> impl Iterator<Item = (&str, &mut LoraAdapter)> {
        self.adapters.iter_mut().map(|(n, a)| (n.as_str(), a))
    }

    pub fn has_adapters(&self) -> bool {
        !self.adapters.is_empty()
    }

    /// Returns the model without adapters.
    pub fn without_adapters(&self) -> Self {
        let mut out = self.clone();
        out.adapters.clear();
        out.adapter_of.clear();
        out
    }

    /// Folds every adapter into its base weight and drops the adapters.
    pub fn merged(&self) -> Result<Self, ModelError> {
        let mut out = self.without_adapters();
        for (name, ad) in &self.adapters {
            let idx = self.base_index(name).expect("adapter target exists");
            out.base.tensors[idx] = ad.merged_weight(&self.base.tensors[idx])?;
        }
        Ok(out)
    }

    fn base_index(&self, name: &str) -> Option<usize> {
        self.base.names.iter().position(|n| n == name)
    }

    pub fn base_parameters(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.base.names.iter().map(String::as_str).zip(&self.base.tensors)
    }

    pub fn base_parameter_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let idx = self.base_index(name)?;
        Some(&mut self.base.tensors[idx])
    }

    /// Tensors an optimizer may update in `phase`: every base weight when
    /// pretraining, exactly the adapter `A`/`B` matrices when fine-tuning.
    pub fn trainable_parameters(&self, phase: Phase) -> Vec<ParamId> {
        match phase {
            Phase::Pretrain => (0..self.base.tensors.len()).map(ParamId::Base).collect(),
            Phase::Finetune => (0..self.adapters.len())
                .flat_map(|i| [ParamId::LoraA(i), ParamId::LoraB(i)])
                .collect(),
        }
    }

    pub fn param_name(&self, id: ParamId) -> String {
        match id {
            ParamId::Base(i) => self.base.names[i].clone(),
            ParamId::LoraA(i) => format!("{}.lora_a", self.adapters[i].0),
            ParamId::LoraB(i) => format!("{}.lora_b", self.adapters[i].0),
        }
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        match id {
            ParamId::Base(i) => &self.base.tensors[i],
            ParamId::LoraA(i) => &self.adapters[i].1.a,
            ParamId::LoraB(i) => &self.adapters[i].1.b,
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor {
        match id {
            ParamId::Base(i) => &mut self.base.tensors[i],
            ParamId::LoraA(i) => &mut self.adapters[i].1.a,
            ParamId::LoraB(i) => &mut self.adapters[i].1.b,
        }
    }

    /// Mutable references to the trainable tensors of `phase`, in
    /// [`trainable_parameters`](Self::trainable_parameters) order.
    pub fn trainable_tensors_mut(&mut self, phase: Phase) -> Vec<&mut Tensor> {
        match phase {
            Phase::Pretrain => self.base.tensors.iter_mut().collect(),
            Phase::Finetune => self
                .adapters
                .iter_mut()
                .flat_map(|(_, a)| [&mut a.a, &mut a.b])
                .collect(),
        }
    }

    /// Sets `requires_grad` so that exactly the tensors of `phase` train.
    pub fn set_phase(&mut self, phase: Phase) {
        let pretrain = phase == Phase::Pretrain;
        for t in &mut self.base.tensors {
            t.set_requires_grad(pretrain);
        }
        for (_, a) in &mut self.adapters {
            a.a.set_requires_grad(!pretrain);
            a.b.set_requires_grad(!pretrain);
        }
    }

    pub fn zero_grad(&mut self) {
        self.base.tensors.iter_mut().for_each(Tensor::zero_grad);
        for (_, a) in &mut self.adapters {
            a.a.zero_grad();
            a.b.zero_grad();
        }
    }

    /// SHA-256 over base weight names, shapes and raw bits.
    pub fn base_digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.base_parameters() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex_digest(h)
    }

    /// Digest of base weights and adapters together.
    pub fn full_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.base_digest().as_bytes());
        for (name, a) in &self.adapters {
            h.update(name.as_bytes());
            for v in a.a.data().iter().chain(a.b.data()) {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex_digest(h)
    }

    pub fn bind<'g>(&'g self, graph: &'g Graph) -> BoundModel<'g> {
        let base = self.base.tensors.iter().map(|t| graph.leaf(t)).collect();
        let adapters = self
            .adapters
            .iter()
            .map(|(_, a)| (graph.leaf(&a.a), graph.leaf(&a.b)))
            .collect();
        BoundModel {
            model: self,
            graph,
            base,
            adapters,
        }
    }

    /// Encodes features into concrete tensors. `rng` switches on train mode.
    pub fn encode(&self, x: &Tensor, rng: Option<&mut rand_chacha::ChaCha8Rng>) -> Result<EncoderOutput, ModelError> {
        let g = Graph::new();
        let bound = self.bind(&g);
        let states = bound.encode(x, rng)?;
        Ok(EncoderOutput {
            states: g.tensor(states),
            mask: vec![true; x.rows()],
        })
    }

    /// Teacher-forced decoder logits `[L×V]` for `tokens` (starting with BOS).
    pub fn decoder_forward(
        &self,
        encoded: &EncoderOutput,
        tokens: &[usize],
        rng: Option<&mut rand_chacha::ChaCha8Rng>,
    ) -> Result<Tensor, ModelError> {
        let g = Graph::new();
        let bound = self.bind(&g);
        let states = g.leaf(&encoded.states);
        let logits = bound.decode(states, tokens, rng)?;
        Ok(g.tensor(logits))
    }
}

fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// A model whose parameters have been recorded as leaves of one graph.
pub struct BoundModel<'g> {
    model: &'g TranscriberModel,
    graph: &'g Graph,
    base: Vec<Var>,
    adapters: Vec<(Var, Var)>,
}

impl<'g> BoundModel<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn var(&self, id: ParamId) -> Var {
        match id {
            ParamId::Base(i) => self.base[i],
            ParamId::LoraA(i) => self.adapters[i].0,
            ParamId::LoraB(i) => self.adapters[i].1,
        }
    }

    fn linear(&self, l: Linear, x: Var, rng: Option<&mut rand_chacha::ChaCha8Rng>) -> Result<Var, NumericsError> {
        let adapter = self.model.adapter_of.get(&l.weight).map(|&i| {
            let (a, b) = self.adapters[i];
            (a, b, &self.model.adapters[i].1)
        });
        lora::record_lora_linear(
            self.graph,
            x,
            self.base[l.weight],
            Some(self.base[l.bias]),
            adapter,
            rng,
        )
    }

    fn norm(&self, n: Norm, x: Var) -> Result<Var, NumericsError> {
        self.graph
            .layer_norm(x, self.base[n.gain], self.base[n.bias], 1e-5)
    }

    fn residual(&self, x: Var, sub: Var, rng: &mut Option<&mut rand_chacha::ChaCha8Rng>) -> Result<Var, NumericsError> {
        let p = self.model.config.dropout;
        let sub = match rng {
            Some(r) if p > 0.0 => self.graph.dropout(sub, p, &mut **r)?,
            _ => sub,
        };
        self.graph.add(x, sub)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        att: &Attention,
        query: Var,
        memory: Var,
        q_segs: &[usize],
        k_segs: &[usize],
        causal: bool,
        rng: &mut Option<&mut rand_chacha::ChaCha8Rng>,
    ) -> Result<Var, NumericsError> {
        let q = self.linear(att.q, query, rng.as_deref_mut())?;
        let k = self.linear(att.k, memory, None)?;
        let v = self.linear(att.v, memory, rng.as_deref_mut())?;
        let heads = self.model.config.num_heads;
        let merged = self.graph.segment_attention(q, k, v, heads, q_segs, k_segs, causal)?;
        self.linear(att.o, merged, None)
    }

    fn mlp(&self, fc1: Linear, fc2: Linear, x: Var) -> Result<Var, NumericsError> {
        let h = self.graph.gelu(self.linear(fc1, x, None)?);
        self.linear(fc2, h, None)
    }

    /// Encoder states `[T×H]` for features `x: [T×F]`.
    pub fn encode(&self, x: &Tensor, rng: Option<&mut rand_chacha::ChaCha8Rng>) -> Result<Var, ModelError> {
        self.encode_batch(&[x], rng)
    }

    /// Encoder states of several inputs stacked row-wise: `[ΣTᵢ×H]`.
    /// Inputs never attend to each other.
    pub fn encode_batch(
        &self,
        xs: &[&Tensor],
        mut rng: Option<&mut rand_chacha::ChaCha8Rng>,
    ) -> Result<Var, ModelError> {
        let cfg = &self.model.config;
        let mut segs = Vec::with_capacity(xs.len());
        for x in xs {
            if x.shape().len() != 2 || x.cols() != cfg.feature_dim {
                return Err(ModelError::FeatureWidth {
                    got: x.cols(),
                    expected: cfg.feature_dim,
                });
            }
            if x.rows() > cfg.max_audio_frames {
                return Err(ModelError::TooManyFrames {
                    frames: x.rows(),
                    max: cfg.max_audio_frames,
                });
            }
            if !x.is_finite() {
                return Err(ModelError::NonFinite);
            }
            segs.push(x.rows());
        }
        let total: usize = segs.iter().sum();
        let g = self.graph;
        let l = &self.model.layout;
        let mut stacked = Vec::with_capacity(total * cfg.feature_dim);
        let mut positions = Vec::with_capacity(total * cfg.hidden_dim);
        for x in xs {
            stacked.extend_from_slice(x.data());
            positions.extend(sinusoids(x.rows(), cfg.hidden_dim));
        }
        let input = g.constant(vec![total, cfg.feature_dim], stacked)?;
        let projected = g.gelu(self.linear(l.input_proj, input, None)?);
        let positions = g.constant(vec![total, cfg.hidden_dim], positions)?;
        let mut h = g.add(projected, positions)?;
        for blk in &l.encoder {
            let n = self.norm(blk.ln_attn, h)?;
            let a = self.attention(&blk.attn, n, n, &segs, &segs, false, &mut rng)?;
            h = self.residual(h, a, &mut rng)?;
            let n = self.norm(blk.ln_mlp, h)?;
            let m = self.mlp(blk.fc1, blk.fc2, n)?;
            h = self.residual(h, m, &mut rng)?;
        }
        Ok(self.norm(l.encoder_ln, h)?)
    }

    /// Logits `[L×V]` for decoder input `tokens` attending to `states`.
    pub fn decode(
        &self,
        states: Var,
        tokens: &[usize],
        rng: Option<&mut rand_chacha::ChaCha8Rng>,
    ) -> Result<Var, ModelError> {
        let frames = self.graph.shape(states)[0];
        self.decode_batch(states, &[frames], &[tokens], rng)
    }

    /// Stacked logits `[ΣLᵢ×V]`: sequence `i` attends to rows
    /// `frame_segs[i]` of the stacked encoder `states`.
    pub fn decode_batch(
        &self,
        states: Var,
        frame_segs: &[usize],
        tokens: &[&[usize]],
        mut rng: Option<&mut rand_chacha::ChaCha8Rng>,
    ) -> Result<Var, ModelError> {
        let cfg = &self.model.config;
        let mut segs = Vec::with_capacity(tokens.len());
        let mut ids = Vec::new();
        let mut pos_ids = Vec::new();
        for t in tokens {
            if t.first() != Some(&crate::synthdata::BOS) {
                return Err(ModelError::MissingBos);
            }
            if t.len() > cfg.max_token_len {
                return Err(ModelError::TooManyTokens {
                    len: t.len(),
                    max: cfg.max_token_len,
                });
            }
            segs.push(t.len());
            ids.extend_from_slice(t);
            pos_ids.extend(0..t.len());
        }
        let g = self.graph;
        let l = &self.model.layout;
        let tok = g.embedding(self.base[l.token_embedding], &ids)?;
        let pos = g.embedding(self.base[l.decoder_positions], &pos_ids)?;
        let mut h = g.add(tok, pos)?;
        for blk in &l.decoder {
            let n = self.norm(blk.ln_self, h)?;
            let a = self.attention(&blk.self_attn, n, n, &segs, &segs, true, &mut rng)?;
            h = self.residual(h, a, &mut rng)?;
            let n = self.norm(blk.ln_cross, h)?;
            let c = self.attention(&blk.cross_attn, n, states, &segs, frame_segs, false, &mut rng)?;
            h = self.residual(h, c, &mut rng)?;
            let n = self.norm(blk.ln_mlp, h)?;
            let m = self.mlp(blk.fc1, blk.fc2, n)?;
            h = self.residual(h, m, &mut rng)?;
        }
        let h = self.norm(l.decoder_ln, h)?;
        Ok(self.linear(l.output_proj, h, None)?)
    }

    /// Adds the gradients held in `grads` into every trainable tensor of
    /// `target` (which must be the model this binding was made from, or a
    /// structurally identical one).
    pub fn accumulate_grads(&self, grads: &crate::numerics::Gradients, target: &mut TranscriberModel) {
        for (i, &v) in self.base.iter().enumerate() {
            grads.accumulate_into(v, &mut target.base.tensors[i]);
        }
        for (i, &(a, b)) in self.adapters.iter().enumerate() {
            let ad = &mut target.adapters[i].1;
            grads.accumulate_into(a, &mut ad.a);
            grads.accumulate_into(b, &mut ad.b);
        }
    }
}

/// Fixed sinusoidal position table `[frames×dim]`.
pub fn sinusoids(frames: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; frames * dim];
    let log_timescale = if half > 1 {
        (10_000f64).ln() / (half - 1) as f64
    } else {
        0.0
    };
    for t in 0..frames {
        for i in 0..half {
            let angle = t as f64 * (-(log_timescale * i as f64)).exp();
            out[t * dim + i] = angle.sin();
            out[t * dim + half + i] = angle.cos();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{BOS, EOS};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn features(frames: usize, f: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![frames, f],
            (0..frames * f).map(|_| rng.sample(StandardNormal)).collect(),
        )
        .unwrap()
    }

    fn model() -> TranscriberModel {
        TranscriberModel::from_seed(ModelConfig::default(), 7).unwrap()
    }

    #[test]
    fn encoder_preserves_frame_count() {
        let m = model();
        let out = m.encode(&features(12, 16, 0), None).unwrap();
        assert_eq!(out.states.shape(), &[12, 32]);
        assert_eq!(out.mask.len(), 12);
    }

    #[test]
    fn encoder_is_deterministic_in_eval_mode() {
        let m = model();
        let x = features(9, 16, 1);
        assert_eq!(m.encode(&x, None).unwrap(), m.encode(&x, None).unwrap());
    }

    #[test]
    fn too_many_frames_is_rejected() {
        let m = model();
        let err = m.encode(&features(65, 16, 2), None).unwrap_err();
        assert!(matches!(err, ModelError::TooManyFrames { frames: 65, max: 64 }));
        assert!(err.to_string().contains("windows"));
    }

    #[test]
    fn bos_only_gives_single_row_of_logits() {
        let m = model();
        let enc = m.encode(&features(6, 16, 3), None).unwrap();
        let logits = m.decoder_forward(&enc, &[BOS], None).unwrap();
        assert_eq!(logits.shape(), &[1, m.config().vocab_size]);
    }

    #[test]
    fn decoder_rejects_out_of_vocab_token() {
        let m = model();
        let enc = m.encode(&features(6, 16, 3), None).unwrap();
        let err = m.decoder_forward(&enc, &[BOS, 30], None).unwrap_err();
        assert!(matches!(
            err,
            ModelError::Numerics(NumericsError::Index { index: 30, .. })
        ));
    }

    #[test]
    fn future_tokens_do_not_affect_past_logits() {
        let m = model();
        let enc = m.encode(&features(10, 16, 4), None).unwrap();
        let a = m.decoder_forward(&enc, &[BOS, 5, 6, 7, EOS], None).unwrap();
        let b = m.decoder_forward(&enc, &[BOS, 5, 6, 12, 9], None).unwrap();
        let v = m.config().vocab_size;
        assert_eq!(&a.data()[..3 * v], &b.data()[..3 * v]);
        assert_ne!(&a.data()[3 * v..], &b.data()[3 * v..]);
    }

    #[test]
    fn finetune_parameter_count_matches_rank_formula() {
        let mut m = model();
        assert!(m.trainable_parameters(Phase::Finetune).is_empty());
        let cfg = LoraConfig::default();
        m.attach_lora(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let count: usize = m
            .trainable_parameters(Phase::Finetune)
            .iter()
            .map(|&id| m.param(id).numel())
            .sum();
        let h = m.config().hidden_dim;
        let targets = m.adapter_targets().len();
        assert_eq!(targets, 2 * (2 + 2 * 2));
        assert_eq!(count, targets * cfg.rank * (h + h));
        assert_eq!(
            m.trainable_parameters(Phase::Pretrain).len(),
            m.base_parameters().count()
        );
    }

    #[test]
    fn zero_init_adapters_are_bit_identical_noop() {
        let base = model();
        let mut adapted = base.clone();
        adapted
            .attach_lora(&LoraConfig::default(), &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        let x = features(11, 16, 5);
        let e0 = base.encode(&x, None).unwrap();
        let e1 = adapted.encode(&x, None).unwrap();
        assert_eq!(e0, e1);
        let tokens = [BOS, 4, 5, 3, 6];
        assert_eq!(
            base.decoder_forward(&e0, &tokens, None).unwrap(),
            adapted.decoder_forward(&e1, &tokens, None).unwrap()
        );
    }

    #[test]
    fn digest_tracks_base_weights_only() {
        let mut m = model();
        let d0 = m.base_digest();
        m.attach_lora(&LoraConfig::default(), &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        assert_eq!(m.base_digest(), d0);
        m.base_parameter_mut("decoder.output_proj.bias").unwrap().data_mut()[0] += 1.0;
        assert_ne!(m.base_digest(), d0);
    }
}
