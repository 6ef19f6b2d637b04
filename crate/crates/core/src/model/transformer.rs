//! Pre-norm decoder-only transformer with learned absolute positions.
//!
//! The forward pass is written once against [`Bound`], a set of tape
//! variables for the backbone plus one [`BoundLinear`] per eligible layer.
//! The dense, masked and converted models differ only in how they bind their
//! linear layers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::config::{ModelConfig, PretrainConfig};
use super::{LayerKind, LayerSite};
use crate::error::{Error, Result};
use crate::tensor::{AdamW, AdamWConfig, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    fn new(d: usize) -> Self {
        Self {
            gamma: Tensor::from_parts(vec![d], vec![1.0; d]),
            beta: Tensor::zeros(vec![d]),
        }
    }
}

/// Everything except the factorizable linear layers. Never compressed.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    /// `vocab × d_model`
    pub token_embedding: Tensor,
    /// `max_seq × d_model`
    pub position_embedding: Tensor,
    /// Per block: the norm before attention and the norm before the MLP.
    pub norms: Vec<[LayerNormParams; 2]>,
    pub final_norm: LayerNormParams,
    /// Logits projection, `vocab × d_model`.
    pub lm_head: Tensor,
}

fn normal_tensor(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_parts(shape, (0..n).map(|_| dist.sample(rng)).collect())
}

impl Backbone {
    fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        Self {
            token_embedding: normal_tensor(vec![cfg.vocab, d], 0.02, rng),
            position_embedding: normal_tensor(vec![cfg.max_seq, d], 0.02, rng),
            norms: (0..cfg.n_layers)
                .map(|_| [LayerNormParams::new(d), LayerNormParams::new(d)])
                .collect(),
            final_norm: LayerNormParams::new(d),
            lm_head: normal_tensor(vec![cfg.vocab, d], 0.02, rng),
        }
    }

    /// Expected `(name, shape)` pairs in serialization order.
    pub fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let d = cfg.d_model;
        let mut out = vec![
            ("tok_emb".to_string(), vec![cfg.vocab, d]),
            ("pos_emb".to_string(), vec![cfg.max_seq, d]),
        ];
        for i in 0..cfg.n_layers {
            for ln in ["ln1", "ln2"] {
                out.push((format!("blocks.{i}.{ln}.gamma"), vec![d]));
                out.push((format!("blocks.{i}.{ln}.beta"), vec![d]));
            }
        }
        out.push(("ln_f.gamma".into(), vec![d]));
        out.push(("ln_f.beta".into(), vec![d]));
        out.push(("lm_head".into(), vec![cfg.vocab, d]));
        out
    }

    /// Tensors in the same order as [`Backbone::layout`].
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.token_embedding, &self.position_embedding];
        for [a, b] in &self.norms {
            out.extend([&a.gamma, &a.beta, &b.gamma, &b.beta]);
        }
        out.extend([&self.final_norm.gamma, &self.final_norm.beta, &self.lm_head]);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for [a, b] in &mut self.norms {
            out.extend([&mut a.gamma, &mut a.beta, &mut b.gamma, &mut b.beta]);
        }
        out.extend([&mut self.final_norm.gamma, &mut self.final_norm.beta, &mut self.lm_head]);
        out
    }

    /// Inverse of [`Backbone::tensors`]; shapes must match the layout.
    pub fn from_tensors(cfg: &ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let layout = Self::layout(cfg);
        if tensors.len() != layout.len() {
            return Err(Error::contract(format!(
                "backbone needs {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::dim("backbone", format!("{name}: {:?} vs {shape:?}", t.shape())));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        let token_embedding = next();
        let position_embedding = next();
        let norms = (0..cfg.n_layers)
            .map(|_| {
                let a = LayerNormParams { gamma: next(), beta: next() };
                let b = LayerNormParams { gamma: next(), beta: next() };
                [a, b]
            })
            .collect();
        let final_norm = LayerNormParams { gamma: next(), beta: next() };
        Ok(Self {
            token_embedding,
            position_embedding,
            norms,
            final_norm,
            lm_head: next(),
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub(crate) fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<(BoundBackbone, Vec<Var>)> {
        let vars: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("one var per tensor");
        let tok = next();
        let pos = next();
        let norms = (0..self.norms.len())
            .map(|_| {
                let a = BoundNorm { gamma: next(), beta: next() };
                let b = BoundNorm { gamma: next(), beta: next() };
                (a, b)
            })
            .collect();
        let final_norm = BoundNorm { gamma: next(), beta: next() };
        let head = next();
        let head_t = tape.transpose(head)?;
        Ok((
            BoundBackbone {
                tok,
                pos,
                norms,
                final_norm,
                head_t,
            },
            vars,
        ))
    }

    fn hash_into(&self, h: &mut Sha256) {
        for t in self.tensors() {
            hash_tensor(h, t);
        }
    }
}

pub(crate) fn hash_tensor(h: &mut Sha256, t: &Tensor) {
    for d in t.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    for v in t.data() {
        h.update(v.to_bits().to_le_bytes());
    }
}

pub(crate) fn checksum_of(backbone: &Backbone, extra: &[&Tensor]) -> String {
    let mut h = Sha256::new();
    backbone.hash_into(&mut h);
    for t in extra {
        hash_tensor(&mut h, t);
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct BoundNorm {
    gamma: Var,
    beta: Var,
}

#[derive(Clone, Debug)]
pub(crate) struct BoundBackbone {
    tok: Var,
    pos: Var,
    norms: Vec<(BoundNorm, BoundNorm)>,
    final_norm: BoundNorm,
    head_t: Var,
}

/// How one linear layer `y = x·Wᵀ` is applied on the tape.
#[derive(Clone, Copy, Debug)]
pub(crate) enum BoundLinear {
    /// Holds `Wᵀ` (`in × out`).
    Dense(Var),
    /// `y = (x · right_t) · left_t` with `right_t: in × k`, `left_t: k × out`.
    LowRank { right_t: Var, left_t: Var },
}

impl BoundLinear {
    fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match *self {
            BoundLinear::Dense(wt) => tape.matmul(x, wt),
            BoundLinear::LowRank { right_t, left_t } => {
                let h = tape.matmul(x, right_t)?;
                tape.matmul(h, left_t)
            }
        }
    }
}

pub(crate) struct Bound {
    pub backbone: BoundBackbone,
    /// Indexed by [`LayerSite::index`].
    pub linears: Vec<BoundLinear>,
}

/// The three activations every forward pass exposes.
#[derive(Clone, Copy, Debug)]
pub(crate) struct HiddenVars {
    pub middle: Var,
    pub pre_logits: Var,
    pub logits: Var,
}

/// Tensor-valued result of a forward pass over one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// Post-residual output of block `floor(n_layers / 2)`, `seq × d_model`.
    pub middle_hidden: Tensor,
    /// After the final layer norm, `seq × d_model`.
    pub pre_logits_hidden: Tensor,
    /// `seq × vocab`
    pub logits: Tensor,
}

impl ForwardOutput {
    pub(crate) fn from_tape(tape: &Tape, h: HiddenVars) -> Self {
        Self {
            middle_hidden: tape.value(h.middle).clone(),
            pre_logits_hidden: tape.value(h.pre_logits).clone(),
            logits: tape.value(h.logits).clone(),
        }
    }
}

pub(crate) fn check_tokens(cfg: &ModelConfig, ids: &[usize]) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::contract("empty token sequence"));
    }
    if ids.len() > cfg.max_seq {
        return Err(Error::contract(format!(
            "sequence of {} tokens exceeds max_seq {}",
            ids.len(),
            cfg.max_seq
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&t| t >= cfg.vocab) {
        return Err(Error::contract(format!("token {bad} outside vocab {}", cfg.vocab)));
    }
    Ok(())
}

/// Observer for the input of every linear layer (used for whitening).
pub(crate) type InputObserver<'a> = &'a mut dyn FnMut(LayerSite, &Tensor) -> Result<()>;

pub(crate) fn forward_on_tape(
    tape: &mut Tape,
    cfg: &ModelConfig,
    bound: &Bound,
    ids: &[usize],
    mut observe: Option<InputObserver<'_>>,
) -> Result<HiddenVars> {
    check_tokens(cfg, ids)?;
    let bb = &bound.backbone;
    let positions: Vec<usize> = (0..ids.len()).collect();
    let tok = tape.embedding(bb.tok, ids)?;
    let pos = tape.embedding(bb.pos, &positions)?;
    let mut x = tape.add(tok, pos)?;
    let mut middle = None;
    let dh = cfg.head_dim();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();

    let mut linear = |tape: &mut Tape, layer: usize, kind: LayerKind, input: Var| -> Result<Var> {
        let site = LayerSite { layer, kind };
        if let Some(obs) = observe.as_mut() {
            obs(site, tape.value(input))?;
        }
        bound.linears[site.index()].apply(tape, input)
    };

    for (layer, (ln1, ln2)) in bb.norms.iter().enumerate() {
        let a = tape.layer_norm(x, ln1.gamma, ln1.beta)?;
        let q = linear(tape, layer, LayerKind::Q, a)?;
        let k = linear(tape, layer, LayerKind::K, a)?;
        let v = linear(tape, layer, LayerKind::V, a)?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, inv_sqrt)?;
            let p = tape.causal_softmax(scores)?;
            heads.push(tape.matmul(p, vh)?);
        }
        let cat = tape.concat_cols(&heads)?;
        let o = linear(tape, layer, LayerKind::O, cat)?;
        x = tape.add(x, o)?;

        let b = tape.layer_norm(x, ln2.gamma, ln2.beta)?;
        let up = linear(tape, layer, LayerKind::Up, b)?;
        let act = tape.gelu(up)?;
        let down = linear(tape, layer, LayerKind::Down, act)?;
        x = tape.add(x, down)?;
        if layer == cfg.middle_layer() {
            middle = Some(x);
        }
    }
    let pre_logits = tape.layer_norm(x, bb.final_norm.gamma, bb.final_norm.beta)?;
    let logits = tape.matmul(pre_logits, bb.head_t)?;
    Ok(HiddenVars {
        middle: middle.ok_or_else(|| Error::contract("model has no middle block"))?,
        pre_logits,
        logits,
    })
}

/// The original (dense) model.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyTransformer {
    config: ModelConfig,
    backbone: Backbone,
    /// `out × in` weights indexed by [`LayerSite::index`].
    linears: Vec<Tensor>,
    frozen: bool,
}

/// Loss trace of a pre-training run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
}

impl PretrainReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

impl ToyTransformer {
    /// Seeded random initialization (not frozen).
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let backbone = Backbone::init(&config, &mut rng);
        let residual_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let linears = config
            .sites()
            .into_iter()
            .map(|site| {
                let (m, n) = config.dims(site.kind);
                let mut std = 1.0 / (n as f64).sqrt();
                if matches!(site.kind, LayerKind::O | LayerKind::Down) {
                    std *= residual_scale;
                }
                normal_tensor(vec![m, n], std, &mut rng)
            })
            .collect();
        Ok(Self {
            config,
            backbone,
            linears,
            frozen: false,
        })
    }

    pub fn from_parts(config: ModelConfig, backbone: Backbone, linears: Vec<Tensor>, frozen: bool) -> Result<Self> {
        config.validate()?;
        let sites = config.sites();
        if linears.len() != sites.len() {
            return Err(Error::contract(format!("{} linear weights for {} sites", linears.len(), sites.len())));
        }
        for (site, w) in sites.iter().zip(&linears) {
            let (m, n) = config.dims(site.kind);
            if w.shape() != [m, n] {
                return Err(Error::dim("linear", format!("{}: {:?} vs [{m}, {n}]", site.name(), w.shape())));
            }
        }
        // Validates backbone shapes.
        let backbone = Backbone::from_tensors(&config, backbone.tensors().into_iter().cloned().collect())?;
        Ok(Self {
            config,
            backbone,
            linears,
            frozen,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn weight(&self, site: LayerSite) -> &Tensor {
        &self.linears[site.index()]
    }

    /// Mutable weight access; fails once the model is frozen.
    pub fn weight_mut(&mut self, site: LayerSite) -> Result<&mut Tensor> {
        if self.frozen {
            return Err(Error::contract("model is frozen"));
        }
        Ok(&mut self.linears[site.index()])
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.linears
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn parameter_count(&self) -> usize {
        self.backbone.parameter_count() + self.linears.iter().map(Tensor::numel).sum::<usize>()
    }

    /// SHA-256 over every parameter, as hex.
    pub fn checksum(&self) -> String {
        checksum_of(&self.backbone, &self.linears.iter().collect::<Vec<_>>())
    }

    pub(crate) fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<(Bound, Vec<Var>)> {
        let (backbone, mut vars) = self.backbone.bind(tape, trainable)?;
        let mut linears = Vec::with_capacity(self.linears.len());
        for w in &self.linears {
            let v = if trainable {
                tape.param(w.clone())
            } else {
                tape.constant(w.clone())
            };
            vars.push(v);
            linears.push(BoundLinear::Dense(tape.transpose(v)?));
        }
        Ok((Bound { backbone, linears }, vars))
    }

    pub fn forward(&self, ids: &[usize]) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let (bound, _) = self.bind(&mut tape, false)?;
        let h = forward_on_tape(&mut tape, &self.config, &bound, ids, None)?;
        Ok(ForwardOutput::from_tape(&tape, h))
    }

    /// Forward pass that also reports the input of every linear layer.
    pub(crate) fn forward_observed(&self, ids: &[usize], observe: InputObserver<'_>) -> Result<()> {
        let mut tape = Tape::new();
        let (bound, _) = self.bind(&mut tape, false)?;
        forward_on_tape(&mut tape, &self.config, &bound, ids, Some(observe))?;
        Ok(())
    }

    /// Next-token training on random windows of a packed token stream.
    pub fn pretrain(&mut self, stream: &[usize], settings: &PretrainConfig) -> Result<PretrainReport> {
        if self.frozen {
            return Err(Error::contract("cannot pre-train a frozen model"));
        }
        if stream.len() < 2 {
            return Err(Error::contract("pre-training corpus needs at least two tokens"));
        }
        if settings.batch_size == 0 {
            return Err(Error::contract("batch size must be at least 1"));
        }
        let window = (settings.seq_len.min(self.config.max_seq)).min(stream.len() - 1) + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5e_ed0f_7a11);
        let mut opt = AdamW::new(AdamWConfig {
            lr: settings.lr,
            weight_decay: settings.weight_decay,
            ..AdamWConfig::default()
        });
        let mut report = PretrainReport::default();
        let starts = stream.len() - window + 1;
        for step in 0..settings.steps {
            let mut tape = Tape::new();
            let (bound, vars) = self.bind(&mut tape, true)?;
            let mut total: Option<Var> = None;
            for _ in 0..settings.batch_size {
                let s = rand::Rng::random_range(&mut rng, 0..starts);
                let w = &stream[s..s + window];
                let h = forward_on_tape(&mut tape, &self.config, &bound, &w[..window - 1], None)
                    .map_err(|e| step_error(step, e))?;
                let ce = tape.cross_entropy(h.logits, &w[1..]).map_err(|e| step_error(step, e))?;
                total = Some(match total {
                    None => ce,
                    Some(t) => tape.add(t, ce)?,
                });
            }
            let loss = tape
                .scale(total.expect("batch_size >= 1"), 1.0 / settings.batch_size as f64)
                .map_err(|e| step_error(step, e))?;
            report.losses.push(tape.value(loss).item());
            let mut grads = tape.gradient(loss, &vars)?;
            let grads: Vec<Tensor> = vars
                .iter()
                .map(|&v| grads.take(v).expect("gradient for every parameter"))
                .collect();
            let mut params = self.backbone.tensors_mut();
            params.extend(self.linears.iter_mut());
            opt.step(&mut params, &grads.iter().collect::<Vec<_>>())
                .map_err(|e| step_error(step, e))?;
        }
        Ok(report)
    }
}

fn step_error(step: usize, e: Error) -> Error {
    match e {
        Error::Numeric { op, detail } => Error::Numeric {
            op: format!("pre-training step {step}: {op}"),
            detail,
        },
        other => other,
    }
}

/// Initialize from `config.seed`, pre-train for `settings.steps` steps and
/// freeze.
pub fn build_and_pretrain(
    config: ModelConfig,
    stream: &[usize],
    settings: &PretrainConfig,
) -> Result<(ToyTransformer, PretrainReport)> {
    if stream.is_empty() {
        return Err(Error::contract("pre-training corpus is empty"));
    }
    let mut model = ToyTransformer::init(config)?;
    let report = if settings.steps == 0 {
        PretrainReport::default()
    } else {
        model.pretrain(stream, settings)?
    };
    model.freeze();
    Ok((model, report))
}
