//! The toy model with every eligible linear layer replaced by its SVD factors
//! and a vector of mask logits.

use std::collections::BTreeSet;
use std::str::FromStr;

use rand::Rng;

use super::config::ModelConfig;
use super::corpus::DocId;
use super::transformer::{checksum_of, forward_on_tape, Backbone, Bound, BoundLinear, ForwardOutput, HiddenVars, ToyTransformer};
use super::LayerSite;
use crate::error::{Error, Result};
use crate::lowrank::{decompose_weighted, Decomposition, WhiteningAccumulator, DEFAULT_EPSILON_FLOOR};
use crate::masking::MaskLogits;
use crate::tensor::{Tape, Tensor, Var};

/// Which mask each factorized layer applies during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// A fresh Gumbel-sigmoid sample per layer.
    SoftSample,
    /// `harden(logits)`.
    Hard,
    /// Every singular value kept.
    AllOnes,
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft-sample" => Ok(Self::SoftSample),
            "hard" => Ok(Self::Hard),
            "all-ones" => Ok(Self::AllOnes),
            other => Err(Error::contract(format!("unknown mask mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedLayer {
    pub site: LayerSite,
    pub decomposition: Decomposition,
    pub logits: MaskLogits,
}

impl MaskedLayer {
    pub fn dims(&self) -> (usize, usize) {
        (self.decomposition.factors.m, self.decomposition.factors.n)
    }

    /// `Wᵀ = diag(s)⁻¹ · V · diag(σ ∘ mask) · Uᵀ` on the tape, where `mask` is
    /// any length-`r` var.
    pub(crate) fn bind_transposed(&self, tape: &mut Tape, mask: Var) -> Result<Var> {
        let f = &self.decomposition.factors;
        let v = match &self.decomposition.scale {
            Some(s) => f.v.transpose()?.scale_columns(&s.inverse())?.transpose()?,
            None => f.v.clone(),
        };
        let sigma = tape.constant(Tensor::from_parts(vec![f.rank()], f.sigma.clone()));
        let weights = tape.mul(sigma, mask)?;
        let v = tape.constant(v);
        let scaled = tape.mul_row(v, weights)?;
        let ut = tape.constant(f.u.transpose()?);
        tape.matmul(scaled, ut)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedModel {
    pub(crate) config: ModelConfig,
    pub(crate) backbone: Backbone,
    pub(crate) layers: Vec<MaskedLayer>,
    /// Documents used for whitening or training; held-out data must avoid them.
    pub calibration_ids: BTreeSet<DocId>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FactorizeOptions {
    pub use_whitening: bool,
    pub epsilon_floor: f64,
}

impl Default for FactorizeOptions {
    fn default() -> Self {
        Self {
            use_whitening: true,
            epsilon_floor: DEFAULT_EPSILON_FLOOR,
        }
    }
}

/// Factorize every eligible layer of a frozen model. With whitening, each
/// layer's scale comes from its own inputs over the calibration sequences.
pub fn factorize_model(
    model: &ToyTransformer,
    calibration: &[(DocId, &[usize])],
    opts: FactorizeOptions,
) -> Result<MaskedModel> {
    if !model.is_frozen() {
        return Err(Error::contract("factorization needs a frozen model"));
    }
    let cfg = *model.config();
    let sites = cfg.sites();
    let scales = if opts.use_whitening {
        if calibration.is_empty() {
            return Err(Error::contract("whitening needs calibration sequences"));
        }
        let mut acc: Vec<WhiteningAccumulator> = sites
            .iter()
            .map(|s| WhiteningAccumulator::new(cfg.dims(s.kind).1))
            .collect();
        for (_, ids) in calibration {
            let mut observe = |site: LayerSite, x: &Tensor| acc[site.index()].push_rows(x.data());
            model.forward_observed(ids, &mut observe)?;
        }
        let scales = acc
            .iter()
            .zip(&sites)
            .map(|(a, s)| a.finish(opts.epsilon_floor).map_err(|e| e.in_layer(s.name())))
            .collect::<Result<Vec<_>>>()?;
        Some(scales)
    } else {
        None
    };

    let mut layers = Vec::with_capacity(sites.len());
    for site in sites {
        let w = model.weight(site);
        let decomposition = match &scales {
            Some(s) => decompose_weighted(w, &s[site.index()]),
            None => Decomposition::plain(w),
        }
        .map_err(|e| e.in_layer(site.name()))?;
        let logits = MaskLogits::init(decomposition.rank())?;
        layers.push(MaskedLayer {
            site,
            decomposition,
            logits,
        });
    }
    Ok(MaskedModel {
        config: cfg,
        backbone: model.backbone().clone(),
        layers,
        calibration_ids: calibration.iter().map(|(id, _)| *id).collect(),
    })
}

impl MaskedModel {
    pub fn from_parts(
        config: ModelConfig,
        backbone: Backbone,
        layers: Vec<MaskedLayer>,
        calibration_ids: BTreeSet<DocId>,
    ) -> Result<Self> {
        config.validate()?;
        let sites = config.sites();
        if layers.len() != sites.len() {
            return Err(Error::contract(format!("{} factorized layers for {} sites", layers.len(), sites.len())));
        }
        for (site, layer) in sites.iter().zip(&layers) {
            if layer.site != *site {
                return Err(Error::contract(format!("layer {} found where {} was expected", layer.site.name(), site.name())));
            }
            let f = &layer.decomposition.factors;
            if (f.m, f.n) != config.dims(site.kind) || layer.logits.rank() != f.rank() {
                return Err(Error::dim("masked_layer", format!("inconsistent factors for {}", site.name())));
            }
        }
        let backbone = Backbone::from_tensors(&config, backbone.tensors().into_iter().cloned().collect())?;
        Ok(Self {
            config,
            backbone,
            layers,
            calibration_ids,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn layers(&self) -> &[MaskedLayer] {
        &self.layers
    }

    pub fn layer(&self, site: LayerSite) -> &MaskedLayer {
        &self.layers[site.index()]
    }

    /// Only the mask logits may be changed.
    pub fn logits_mut(&mut self, site: LayerSite) -> &mut MaskLogits {
        &mut self.layers[site.index()].logits
    }

    pub fn mask_logits(&self) -> Vec<&MaskLogits> {
        self.layers.iter().map(|l| &l.logits).collect()
    }

    /// SHA-256 over every parameter except the mask logits.
    pub fn base_checksum(&self) -> String {
        let mut extra = Vec::new();
        let scales: Vec<Tensor> = self
            .layers
            .iter()
            .map(|l| {
                let s = l.decomposition.scale.as_ref().map(|s| s.values().to_vec()).unwrap_or_default();
                Tensor::from_parts(vec![s.len()], s)
            })
            .collect();
        let sigmas: Vec<Tensor> = self
            .layers
            .iter()
            .map(|l| Tensor::from_parts(vec![l.decomposition.rank()], l.decomposition.factors.sigma.clone()))
            .collect();
        for (i, l) in self.layers.iter().enumerate() {
            extra.extend([&l.decomposition.factors.u, &sigmas[i], &l.decomposition.factors.v, &scales[i]]);
        }
        checksum_of(&self.backbone, &extra)
    }

    /// Bind with one mask var per layer.
    pub(crate) fn bind(&self, tape: &mut Tape, masks: &[Var]) -> Result<Bound> {
        let (backbone, _) = self.backbone.bind(tape, false)?;
        let linears = self
            .layers
            .iter()
            .zip(masks)
            .map(|(l, &m)| Ok(BoundLinear::Dense(l.bind_transposed(tape, m)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound { backbone, linears })
    }

    /// Constant mask vars for a deterministic mode; `None` for soft sampling.
    pub(crate) fn constant_masks<R: Rng + ?Sized>(&self, tape: &mut Tape, mode: MaskMode, rng: &mut R) -> Vec<Var> {
        self.layers
            .iter()
            .map(|l| {
                let values = match mode {
                    MaskMode::AllOnes => vec![1.0; l.logits.rank()],
                    MaskMode::Hard => l.logits.harden(),
                    MaskMode::SoftSample => l.logits.sample(rng).soft,
                };
                tape.constant(Tensor::from_parts(vec![values.len()], values))
            })
            .collect()
    }

    pub(crate) fn forward_vars<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        ids: &[usize],
        mode: MaskMode,
        rng: &mut R,
    ) -> Result<HiddenVars> {
        let masks = self.constant_masks(tape, mode, rng);
        let bound = self.bind(tape, &masks)?;
        forward_on_tape(tape, &self.config, &bound, ids, None)
    }
}

/// Forward pass of a masked model under the requested mask mode. The rng is
/// only consumed for [`MaskMode::SoftSample`].
pub fn forward_masked<R: Rng + ?Sized>(
    model: &MaskedModel,
    ids: &[usize],
    mode: MaskMode,
    rng: &mut R,
) -> Result<ForwardOutput> {
    let mut tape = Tape::new();
    let h = model.forward_vars(&mut tape, ids, mode, rng)?;
    Ok(ForwardOutput::from_tape(&tape, h))
}
