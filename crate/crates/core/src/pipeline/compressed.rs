use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::lowrank::saves_parameters;
use crate::model::{
    forward_on_tape, meta_field, push_backbone, read_config, take_backbone, Backbone, Bound, BoundLinear,
    Checkpoint, Container, DocId, ForwardOutput, LayerSite, MaskedLayer, MaskedModel, ModelConfig,
};
use crate::tensor::{Tape, Tensor};

/// Storage of one converted layer.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerForm {
    /// Full `m × n` weight.
    Dense { weight: Tensor },
    /// `W ≈ left · right` with `left: m × k` carrying the singular values and
    /// `right: k × n` carrying the inverse whitening scale.
    LowRank { left: Tensor, right: Tensor },
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressedLayer {
    pub site: LayerSite,
    pub m: usize,
    pub n: usize,
    /// Number of singular values the selection kept (also recorded for
    /// layers emitted dense).
    pub selected_rank: usize,
    pub form: LayerForm,
}

impl CompressedLayer {
    pub fn parameters(&self) -> usize {
        match &self.form {
            LayerForm::Dense { weight } => weight.numel(),
            LayerForm::LowRank { left, right } => left.numel() + right.numel(),
        }
    }

    pub fn is_factorized(&self) -> bool {
        matches!(self.form, LayerForm::LowRank { .. })
    }

    /// The `m × n` matrix this layer applies.
    pub fn weight(&self) -> Result<Tensor> {
        match &self.form {
            LayerForm::Dense { weight } => Ok(weight.clone()),
            LayerForm::LowRank { left, right } => left.matmul(right),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub method: String,
    pub target_ratio: Option<f64>,
    pub seed: Option<u64>,
    pub calibration_ids: BTreeSet<DocId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressedModel {
    pub(crate) config: ModelConfig,
    pub(crate) backbone: Backbone,
    pub(crate) layers: Vec<CompressedLayer>,
    pub provenance: Provenance,
}

/// Which singular values a conversion keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    /// Exactly the positions the hardened mask selects.
    AnyK,
    /// The `k` largest singular values, with `k` from the hardened mask.
    TopK,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvertOptions {
    pub selection: Selection,
    /// Emit layers whose rank does not save parameters densely at full rank.
    pub keep_dense: bool,
}

impl Default for ConvertOptions {
    fn default() -> Self {
        Self {
            selection: Selection::AnyK,
            keep_dense: true,
        }
    }
}

fn convert_layer(layer: &MaskedLayer, indices: &[usize], keep_dense: bool) -> Result<CompressedLayer> {
    let (m, n) = layer.dims();
    let k = indices.len();
    let f = &layer.decomposition.factors;
    let form = if keep_dense && !saves_parameters(m, n, k) {
        LayerForm::Dense {
            weight: layer.decomposition.reconstruct(&vec![1.0; f.rank()])?,
        }
    } else {
        let sigma: Vec<f64> = indices.iter().map(|&i| f.sigma[i]).collect();
        let left = f.u.select_columns(indices)?.scale_columns(&sigma)?;
        let mut right = f.v.select_columns(indices)?.transpose()?;
        if let Some(s) = &layer.decomposition.scale {
            right = right.scale_columns(&s.inverse())?;
        }
        LayerForm::LowRank { left, right }
    };
    Ok(CompressedLayer {
        site: layer.site,
        m,
        n,
        selected_rank: k,
        form,
    })
}

pub fn convert_with(model: &MaskedModel, opts: ConvertOptions) -> Result<CompressedModel> {
    let layers = model
        .layers()
        .iter()
        .map(|l| {
            let indices = match opts.selection {
                Selection::AnyK => l.logits.selected_indices(),
                Selection::TopK => (0..l.logits.selected()).collect(),
            };
            convert_layer(l, &indices, opts.keep_dense).map_err(|e| e.in_layer(l.site.name()))
        })
        .collect::<Result<Vec<_>>>()?;
    let method = match (opts.selection, opts.keep_dense) {
        (Selection::AnyK, true) => "llrc",
        (Selection::TopK, true) => "llrc-topk",
        (Selection::AnyK, false) => "llrc-no-heuristic",
        (Selection::TopK, false) => "llrc-topk-no-heuristic",
    };
    Ok(CompressedModel {
        config: *model.config(),
        backbone: model.backbone().clone(),
        layers,
        provenance: Provenance {
            method: method.into(),
            calibration_ids: model.calibration_ids.clone(),
            ..Provenance::default()
        },
    })
}

/// Any-k conversion with the keep-dense rule.
pub fn convert(model: &MaskedModel) -> Result<CompressedModel> {
    convert_with(model, ConvertOptions::default())
}

/// Same per-layer `k` as [`convert`], but always the top singular values.
pub fn topk_convert(model: &MaskedModel) -> Result<CompressedModel> {
    convert_with(
        model,
        ConvertOptions {
            selection: Selection::TopK,
            keep_dense: true,
        },
    )
}

/// Keep the top `ranks[i]` singular values of layer `i` (`None` keeps the
/// full rank), applying the keep-dense rule.
pub fn compress_with_ranks(model: &MaskedModel, ranks: &[Option<usize>], method: &str) -> Result<CompressedModel> {
    if ranks.len() != model.layers().len() {
        return Err(Error::contract(format!("{} ranks for {} layers", ranks.len(), model.layers().len())));
    }
    let layers = model
        .layers()
        .iter()
        .zip(ranks)
        .map(|(l, r)| {
            let k = r.unwrap_or(l.decomposition.rank()).min(l.decomposition.rank());
            let indices: Vec<usize> = (0..k).collect();
            convert_layer(l, &indices, true).map_err(|e| e.in_layer(l.site.name()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CompressedModel {
        config: *model.config(),
        backbone: model.backbone().clone(),
        layers,
        provenance: Provenance {
            method: method.into(),
            calibration_ids: model.calibration_ids.clone(),
            ..Provenance::default()
        },
    })
}

impl CompressedModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn layers(&self) -> &[CompressedLayer] {
        &self.layers
    }

    pub fn layer(&self, site: LayerSite) -> &CompressedLayer {
        &self.layers[site.index()]
    }

    /// Stored parameters of the eligible layers.
    pub fn layer_parameters(&self) -> usize {
        self.layers.iter().map(CompressedLayer::parameters).sum()
    }

    /// Dense parameter count of the eligible layers.
    pub fn original_layer_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.m * l.n).sum()
    }

    /// Every stored parameter, including the untouched backbone.
    pub fn parameter_count(&self) -> usize {
        self.layer_parameters() + self.backbone.parameter_count()
    }

    /// Eligible-layer parameters over their dense count.
    pub fn param_ratio(&self) -> f64 {
        self.layer_parameters() as f64 / self.original_layer_parameters() as f64
    }

    pub(crate) fn bind(&self, tape: &mut Tape) -> Result<Bound> {
        let (backbone, _) = self.backbone.bind(tape, false)?;
        let linears = self
            .layers
            .iter()
            .map(|l| {
                Ok(match &l.form {
                    LayerForm::Dense { weight } => BoundLinear::Dense(tape.constant(weight.transpose()?)),
                    LayerForm::LowRank { left, right } => BoundLinear::LowRank {
                        right_t: tape.constant(right.transpose()?),
                        left_t: tape.constant(left.transpose()?),
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound { backbone, linears })
    }

    pub fn forward(&self, ids: &[usize]) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let h = forward_on_tape(&mut tape, &self.config, &bound, ids, None)?;
        Ok(ForwardOutput::from_tape(&tape, h))
    }
}

#[derive(Serialize, Deserialize)]
struct LayerMeta {
    name: String,
    form: String,
    selected_rank: usize,
    stored_rank: usize,
}

impl Checkpoint for CompressedModel {
    const KIND: &'static str = "compressed-model";

    fn to_container(&self) -> Result<Container> {
        let metas: Vec<LayerMeta> = self
            .layers
            .iter()
            .map(|l| {
                let (form, stored_rank) = match &l.form {
                    LayerForm::Dense { .. } => ("dense", 0),
                    LayerForm::LowRank { left, .. } => ("low-rank", left.cols()),
                };
                LayerMeta {
                    name: l.site.name(),
                    form: form.into(),
                    selected_rank: l.selected_rank,
                    stored_rank,
                }
            })
            .collect();
        let meta = json!({ "config": self.config, "provenance": self.provenance, "layers": metas });
        let mut c = Container::new(Self::KIND, meta);
        push_backbone(&mut c, &self.config, &self.backbone);
        for l in &self.layers {
            let name = l.site.name();
            match &l.form {
                LayerForm::Dense { weight } => c.push(format!("{name}.weight"), weight),
                LayerForm::LowRank { left, right } => {
                    c.push(format!("{name}.left"), left);
                    c.push(format!("{name}.right"), right);
                }
            }
        }
        Ok(c)
    }

    fn from_container(c: Container) -> Result<Self> {
        let bad = |d: String| Error::Format {
            offset: crate::model::MANIFEST_OFFSET,
            detail: d,
        };
        let config = read_config(&c.meta)?;
        let provenance: Provenance = meta_field(&c.meta, "provenance")?;
        let metas: Vec<LayerMeta> = meta_field(&c.meta, "layers")?;
        let sites = config.sites();
        if metas.len() != sites.len() {
            return Err(bad(format!("{} layer records for {} sites", metas.len(), sites.len())));
        }
        let mut r = c.into_reader();
        let backbone = take_backbone(&mut r, &config)?;
        let mut layers = Vec::with_capacity(sites.len());
        for (site, meta) in sites.into_iter().zip(metas) {
            let name = site.name();
            if meta.name != name {
                return Err(bad(format!("layer {} where {name} was expected", meta.name)));
            }
            let (m, n) = config.dims(site.kind);
            let form = match meta.form.as_str() {
                "dense" => LayerForm::Dense {
                    weight: r.take(&format!("{name}.weight"), &[m, n])?,
                },
                "low-rank" => LayerForm::LowRank {
                    left: r.take(&format!("{name}.left"), &[m, meta.stored_rank])?,
                    right: r.take(&format!("{name}.right"), &[meta.stored_rank, n])?,
                },
                other => return Err(bad(format!("{name}: unknown layer form `{other}`"))),
            };
            layers.push(CompressedLayer {
                site,
                m,
                n,
                selected_rank: meta.selected_rank,
                form,
            });
        }
        r.finish()?;
        Ok(Self {
            config,
            backbone,
            layers,
            provenance,
        })
    }
}
