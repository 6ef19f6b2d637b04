use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::compressed::CompressedModel;
use crate::error::Result;
use crate::lowrank::{flop_ratio, LayerBudget};
use crate::model::{LayerKind, LayerSite, MaskedModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    pub kind: LayerKind,
    pub layer: usize,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub parameters: usize,
    pub param_ratio: f64,
    pub flop_ratio: f64,
    pub compressed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: String,
    pub parameters: usize,
    pub original: usize,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub layers: Vec<LayerReport>,
    /// Eligible-layer parameters over their dense count.
    pub aggregate_ratio: f64,
    pub layer_parameters: usize,
    pub original_layer_parameters: usize,
    /// Embeddings, norms and the logits head.
    pub untouched_parameters: usize,
    pub by_kind: Vec<GroupSummary>,
    pub by_depth: Vec<GroupSummary>,
}

fn layer_entry(site: LayerSite, m: usize, n: usize, k: usize, parameters: usize, flops: f64, compressed: bool) -> LayerReport {
    LayerReport {
        name: site.name(),
        kind: site.kind,
        layer: site.layer,
        m,
        n,
        k,
        parameters,
        param_ratio: parameters as f64 / (m * n) as f64,
        flop_ratio: flops,
        compressed,
    }
}

fn groups<K: Ord + ToString>(layers: &[LayerReport], key: impl Fn(&LayerReport) -> K) -> Vec<GroupSummary> {
    let mut acc: BTreeMap<K, (usize, usize)> = BTreeMap::new();
    for l in layers {
        let e = acc.entry(key(l)).or_default();
        e.0 += l.parameters;
        e.1 += l.m * l.n;
    }
    acc.into_iter()
        .map(|(k, (p, o))| GroupSummary {
            group: k.to_string(),
            parameters: p,
            original: o,
            ratio: p as f64 / o as f64,
        })
        .collect()
}

fn assemble(layers: Vec<LayerReport>, untouched: usize) -> CompressionReport {
    let layer_parameters = layers.iter().map(|l| l.parameters).sum();
    let original_layer_parameters = layers.iter().map(|l| l.m * l.n).sum();
    let by_kind = groups(&layers, |l| l.kind);
    let by_depth = groups(&layers, |l| l.layer);
    CompressionReport {
        aggregate_ratio: layer_parameters as f64 / original_layer_parameters as f64,
        layers,
        layer_parameters,
        original_layer_parameters,
        untouched_parameters: untouched,
        by_kind,
        by_depth,
    }
}

/// What the stored factors of a converted model actually cost.
pub fn report(model: &CompressedModel) -> CompressionReport {
    let layers = model
        .layers()
        .iter()
        .map(|l| {
            let (flops, stored) = match &l.form {
                super::LayerForm::LowRank { left, .. } => (flop_ratio(l.m, l.n, left.cols()), true),
                super::LayerForm::Dense { .. } => (1.0, false),
            };
            layer_entry(l.site, l.m, l.n, l.selected_rank, l.parameters(), flops, stored)
        })
        .collect();
    assemble(layers, model.backbone().parameter_count())
}

/// What converting the hardened masks (with the keep-dense rule) will cost.
pub fn report_masked(model: &MaskedModel) -> CompressionReport {
    let layers = model
        .layers()
        .iter()
        .map(|l| {
            let (m, n) = l.dims();
            let b = LayerBudget::new(m, n, l.logits.selected());
            layer_entry(l.site, m, n, b.selected_rank, b.parameters(), b.flop_ratio, b.compressed)
        })
        .collect();
    assemble(layers, model.backbone().parameter_count())
}

impl CompressionReport {
    pub fn total_parameters(&self) -> usize {
        self.layer_parameters + self.untouched_parameters
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16} {:>5} {:>5} {:>5} {:>9} {:>11} {:>10}  compressed",
            "layer", "m", "n", "k", "params", "param_ratio", "flop_ratio"
        );
        for l in &self.layers {
            let _ = writeln!(
                out,
                "{:<16} {:>5} {:>5} {:>5} {:>9} {:>11.4} {:>10.4}  {}",
                l.name,
                l.m,
                l.n,
                l.k,
                l.parameters,
                l.param_ratio,
                l.flop_ratio,
                if l.compressed { "yes" } else { "no" }
            );
        }
        for (title, groups) in [("by kind", &self.by_kind), ("by depth", &self.by_depth)] {
            let _ = writeln!(out, "\n{title}");
            for g in groups {
                let _ = writeln!(out, "  {:<8} {:>9} / {:>9}  {:.4}", g.group, g.parameters, g.original, g.ratio);
            }
        }
        let _ = writeln!(
            out,
            "\naggregate ratio {:.6} ({} of {} layer parameters; {} untouched)",
            self.aggregate_ratio, self.layer_parameters, self.original_layer_parameters, self.untouched_parameters
        );
        out
    }

    /// One JSON object per line: every layer, then the group summaries, then
    /// the totals.
    pub fn render_jsonl(&self) -> String {
        let mut out = String::new();
        for l in &self.layers {
            let mut v = serde_json::to_value(l).expect("plain data");
            v["record"] = "layer".into();
            let _ = writeln!(out, "{v}");
        }
        for (name, groups) in [("kind", &self.by_kind), ("depth", &self.by_depth)] {
            for g in groups {
                let mut v = serde_json::to_value(g).expect("plain data");
                v["record"] = format!("by_{name}").into();
                let _ = writeln!(out, "{v}");
            }
        }
        let total = serde_json::json!({
            "record": "total",
            "aggregate_ratio": self.aggregate_ratio,
            "layer_parameters": self.layer_parameters,
            "original_layer_parameters": self.original_layer_parameters,
            "untouched_parameters": self.untouched_parameters,
        });
        let _ = writeln!(out, "{total}");
        out
    }

    /// Text to `path`, structured lines to `path` with `.jsonl` appended.
    pub fn write(&self, path: &Path) -> Result<PathBuf> {
        std::fs::write(path, self.render_text())?;
        let mut jsonl = path.as_os_str().to_owned();
        jsonl.push(".jsonl");
        let jsonl = PathBuf::from(jsonl);
        std::fs::write(&jsonl, self.render_jsonl())?;
        Ok(jsonl)
    }
}
