use serde::{Deserialize, Serialize};

use super::compressed::{compress_with_ranks, CompressedModel};
use super::eval::sequence_nll;
use crate::error::{Error, Result};
use crate::lowrank::layer_cost;
use crate::model::{factorize_model, DocId, FactorizeOptions, MaskedModel, ToyTransformer};

/// Ten evenly spaced compression rates, `0.1` to `1.0`.
pub const DEFAULT_CANDIDATES: [f64; 10] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

/// Rank at which an `m × n` factorization stores `target` of the dense
/// parameters, rounded down.
pub fn fixed_rate_rank(m: usize, n: usize, target: f64) -> usize {
    ((target * (m * n) as f64) / (m + n) as f64).floor() as usize
}

fn check_target(target: f64) -> Result<()> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::contract(format!("target ratio {target} must lie in (0, 1)")));
    }
    Ok(())
}

/// Truncate every layer of an already factorized model to the same ratio.
pub fn fixed_rate_from_factorized(model: &MaskedModel, target: f64) -> Result<CompressedModel> {
    check_target(target)?;
    let ranks = model
        .layers()
        .iter()
        .map(|l| {
            let (m, n) = l.dims();
            match fixed_rate_rank(m, n, target) {
                0 => Err(Error::contract(format!(
                    "{}: target ratio {target} leaves rank 0 for a {m}x{n} layer; use a larger ratio",
                    l.site.name()
                ))),
                k => Ok(Some(k)),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = compress_with_ranks(model, &ranks, "fixed-rate")?;
    out.provenance.target_ratio = Some(target);
    Ok(out)
}

/// Uniform truncation of every eligible layer, with or without activation
/// whitening from `calibration`.
pub fn fixed_rate_baseline(
    model: &ToyTransformer,
    target: f64,
    calibration: &[(DocId, &[usize])],
    use_whitening: bool,
) -> Result<CompressedModel> {
    check_target(target)?;
    let opts = FactorizeOptions {
        use_whitening,
        ..FactorizeOptions::default()
    };
    let masked = factorize_model(model, calibration, opts)?;
    fixed_rate_from_factorized(&masked, target)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityOptions {
    /// Ascending compression rates a layer may be assigned.
    pub candidates: Vec<f64>,
    /// Rate each layer is probed at, alone, to measure its sensitivity.
    pub probe_ratio: f64,
    /// Calibration sequences used for the probe perplexities.
    pub probe_sequences: usize,
    pub use_whitening: bool,
}

impl Default for SensitivityOptions {
    fn default() -> Self {
        Self {
            candidates: DEFAULT_CANDIDATES.to_vec(),
            probe_ratio: 0.5,
            probe_sequences: 32,
            use_whitening: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSensitivity {
    pub name: String,
    /// Absolute change of calibration perplexity when this layer alone is
    /// truncated to the probe rate.
    pub sensitivity: f64,
    /// Chosen candidate rate, `None` for full rank.
    pub assigned: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityOutcome {
    pub model: CompressedModel,
    pub base_perplexity: f64,
    pub layers: Vec<LayerSensitivity>,
}

fn calibration_perplexity(model: &CompressedModel, seqs: &[&[usize]]) -> Result<f64> {
    let (mut nll, mut n) = (0.0, 0usize);
    for ids in seqs {
        let out = model.forward(ids)?;
        let (l, c) = sequence_nll(&out.logits, ids);
        nll += l;
        n += c;
    }
    if n == 0 {
        return Err(Error::contract("probe sequences have no tokens to predict"));
    }
    Ok((nll / n as f64).exp())
}

/// Rank for a candidate rate; rates at or above `1.0` keep the full rank.
fn candidate_rank(m: usize, n: usize, rate: f64) -> Option<usize> {
    (rate < 1.0).then(|| fixed_rate_rank(m, n, rate))
}

/// Simplified rank search: probe each layer alone at one rate, then hand the
/// lowest candidate rates to the least sensitive layers until the aggregate
/// parameter ratio reaches `target`. The last layer touched receives the
/// largest candidate that still meets the target.
pub fn sensitivity_search_baseline(
    model: &ToyTransformer,
    calibration: &[(DocId, &[usize])],
    target: f64,
    opts: &SensitivityOptions,
) -> Result<SensitivityOutcome> {
    check_target(target)?;
    let c = &opts.candidates;
    if c.is_empty() || c.windows(2).any(|w| w[0] >= w[1]) || c[0] <= 0.0 {
        return Err(Error::contract("candidate ratios must be positive and strictly ascending"));
    }
    let masked = factorize_model(
        model,
        calibration,
        FactorizeOptions {
            use_whitening: opts.use_whitening,
            ..FactorizeOptions::default()
        },
    )?;
    let dims: Vec<(usize, usize)> = masked.layers().iter().map(|l| l.dims()).collect();
    let original: usize = dims.iter().map(|(m, n)| m * n).sum();
    let cost = |ranks: &[Option<usize>]| -> usize {
        ranks
            .iter()
            .zip(&dims)
            .map(|(r, &(m, n))| r.map_or(m * n, |k| layer_cost(m, n, k)))
            .sum()
    };
    let floor: Vec<Option<usize>> = dims.iter().map(|&(m, n)| candidate_rank(m, n, c[0])).collect();
    if cost(&floor) as f64 > target * original as f64 {
        return Err(Error::contract(format!(
            "target ratio {target} is unreachable: the lowest candidate {} everywhere gives {:.4}",
            c[0],
            cost(&floor) as f64 / original as f64
        )));
    }

    let probes: Vec<&[usize]> = calibration.iter().take(opts.probe_sequences.max(1)).map(|(_, s)| *s).collect();
    let full = vec![None; dims.len()];
    let base = calibration_perplexity(&compress_with_ranks(&masked, &full, "probe")?, &probes)?;
    let mut sensitivity = Vec::with_capacity(dims.len());
    for (i, &(m, n)) in dims.iter().enumerate() {
        let mut ranks = full.clone();
        ranks[i] = candidate_rank(m, n, opts.probe_ratio);
        let probe = compress_with_ranks(&masked, &ranks, "probe")?;
        let ppl = calibration_perplexity(&probe, &probes).map_err(|e| e.in_layer(masked.layers()[i].site.name()))?;
        sensitivity.push((ppl - base).abs());
    }

    let mut order: Vec<usize> = (0..dims.len()).collect();
    order.sort_by(|&a, &b| sensitivity[a].total_cmp(&sensitivity[b]));
    let budget = target * original as f64;
    let mut ranks = full;
    let mut assigned: Vec<Option<f64>> = vec![None; dims.len()];
    for &i in &order {
        let (m, n) = dims[i];
        ranks[i] = candidate_rank(m, n, c[0]);
        assigned[i] = Some(c[0]);
        if cost(&ranks) as f64 <= budget {
            // Back off to the gentlest rate that still fits.
            for &rate in c.iter().rev() {
                let mut trial = ranks.clone();
                trial[i] = candidate_rank(m, n, rate);
                if cost(&trial) as f64 <= budget {
                    ranks = trial;
                    assigned[i] = Some(rate);
                    break;
                }
            }
            break;
        }
    }

    let mut out = compress_with_ranks(&masked, &ranks, "sensitivity-search")?;
    out.provenance.target_ratio = Some(target);
    let layers = masked
        .layers()
        .iter()
        .zip(sensitivity.into_iter().zip(assigned))
        .map(|(l, (s, a))| LayerSensitivity {
            name: l.site.name(),
            sensitivity: s,
            assigned: a,
        })
        .collect();
    Ok(SensitivityOutcome {
        model: out,
        base_perplexity: base,
        layers,
    })
}
