//! Conversion, baselines, evaluation and reporting on tiny models.

mod common;

use common::*;
use llrc_core::model::{capture_distillation_dataset, forward_masked, Document, LayerKind, LayerSite, MaskMode};
use llrc_core::pipeline::{
    convert, convert_with, evaluate, fixed_rate_baseline, fixed_rate_from_factorized, fixed_rate_rank, perplexity,
    report, report_masked, sensitivity_search_baseline, topk_convert, ConvertOptions, LayerForm, Selection,
    SensitivityOptions,
};
use llrc_core::training::effective_param_ratio;
use llrc_core::{Error, MaskedModel, Tensor, ToyTransformer};
use rand::seq::SliceRandom;
use rand::Rng;

fn set_mask(model: &mut MaskedModel, site: LayerSite, keep: &[usize]) {
    let logits = model.logits_mut(site);
    for (i, w) in logits.values_mut().iter_mut().enumerate() {
        *w = if keep.contains(&i) { 1.0 } else { -1.0 };
    }
}

/// Random any-k masks with at most `max_k` survivors per layer.
fn random_masks(model: &mut MaskedModel, seed: u64, max_k: usize) {
    let mut r = rng(seed);
    for site in model.config().sites() {
        let rank = model.layer(site).logits.rank();
        let mut idx: Vec<usize> = (0..rank).collect();
        idx.shuffle(&mut r);
        let k = r.random_range(1..=max_k);
        set_mask(model, site, &idx[..k]);
    }
}

fn heldout_ids(seed: u64) -> Vec<Vec<usize>> {
    let mut r = rng(seed);
    (0..5).map(|_| random_ids(&mut r, 20, 258)).collect()
}

#[test]
fn full_rank_conversion_reproduces_the_original() {
    let (model, records) = tiny_setup(1, 6);
    for whitening in [true, false] {
        let masked = factorize(&model, &records, whitening);
        let compressed = convert(&masked).unwrap();
        assert!(compressed.layers().iter().all(|l| !l.is_factorized()));
        for ids in heldout_ids(3) {
            let a = model.forward(&ids).unwrap().logits;
            let b = compressed.forward(&ids).unwrap().logits;
            let c = forward_masked(&masked, &ids, MaskMode::AllOnes, &mut rng(0)).unwrap().logits;
            assert!(b.relative_error(&a).unwrap() < 1e-10);
            assert!(c.relative_error(&a).unwrap() < 1e-10);
        }
    }
}

#[test]
fn factorized_layers_match_the_hard_masked_forward() {
    let (model, records) = tiny_setup(2, 6);
    let mut masked = factorize(&model, &records, true);
    // At most 7 of 16 survivors keeps every layer below break-even.
    random_masks(&mut masked, 9, 7);
    let compressed = convert(&masked).unwrap();
    assert!(compressed.layers().iter().all(|l| l.is_factorized()));
    for ids in heldout_ids(4) {
        let hard = forward_masked(&masked, &ids, MaskMode::Hard, &mut rng(0)).unwrap();
        let conv = compressed.forward(&ids).unwrap();
        assert!(conv.logits.relative_error(&hard.logits).unwrap() < 1e-8);
        assert!(conv.middle_hidden.relative_error(&hard.middle_hidden).unwrap() < 1e-8);
    }
}

#[test]
fn dense_layers_use_the_full_rank_weight() {
    let (model, records) = tiny_setup(3, 6);
    let mut masked = factorize(&model, &records, true);
    let site = LayerSite { layer: 1, kind: LayerKind::Up };
    // 12 of 16 does not save parameters on a 32x16 layer.
    set_mask(&mut masked, site, &(0..12).collect::<Vec<_>>());
    let compressed = convert(&masked).unwrap();
    let layer = compressed.layer(site);
    assert_eq!(layer.selected_rank, 12);
    let LayerForm::Dense { weight } = &layer.form else { panic!("expected a dense layer") };
    assert!(weight.relative_error(model.weight(site)).unwrap() < 1e-10);
    for ids in heldout_ids(5) {
        let a = forward_masked(&masked, &ids, MaskMode::AllOnes, &mut rng(0)).unwrap().logits;
        let b = compressed.forward(&ids).unwrap().logits;
        assert!(b.relative_error(&a).unwrap() < 1e-10);
    }

    // Without the rule the same layer keeps its mask.
    let raw = convert_with(&masked, ConvertOptions { selection: Selection::AnyK, keep_dense: false }).unwrap();
    assert!(raw.layer(site).is_factorized());
    assert!(raw.layer_parameters() > compressed.layer_parameters());
}

#[test]
fn topk_never_reconstructs_worse_without_whitening() {
    let (model, records) = tiny_setup(4, 4);
    let mut masked = factorize(&model, &records, false);
    random_masks(&mut masked, 12, 7);
    let any = convert(&masked).unwrap();
    let top = topk_convert(&masked).unwrap();
    for site in masked.config().sites() {
        let w = model.weight(site);
        let (a, t) = (any.layer(site), top.layer(site));
        assert_eq!(a.selected_rank, t.selected_rank);
        let ea = a.weight().unwrap().sub(w).unwrap().frobenius_norm();
        let et = t.weight().unwrap().sub(w).unwrap().frobenius_norm();
        assert!(et <= ea + 1e-12, "{}: top-k {et} vs any-k {ea}", site.name());
    }
}

#[test]
fn topk_mask_converts_identically_to_topk() {
    let (model, records) = tiny_setup(5, 4);
    let mut masked = factorize(&model, &records, true);
    for site in masked.config().sites() {
        set_mask(&mut masked, site, &[0, 1, 2]);
    }
    let a = convert(&masked).unwrap();
    let b = topk_convert(&masked).unwrap();
    assert_eq!(a.layers(), b.layers());
}

#[test]
fn parameter_accounting_is_exact() {
    let (model, records) = tiny_setup(6, 4);
    let mut masked = factorize(&model, &records, true);
    random_masks(&mut masked, 3, 16);
    let predicted = report_masked(&masked);
    let compressed = convert(&masked).unwrap();
    assert_eq!(predicted.total_parameters(), compressed.parameter_count());
    assert_eq!(predicted.layer_parameters, compressed.layer_parameters());
    assert!((predicted.aggregate_ratio - effective_param_ratio(&masked)).abs() < 1e-12);
    let actual = report(&compressed);
    assert_eq!(actual.layer_parameters, predicted.layer_parameters);
    assert!((actual.aggregate_ratio - compressed.param_ratio()).abs() < 1e-12);
    let expected: usize = masked
        .layers()
        .iter()
        .map(|l| {
            let (m, n) = l.dims();
            (l.logits.selected() * (m + n)).min(m * n)
        })
        .sum();
    assert_eq!(compressed.layer_parameters(), expected);
}

#[test]
fn fresh_model_reports_no_compression() {
    let (model, records) = tiny_setup(7, 3);
    let masked = factorize(&model, &records, true);
    let r = report_masked(&masked);
    assert!(r.layers.iter().all(|l| l.param_ratio == 1.0 && l.flop_ratio == 1.0 && !l.compressed));
    assert_eq!(r.aggregate_ratio, 1.0);
    assert_eq!(r.by_kind.len(), 6);
    assert_eq!(r.by_depth.len(), 2);
    let text = r.render_text();
    assert!(text.contains("blocks.1.down"));
    let lines: Vec<serde_json::Value> =
        r.render_jsonl().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 12 + 6 + 2 + 1);
    assert_eq!(lines.last().unwrap()["record"], "total");
}

#[test]
fn fixed_rate_truncates_uniformly() {
    let (model, records) = tiny_setup(8, 4);
    let fixed = fixed_rate_baseline(&model, 0.5, &calibration(&records), true).unwrap();
    let r = report(&fixed);
    for l in &r.layers {
        assert_eq!(l.k, fixed_rate_rank(l.m, l.n, 0.5));
        let step = (l.m + l.n) as f64 / (l.m * l.n) as f64;
        assert!(l.param_ratio <= 0.5 && l.param_ratio > 0.5 - step, "{}: {}", l.name, l.param_ratio);
    }
    assert!(fixed.param_ratio() <= 0.51);
    assert_eq!(fixed.provenance.method, "fixed-rate");

    let err = fixed_rate_baseline(&model, 0.01, &calibration(&records), true).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
    assert!(fixed_rate_baseline(&model, 1.0, &calibration(&records), true).is_err());
}

#[test]
fn fixed_rate_agrees_with_a_uniform_topk_mask() {
    let (model, records) = tiny_setup(9, 4);
    let mut masked = factorize(&model, &records, true);
    for site in masked.config().sites() {
        let (m, n) = masked.config().dims(site.kind);
        let k = fixed_rate_rank(m, n, 0.6);
        set_mask(&mut masked, site, &(0..k).collect::<Vec<_>>());
    }
    let fixed = fixed_rate_from_factorized(&masked, 0.6).unwrap();
    let learned = convert(&masked).unwrap();
    assert_eq!(fixed.layers(), learned.layers());
}

fn with_zeroed(site: LayerSite) -> ToyTransformer {
    let trained = tiny_pretrained(10, 120);
    let mut linears = trained.weights().to_vec();
    linears[site.index()] = Tensor::zeros(linears[site.index()].shape().to_vec());
    ToyTransformer::from_parts(*trained.config(), trained.backbone().clone(), linears, true).unwrap()
}

#[test]
fn sensitivity_search_compresses_the_inert_layer_first() {
    let site = LayerSite { layer: 0, kind: LayerKind::V };
    let model = with_zeroed(site);
    let records = capture_distillation_dataset(&model, &docs(8, 40)).unwrap();
    let calib = calibration(&records);
    let opts = SensitivityOptions { probe_sequences: 8, ..SensitivityOptions::default() };
    let out = sensitivity_search_baseline(&model, &calib, 0.8, &opts).unwrap();
    let inert = &out.layers[site.index()];
    assert_eq!(inert.sensitivity, 0.0);
    assert_eq!(inert.assigned, Some(0.1));
    assert!(out.model.param_ratio() <= 0.8);

    // Barely any compression demanded: one layer gives a little.
    let gentle = sensitivity_search_baseline(&model, &calib, 0.999, &opts).unwrap();
    let touched: Vec<_> = gentle.layers.iter().filter(|l| l.assigned.is_some()).collect();
    assert_eq!(touched.len(), 1);
    assert!(touched[0].assigned.unwrap() >= 0.9);
    assert!(gentle.model.param_ratio() <= 0.999);

    let coarse = SensitivityOptions { candidates: vec![0.5, 0.75, 1.0], ..opts };
    assert!(matches!(sensitivity_search_baseline(&model, &calib, 0.3, &coarse), Err(Error::Contract(_))));
}

#[test]
fn evaluation_metrics() {
    let (model, records) = tiny_setup(11, 4);
    let heldout: Vec<Document> = docs(3, 999);
    let r = evaluate(&model, &heldout, &records).unwrap();
    assert_eq!(r.distill_mse, Some(0.0));
    assert!(r.perplexity.unwrap() > 1.0);

    // Zero logits head: uniform predictions over 258 symbols.
    let mut backbone = model.backbone().clone();
    backbone.lm_head = Tensor::zeros(backbone.lm_head.shape().to_vec());
    let uniform = ToyTransformer::from_parts(*model.config(), backbone, model.weights().to_vec(), true).unwrap();
    assert!((perplexity(&uniform, &heldout).unwrap() - 258.0).abs() < 1e-9);

    // Held-out documents may not overlap calibration.
    let masked = factorize(&model, &records, true);
    let calib_doc = Document::new(docs(4, 111)[0].text.clone());
    assert!(masked.calibration_ids.contains(&calib_doc.id));
    assert!(matches!(evaluate(&masked, &[calib_doc], &[]), Err(Error::Contract(_))));

    let converted = convert(&masked).unwrap();
    let base = perplexity(&model, &heldout).unwrap();
    let conv = perplexity(&converted, &heldout).unwrap();
    assert!((conv - base).abs() / base < 1e-3);
}
