//! Helpers shared by the integration suites.
#![allow(dead_code)]

use llrc_core::model::{
    capture_distillation_dataset, factorize_model, synthetic_corpus, DistillationRecord, DocId, Document,
    FactorizeOptions, MaskedModel, ModelConfig, ToyTransformer,
};
use llrc_core::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Builds a scalar from parameter vars placed on a fresh tape.
pub type Build<'a> = &'a dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

fn eval(build: Build, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    tape.value(out).item()
}

/// Largest norm-wise relative gap between the tape gradient and central
/// differences, over all inputs.
pub fn gradient_gap(build: Build, inputs: &[Tensor], step: f64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let grads = tape.gradient(out, &vars).unwrap();
    let mut worst: f64 = 0.0;
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v).unwrap().data().to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for j in 0..analytic.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += step;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= step;
            numeric[j] = (eval(build, &plus) - eval(build, &minus)) / (2.0 * step);
        }
        worst = worst.max(relative_gap(&analytic, &numeric));
    }
    worst
}

pub fn relative_gap(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / norm(a).max(norm(b)).max(1e-12)
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab: 258,
        max_seq: 24,
        seed: 7,
    }
}

pub fn docs(n: usize, seed: u64) -> Vec<Document> {
    synthetic_corpus(n, seed).into_iter().map(Document::new).collect()
}

/// A frozen, untrained tiny model with records over `n_docs` documents.
pub fn tiny_setup(seed: u64, n_docs: usize) -> (ToyTransformer, Vec<DistillationRecord>) {
    let mut model = ToyTransformer::init(ModelConfig { seed, ..tiny_config() }).unwrap();
    model.freeze();
    let d = docs(n_docs, seed + 100);
    let records = capture_distillation_dataset(&model, &d).unwrap();
    (model, records)
}

pub fn calibration(records: &[DistillationRecord]) -> Vec<(DocId, &[usize])> {
    records.iter().map(|r| (r.doc_id, &r.token_ids[..])).collect()
}

pub fn factorize(model: &ToyTransformer, records: &[DistillationRecord], whitening: bool) -> MaskedModel {
    let opts = FactorizeOptions {
        use_whitening: whitening,
        ..FactorizeOptions::default()
    };
    factorize_model(model, &calibration(records), opts).unwrap()
}

pub fn random_ids(rng: &mut impl Rng, len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|_| rng.random_range(0..vocab)).collect()
}

/// `Σ out ∘ R` for a fixed pseudo-random `R`, so every output element
/// contributes to the checked gradient.
pub fn project(tape: &mut Tape, out: Var) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let r = random_tensor(&mut rng(99), &shape, 1.0);
    let r = tape.constant(r);
    let p = tape.mul(out, r)?;
    tape.sum(p)
}

pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub build: Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>,
}

fn case(name: &'static str, shapes: &[&[usize]], build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> OpCase {
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        build: Box::new(build),
    }
}

/// One case per differentiable tape op.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        case("matmul", &[&[3, 4], &[4, 5]], |t, v| {
            let o = t.matmul(v[0], v[1])?;
            project(t, o)
        }),
        case("add", &[&[3, 4], &[3, 4]], |t, v| {
            let o = t.add(v[0], v[1])?;
            project(t, o)
        }),
        case("sub", &[&[3, 4], &[3, 4]], |t, v| {
            let o = t.sub(v[0], v[1])?;
            project(t, o)
        }),
        case("mul", &[&[3, 4], &[3, 4]], |t, v| {
            let o = t.mul(v[0], v[1])?;
            project(t, o)
        }),
        case("add_row", &[&[3, 4], &[4]], |t, v| {
            let o = t.add_row(v[0], v[1])?;
            project(t, o)
        }),
        case("mul_row", &[&[3, 4], &[4]], |t, v| {
            let o = t.mul_row(v[0], v[1])?;
            project(t, o)
        }),
        case("scale", &[&[3, 4]], |t, v| {
            let o = t.scale(v[0], -1.7)?;
            project(t, o)
        }),
        case("sigmoid", &[&[3, 4]], |t, v| {
            let o = t.sigmoid(v[0])?;
            project(t, o)
        }),
        case("gelu", &[&[3, 4]], |t, v| {
            let o = t.gelu(v[0])?;
            project(t, o)
        }),
        case("softmax", &[&[3, 5]], |t, v| {
            let o = t.softmax(v[0])?;
            project(t, o)
        }),
        case("causal_softmax", &[&[4, 4]], |t, v| {
            let o = t.causal_softmax(v[0])?;
            project(t, o)
        }),
        case("layer_norm", &[&[3, 6], &[6], &[6]], |t, v| {
            let o = t.layer_norm(v[0], v[1], v[2])?;
            project(t, o)
        }),
        case("embedding", &[&[5, 3]], |t, v| {
            let o = t.embedding(v[0], &[4, 0, 4, 2])?;
            project(t, o)
        }),
        case("transpose", &[&[3, 4]], |t, v| {
            let o = t.transpose(v[0])?;
            project(t, o)
        }),
        case("slice_cols", &[&[3, 6]], |t, v| {
            let o = t.slice_cols(v[0], 2, 3)?;
            project(t, o)
        }),
        case("concat_cols", &[&[3, 2], &[3, 4]], |t, v| {
            let o = t.concat_cols(&[v[0], v[1]])?;
            project(t, o)
        }),
        case("mean", &[&[3, 4]], |t, v| t.mean(v[0])),
        case("sum", &[&[3, 4]], |t, v| t.sum(v[0])),
        case("squared_norm", &[&[3, 4]], |t, v| t.squared_norm(v[0])),
        case("abs_diff_sum", &[&[7]], |t, v| t.abs_diff_sum(v[0])),
        case("cross_entropy", &[&[4, 6]], |t, v| t.cross_entropy(v[0], &[1, 5, 0, 3])),
    ]
}

pub fn op_inputs(case: &OpCase, seed: u64) -> Vec<Tensor> {
    let mut r = rng(seed);
    case.shapes.iter().map(|s| random_tensor(&mut r, s, 1.5)).collect()
}

/// Tape gradient of the full mask objective against central differences on
/// a tiny two-layer model, with logits and noise drawn from `seed`.
pub fn objective_gap(seed: u64, step: f64) -> f64 {
    use llrc_core::masking::draw_uniform;
    use llrc_core::training::objective;

    let (model, records) = tiny_setup(seed, 3);
    let mut masked = factorize(&model, &records, true);
    let mut r = rng(seed ^ 0xfd);
    for site in masked.config().sites() {
        for w in masked.logits_mut(site).values_mut() {
            *w = r.random_range(-0.3..0.3);
        }
    }
    let noise: Vec<Vec<f64>> = masked.layers().iter().map(|l| draw_uniform(&mut r, l.logits.rank())).collect();
    let batch: Vec<&DistillationRecord> = records.iter().take(2).collect();
    let weights = (0.7, 1.0, 1.0);
    let analytic: Vec<f64> = objective(&masked, &batch, &noise, weights, false).unwrap().grads.concat();
    let sites = masked.config().sites();
    let mut numeric = Vec::with_capacity(analytic.len());
    for site in sites {
        for j in 0..masked.layer(site).logits.rank() {
            let base = masked.layer(site).logits.values()[j];
            masked.logits_mut(site).values_mut()[j] = base + step;
            let plus = objective(&masked, &batch, &noise, weights, false).unwrap().total;
            masked.logits_mut(site).values_mut()[j] = base - step;
            let minus = objective(&masked, &batch, &noise, weights, false).unwrap().total;
            masked.logits_mut(site).values_mut()[j] = base;
            numeric.push((plus - minus) / (2.0 * step));
        }
    }
    relative_gap(&analytic, &numeric)
}

/// Singular values from the symmetric eigensolver on `WᵀW` (or `WWᵀ`,
/// whichever is smaller), descending.
pub fn oracle_singular_values(w: &Tensor) -> Vec<f64> {
    let (m, n) = (w.rows(), w.cols());
    let a = nalgebra::DMatrix::from_row_slice(m, n, w.data());
    let gram = if n <= m { a.transpose() * &a } else { &a * a.transpose() };
    let eig = nalgebra::SymmetricEigen::new(gram);
    let mut s: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

pub struct SvdCheck {
    pub sigma_gap: f64,
    pub orthogonality: f64,
    pub reconstruction: f64,
}

/// Compare our SVD of `w` against the oracle and measure its residuals.
pub fn check_svd(w: &Tensor) -> SvdCheck {
    let f = llrc_core::lowrank::svd(w).unwrap();
    let oracle = oracle_singular_values(w);
    let scale = oracle[0].max(1.0);
    let sigma_gap = f.sigma.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale;
    let r = f.rank();
    let eye = Tensor::identity(r);
    let utu = f.u.transpose().unwrap().matmul(&f.u).unwrap();
    let vtv = f.v.transpose().unwrap().matmul(&f.v).unwrap();
    let orthogonality = utu.max_abs_diff(&eye).unwrap().max(vtv.max_abs_diff(&eye).unwrap());
    let rebuilt = llrc_core::lowrank::reconstruct(&f, &vec![1.0; r], None).unwrap();
    let reconstruction = rebuilt.relative_error(w).unwrap();
    SvdCheck {
        sigma_gap,
        orthogonality,
        reconstruction,
    }
}

/// For every `k`, whether the top-`k` mask attains the smallest Frobenius
/// error among all masks keeping exactly `k` singular values.
pub fn eckart_young_holds(w: &Tensor) -> bool {
    let f = llrc_core::lowrank::svd(w).unwrap();
    let r = f.rank();
    (1..r).all(|k| {
        let err = |mask: &[f64]| {
            llrc_core::lowrank::reconstruct(&f, mask, None).unwrap().sub(w).unwrap().frobenius_norm()
        };
        let top: Vec<f64> = (0..r).map(|i| if i < k { 1.0 } else { 0.0 }).collect();
        let best = err(&top);
        (0u32..1 << r).filter(|b| b.count_ones() as usize == k).all(|bits| {
            let mask: Vec<f64> = (0..r).map(|i| f64::from((bits >> i) & 1)).collect();
            best <= err(&mask) + 1e-12 * best.max(1.0)
        })
    })
}

/// A briefly pretrained tiny model, so that truncation measurably hurts.
pub fn tiny_pretrained(seed: u64, steps: usize) -> ToyTransformer {
    use llrc_core::model::{build_and_pretrain, packed_stream, PretrainConfig};
    let d = docs(60, seed + 200);
    let settings = PretrainConfig {
        steps,
        batch_size: 4,
        seq_len: 24,
        lr: 3e-3,
        weight_decay: 0.01,
    };
    build_and_pretrain(ModelConfig { seed, ..tiny_config() }, &packed_stream(&d), &settings).unwrap().0
}
