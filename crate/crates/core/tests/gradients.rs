//! Tape gradients against central finite differences.

mod common;

use common::*;
use llrc_core::{Tape, Tensor};

#[test]
fn every_op_matches_finite_differences() {
    for case in op_cases() {
        for seed in 0..20 {
            let inputs = op_inputs(&case, seed);
            let gap = gradient_gap(&*case.build, &inputs, 1e-5);
            assert!(gap < 1e-4, "{} seed {seed}: relative gap {gap:e}", case.name);
        }
    }
}

#[test]
fn attention_block_composite() {
    // softmax(q kᵀ / √d) v followed by a norm, all differentiated jointly.
    let build = |t: &mut Tape, v: &[llrc_core::Var]| {
        let q = t.matmul(v[0], v[1])?;
        let k = t.matmul(v[0], v[2])?;
        let kt = t.transpose(k)?;
        let s = t.matmul(q, kt)?;
        let s = t.scale(s, 0.5)?;
        let a = t.causal_softmax(s)?;
        let o = t.matmul(a, v[0])?;
        let g = t.gelu(o)?;
        let n = t.layer_norm(g, v[3], v[4])?;
        project(t, n)
    };
    for seed in 0..5 {
        let mut r = rng(seed);
        let inputs: Vec<Tensor> = [vec![5, 4], vec![4, 4], vec![4, 4], vec![4], vec![4]]
            .iter()
            .map(|s| random_tensor(&mut r, s, 1.0))
            .collect();
        let gap = gradient_gap(&build, &inputs, 1e-5);
        assert!(gap < 1e-4, "seed {seed}: {gap:e}");
    }
}

#[test]
fn reused_var_accumulates() {
    let build = |t: &mut Tape, v: &[llrc_core::Var]| {
        let a = t.mul(v[0], v[0])?;
        let b = t.sigmoid(v[0])?;
        let c = t.add(a, b)?;
        project(t, c)
    };
    let inputs = vec![random_tensor(&mut rng(3), &[2, 3], 1.0)];
    assert!(gradient_gap(&build, &inputs, 1e-5) < 1e-6);
}

#[test]
fn mask_objective_matches_finite_differences() {
    for seed in 0..3 {
        let gap = objective_gap(seed, 1e-5);
        assert!(gap < 1e-4, "seed {seed}: {gap:e}");
    }
}
