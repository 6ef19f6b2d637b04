//! One-sided (Hestenes) Jacobi SVD.
//!
//! Columns of the working matrix are rotated pairwise until every pair is
//! orthogonal to within `tolerance` (measured as the cosine between the two
//! columns). The column norms are then the singular values, the normalized
//! columns form `U`, and the accumulated rotations form `V`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `W ≈ U · diag(sigma) · Vᵀ` with `U: m×r`, `V: n×r` and `r = min(m, n)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdFactors {
    pub u: Tensor,
    pub sigma: Vec<f64>,
    pub v: Tensor,
    pub m: usize,
    pub n: usize,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SvdOptions {
    pub tolerance: f64,
    pub max_sweeps: usize,
}

impl Default for SvdOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-12,
            max_sweeps: 100,
        }
    }
}

pub fn svd(w: &Tensor) -> Result<SvdFactors> {
    svd_with(w, SvdOptions::default())
}

pub fn svd_with(w: &Tensor, opts: SvdOptions) -> Result<SvdFactors> {
    let (m, n) = match w.shape() {
        [m, n] => (*m, *n),
        s => return Err(Error::dim("svd", format!("expected a matrix, got {s:?}"))),
    };
    if m == 0 || n == 0 {
        return Err(Error::dim("svd", format!("empty matrix [{m}, {n}]")));
    }
    if let Some(bad) = w.data().iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            op: "svd".into(),
            detail: format!("input contains {bad}"),
        });
    }

    // Work on whichever orientation is tall, so `min(m, n)` columns.
    let tall = m >= n;
    let (rows, cols) = if tall { (m, n) } else { (n, m) };
    let mut a: Vec<Vec<f64>> = (0..cols)
        .map(|j| {
            (0..rows)
                .map(|i| if tall { w.get(i, j) } else { w.get(j, i) })
                .collect()
        })
        .collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..cols).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let scale = w.frobenius_norm();
    let negligible = (f64::EPSILON * scale).powi(2);
    jacobi_sweeps(&mut a, &mut v, opts, negligible)?;

    let mut sigma: Vec<f64> = a.iter().map(|c| dot(c, c).sqrt()).collect();
    let zero_cut = f64::EPSILON * scale * rows as f64;
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&x, &y| sigma[y].total_cmp(&sigma[x]));

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut v_cols: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut sorted_sigma = Vec::with_capacity(cols);
    let mut deficient = Vec::new();
    for &j in &order {
        let s = sigma[j];
        if s > zero_cut {
            u_cols.push(a[j].iter().map(|x| x / s).collect());
            sorted_sigma.push(s);
        } else {
            deficient.push(u_cols.len());
            u_cols.push(Vec::new());
            sorted_sigma.push(0.0);
        }
        v_cols.push(std::mem::take(&mut v[j]));
    }
    complete_basis(&mut u_cols, &deficient, rows);
    sigma = sorted_sigma;

    for (u, v) in u_cols.iter_mut().zip(v_cols.iter_mut()) {
        let lead = u
            .iter()
            .copied()
            .reduce(|best, x| if x.abs() > best.abs() { x } else { best })
            .unwrap_or(0.0);
        if lead < 0.0 {
            u.iter_mut().for_each(|x| *x = -*x);
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }

    let u_mat = columns_to_matrix(&u_cols, rows);
    let v_mat = columns_to_matrix(&v_cols, cols);
    let (u, v) = if tall { (u_mat, v_mat) } else { (v_mat, u_mat) };
    Ok(SvdFactors { u, sigma, v, m, n })
}

fn jacobi_sweeps(a: &mut [Vec<f64>], v: &mut [Vec<f64>], opts: SvdOptions, negligible: f64) -> Result<()> {
    let cols = a.len();
    let mut residual = 0.0;
    for _ in 0..opts.max_sweeps {
        residual = 0.0f64;
        for p in 0..cols.saturating_sub(1) {
            for q in p + 1..cols {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                if alpha <= negligible || beta <= negligible {
                    continue;
                }
                let gamma = dot(&a[p], &a[q]);
                let cosine = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(cosine);
                if cosine <= opts.tolerance {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(a, p, q, c, s);
                rotate(v, p, q, c, s);
            }
        }
        if residual <= opts.tolerance {
            return Ok(());
        }
    }
    Err(Error::Convergence {
        sweeps: opts.max_sweeps,
        residual,
    })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fill the listed (empty) columns with unit vectors orthogonal to all the
/// others, drawing candidates from the standard basis.
fn complete_basis(cols: &mut [Vec<f64>], missing: &[usize], len: usize) {
    let mut candidate = 0;
    for &slot in missing {
        while candidate < len {
            let mut e = vec![0.0; len];
            e[candidate] = 1.0;
            candidate += 1;
            // Two Gram-Schmidt passes against every filled column.
            for _ in 0..2 {
                for (j, c) in cols.iter().enumerate() {
                    if j == slot || c.is_empty() {
                        continue;
                    }
                    let proj = dot(&e, c);
                    e.iter_mut().zip(c).for_each(|(x, y)| *x -= proj * y);
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 0.5 {
                cols[slot] = e.into_iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}

fn columns_to_matrix(cols: &[Vec<f64>], rows: usize) -> Tensor {
    let n = cols.len();
    let mut data = vec![0.0; rows * n];
    for (j, c) in cols.iter().enumerate() {
        for (i, &x) in c.iter().enumerate() {
            data[i * n + j] = x;
        }
    }
    Tensor::from_parts(vec![rows, n], data)
}
