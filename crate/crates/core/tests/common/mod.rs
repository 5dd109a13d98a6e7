//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Random orthogonal matrix from the QR factors of a Gaussian one.
pub fn orthogonal(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    gaussian(n, n, rng).qr().q()
}

/// `tr(K H Q H) / (p-1)^2` with an explicit centering matrix and naive
/// triple loops.
pub fn hsic_oracle(k: &DMatrix<f64>, q: &DMatrix<f64>) -> f64 {
    let p = k.nrows();
    let h = DMatrix::from_fn(p, p, |i, j| if i == j { 1.0 } else { 0.0 } - 1.0 / p as f64);
    let mul = |a: &DMatrix<f64>, b: &DMatrix<f64>| {
        DMatrix::from_fn(p, p, |i, j| {
            (0..p).map(|t| a[(i, t)] * b[(t, j)]).sum::<f64>()
        })
    };
    let m = mul(&mul(&mul(k, &h), q), &h);
    (0..p).map(|i| m[(i, i)]).sum::<f64>() / ((p - 1) as f64).powi(2)
}

pub fn cka_oracle(x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    let k = x * x.transpose();
    let q = y * y.transpose();
    hsic_oracle(&k, &q) / (hsic_oracle(&k, &k).sqrt() * hsic_oracle(&q, &q).sqrt())
}

/// Best rank-`r` approximation `W V_r V_r^T`, with `V_r` the top eigenvectors
/// of `W^T W`. Avoids any SVD routine.
pub fn best_rank_oracle(w: &DMatrix<f64>, r: usize) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(w.transpose() * w);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let v = DMatrix::from_fn(w.ncols(), r, |i, j| eig.eigenvectors[(i, order[j])]);
    w * &v * v.transpose()
}

pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}
