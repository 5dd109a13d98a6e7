//! Linear-kernel HSIC and CKA between layer representations.
//!
//! All math runs in `f64`. Gram matrices are centered once and HSIC is taken
//! as the elementwise sum of the product of two centered Grams, which equals
//! `tr(K H Q H)` because `H` is symmetric and idempotent.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Relative degeneracy threshold on `HSIC(K, K)` after normalizing `K` by
/// its Frobenius norm.
pub const DEGENERACY_EPS: f64 = 1e-12;

/// Which token position a representation row was taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenRule {
    /// The `<CLS>` position of an encoder-only model.
    Cls,
    /// The final position of a decoder-only model.
    LastToken,
}

impl TokenRule {
    pub fn as_str(self) -> &'static str {
        match self {
            TokenRule::Cls => "cls",
            TokenRule::LastToken => "last_token",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cls" => Some(TokenRule::Cls),
            "last_token" => Some(TokenRule::LastToken),
            _ => None,
        }
    }
}

/// One layer boundary's representations: `p` samples (rows) by `d` features.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationMatrix {
    data: DMatrix<f64>,
    layer_index: usize,
    token_rule: TokenRule,
}

impl RepresentationMatrix {
    pub fn new(data: DMatrix<f64>, layer_index: usize, token_rule: TokenRule) -> Result<Self> {
        if data.nrows() < 2 {
            return Err(Error::TooFewSamples(data.nrows()));
        }
        if data.ncols() == 0 {
            return Err(Error::Invalid(format!(
                "representation R_{layer_index} has zero feature columns"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("representation R_{layer_index}")));
        }
        Ok(Self {
            data,
            layer_index,
            token_rule,
        })
    }

    /// Builds a matrix from row-major values.
    pub fn from_rows(
        rows: usize,
        cols: usize,
        values: &[f64],
        layer_index: usize,
        token_rule: TokenRule,
    ) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                values.len()
            )));
        }
        Self::new(
            DMatrix::from_row_slice(rows, cols, values),
            layer_index,
            token_rule,
        )
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn samples(&self) -> usize {
        self.data.nrows()
    }

    pub fn features(&self) -> usize {
        self.data.ncols()
    }

    pub fn layer_index(&self) -> usize {
        self.layer_index
    }

    pub fn token_rule(&self) -> TokenRule {
        self.token_rule
    }

    pub fn into_data(self) -> DMatrix<f64> {
        self.data
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kernel {
    Linear,
}

/// Symmetric `p x p` matrix of pairwise kernel evaluations.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    data: DMatrix<f64>,
    kernel: Kernel,
}

impl GramMatrix {
    /// Wraps a square matrix, symmetrizing it.
    pub fn new(mut data: DMatrix<f64>, kernel: Kernel) -> Result<Self> {
        if !data.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "gram matrix must be square, got {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        if data.nrows() < 2 {
            return Err(Error::TooFewSamples(data.nrows()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gram matrix".into()));
        }
        symmetrize(&mut data);
        Ok(Self { data, kernel })
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn kernel(&self) -> Kernel {
        self.kernel
    }

    pub fn size(&self) -> usize {
        self.data.nrows()
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Outcome of a CKA evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CkaResult {
    pub value: f64,
    /// Set when either centered Gram vanishes; `value` is then exactly 0.
    pub degenerate: bool,
    pub hsic_xy: f64,
    pub hsic_xx: f64,
    pub hsic_yy: f64,
}

/// `K_ij = <x_i, x_j>`.
pub fn linear_gram(x: &RepresentationMatrix) -> GramMatrix {
    let data = x.data();
    let mut k = data * data.transpose();
    symmetrize(&mut k);
    GramMatrix {
        data: k,
        kernel: Kernel::Linear,
    }
}

/// Returns `H K H` with `H = I - (1/p) 11^T`.
pub fn center_gram(k: &GramMatrix) -> GramMatrix {
    GramMatrix {
        data: centered(k.data()),
        kernel: k.kernel,
    }
}

fn centered(k: &DMatrix<f64>) -> DMatrix<f64> {
    let p = k.nrows();
    let inv = 1.0 / p as f64;
    let row_means: Vec<f64> = (0..p).map(|i| k.row(i).sum() * inv).collect();
    let col_means: Vec<f64> = (0..p).map(|j| k.column(j).sum() * inv).collect();
    let grand = row_means.iter().sum::<f64>() * inv;
    let mut out = DMatrix::from_fn(p, p, |i, j| k[(i, j)] - row_means[i] - col_means[j] + grand);
    symmetrize(&mut out);
    out
}

fn frobenius_inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Empirical HSIC estimator `tr(K H Q H) / (p - 1)^2`.
pub fn hsic(k: &GramMatrix, q: &GramMatrix) -> Result<f64> {
    if k.size() != q.size() {
        return Err(Error::DimensionMismatch(format!(
            "gram sizes {} and {}",
            k.size(),
            q.size()
        )));
    }
    let value = frobenius_inner(&centered(k.data()), &centered(q.data()));
    let p1 = (k.size() - 1) as f64;
    Ok(value / (p1 * p1))
}

/// Linear CKA between two representation matrices over the same samples.
pub fn cka(x: &RepresentationMatrix, y: &RepresentationMatrix) -> Result<CkaResult> {
    if x.samples() != y.samples() {
        return Err(Error::DimensionMismatch(format!(
            "sample counts {} and {}",
            x.samples(),
            y.samples()
        )));
    }
    let k = linear_gram(x);
    let q = linear_gram(y);
    let kc = centered(k.data());
    let qc = centered(q.data());

    let p1 = (x.samples() - 1) as f64;
    let denom = p1 * p1;
    let hsic_xx = frobenius_inner(&kc, &kc) / denom;
    let hsic_yy = frobenius_inner(&qc, &qc) / denom;
    let hsic_xy = frobenius_inner(&kc, &qc) / denom;

    if is_degenerate(k.data(), &kc) || is_degenerate(q.data(), &qc) {
        return Ok(CkaResult {
            value: 0.0,
            degenerate: true,
            hsic_xy,
            hsic_xx,
            hsic_yy,
        });
    }

    let raw = hsic_xy / (hsic_xx.sqrt() * hsic_yy.sqrt());
    let value = clamp_unit(raw)?;
    Ok(CkaResult {
        value,
        degenerate: false,
        hsic_xy,
        hsic_xx,
        hsic_yy,
    })
}

/// `HSIC(K^, K^) <= eps` where `K^ = K / ||K||_F`.
fn is_degenerate(k: &DMatrix<f64>, kc: &DMatrix<f64>) -> bool {
    let norm = k.norm();
    if norm <= 1e-300 {
        return true;
    }
    let p1 = (k.nrows() - 1) as f64;
    let normalized = kc.norm() / norm;
    normalized * normalized / (p1 * p1) <= DEGENERACY_EPS
}

fn clamp_unit(v: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else if v > -1e-10 && v < 0.0 {
        Ok(0.0)
    } else if v > 1.0 && v < 1.0 + 1e-9 {
        Ok(1.0)
    } else {
        Err(Error::Numerical(format!("CKA value {v} outside [0, 1]")))
    }
}
