//! LoRA and PiSSA adapters on dense weight matrices.
//!
//! Weights are stored `d_out x d_in` and applied to row-major activations as
//! `y = x W^T`. An adapter contributes `(alpha / r) (x A^T) B^T`; the product
//! `B A` is only formed by [`AdaptedWeight::merged`].

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::Uniform;

use crate::arch::Role;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    /// `B = 0`, `A ~ U(-1/sqrt(k), 1/sqrt(k))`.
    ZeroB,
    /// `B`, `A` from the top-`r` singular triplets of the base weight.
    Pissa,
}

impl InitMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InitMode::ZeroB => "zero",
            InitMode::Pissa => "pissa",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "zero" => Some(InitMode::ZeroB),
            "pissa" => Some(InitMode::Pissa),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    /// `d_out x r`.
    pub b: DMatrix<f64>,
    /// `r x d_in`.
    pub a: DMatrix<f64>,
    pub rank: usize,
    pub alpha: f64,
    pub init_mode: InitMode,
    pub target_role: Role,
}

impl LoraAdapter {
    /// A zero-`B` adapter for a `d_out x d_in` weight.
    pub fn zero_b<R: Rng + ?Sized>(
        d_out: usize,
        d_in: usize,
        rank: usize,
        alpha: f64,
        role: Role,
        rng: &mut R,
    ) -> Result<Self> {
        check_rank(d_out, d_in, rank)?;
        check_alpha(alpha)?;
        let bound = 1.0 / (d_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let a = DMatrix::from_fn(rank, d_in, |_, _| rng.sample(dist));
        Ok(Self {
            b: DMatrix::zeros(d_out, rank),
            a,
            rank,
            alpha,
            init_mode: InitMode::ZeroB,
            target_role: role,
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn d_out(&self) -> usize {
        self.b.nrows()
    }

    pub fn d_in(&self) -> usize {
        self.a.ncols()
    }

    pub fn parameter_count(&self) -> usize {
        self.b.len() + self.a.len()
    }

    /// `(alpha / r) B A`. Only for export and tests.
    pub fn delta(&self) -> DMatrix<f64> {
        (&self.b * &self.a) * self.scale()
    }

    fn validate(&self) -> Result<()> {
        check_rank(self.b.nrows(), self.a.ncols(), self.rank)?;
        check_alpha(self.alpha)?;
        if self.b.ncols() != self.rank || self.a.nrows() != self.rank {
            return Err(Error::DimensionMismatch(format!(
                "adapter factors {}x{} and {}x{} do not share rank {}",
                self.b.nrows(),
                self.b.ncols(),
                self.a.nrows(),
                self.a.ncols(),
                self.rank
            )));
        }
        if self.init_mode == InitMode::Pissa && self.alpha != self.rank as f64 {
            return Err(Error::Invalid(format!(
                "PiSSA adapters require alpha = r, got alpha = {} with r = {}",
                self.alpha, self.rank
            )));
        }
        Ok(())
    }
}

fn check_rank(d_out: usize, d_in: usize, rank: usize) -> Result<()> {
    if rank == 0 || rank > d_out.min(d_in) {
        return Err(Error::Invalid(format!(
            "rank {rank} must lie in 1..={} for a {d_out}x{d_in} weight",
            d_out.min(d_in)
        )));
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::Invalid(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    Ok(())
}

/// A frozen base weight with an optional trainable adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedWeight {
    base: DMatrix<f64>,
    pub adapter: Option<LoraAdapter>,
}

impl AdaptedWeight {
    pub fn frozen(base: DMatrix<f64>) -> Self {
        Self {
            base,
            adapter: None,
        }
    }

    pub fn with_adapter(base: DMatrix<f64>, adapter: LoraAdapter) -> Result<Self> {
        adapter.validate()?;
        if adapter.d_out() != base.nrows() || adapter.d_in() != base.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "adapter {}x{} on base {}x{}",
                adapter.d_out(),
                adapter.d_in(),
                base.nrows(),
                base.ncols()
            )));
        }
        Ok(Self {
            base,
            adapter: Some(adapter),
        })
    }

    pub fn base(&self) -> &DMatrix<f64> {
        &self.base
    }

    /// Mutable access to the frozen base, for perturbation probes only.
    #[doc(hidden)]
    pub fn base_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.base
    }

    pub fn d_in(&self) -> usize {
        self.base.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.base.nrows()
    }

    /// `W_0 + (alpha / r) B A`: folds the adapter into a plain weight.
    pub fn merged(&self) -> DMatrix<f64> {
        match &self.adapter {
            Some(a) => &self.base + a.delta(),
            None => self.base.clone(),
        }
    }

    /// `y = x W_0^T + (alpha / r) (x A^T) B^T` for `x` of shape `n x d_in`.
    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.d_in() {
            return Err(Error::DimensionMismatch(format!(
                "input has {} columns, weight expects {}",
                x.ncols(),
                self.d_in()
            )));
        }
        Ok(self.forward_unchecked(x).0)
    }

    /// Forward pass that also returns `x A^T` for the backward pass.
    pub(crate) fn forward_unchecked(
        &self,
        x: &DMatrix<f64>,
    ) -> (DMatrix<f64>, Option<DMatrix<f64>>) {
        let mut y = x * self.base.transpose();
        match &self.adapter {
            Some(ad) => {
                let u = x * ad.a.transpose();
                y.gemm(ad.scale(), &u, &ad.b.transpose(), 1.0);
                (y, Some(u))
            }
            None => (y, None),
        }
    }
}

/// Applies an adapted weight to a single input vector or a batch of rows.
pub fn lora_forward(w: &AdaptedWeight, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    w.forward(x)
}

/// Splits `W_0` into a residual and a rank-`r` PiSSA adapter with `alpha = r`.
///
/// `B = U_r S_r^{1/2}`, `A = S_r^{1/2} V_r^T`, `W_res = W_0 - U_r S_r V_r^T`.
pub fn pissa_init(
    w0: &DMatrix<f64>,
    rank: usize,
    role: Role,
) -> Result<(DMatrix<f64>, LoraAdapter)> {
    let (d, k) = w0.shape();
    check_rank(d, k, rank)?;
    if w0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("PiSSA base weight".into()));
    }
    let svd = w0
        .clone()
        .try_svd(true, true, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numerical("SVD did not converge".into()))?;
    let u = svd.u.as_ref().expect("requested U");
    let v_t = svd.v_t.as_ref().expect("requested V^T");

    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| {
        svd.singular_values[j]
            .total_cmp(&svd.singular_values[i])
            .then(i.cmp(&j))
    });

    let mut b = DMatrix::zeros(d, rank);
    let mut a = DMatrix::zeros(rank, k);
    for (slot, &idx) in order.iter().take(rank).enumerate() {
        let root = svd.singular_values[idx].max(0.0).sqrt();
        b.set_column(slot, &(u.column(idx) * root));
        a.set_row(slot, &(v_t.row(idx) * root));
    }
    let principal = &b * &a;
    let residual = w0 - principal;
    let adapter = LoraAdapter {
        b,
        a,
        rank,
        alpha: rank as f64,
        init_mode: InitMode::Pissa,
        target_role: role,
    };
    Ok((residual, adapter))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(r: usize, c: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(r, c, v)
    }

    #[test]
    fn zero_b_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = DMatrix::from_fn(5, 3, |i, j| (i as f64) - 0.5 * j as f64);
        let ad = LoraAdapter::zero_b(5, 3, 2, 4.0, Role::Wq, &mut rng).unwrap();
        assert!(ad.b.iter().all(|&v| v == 0.0));
        assert!(ad.a.iter().all(|v| v.abs() <= 1.0 / 3f64.sqrt()));
        let w = AdaptedWeight::with_adapter(base.clone(), ad).unwrap();
        let x = DMatrix::from_fn(4, 3, |i, j| (i * 3 + j) as f64 * 0.1);
        let plain = &x * base.transpose();
        assert_eq!(lora_forward(&w, &x).unwrap(), plain);
    }

    #[test]
    fn rank_one_example_matches_materialized_delta() {
        let ad = LoraAdapter {
            b: m(2, 1, &[1.0, 0.0]),
            a: m(1, 2, &[0.0, 1.0]),
            rank: 1,
            alpha: 1.0,
            init_mode: InitMode::ZeroB,
            target_role: Role::Wv,
        };
        assert_eq!(ad.delta(), m(2, 2, &[0.0, 1.0, 0.0, 0.0]));
        let w = AdaptedWeight::with_adapter(DMatrix::zeros(2, 2), ad).unwrap();
        let x = m(1, 2, &[1.0, 1.0]);
        let y = lora_forward(&w, &x).unwrap();
        let explicit = &x * w.merged().transpose();
        assert_eq!(y, explicit);
        // ΔW x with ΔW = [[0, 1], [0, 0]].
        assert_eq!(y, m(1, 2, &[1.0, 0.0]));
    }

    #[test]
    fn alpha_scales_contribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ad = LoraAdapter::zero_b(4, 4, 2, 2.0, Role::Wo, &mut rng).unwrap();
        ad.b = DMatrix::from_fn(4, 2, |i, j| (i + j) as f64 * 0.25);
        let base = DMatrix::zeros(4, 4);
        let x = DMatrix::from_fn(3, 4, |i, j| (i as f64 + 1.0) * (j as f64 - 1.5));
        let y1 = lora_forward(
            &AdaptedWeight::with_adapter(base.clone(), ad.clone()).unwrap(),
            &x,
        )
        .unwrap();
        ad.alpha = 4.0;
        let y2 = lora_forward(&AdaptedWeight::with_adapter(base, ad).unwrap(), &x).unwrap();
        assert_eq!(y2, y1 * 2.0);
    }

    #[test]
    fn shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(LoraAdapter::zero_b(4, 3, 4, 1.0, Role::Wq, &mut rng).is_err());
        assert!(LoraAdapter::zero_b(4, 3, 0, 1.0, Role::Wq, &mut rng).is_err());
        assert!(LoraAdapter::zero_b(4, 3, 1, 0.0, Role::Wq, &mut rng).is_err());
        let ad = LoraAdapter::zero_b(4, 3, 2, 1.0, Role::Wq, &mut rng).unwrap();
        assert!(AdaptedWeight::with_adapter(DMatrix::zeros(3, 4), ad.clone()).is_err());
        let w = AdaptedWeight::with_adapter(DMatrix::zeros(4, 3), ad).unwrap();
        assert!(matches!(
            lora_forward(&w, &DMatrix::zeros(2, 4)),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn pissa_diagonal() {
        let w0 = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![3.0, 2.0, 1.0]));
        let (res, ad) = pissa_init(&w0, 2, Role::Wq).unwrap();
        let ba = &ad.b * &ad.a;
        let expected = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![3.0, 2.0, 0.0]));
        assert!((ba - expected).abs().max() < 1e-12);
        let expected_res =
            DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.0, 0.0, 1.0]));
        assert!((res - expected_res).abs().max() < 1e-12);
        assert_eq!(ad.alpha, 2.0);
        assert_eq!(ad.init_mode, InitMode::Pissa);
    }

    #[test]
    fn pissa_exact_low_rank() {
        let u = DMatrix::from_fn(6, 2, |i, j| ((i + 1) * (j + 2)) as f64 % 5.0 - 2.0);
        let v = DMatrix::from_fn(2, 4, |i, j| (i as f64 - j as f64) * 0.7 + 0.1);
        let w0 = u * v;
        let (res, _) = pissa_init(&w0, 2, Role::Wup).unwrap();
        assert!(res.abs().max() < 1e-10);
    }

    #[test]
    fn pissa_rejects_bad_input() {
        assert!(pissa_init(&DMatrix::zeros(3, 2), 3, Role::Wq).is_err());
        let mut w = DMatrix::zeros(3, 3);
        w[(0, 0)] = f64::INFINITY;
        assert!(pissa_init(&w, 1, Role::Wq).is_err());
        let (_, mut ad) = pissa_init(&DMatrix::identity(3, 3), 1, Role::Wq).unwrap();
        ad.alpha = 2.0;
        assert!(AdaptedWeight::with_adapter(DMatrix::zeros(3, 3), ad).is_err());
    }
}
