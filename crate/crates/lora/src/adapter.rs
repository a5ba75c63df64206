//! Low-rank adapters: merged weights, the two-path forward pass and parameter counts.

use crate::matrix::Matrix;
use crate::LoraError;

/// `B` (d x r) and `A` (r x k) with scaling `alpha / r`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterPair {
    b: Matrix,
    a: Matrix,
    alpha: f64,
    r: usize,
}

impl AdapterPair {
    pub fn new(b: Matrix, a: Matrix, alpha: f64) -> Result<Self, LoraError> {
        let r = b.cols();
        if r == 0 {
            return Err(LoraError::InvalidAdapter("rank must be at least 1".into()));
        }
        if a.rows() != r {
            return Err(LoraError::ShapeMismatch(format!("B is {}x{r} but A is {}x{}", b.rows(), a.rows(), a.cols())));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(LoraError::InvalidAdapter(format!("alpha must be positive, got {alpha}")));
        }
        let limit = b.rows().min(a.cols());
        if r > limit {
            return Err(LoraError::InvalidAdapter(format!("rank {r} exceeds min(d, k) = {limit}")));
        }
        if 2 * r > limit {
            log::warn!("adapter rank {r} is more than half of min(d, k) = {limit}; the update is barely low-rank");
        }
        Ok(Self { b, a, alpha, r })
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn rank(&self) -> usize {
        self.r
    }

    /// Output dimension d.
    pub fn d(&self) -> usize {
        self.b.rows()
    }

    /// Input dimension k.
    pub fn k(&self) -> usize {
        self.a.cols()
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.r as f64
    }

    /// The unscaled product `B A`.
    pub fn product(&self) -> Matrix {
        self.b.matmul(&self.a).expect("shapes checked at construction")
    }

    /// The scaled update `(alpha / r) B A`.
    pub fn delta(&self) -> Matrix {
        self.product().scale(self.scaling())
    }
}

fn check_base(w0: &Matrix, adapter: &AdapterPair) -> Result<(), LoraError> {
    if w0.shape() != (adapter.d(), adapter.k()) {
        return Err(LoraError::ShapeMismatch(format!(
            "W0 is {}x{} but the adapter is {}x{}",
            w0.rows(),
            w0.cols(),
            adapter.d(),
            adapter.k()
        )));
    }
    Ok(())
}

/// `W0 + (alpha / r) B A`.
pub fn merge_adapter(w0: &Matrix, adapter: &AdapterPair) -> Result<Matrix, LoraError> {
    check_base(w0, adapter)?;
    w0.add(&adapter.delta())
}

/// `W0 x + (alpha / r) B (A x)`, never forming the merged matrix.
pub fn forward_two_path(w0: &Matrix, adapter: &AdapterPair, x: &[f64]) -> Result<Vec<f64>, LoraError> {
    check_base(w0, adapter)?;
    let base = w0.mul_vec(x)?;
    let low = adapter.b.mul_vec(&adapter.a.mul_vec(x)?)?;
    let s = adapter.scaling();
    Ok(base.iter().zip(&low).map(|(h, l)| h + s * l).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    /// `d r + r k`
    pub adapter: u64,
    /// `d k`
    pub full: u64,
}

impl ParamCount {
    /// `adapter / full` in lowest terms.
    pub fn ratio(&self) -> (u64, u64) {
        let g = gcd(self.adapter, self.full).max(1);
        (self.adapter / g, self.full / g)
    }

    pub fn ratio_f64(&self) -> f64 {
        self.adapter as f64 / self.full as f64
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

pub fn trainable_param_count(d: u64, k: u64, r: u64) -> ParamCount {
    ParamCount { adapter: d * r + r * k, full: d * k }
}
