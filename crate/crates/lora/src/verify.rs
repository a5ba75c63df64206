//! Randomized self-check of the adapter arithmetic, printed as a property table.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapter::{forward_two_path, merge_adapter, trainable_param_count, AdapterPair};
use crate::matrix::Matrix;
use crate::quant::{error_bound, quantize_dequantize_4bit, QuantSpec};
use crate::LoraError;

/// Relative agreement required between two evaluations of the same product.
pub const AGREEMENT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyConfig {
    pub d: usize,
    pub k: usize,
    pub r: usize,
    pub alpha: f64,
    pub trials: usize,
    pub seed: u64,
    pub block_size: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self { d: 64, k: 48, r: 8, alpha: 16.0, trials: 20, seed: 0, block_size: crate::quant::DEFAULT_BLOCK_SIZE }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for PropertyCheck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:<28} {}  {}", self.name, if self.passed { "PASS" } else { "FAIL" }, self.detail)
    }
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Runs every property `trials` times on random `d x k` weights with rank-`r` adapters.
pub fn verify(cfg: &VerifyConfig) -> Result<Vec<PropertyCheck>, LoraError> {
    let VerifyConfig { d, k, r, alpha, trials, seed, block_size } = *cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_forward = 0.0_f64;
    let mut zero_ok = true;
    let mut worst_linear = 0.0_f64;
    let mut scale_eq: Option<bool> = None;
    let mut max_rank = 0;

    for _ in 0..trials.max(1) {
        let w0 = random_matrix(&mut rng, d, k);
        let b = random_matrix(&mut rng, d, r);
        let a = random_matrix(&mut rng, r, k);
        let ad = AdapterPair::new(b.clone(), a.clone(), alpha)?;
        let merged = merge_adapter(&w0, &ad)?;

        let x: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h = forward_two_path(&w0, &ad, &x)?;
        let hm = merged.mul_vec(&x)?;
        let diff: Vec<f64> = h.iter().zip(&hm).map(|(p, q)| p - q).collect();
        worst_forward = worst_forward.max(inf_norm(&diff) / inf_norm(&h).max(f64::MIN_POSITIVE));

        let zero = AdapterPair::new(Matrix::zeros(d, r), a.clone(), alpha)?;
        zero_ok &= merge_adapter(&w0, &zero)? == w0;

        let c: f64 = rng.random_range(-3.0..3.0);
        let lhs = merge_adapter(&w0, &AdapterPair::new(b.scale(c), a.clone(), alpha)?)?.sub(&w0)?;
        let rhs = merged.sub(&w0)?.scale(c);
        let err = lhs.sub(&rhs)?.max_abs() / rhs.max_abs().max(f64::MIN_POSITIVE);
        worst_linear = worst_linear.max(err);

        if 2 * r <= d.min(k) {
            // pad with zero columns of B and zero rows of A: same product, doubled rank and alpha
            let b2 = Matrix::from_fn(d, 2 * r, |i, j| if j < r { b.get(i, j) } else { 0.0 });
            let a2 = Matrix::from_fn(2 * r, k, |i, j| if i < r { a.get(i, j) } else { 0.0 });
            let wide = merge_adapter(&w0, &AdapterPair::new(b2, a2, 2.0 * alpha)?)?;
            *scale_eq.get_or_insert(true) &= wide == merged;
        }

        max_rank = max_rank.max(ad.delta().rank(1e-9));
    }

    let mut worst_quant = 0.0_f64;
    let mut quant_ok = true;
    for _ in 0..trials.max(1) * 100 {
        let block = random_matrix(&mut rng, 1, block_size.max(1)).scale(rng.random_range(0.01..100.0));
        let (_, errs) = quantize_dequantize_4bit(&block, QuantSpec { block_size });
        let bound = error_bound(block.max_abs());
        quant_ok &= errs[0] <= bound * (1.0 + 4.0 * f64::EPSILON);
        worst_quant = worst_quant.max(errs[0] / bound.max(f64::MIN_POSITIVE));
    }

    let p = trainable_param_count(d as u64, k as u64, r as u64);
    let (num, den) = p.ratio();
    Ok(vec![
        PropertyCheck {
            name: "two-path forward = merged",
            passed: worst_forward <= AGREEMENT_TOL,
            detail: format!("worst relative gap {worst_forward:.2e} (limit {AGREEMENT_TOL:.0e})"),
        },
        PropertyCheck { name: "B = 0 leaves W0 unchanged", passed: zero_ok, detail: "exact equality".into() },
        PropertyCheck {
            name: "update linear in B",
            passed: worst_linear <= AGREEMENT_TOL,
            detail: format!("worst relative gap {worst_linear:.2e}"),
        },
        match scale_eq {
            Some(ok) => {
                PropertyCheck { name: "(alpha, r) ~ (2alpha, 2r)", passed: ok, detail: "bitwise equal merges".into() }
            }
            None => PropertyCheck {
                name: "(alpha, r) ~ (2alpha, 2r)",
                passed: true,
                detail: format!("skipped: 2r = {} exceeds min(d, k)", 2 * r),
            },
        },
        PropertyCheck {
            name: "rank(update) <= r",
            passed: max_rank <= r,
            detail: format!("max numerical rank {max_rank}, r = {r}"),
        },
        PropertyCheck {
            name: "parameter count",
            passed: p.adapter == (d * r + r * k) as u64 && p.full == (d * k) as u64,
            detail: format!("adapter {} vs full {} (ratio {num}/{den} = {:.6})", p.adapter, p.full, p.ratio_f64()),
        },
        PropertyCheck {
            name: "4-bit error <= absmax/14",
            passed: quant_ok,
            detail: format!("{} blocks of {block_size}, worst error/bound {worst_quant:.4}", trials.max(1) * 100),
        },
    ])
}
