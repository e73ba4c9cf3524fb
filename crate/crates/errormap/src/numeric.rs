//! Scalar-generic numeric kernels.
//!
//! Everything here is generic over [`num_traits::Float`] so the statistics
//! can run at any precision; the pipeline instantiates them with
//! [`crate::Scalar`].

use num_traits::Float;

/// Log-sum-exp over a slice of log-space terms.
///
/// Returns negative infinity for an empty slice.
pub fn log_sum_exp<F: Float>(terms: &[F]) -> F {
    let mut max = F::neg_infinity();
    for &t in terms {
        if t > max {
            max = t;
        }
    }
    if max.is_infinite() && max < F::zero() {
        return F::neg_infinity();
    }
    let mut sum = F::zero();
    for &t in terms {
        sum = sum + (t - max).exp();
    }
    max + sum.ln()
}

/// Upper-tail probability `P(X >= k)` for `X ~ Binomial(n, p)`.
///
/// Computed by direct summation of the term logs: each term is
/// `ln C(n, i) + i ln p + (n - i) ln(1 - p)`, with the binomial
/// coefficient accumulated incrementally, folded together with
/// [`log_sum_exp`]. No normal approximation anywhere.
pub fn binomial_tail_ge<F: Float>(n: u64, k: u64, p: F) -> F {
    if k == 0 {
        return F::one();
    }
    if k > n {
        return F::zero();
    }
    if p <= F::zero() {
        // All mass sits at X = 0 and k >= 1 here.
        return F::zero();
    }
    if p >= F::one() {
        // All mass sits at X = n and k <= n here.
        return F::one();
    }
    let ln_p = p.ln();
    let ln_q = (F::one() - p).ln();
    // ln C(n, i) built up from ln C(n, 0) = 0 via C(n,i+1) = C(n,i)*(n-i)/(i+1).
    let mut ln_coef = F::zero();
    for i in 0..k {
        ln_coef = ln_coef + from_u64::<F>(n - i).ln() - from_u64::<F>(i + 1).ln();
    }
    let mut terms = Vec::with_capacity((n - k + 1) as usize);
    for i in k..=n {
        let term = ln_coef + from_u64::<F>(i) * ln_p + from_u64::<F>(n - i) * ln_q;
        terms.push(term);
        if i < n {
            ln_coef = ln_coef + from_u64::<F>(n - i).ln() - from_u64::<F>(i + 1).ln();
        }
    }
    let tail = log_sum_exp(&terms).exp();
    clamp01(tail)
}

/// Cosine similarity between two vectors; `None` when either has zero norm
/// or the lengths differ.
pub fn cosine<F: Float>(a: &[F], b: &[F]) -> Option<F> {
    if a.len() != b.len() || a.is_empty() {
        return None;
    }
    let mut dot = F::zero();
    let mut norm_a = F::zero();
    let mut norm_b = F::zero();
    for (&x, &y) in a.iter().zip(b.iter()) {
        dot = dot + x * y;
        norm_a = norm_a + x * x;
        norm_b = norm_b + y * y;
    }
    if norm_a == F::zero() || norm_b == F::zero() {
        return None;
    }
    let value = dot / (norm_a.sqrt() * norm_b.sqrt());
    Some(clamp_unit(value))
}

/// L2-normalize in place; returns false (leaving the input untouched) for a
/// zero vector.
pub fn l2_normalize<F: Float>(v: &mut [F]) -> bool {
    let mut norm = F::zero();
    for &x in v.iter() {
        norm = norm + x * x;
    }
    if norm == F::zero() {
        return false;
    }
    let norm = norm.sqrt();
    for x in v.iter_mut() {
        *x = *x / norm;
    }
    true
}

fn from_u64<F: Float>(x: u64) -> F {
    F::from(x).expect("u64 converts into any Float")
}

fn clamp01<F: Float>(x: F) -> F {
    if x < F::zero() {
        F::zero()
    } else if x > F::one() {
        F::one()
    } else {
        x
    }
}

fn clamp_unit<F: Float>(x: F) -> F {
    if x < -F::one() {
        -F::one()
    } else if x > F::one() {
        F::one()
    } else {
        x
    }
}
