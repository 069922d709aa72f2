//! Rank correlation, accuracy and exact binomial intervals.

use statrs::function::beta::beta_reg;

use crate::archive::{is_rank_bijection, Side};
use crate::error::{Error, Result};

/// Spearman's rho between two tie-free rank vectors:
/// `1 - 6 Σ d² / (W (W² - 1))`.
pub fn spearman_rho(pred: &[usize], gold: &[usize]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::DimensionMismatch {
            expected: gold.len(),
            found: pred.len(),
        });
    }
    let w = pred.len();
    if w < 2 {
        return Err(Error::Undefined(format!("spearman rho needs at least 2 items, got {w}")));
    }
    if !is_rank_bijection(pred) || !is_rank_bijection(gold) {
        return Err(Error::Undefined("spearman rho needs tie-free ranks 1..=W".into()));
    }
    let sum_sq: u64 = pred
        .iter()
        .zip(gold)
        .map(|(&p, &g)| {
            let d = p.abs_diff(g) as u64;
            d * d
        })
        .sum();
    let w = w as f64;
    Ok(1.0 - 6.0 * sum_sq as f64 / (w * (w * w - 1.0)))
}

/// Fraction of predictions equal to gold.
pub fn pairwise_accuracy(predictions: &[Side], gold: &[Side]) -> Result<f64> {
    if predictions.len() != gold.len() {
        return Err(Error::DimensionMismatch {
            expected: gold.len(),
            found: predictions.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::Undefined("accuracy of zero predictions".into()));
    }
    let hits = predictions.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Smallest `x` in [0, 1] with `f(x) >= target` for increasing `f`, by bisection.
fn invert_increasing(f: impl Fn(f64) -> f64, target: f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Two-sided Clopper–Pearson interval for `k` successes in `n` trials.
///
/// The bounds are quantiles of Beta(k, n-k+1) and Beta(k+1, n-k), found by
/// bisecting the regularized incomplete beta function.
pub fn clopper_pearson(k: u64, n: u64, confidence: f64) -> Result<(f64, f64)> {
    if n == 0 || k > n {
        return Err(Error::DomainError(format!("need 0 <= k <= n and n >= 1, got k={k}, n={n}")));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::DomainError(format!("confidence must be in (0, 1), got {confidence}")));
    }
    let tail = (1.0 - confidence) / 2.0;
    let (kf, nf) = (k as f64, n as f64);
    let low = if k == 0 {
        0.0
    } else {
        invert_increasing(|p| beta_reg(kf, nf - kf + 1.0, p), tail)
    };
    let high = if k == n {
        1.0
    } else {
        invert_increasing(|p| beta_reg(kf + 1.0, nf - kf, p), 1.0 - tail)
    };
    Ok((low, high))
}
