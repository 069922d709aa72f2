//! Bradley–Terry preference probe: `logit P(α ≻ β) = θᵀ(h_α − h_β)`.
//!
//! Training maximizes the ridge-penalized likelihood with a damped Newton
//! method. The objective is strictly convex, so the optimum does not depend
//! on the starting point.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::archive::{LabelSource, PreferencePair, Side};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BTTrainConfig {
    pub l2_penalty: f64,
    pub max_iterations: usize,
    /// Stop once the gradient norm falls to this value.
    pub tol: f64,
    pub seed: u64,
}

impl Default for BTTrainConfig {
    fn default() -> Self {
        BTTrainConfig {
            l2_penalty: 1e-4,
            max_iterations: 500,
            tol: 1e-8,
            seed: 0,
        }
    }
}

impl BTTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || !(self.l2_penalty >= 0.0) || self.max_iterations == 0 {
            return Err(Error::InvalidConfig(
                "need tol > 0, l2_penalty >= 0 and max_iterations >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTrainMeta {
    pub seed: u64,
    /// Penalized mean negative log-likelihood at the returned θ.
    pub final_nll: f64,
    pub iterations: usize,
    pub converged: bool,
    pub label_source: Option<LabelSource>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceProbe {
    pub theta: DVector<f64>,
    pub layer_id: u32,
    pub train_meta: PreferenceTrainMeta,
}

impl PreferenceProbe {
    pub fn from_theta(theta: DVector<f64>) -> Self {
        PreferenceProbe {
            theta,
            layer_id: 0,
            train_meta: PreferenceTrainMeta {
                seed: 0,
                final_nll: f64::NAN,
                iterations: 0,
                converged: false,
                label_source: None,
            },
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.theta.len()
    }

    pub fn logit(&self, w1: &DVector<f64>, w2: &DVector<f64>) -> f64 {
        self.theta.dot(&(w1 - w2))
    }

    pub fn probability(&self, w1: &DVector<f64>, w2: &DVector<f64>) -> f64 {
        bt_probability(&self.theta, w1, w2)
    }

    /// `First` iff P(w1 ≻ w2) > 0.5; an exact tie goes to `Second`.
    pub fn predict(&self, w1: &DVector<f64>, w2: &DVector<f64>) -> Side {
        decide(self.logit(w1, w2))
    }
}

/// `First` iff the logit is strictly positive.
pub(crate) fn decide(logit: f64) -> Side {
    if logit > 0.0 {
        Side::First
    } else {
        Side::Second
    }
}

/// Logistic function, stable for large |z|.
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// P(α ≻ β) = logistic(θᵀ(h_α − h_β)).
///
/// Panics if the dimensions differ.
pub fn bt_probability(theta: &DVector<f64>, h_alpha: &DVector<f64>, h_beta: &DVector<f64>) -> f64 {
    assert_eq!(theta.len(), h_alpha.len(), "theta / h_alpha dimension mismatch");
    assert_eq!(h_alpha.len(), h_beta.len(), "h_alpha / h_beta dimension mismatch");
    logistic(theta.dot(&(h_alpha - h_beta)))
}

/// Ridge-penalized logistic regression: mean of `softplus(θᵀx) − y θᵀx`
/// plus `λ‖θ‖²`.
#[derive(Debug, Clone)]
pub(crate) struct LogisticProblem {
    pub features: Vec<DVector<f64>>,
    pub labels: Vec<f64>,
    pub l2_penalty: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct LogisticFit {
    pub theta: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl LogisticProblem {
    pub fn objective(&self, theta: &DVector<f64>) -> f64 {
        let n = self.features.len() as f64;
        let nll: f64 = self
            .features
            .iter()
            .zip(&self.labels)
            .map(|(x, &y)| {
                let z = theta.dot(x);
                softplus(z) - y * z
            })
            .sum();
        nll / n + self.l2_penalty * theta.norm_squared()
    }

    pub fn gradient(&self, theta: &DVector<f64>) -> DVector<f64> {
        let n = self.features.len() as f64;
        let mut g = DVector::zeros(theta.len());
        for (x, &y) in self.features.iter().zip(&self.labels) {
            let r = logistic(theta.dot(x)) - y;
            g.axpy(r / n, x, 1.0);
        }
        g.axpy(2.0 * self.l2_penalty, theta, 1.0);
        g
    }

    fn hessian(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let n = self.features.len() as f64;
        let d = theta.len();
        let mut h = DMatrix::identity(d, d) * (2.0 * self.l2_penalty);
        for x in &self.features {
            let p = logistic(theta.dot(x));
            let w = p * (1.0 - p) / n;
            if w > 0.0 {
                h.ger(w, x, x, 1.0);
            }
        }
        h
    }

    /// Damped Newton with Armijo backtracking; falls back to steepest descent
    /// when the Hessian is not numerically positive definite.
    pub fn solve(&self, init: DVector<f64>, max_iterations: usize, tol: f64) -> Result<LogisticFit> {
        let mut theta = init;
        let mut f = self.objective(&theta);
        let mut iterations = 0;
        let mut converged = false;
        while iterations < max_iterations {
            let g = self.gradient(&theta);
            if !f.is_finite() || g.iter().any(|x| !x.is_finite()) {
                return Err(Error::DivergedTraining(format!("objective {f} at iteration {iterations}")));
            }
            if g.norm() <= tol {
                converged = true;
                break;
            }
            iterations += 1;
            let dir = match self.hessian(&theta).cholesky() {
                Some(chol) => -chol.solve(&g),
                None => -g.clone(),
            };
            let slope = g.dot(&dir);
            let mut step = 1.0;
            let mut accepted = None;
            while step > 1e-16 {
                let cand = &theta + &dir * step;
                let fc = self.objective(&cand);
                if fc <= f + 1e-4 * step * slope {
                    accepted = Some((cand, fc));
                    break;
                }
                step *= 0.5;
            }
            match accepted {
                Some((cand, fc)) => {
                    theta = cand;
                    f = fc;
                }
                // no representable decrease left
                None => {
                    converged = self.gradient(&theta).norm() <= tol;
                    break;
                }
            }
        }
        if !converged && self.gradient(&theta).norm() <= tol {
            converged = true;
        }
        Ok(LogisticFit {
            theta,
            objective: f,
            iterations,
            converged,
        })
    }
}

pub(crate) fn check_pairs(pairs: &[PreferencePair]) -> Result<usize> {
    let h = pairs.first().ok_or(Error::EmptyDataset)?.hidden_dim();
    if let Some(bad) = pairs.iter().find(|p| p.hidden_dim() != h) {
        return Err(Error::DimensionMismatch {
            expected: h,
            found: bad.hidden_dim(),
        });
    }
    Ok(h)
}

pub(crate) fn seeded_init(dim: usize, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (dim as f64).sqrt();
    DVector::from_fn(dim, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * scale
    })
}

fn bt_problem(pairs: &[PreferencePair], l2_penalty: f64) -> LogisticProblem {
    LogisticProblem {
        features: pairs
            .iter()
            .map(|p| {
                let (w, l) = p.oriented();
                w - l
            })
            .collect(),
        labels: vec![1.0; pairs.len()],
        l2_penalty,
    }
}

/// Penalized mean negative log-likelihood of the Bradley–Terry model and its gradient.
pub fn bt_objective(theta: &DVector<f64>, pairs: &[PreferencePair], l2_penalty: f64) -> Result<(f64, DVector<f64>)> {
    let h = check_pairs(pairs)?;
    if theta.len() != h {
        return Err(Error::DimensionMismatch {
            expected: h,
            found: theta.len(),
        });
    }
    let problem = bt_problem(pairs, l2_penalty);
    Ok((problem.objective(theta), problem.gradient(theta)))
}

/// Maximum-likelihood θ. Pairs are oriented winner-first before fitting, so
/// the `source` of each label only travels along as metadata.
///
/// If the gradient tolerance is not met within `max_iterations`, the last
/// iterate is returned with `converged = false` and a warning is logged.
pub fn train_bt_probe(pairs: &[PreferencePair], cfg: &BTTrainConfig) -> Result<PreferenceProbe> {
    let h = check_pairs(pairs)?;
    cfg.validate()?;
    let problem = bt_problem(pairs, cfg.l2_penalty);
    let fit = problem.solve(seeded_init(h, cfg.seed), cfg.max_iterations, cfg.tol)?;
    if !fit.converged {
        log::warn!(
            "bradley-terry fit stopped after {} iterations with gradient norm {:e}",
            fit.iterations,
            problem.gradient(&fit.theta).norm()
        );
    }
    let first_source = pairs[0].source;
    let label_source = pairs.iter().all(|p| p.source == first_source).then_some(first_source);
    Ok(PreferenceProbe {
        theta: fit.theta,
        layer_id: 0,
        train_meta: PreferenceTrainMeta {
            seed: cfg.seed,
            final_nll: fit.objective,
            iterations: fit.iterations,
            converged: fit.converged,
            label_source,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    #[test]
    fn probability_examples() {
        let theta = dvector![2.0, 0.0];
        let p = bt_probability(&theta, &dvector![0.5, 1.0], &dvector![0.0, 1.0]);
        assert!((p - 0.7310585786300049).abs() < 1e-12);
        assert!((p - 0.73106).abs() < 1e-5);
        let q = bt_probability(&theta, &dvector![0.0, 1.0], &dvector![0.5, 1.0]);
        assert!((p + q - 1.0).abs() < 1e-15);
        assert_eq!(bt_probability(&theta, &dvector![1.0, 3.0], &dvector![1.0, -2.0]), 0.5);
    }

    #[test]
    fn probability_is_stable_for_large_logits() {
        for z in [-700.0, -100.0, 100.0, 700.0] {
            let p = logistic(z);
            assert!(p.is_finite() && (0.0..=1.0).contains(&p));
            assert!(softplus(z).is_finite());
        }
        assert!(logistic(-700.0) > 0.0);
        assert_eq!(softplus(700.0), 700.0);
    }

    #[test]
    fn predict_tie_goes_to_second() {
        let probe = PreferenceProbe::from_theta(dvector![1.0, -1.0]);
        assert_eq!(probe.predict(&dvector![1.0, 1.0], &dvector![0.0, 0.0]), Side::Second);
        assert_eq!(probe.predict(&dvector![1.0, 0.0], &dvector![0.0, 0.0]), Side::First);
        // P = logistic(ln(7/3)) = 0.7
        let z = (0.7f64 / 0.3).ln();
        let probe = PreferenceProbe::from_theta(dvector![z]);
        assert!((probe.probability(&dvector![1.0], &dvector![0.0]) - 0.7).abs() < 1e-12);
        assert_eq!(probe.predict(&dvector![1.0], &dvector![0.0]), Side::First);
    }

    #[test]
    fn contradictory_labels_give_even_odds() {
        let a = dvector![1.0, 0.5, -0.2];
        let b = dvector![-0.3, 0.2, 0.9];
        let pairs = vec![
            PreferencePair::new(a.clone(), b.clone(), Side::First, LabelSource::Human).unwrap(),
            PreferencePair::new(a.clone(), b.clone(), Side::Second, LabelSource::Human).unwrap(),
        ];
        let probe = train_bt_probe(&pairs, &BTTrainConfig { seed: 5, ..Default::default() }).unwrap();
        assert!(probe.train_meta.converged);
        assert!((probe.probability(&a, &b) - 0.5).abs() < 1e-8);
        assert!((probe.probability(&b, &a) - 0.5).abs() < 1e-8);
    }

    #[test]
    fn empty_pairs_rejected() {
        assert!(matches!(train_bt_probe(&[], &BTTrainConfig::default()), Err(Error::EmptyDataset)));
    }

    #[test]
    fn non_convergence_returns_iterate() {
        let pairs = vec![PreferencePair::new(dvector![1.0, 0.0], dvector![0.0, 1.0], Side::First, LabelSource::Model).unwrap()];
        let cfg = BTTrainConfig {
            max_iterations: 1,
            tol: 1e-300,
            ..Default::default()
        };
        let probe = train_bt_probe(&pairs, &cfg).unwrap();
        assert!(!probe.train_meta.converged);
        assert_eq!(probe.train_meta.iterations, 1);
        assert_eq!(probe.train_meta.label_source, Some(LabelSource::Model));
    }
}
