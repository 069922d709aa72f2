//! Comparison predictors: WEAT-style mean cosine association, a linear
//! max-margin classifier on embedding differences, and logistic regression on
//! concatenated embeddings.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{PreferencePair, Side};
use crate::error::{Error, Result};
use crate::geometry::{distance, DistanceKind};
use crate::preference::{check_pairs, decide, logistic, seeded_init, BTTrainConfig, LogisticProblem, PreferenceTrainMeta};

/// Two opposite attribute sets; α is the preferred pole.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeWordSets {
    pub positive: Vec<(String, DVector<f64>)>,
    pub negative: Vec<(String, DVector<f64>)>,
}

impl AttributeWordSets {
    pub fn new(positive: Vec<(String, DVector<f64>)>, negative: Vec<(String, DVector<f64>)>) -> Result<Self> {
        if positive.is_empty() || negative.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let h = positive[0].1.len();
        if let Some((_, v)) = positive.iter().chain(&negative).find(|(_, v)| v.len() != h) {
            return Err(Error::DimensionMismatch {
                expected: h,
                found: v.len(),
            });
        }
        if let Some((label, _)) = positive.iter().find(|(l, _)| negative.iter().any(|(m, _)| m == l)) {
            return Err(Error::InvalidConfig(format!("label '{label}' appears in both attribute sets")));
        }
        Ok(AttributeWordSets { positive, negative })
    }

    /// Winners form the positive set and losers the negative one, labelled by pair index.
    pub fn from_pairs(pairs: &[PreferencePair]) -> Result<Self> {
        check_pairs(pairs)?;
        let mut positive = Vec::with_capacity(pairs.len());
        let mut negative = Vec::with_capacity(pairs.len());
        for (i, p) in pairs.iter().enumerate() {
            let (w, l) = p.oriented();
            positive.push((format!("pair{i}:winner"), w.clone()));
            negative.push((format!("pair{i}:loser"), l.clone()));
        }
        AttributeWordSets::new(positive, negative)
    }

    pub fn hidden_dim(&self) -> usize {
        self.positive[0].1.len()
    }
}

/// Mean cosine distance from `w` to every vector of `set`.
pub fn mean_cosine_distance(w: &DVector<f64>, set: &[(String, DVector<f64>)]) -> Result<f64> {
    let mut total = 0.0;
    for (_, v) in set {
        total += distance(DistanceKind::Cosine, w.as_slice(), v.as_slice())?;
    }
    Ok(total / set.len() as f64)
}

/// Association score; lower means closer to the positive set.
pub fn weat_score(sets: &AttributeWordSets, w: &DVector<f64>) -> Result<f64> {
    Ok(mean_cosine_distance(w, &sets.positive)? - mean_cosine_distance(w, &sets.negative)?)
}

/// The test word with the smaller score wins; ties go to `Second`.
pub fn weat_predict(sets: &AttributeWordSets, w1: &DVector<f64>, w2: &DVector<f64>) -> Result<Side> {
    let s1 = weat_score(sets, w1)?;
    let s2 = weat_score(sets, w2)?;
    Ok(if s1 < s2 { Side::First } else { Side::Second })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxMarginTrainMeta {
    pub seed: u64,
    /// Hinge sum plus ridge at the returned θ.
    pub final_loss: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Linear direction on embedding differences trained with a hinge.
#[derive(Debug, Clone, PartialEq)]
pub struct MaxMarginProbe {
    pub theta: DVector<f64>,
    pub margin: f64,
    pub layer_id: u32,
    pub train_meta: MaxMarginTrainMeta,
}

impl MaxMarginProbe {
    pub fn hidden_dim(&self) -> usize {
        self.theta.len()
    }

    pub fn predict(&self, w1: &DVector<f64>, w2: &DVector<f64>) -> Side {
        decide(self.theta.dot(&(w1 - w2)))
    }
}

/// `Σ max(0, c − θᵀ(h_w − h_l)) + λ‖θ‖²` and a subgradient (0 at the kink).
pub fn max_margin_objective(
    theta: &DVector<f64>,
    pairs: &[PreferencePair],
    margin: f64,
    l2_penalty: f64,
) -> Result<(f64, DVector<f64>)> {
    let h = check_pairs(pairs)?;
    if theta.len() != h {
        return Err(Error::DimensionMismatch {
            expected: h,
            found: theta.len(),
        });
    }
    let mut loss = l2_penalty * theta.norm_squared();
    let mut grad = theta * (2.0 * l2_penalty);
    for p in pairs {
        let (w, l) = p.oriented();
        let diff = w - l;
        let slack = margin - theta.dot(&diff);
        if slack > 0.0 {
            loss += slack;
            grad -= diff;
        }
    }
    Ok((loss, grad))
}

/// Minimizes the hinge objective exactly via dual coordinate descent on the
/// equivalent L1-loss SVM (`θ = c·w`, box bound `1 / (2λc)`).
pub fn train_maxmargin(pairs: &[PreferencePair], margin: f64, cfg: &BTTrainConfig) -> Result<MaxMarginProbe> {
    let h = check_pairs(pairs)?;
    cfg.validate()?;
    if !(margin >= 0.0) {
        return Err(Error::InvalidConfig(format!("margin must be >= 0, got {margin}")));
    }
    let zero = DVector::zeros(h);
    let zero_loss = max_margin_objective(&zero, pairs, margin, cfg.l2_penalty)?.0;
    if margin == 0.0 {
        // Any nonzero θ only adds ridge cost.
        return Ok(MaxMarginProbe {
            theta: zero,
            margin,
            layer_id: 0,
            train_meta: MaxMarginTrainMeta {
                seed: cfg.seed,
                final_loss: zero_loss,
                iterations: 0,
                converged: true,
            },
        });
    }

    let diffs: Vec<DVector<f64>> = pairs
        .iter()
        .map(|p| {
            let (w, l) = p.oriented();
            w - l
        })
        .collect();
    let q: Vec<f64> = diffs.iter().map(|d| d.norm_squared()).collect();
    let upper = if cfg.l2_penalty > 0.0 {
        1.0 / (2.0 * cfg.l2_penalty * margin)
    } else {
        f64::INFINITY
    };
    let mut alpha = vec![0.0; diffs.len()];
    let mut w = DVector::zeros(h);
    let mut order: Vec<usize> = (0..diffs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iterations {
        iterations += 1;
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let (mut pg_max, mut pg_min) = (f64::NEG_INFINITY, f64::INFINITY);
        for &i in &order {
            if q[i] == 0.0 {
                continue;
            }
            let g = w.dot(&diffs[i]) - 1.0;
            let pg = if alpha[i] == 0.0 {
                g.min(0.0)
            } else if alpha[i] == upper {
                g.max(0.0)
            } else {
                g
            };
            pg_max = pg_max.max(pg);
            pg_min = pg_min.min(pg);
            if pg != 0.0 {
                let old = alpha[i];
                alpha[i] = (old - g / q[i]).clamp(0.0, upper);
                w.axpy(alpha[i] - old, &diffs[i], 1.0);
            }
        }
        if !w.iter().all(|x| x.is_finite()) {
            return Err(Error::DivergedTraining("max-margin weights became non-finite".into()));
        }
        if pg_max - pg_min <= cfg.tol || pg_max == f64::NEG_INFINITY {
            converged = true;
            break;
        }
    }
    let mut theta = w * margin;
    let mut final_loss = max_margin_objective(&theta, pairs, margin, cfg.l2_penalty)?.0;
    if final_loss > zero_loss {
        theta = DVector::zeros(h);
        final_loss = zero_loss;
    }
    Ok(MaxMarginProbe {
        theta,
        margin,
        layer_id: 0,
        train_meta: MaxMarginTrainMeta {
            seed: cfg.seed,
            final_loss,
            iterations,
            converged,
        },
    })
}

/// Logistic regression on `h_1 ⊕ h_2` (dimension 2H).
#[derive(Debug, Clone, PartialEq)]
pub struct ConcatLogReg {
    pub theta: DVector<f64>,
    pub layer_id: u32,
    pub train_meta: PreferenceTrainMeta,
}

pub fn concat(w1: &DVector<f64>, w2: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(w1.len() + w2.len());
    out.rows_mut(0, w1.len()).copy_from(w1);
    out.rows_mut(w1.len(), w2.len()).copy_from(w2);
    out
}

impl ConcatLogReg {
    pub fn hidden_dim(&self) -> usize {
        self.theta.len() / 2
    }

    /// P(first ≻ second) = logistic(θᵀ(h_1 ⊕ h_2)).
    pub fn probability(&self, w1: &DVector<f64>, w2: &DVector<f64>) -> f64 {
        logistic(self.theta.dot(&concat(w1, w2)))
    }

    pub fn predict(&self, w1: &DVector<f64>, w2: &DVector<f64>) -> Side {
        decide(self.theta.dot(&concat(w1, w2)))
    }
}

/// Each pair is used as stored and with its arguments swapped (label
/// flipped), so position alone carries no signal.
pub fn train_concat_logreg(pairs: &[PreferencePair], cfg: &BTTrainConfig) -> Result<ConcatLogReg> {
    let h = check_pairs(pairs)?;
    cfg.validate()?;
    let mut features = Vec::with_capacity(2 * pairs.len());
    let mut labels = Vec::with_capacity(2 * pairs.len());
    for p in pairs {
        let first_wins = if p.winner == Side::First { 1.0 } else { 0.0 };
        features.push(concat(&p.h_alpha, &p.h_beta));
        labels.push(first_wins);
        features.push(concat(&p.h_beta, &p.h_alpha));
        labels.push(1.0 - first_wins);
    }
    let problem = LogisticProblem {
        features,
        labels,
        l2_penalty: cfg.l2_penalty,
    };
    let fit = problem.solve(seeded_init(2 * h, cfg.seed), cfg.max_iterations, cfg.tol)?;
    if !fit.converged {
        log::warn!("concatenated logistic regression stopped after {} iterations", fit.iterations);
    }
    Ok(ConcatLogReg {
        theta: fit.theta,
        layer_id: 0,
        train_meta: PreferenceTrainMeta {
            seed: cfg.seed,
            final_nll: fit.objective,
            iterations: fit.iterations,
            converged: fit.converged,
            label_source: Some(pairs[0].source).filter(|s| pairs.iter().all(|p| p.source == *s)),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archive::LabelSource;
    use nalgebra::dvector;

    fn sets(pos: Vec<DVector<f64>>, neg: Vec<DVector<f64>>) -> AttributeWordSets {
        AttributeWordSets::new(
            pos.into_iter().enumerate().map(|(i, v)| (format!("p{i}"), v)).collect(),
            neg.into_iter().enumerate().map(|(i, v)| (format!("n{i}"), v)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn weat_examples() {
        let s = sets(vec![dvector![1.0, 0.0]], vec![dvector![0.0, 1.0]]);
        assert_eq!(weat_predict(&s, &dvector![1.0, 0.1], &dvector![0.1, 1.0]).unwrap(), Side::First);
        let w = dvector![0.3, 0.7];
        assert_eq!(weat_predict(&s, &w, &w).unwrap(), Side::Second);

        let s = sets(vec![dvector![1.0, 0.0], dvector![0.8, 0.6]], vec![dvector![-1.0, 0.0]]);
        let w1 = dvector![0.0, 1.0];
        let w2 = dvector![1.0, 0.0];
        // s(w1) = (1 + 0.4)/2 - 1 = -0.3 ; s(w2) = (0 + 0.2)/2 - 2 = -1.9
        assert!((weat_score(&s, &w1).unwrap() + 0.3).abs() < 1e-12);
        assert!((weat_score(&s, &w2).unwrap() + 1.9).abs() < 1e-12);
        assert_eq!(weat_predict(&s, &w1, &w2).unwrap(), Side::Second);
    }

    #[test]
    fn weat_rejects_zero_vectors_and_shared_labels() {
        let s = sets(vec![dvector![1.0, 0.0]], vec![dvector![0.0, 1.0]]);
        assert!(matches!(
            weat_predict(&s, &dvector![0.0, 0.0], &dvector![1.0, 1.0]),
            Err(Error::DegenerateVector(_))
        ));
        let shared = AttributeWordSets::new(
            vec![("x".into(), dvector![1.0])],
            vec![("x".into(), dvector![2.0])],
        );
        assert!(shared.is_err());
        assert!(matches!(AttributeWordSets::new(vec![], vec![("x".into(), dvector![1.0])]), Err(Error::EmptyDataset)));
    }

    fn pair(a: DVector<f64>, b: DVector<f64>) -> PreferencePair {
        PreferencePair::new(a, b, Side::First, LabelSource::Human).unwrap()
    }

    #[test]
    fn max_margin_loss_at_zero_is_n_times_c() {
        let pairs: Vec<_> = (0..7).map(|i| pair(dvector![i as f64, 1.0], dvector![0.0, -1.0])).collect();
        let (loss, _) = max_margin_objective(&DVector::zeros(2), &pairs, 0.5, 1e-4).unwrap();
        assert!((loss - 3.5).abs() < 1e-12);
    }

    #[test]
    fn max_margin_zero_margin_zero_differences() {
        let v = dvector![0.3, -0.4];
        let pairs = vec![pair(v.clone(), v.clone()), pair(v.clone(), v.clone())];
        let probe = train_maxmargin(&pairs, 0.0, &BTTrainConfig::default()).unwrap();
        assert_eq!(probe.train_meta.final_loss, 0.0);
        assert_eq!(probe.predict(&v, &v), Side::Second);
    }

    #[test]
    fn max_margin_separates_simple_data() {
        let pairs = vec![
            pair(dvector![1.0, 0.2], dvector![-1.0, 0.1]),
            pair(dvector![0.5, -0.3], dvector![-0.4, 0.0]),
            pair(dvector![2.0, 1.0], dvector![1.0, 1.0]),
        ];
        let probe = train_maxmargin(&pairs, 0.5, &BTTrainConfig::default()).unwrap();
        assert!(probe.train_meta.converged);
        for p in &pairs {
            assert_eq!(probe.predict(&p.h_alpha, &p.h_beta), Side::First);
            assert!(probe.theta.dot(&(&p.h_alpha - &p.h_beta)) >= 0.5 - 1e-3);
        }
        let zero = max_margin_objective(&DVector::zeros(2), &pairs, 0.5, 1e-4).unwrap().0;
        assert!(probe.train_meta.final_loss <= zero);
    }

    #[test]
    fn concat_zero_theta_is_even_odds_and_order_sensitive() {
        let model = ConcatLogReg {
            theta: DVector::zeros(4),
            layer_id: 0,
            train_meta: PreferenceTrainMeta {
                seed: 0,
                final_nll: 0.0,
                iterations: 0,
                converged: true,
                label_source: None,
            },
        };
        let a = dvector![1.0, 2.0];
        let b = dvector![-3.0, 0.5];
        assert_eq!(model.probability(&a, &b), 0.5);
        assert_ne!(concat(&a, &b), concat(&b, &a));
    }

    #[test]
    fn concat_training_learns_antisymmetric_direction() {
        let pairs = vec![
            pair(dvector![1.0, 0.0], dvector![-1.0, 0.0]),
            PreferencePair::new(dvector![-0.5, 0.3], dvector![0.7, 0.2], Side::Second, LabelSource::Human).unwrap(),
        ];
        let model = train_concat_logreg(&pairs, &BTTrainConfig::default()).unwrap();
        assert!(model.train_meta.converged);
        for p in &pairs {
            assert_eq!(model.predict(&p.h_alpha, &p.h_beta), p.winner);
            assert_eq!(model.predict(&p.h_beta, &p.h_alpha), p.winner.other());
        }
    }
}
