//! Held-out metrics, layer sweeps, frozen-probe transfer and win rates.
//!
//! Every function here borrows probes immutably. Position balancing and
//! splits draw from seeded ChaCha8 streams, so reports are reproducible.

use std::collections::BTreeSet;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{Archive, LayerSlice, PreferencePair, RankedInstance, Side};
use crate::baselines::{weat_predict, AttributeWordSets, ConcatLogReg, MaxMarginProbe};
use crate::error::{Error, Result};
use crate::order::{decode_order, OrderProbe};
use crate::preference::PreferenceProbe;
use crate::probe::{Probe, ProbeFamily};
use crate::stats::{clopper_pearson, pairwise_accuracy, spearman_rho};

pub const DEFAULT_CONFIDENCE: f64 = 0.95;
pub const DEFAULT_TEST_FRACTION: f64 = 0.2;

/// Anything that picks the preferred of two embeddings.
pub trait PairwisePredictor {
    fn hidden_dim(&self) -> usize;

    /// Which argument is preferred. Embedding sizes are checked first.
    fn predict_pair(&self, w1: &DVector<f64>, w2: &DVector<f64>) -> Result<Side>;
}

fn check_dims(h: usize, w1: &DVector<f64>, w2: &DVector<f64>) -> Result<()> {
    for w in [w1, w2] {
        if w.len() != h {
            return Err(Error::DimensionMismatch {
                expected: h,
                found: w.len(),
            });
        }
    }
    Ok(())
}

impl PairwisePredictor for PreferenceProbe {
    fn hidden_dim(&self) -> usize {
        PreferenceProbe::hidden_dim(self)
    }

    fn predict_pair(&self, w1: &DVector<f64>, w2: &DVector<f64>) -> Result<Side> {
        check_dims(self.theta.len(), w1, w2)?;
        Ok(self.predict(w1, w2))
    }
}

impl PairwisePredictor for MaxMarginProbe {
    fn hidden_dim(&self) -> usize {
        MaxMarginProbe::hidden_dim(self)
    }

    fn predict_pair(&self, w1: &DVector<f64>, w2: &DVector<f64>) -> Result<Side> {
        check_dims(self.theta.len(), w1, w2)?;
        Ok(self.predict(w1, w2))
    }
}

impl PairwisePredictor for ConcatLogReg {
    fn hidden_dim(&self) -> usize {
        ConcatLogReg::hidden_dim(self)
    }

    fn predict_pair(&self, w1: &DVector<f64>, w2: &DVector<f64>) -> Result<Side> {
        check_dims(ConcatLogReg::hidden_dim(self), w1, w2)?;
        Ok(self.predict(w1, w2))
    }
}

impl PairwisePredictor for AttributeWordSets {
    fn hidden_dim(&self) -> usize {
        AttributeWordSets::hidden_dim(self)
    }

    fn predict_pair(&self, w1: &DVector<f64>, w2: &DVector<f64>) -> Result<Side> {
        check_dims(AttributeWordSets::hidden_dim(self), w1, w2)?;
        weat_predict(self, w1, w2)
    }
}

impl PairwisePredictor for Probe {
    fn hidden_dim(&self) -> usize {
        Probe::hidden_dim(self)
    }

    fn predict_pair(&self, w1: &DVector<f64>, w2: &DVector<f64>) -> Result<Side> {
        match self {
            Probe::Order(_) => Err(Error::InvalidProbe("order probes do not predict pairwise preferences".into())),
            Probe::BradleyTerry(p) => p.predict_pair(w1, w2),
            Probe::MaxMargin(p) => p.predict_pair(w1, w2),
            Probe::ConcatLogReg(p) => p.predict_pair(w1, w2),
            Probe::Weat(s) => s.predict_pair(w1, w2),
        }
    }
}

/// A pair as shown to a predictor; `target` is the side that counts as a win.
#[derive(Debug, Clone, PartialEq)]
pub struct TestPair {
    pub first: DVector<f64>,
    pub second: DVector<f64>,
    pub target: Side,
}

impl TestPair {
    pub fn swapped(&self) -> TestPair {
        TestPair {
            first: self.second.clone(),
            second: self.first.clone(),
            target: self.target.other(),
        }
    }
}

/// One seeded coin flip per pair decides argument order; the target is the
/// gold winner.
pub fn balance_positions(pairs: &[PreferencePair], seed: u64) -> Vec<TestPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs
        .iter()
        .map(|p| {
            let pair = TestPair {
                first: p.h_alpha.clone(),
                second: p.h_beta.clone(),
                target: p.winner,
            };
            if rng.random::<bool>() {
                pair.swapped()
            } else {
                pair
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinRateReport {
    pub group_names: Vec<String>,
    pub win_rate: f64,
    pub n_pairs: u64,
    pub wins: u64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub confidence: f64,
    /// 0.5 lies outside `[ci_low, ci_high]`.
    pub significant: bool,
}

impl WinRateReport {
    pub fn from_counts(group_names: Vec<String>, wins: u64, n_pairs: u64, confidence: f64) -> Result<Self> {
        if n_pairs == 0 {
            return Err(Error::EmptyDataset);
        }
        let (ci_low, ci_high) = clopper_pearson(wins, n_pairs, confidence)?;
        Ok(WinRateReport {
            group_names,
            win_rate: wins as f64 / n_pairs as f64,
            n_pairs,
            wins,
            ci_low,
            ci_high,
            confidence,
            significant: !(ci_low <= 0.5 && 0.5 <= ci_high),
        })
    }
}

/// Fraction of pairs on which the target side is predicted preferred.
/// `group_names[0]` names the target group.
pub fn win_rate<P: PairwisePredictor + ?Sized>(
    predictor: &P,
    pairs: &[TestPair],
    group_names: Vec<String>,
    confidence: f64,
) -> Result<WinRateReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut wins = 0u64;
    for p in pairs {
        if predictor.predict_pair(&p.first, &p.second)? == p.target {
            wins += 1;
        }
    }
    WinRateReport::from_counts(group_names, wins, pairs.len() as u64, confidence)
}

/// Accuracy against the targets of already balanced pairs.
pub fn accuracy_on<P: PairwisePredictor + ?Sized>(predictor: &P, pairs: &[TestPair]) -> Result<f64> {
    let predictions = pairs
        .iter()
        .map(|p| predictor.predict_pair(&p.first, &p.second))
        .collect::<Result<Vec<_>>>()?;
    let gold: Vec<Side> = pairs.iter().map(|p| p.target).collect();
    pairwise_accuracy(&predictions, &gold)
}

/// Mean Spearman rho of decoded orders against gold.
pub fn mean_spearman(probe: &OrderProbe, instances: &[RankedInstance]) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for inst in instances {
        if inst.hidden_dim() != probe.hidden_dim() {
            return Err(Error::DimensionMismatch {
                expected: probe.hidden_dim(),
                found: inst.hidden_dim(),
            });
        }
        let pred = decode_order(probe, &inst.embeddings)?;
        total += spearman_rho(&pred, &inst.gold_ranks)?;
    }
    Ok(total / instances.len() as f64)
}

/// Cross-group pairs whose items carry group names.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedPair {
    pub first: DVector<f64>,
    pub second: DVector<f64>,
    /// Indices into `GroupedPairs::group_names`.
    pub groups: [usize; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupedPairs {
    /// Sorted, unique.
    pub group_names: Vec<String>,
    pub pairs: Vec<GroupedPair>,
}

impl GroupedPairs {
    /// Collects every two-item entry with distinct group tags.
    pub fn from_slice(slice: &LayerSlice) -> Result<Self> {
        let tagged: Vec<_> = slice
            .entries
            .iter()
            .filter_map(|e| match &e.item_groups {
                Some(g) if g.len() == 2 && e.embeddings.nrows() == 2 && g[0] != g[1] => Some((e, g)),
                _ => None,
            })
            .collect();
        let names: BTreeSet<&String> = tagged.iter().flat_map(|(_, g)| g.iter()).collect();
        let group_names: Vec<String> = names.into_iter().cloned().collect();
        if group_names.len() < 2 {
            return Err(Error::InvalidManifest("bias report needs pairs spanning at least two item groups".into()));
        }
        let index = |name: &String| group_names.binary_search(name).expect("collected above");
        let pairs = tagged
            .iter()
            .map(|(e, g)| GroupedPair {
                first: e.item(0),
                second: e.item(1),
                groups: [index(&g[0]), index(&g[1])],
            })
            .collect();
        Ok(GroupedPairs { group_names, pairs })
    }

    pub fn group_index(&self, name: &str) -> Option<usize> {
        self.group_names.iter().position(|g| g == name)
    }

    /// Pairs between groups `i` and `j` with group `i` as target, positions
    /// re-randomized by a seeded coin flip.
    pub fn pairing(&self, i: usize, j: usize, seed: u64) -> Vec<TestPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.pairs
            .iter()
            .filter_map(|p| {
                let target = if p.groups == [i, j] {
                    Side::First
                } else if p.groups == [j, i] {
                    Side::Second
                } else {
                    return None;
                };
                Some(TestPair {
                    first: p.first.clone(),
                    second: p.second.clone(),
                    target,
                })
            })
            .map(|p| if rng.random::<bool>() { p.swapped() } else { p })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragedWinRate {
    pub target: String,
    pub value: f64,
    /// One report per (probe, other group), probe-major.
    pub components: Vec<WinRateReport>,
}

/// Plain mean; the averaged win rate is this over all component rates.
pub fn mean_rate(rates: &[f64]) -> Result<f64> {
    if rates.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(rates.iter().sum::<f64>() / rates.len() as f64)
}

/// Mean over probes and over every other group `j` of the win rate of group
/// `i` against group `j`.
pub fn averaged_win_rate(
    probes: &[&dyn PairwisePredictor],
    groups: &GroupedPairs,
    i: usize,
    confidence: f64,
    seed: u64,
) -> Result<AveragedWinRate> {
    let n = groups.group_names.len();
    if probes.is_empty() {
        return Err(Error::InvalidConfig("averaged win rate needs at least one probe".into()));
    }
    if n < 2 || i >= n {
        return Err(Error::InvalidConfig(format!("target group {i} out of range for {n} groups")));
    }
    let mut components = Vec::with_capacity(probes.len() * (n - 1));
    for probe in probes {
        for j in (0..n).filter(|&j| j != i) {
            let pairs = groups.pairing(i, j, seed ^ ((i as u64) << 32 | j as u64));
            let names = vec![groups.group_names[i].clone(), groups.group_names[j].clone()];
            components.push(win_rate(*probe, &pairs, names, confidence)?);
        }
    }
    let rates: Vec<f64> = components.iter().map(|c| c.win_rate).collect();
    Ok(AveragedWinRate {
        target: groups.group_names[i].clone(),
        value: mean_rate(&rates)?,
        components,
    })
}

/// Test size is `n·fraction` rounded half down, at least 1. Both sides keep
/// the input order.
pub fn train_test_split<T: Clone>(items: &[T], fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidConfig(format!("test fraction must be in (0, 1), got {fraction}")));
    }
    let n = items.len();
    let test_size = ((n as f64 * fraction - 0.5).ceil() as usize).max(1);
    if test_size >= n {
        return Err(Error::SplitTooSmall { n, fraction });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut in_test = vec![false; n];
    for &k in &order[..test_size] {
        in_test[k] = true;
    }
    let (mut train, mut test) = (Vec::with_capacity(n - test_size), Vec::with_capacity(test_size));
    for (item, &t) in items.iter().zip(&in_test) {
        if t {
            test.push(item.clone());
        } else {
            train.push(item.clone());
        }
    }
    Ok((train, test))
}

/// A held-out score, plus a win-rate view for pairwise probes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metric: String,
    pub value: f64,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub win_rate: Option<WinRateReport>,
}

/// Scores a frozen probe on a slice. Order probes get mean Spearman rho over
/// ranked instances. Pairwise probes get accuracy over position-balanced
/// labelled pairs, with the gold winner as the win target.
pub fn evaluate(probe: &Probe, slice: &LayerSlice, seed: u64, confidence: f64) -> Result<Evaluation> {
    if let Some(e) = slice.entries.first() {
        if e.embeddings.ncols() != probe.hidden_dim() {
            return Err(Error::DimensionMismatch {
                expected: probe.hidden_dim(),
                found: e.embeddings.ncols(),
            });
        }
    }
    match probe {
        Probe::Order(p) => {
            let ranked = slice.ranked();
            Ok(Evaluation {
                metric: "spearman".into(),
                value: mean_spearman(p, &ranked)?,
                n: ranked.len(),
                win_rate: None,
            })
        }
        _ => {
            let pairs = balance_positions(&slice.pairs(), seed);
            let report = win_rate(probe, &pairs, vec!["preferred".into(), "dispreferred".into()], confidence)?;
            Ok(Evaluation {
                metric: "accuracy".into(),
                value: report.win_rate,
                n: pairs.len(),
                win_rate: Some(report),
            })
        }
    }
}

/// Applies a probe trained elsewhere to `slice` without touching its
/// parameters.
pub fn transfer_evaluate(probe: &Probe, slice: &LayerSlice, seed: u64, confidence: f64) -> Result<Evaluation> {
    evaluate(probe, slice, seed, confidence)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSweepResult {
    pub metric: String,
    pub layer_ids: Vec<u32>,
    pub values: Vec<f64>,
    pub best_layer: u32,
    pub middle_layer: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitConfig {
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            test_fraction: DEFAULT_TEST_FRACTION,
            seed: 0,
        }
    }
}

fn sub_slice(slice: &LayerSlice, entries: Vec<crate::archive::SliceEntry>) -> LayerSlice {
    LayerSlice {
        layer_id: slice.layer_id,
        entries,
    }
}

/// Trains and scores one probe per layer on the same instance split.
/// Ties in the metric go to the lower layer.
pub fn layer_sweep(
    archive: &Archive,
    task_id: Option<&str>,
    family: &ProbeFamily,
    split: SplitConfig,
) -> Result<LayerSweepResult> {
    let layer_ids = archive.layer_ids().to_vec();
    let middle_layer = archive
        .manifest()
        .middle_layer()
        .ok_or_else(|| Error::InvalidManifest("archive has no layers".into()))?;
    let mut values = Vec::with_capacity(layer_ids.len());
    for &layer in &layer_ids {
        let slice = archive.slice_layer(layer, task_id)?;
        let (train, test) = train_test_split(&slice.entries, split.test_fraction, split.seed)?;
        let probe = family.train_slice(&sub_slice(&slice, train))?;
        let eval = evaluate(&probe, &sub_slice(&slice, test), split.seed, DEFAULT_CONFIDENCE)?;
        log::debug!("layer {layer}: {} = {:.6}", eval.metric, eval.value);
        values.push(eval.value);
    }
    let mut best = 0;
    for (k, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = k;
        }
    }
    Ok(LayerSweepResult {
        metric: family.metric_name().into(),
        layer_ids: layer_ids.clone(),
        values,
        best_layer: layer_ids[best],
        middle_layer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    struct Always(Side);

    impl PairwisePredictor for Always {
        fn hidden_dim(&self) -> usize {
            1
        }

        fn predict_pair(&self, _: &DVector<f64>, _: &DVector<f64>) -> Result<Side> {
            Ok(self.0)
        }
    }

    fn pairs_with_targets(targets: &[Side]) -> Vec<TestPair> {
        targets
            .iter()
            .map(|&t| TestPair {
                first: dvector![0.0],
                second: dvector![1.0],
                target: t,
            })
            .collect()
    }

    #[test]
    fn always_prefers_target() {
        let pairs = pairs_with_targets(&[Side::Second; 10]);
        let r = win_rate(&Always(Side::Second), &pairs, vec!["B".into(), "A".into()], 0.95).unwrap();
        assert_eq!(r.win_rate, 1.0);
        assert!(r.significant);
        assert_eq!(r.ci_high, 1.0);
    }

    #[test]
    fn six_of_ten_not_significant() {
        let mut targets = vec![Side::First; 6];
        targets.extend([Side::Second; 4]);
        let r = win_rate(&Always(Side::First), &pairs_with_targets(&targets), vec![], 0.95).unwrap();
        assert_eq!(r.win_rate, 0.6);
        assert!(!r.significant);
        assert!(r.ci_low <= r.win_rate && r.win_rate <= r.ci_high);
    }

    #[test]
    fn complementary_rates() {
        let targets = [Side::First, Side::Second, Side::Second, Side::First, Side::Second];
        let a = pairs_with_targets(&targets);
        let b: Vec<_> = a
            .iter()
            .map(|p| TestPair {
                target: p.target.other(),
                ..p.clone()
            })
            .collect();
        let p = Always(Side::First);
        let ra = win_rate(&p, &a, vec![], 0.95).unwrap().win_rate;
        let rb = win_rate(&p, &b, vec![], 0.95).unwrap().win_rate;
        assert_eq!(ra + rb, 1.0);
    }

    #[test]
    fn empty_pairs_rejected() {
        assert!(matches!(win_rate(&Always(Side::First), &[], vec![], 0.95), Err(Error::EmptyDataset)));
    }

    #[test]
    fn mean_rate_examples() {
        assert_eq!(mean_rate(&[0.5, 0.5, 0.5]).unwrap(), 0.5);
        assert!((mean_rate(&[0.6, 0.8]).unwrap() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn split_sizes() {
        let items: Vec<u32> = (0..10).collect();
        let (train, test) = train_test_split(&items, 0.2, 3).unwrap();
        assert_eq!((train.len(), test.len()), (8, 2));
        assert_eq!(train_test_split(&items, 0.2, 3).unwrap(), (train.clone(), test.clone()));
        let mut all: Vec<u32> = train.iter().chain(&test).copied().collect();
        all.sort();
        assert_eq!(all, items);

        let (train, test) = train_test_split(&[1, 2, 3], 0.5, 0).unwrap();
        assert_eq!((train.len(), test.len()), (2, 1));
    }

    #[test]
    fn split_errors() {
        assert!(matches!(train_test_split(&[1], 0.2, 0), Err(Error::SplitTooSmall { n: 1, .. })));
        assert!(matches!(train_test_split::<u8>(&[], 0.2, 0), Err(Error::SplitTooSmall { .. })));
        assert!(matches!(train_test_split(&[1, 2], 0.0, 0), Err(Error::InvalidConfig(_))));
        assert!(matches!(train_test_split(&[1, 2], 1.0, 0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn balancing_is_seeded_and_keeps_winner() {
        let pairs: Vec<PreferencePair> = (0..50)
            .map(|i| {
                PreferencePair::new(dvector![i as f64], dvector![-(i as f64)], Side::First, crate::archive::LabelSource::Human)
                    .unwrap()
            })
            .collect();
        let a = balance_positions(&pairs, 9);
        assert_eq!(a, balance_positions(&pairs, 9));
        let swapped = a.iter().filter(|p| p.target == Side::Second).count();
        assert!(swapped > 10 && swapped < 40);
        for (t, p) in a.iter().zip(&pairs) {
            let winner = if t.target == Side::First { &t.first } else { &t.second };
            assert_eq!(winner, &p.h_alpha);
        }
    }

    #[test]
    fn dimension_mismatch_reported() {
        let probe = PreferenceProbe::from_theta(dvector![1.0, 0.0]);
        let err = probe.predict_pair(&dvector![1.0], &dvector![0.0]).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { expected: 2, found: 1 }));
    }
}
