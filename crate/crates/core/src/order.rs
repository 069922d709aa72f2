//! Structural order probe.
//!
//! Each item embedding `h` is projected to `Aᵀh` (A is H×d) and scored by its
//! distance to a learned anchor in the projected space. Training minimizes a
//! pairwise hinge that pushes items of larger true rank farther from the
//! anchor; decoding sorts items by ascending distance.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::RankedInstance;
use crate::error::{Error, Result};
use crate::geometry::{distance_and_grad_into, DistanceKind};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// Window (in epochs) over which relative loss change is measured.
const CONVERGENCE_WINDOW: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrderTrainConfig {
    pub margin: f64,
    pub probe_dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Relative objective change over five epochs below which training stops.
    pub convergence_tol: f64,
    /// Ridge on A, only applied for `DistanceKind::Dot` (bilinear in A and the anchor).
    pub l2_penalty: f64,
    /// L2-normalize embeddings before projecting.
    pub normalize: bool,
}

impl Default for OrderTrainConfig {
    fn default() -> Self {
        OrderTrainConfig {
            margin: 0.5,
            probe_dim: 64,
            learning_rate: 1e-3,
            epochs: 200,
            batch_size: 32,
            seed: 0,
            convergence_tol: 1e-6,
            l2_penalty: 1e-4,
            normalize: false,
        }
    }
}

impl OrderTrainConfig {
    pub fn validate(&self, hidden_dim: usize) -> Result<()> {
        if !(self.margin >= 0.0) {
            return Err(Error::InvalidConfig(format!("margin must be >= 0, got {}", self.margin)));
        }
        if self.probe_dim == 0 || self.probe_dim > hidden_dim {
            return Err(Error::InvalidConfig(format!(
                "probe_dim must be in 1..={hidden_dim}, got {}",
                self.probe_dim
            )));
        }
        if !(self.learning_rate > 0.0) || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "learning_rate, epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.l2_penalty >= 0.0) || !(self.convergence_tol >= 0.0) {
            return Err(Error::InvalidConfig("l2_penalty and convergence_tol must be >= 0".into()));
        }
        Ok(())
    }

    fn penalty_for(&self, kind: DistanceKind) -> f64 {
        match kind {
            DistanceKind::Dot => self.l2_penalty,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderTrainMeta {
    pub seed: u64,
    pub epochs: usize,
    /// Mean per-instance hinge loss at the returned parameters.
    pub final_loss: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderProbe {
    /// H×d.
    pub projection: DMatrix<f64>,
    /// Anchor point in the projected (d-dimensional) space.
    pub anchor: DVector<f64>,
    pub kind: DistanceKind,
    pub layer_id: u32,
    pub margin: f64,
    pub normalize: bool,
    pub train_meta: OrderTrainMeta,
}

impl OrderProbe {
    pub fn new(projection: DMatrix<f64>, anchor: DVector<f64>, kind: DistanceKind) -> Result<Self> {
        if projection.ncols() != anchor.len() || anchor.is_empty() {
            return Err(Error::InvalidShape(format!(
                "projection is {}x{}, anchor has {} entries",
                projection.nrows(),
                projection.ncols(),
                anchor.len()
            )));
        }
        if projection.iter().chain(anchor.iter()).any(|x| !x.is_finite()) {
            return Err(Error::InvalidShape("non-finite probe parameter".into()));
        }
        Ok(OrderProbe {
            projection,
            anchor,
            kind,
            layer_id: 0,
            margin: 0.5,
            normalize: false,
            train_meta: OrderTrainMeta {
                seed: 0,
                epochs: 0,
                final_loss: f64::NAN,
                converged: false,
            },
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn probe_dim(&self) -> usize {
        self.projection.ncols()
    }

    /// Parameters flattened as A (row-major) followed by the anchor.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.projection.len() + self.anchor.len());
        for r in 0..self.projection.nrows() {
            out.extend(self.projection.row(r).iter());
        }
        out.extend(self.anchor.iter());
        out
    }

    fn prepare(&self, embeddings: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if embeddings.ncols() != self.hidden_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.hidden_dim(),
                found: embeddings.ncols(),
            });
        }
        Ok(if self.normalize {
            normalize_rows(embeddings)
        } else {
            embeddings.clone()
        })
    }

    /// Projected rows `Aᵀh_j`, W×d.
    pub fn project(&self, embeddings: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.prepare(embeddings)? * &self.projection)
    }

    /// Distance of every item to the anchor.
    pub fn distances(&self, embeddings: &DMatrix<f64>) -> Result<Vec<f64>> {
        let projected = self.project(embeddings)?;
        let anchor = self.anchor.as_slice();
        let mut row = vec![0.0; self.probe_dim()];
        (0..projected.nrows())
            .map(|j| {
                copy_row(&projected, j, &mut row);
                crate::geometry::distance(self.kind, &row, anchor)
            })
            .collect()
    }
}

fn copy_row(m: &DMatrix<f64>, r: usize, out: &mut [f64]) {
    for (c, o) in out.iter_mut().enumerate() {
        *o = m[(r, c)];
    }
}

fn normalize_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut row in out.row_iter_mut() {
        let n = row.norm();
        if n > 0.0 {
            row /= n;
        }
    }
    out
}

/// Hinge for one ordered pair: `max(0, d_low - d_high + c)`, where `d_low`
/// belongs to the item with the smaller true rank.
pub fn pair_hinge(d_low: f64, d_high: f64, c: f64) -> f64 {
    (d_low - d_high + c).max(0.0)
}

/// Sum of `pair_hinge` over every pair ordered by true rank.
pub fn order_loss_from_distances(distances: &[f64], ranks: &[usize], c: f64) -> f64 {
    let mut loss = 0.0;
    for j in 0..ranks.len() {
        for k in 0..ranks.len() {
            if ranks[j] < ranks[k] {
                loss += pair_hinge(distances[j], distances[k], c);
            }
        }
    }
    loss
}

/// Order loss of one instance.
pub fn order_loss(probe: &OrderProbe, instance: &RankedInstance, c: f64) -> Result<f64> {
    let d = probe.distances(&instance.embeddings)?;
    Ok(order_loss_from_distances(&d, &instance.gold_ranks, c))
}

/// Gradient of the (unpenalized) order loss of one instance, accumulated into
/// `grad_a` and `grad_anchor`. Returns the loss. Subgradient 0 at the kink.
fn accumulate_instance_grad(
    probe: &OrderProbe,
    instance: &RankedInstance,
    c: f64,
    grad_a: &mut DMatrix<f64>,
    grad_anchor: &mut DVector<f64>,
) -> Result<f64> {
    let embeddings = probe.prepare(&instance.embeddings)?;
    let projected = &embeddings * &probe.projection;
    let w = instance.item_count();
    let dim = probe.probe_dim();
    let mut dist = vec![0.0; w];
    let mut grad_u = DMatrix::zeros(w, dim);
    let mut grad_v = DMatrix::zeros(w, dim);
    let mut row = vec![0.0; dim];
    let mut gu = vec![0.0; dim];
    let mut gv = vec![0.0; dim];
    for j in 0..w {
        copy_row(&projected, j, &mut row);
        dist[j] = distance_and_grad_into(probe.kind, &row, probe.anchor.as_slice(), &mut gu, &mut gv)?;
        for c in 0..dim {
            grad_u[(j, c)] = gu[c];
            grad_v[(j, c)] = gv[c];
        }
    }

    let ranks = &instance.gold_ranks;
    let mut coef = vec![0.0; w];
    let mut loss = 0.0;
    for j in 0..w {
        for k in 0..w {
            if ranks[j] < ranks[k] {
                let arg = dist[j] - dist[k] + c;
                if arg > 0.0 {
                    loss += arg;
                    coef[j] += 1.0;
                    coef[k] -= 1.0;
                }
            }
        }
    }
    if coef.iter().all(|&x| x == 0.0) {
        return Ok(loss);
    }
    for j in 0..w {
        if coef[j] == 0.0 {
            continue;
        }
        for col in 0..dim {
            grad_u[(j, col)] *= coef[j];
            grad_anchor[col] += coef[j] * grad_v[(j, col)];
        }
    }
    for (j, &cj) in coef.iter().enumerate() {
        if cj == 0.0 {
            grad_u.row_mut(j).fill(0.0);
        }
    }
    // d(loss)/dA = Σ_j h_j ⊗ (coef_j ∂δ/∂u_j) = Eᵀ G
    grad_a.gemm_tr(1.0, &embeddings, &grad_u, 1.0);
    Ok(loss)
}

/// Value and gradient of the order loss of one instance with respect to
/// (A, anchor).
pub fn order_loss_grad(
    probe: &OrderProbe,
    instance: &RankedInstance,
    c: f64,
) -> Result<(f64, DMatrix<f64>, DVector<f64>)> {
    let mut ga = DMatrix::zeros(probe.hidden_dim(), probe.probe_dim());
    let mut gx = DVector::zeros(probe.probe_dim());
    let loss = accumulate_instance_grad(probe, instance, c, &mut ga, &mut gx)?;
    Ok((loss, ga, gx))
}

/// Training objective on `data`: mean per-instance order loss plus
/// `l2_penalty * ||A||²`, with its gradient.
pub fn training_objective(
    probe: &OrderProbe,
    data: &[&RankedInstance],
    c: f64,
    l2_penalty: f64,
) -> Result<(f64, DMatrix<f64>, DVector<f64>)> {
    let mut ga = DMatrix::zeros(probe.hidden_dim(), probe.probe_dim());
    let mut gx = DVector::zeros(probe.probe_dim());
    let mut loss = 0.0;
    for inst in data {
        loss += accumulate_instance_grad(probe, inst, c, &mut ga, &mut gx)?;
    }
    let n = data.len().max(1) as f64;
    loss /= n;
    ga /= n;
    gx /= n;
    if l2_penalty > 0.0 {
        loss += l2_penalty * probe.projection.norm_squared();
        ga += &probe.projection * (2.0 * l2_penalty);
    }
    Ok((loss, ga, gx))
}

fn mean_loss(probe: &OrderProbe, data: &[RankedInstance], c: f64) -> Result<f64> {
    let mut total = 0.0;
    for inst in data {
        total += order_loss(probe, inst, c)?;
    }
    Ok(total / data.len() as f64)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let b1 = 1.0 - ADAM_BETA1.powi(self.t);
        let b2 = 1.0 - ADAM_BETA2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = self.m[i] / b1;
            let v_hat = self.v[i] / b2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

/// Trains an order probe with mini-batch Adam. Identical inputs and seed give
/// bit-identical parameters. The parameters with the lowest full-data
/// objective seen at an epoch boundary are returned.
pub fn train_order_probe(data: &[RankedInstance], cfg: &OrderTrainConfig, kind: DistanceKind) -> Result<OrderProbe> {
    let first = data.first().ok_or(Error::EmptyDataset)?;
    let h = first.hidden_dim();
    if let Some(bad) = data.iter().find(|d| d.hidden_dim() != h) {
        return Err(Error::DimensionMismatch {
            expected: h,
            found: bad.hidden_dim(),
        });
    }
    cfg.validate(h)?;
    let d = cfg.probe_dim;
    let penalty = cfg.penalty_for(kind);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let bound = 1.0 / (h as f64).sqrt();
    let projection = DMatrix::from_fn(h, d, |_, _| rng.random_range(-bound..bound));
    let anchor = match kind {
        // A zero anchor has no direction, so cosine starts from a random one.
        DistanceKind::Cosine => {
            let b = 1.0 / (d as f64).sqrt();
            DVector::from_fn(d, |_, _| rng.random_range(-b..b))
        }
        _ => DVector::zeros(d),
    };
    let mut probe = OrderProbe::new(projection, anchor, kind)?;
    probe.margin = cfg.margin;
    probe.normalize = cfg.normalize;

    let n_params = h * d + d;
    let mut adam = Adam::new(n_params);
    let mut params = vec![0.0; n_params];
    let mut grads = vec![0.0; n_params];
    let mut order: Vec<usize> = (0..data.len()).collect();

    let objective = |p: &OrderProbe| -> Result<f64> {
        let loss = mean_loss(p, data, cfg.margin)?;
        Ok(loss + penalty * p.projection.norm_squared())
    };

    let mut best = probe.clone();
    let mut best_obj = objective(&probe)?;
    let mut history = vec![best_obj];
    let mut epochs_run = 0;
    let mut converged = false;

    for _epoch in 0..cfg.epochs {
        shuffle(&mut order, &mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let refs: Vec<&RankedInstance> = batch.iter().map(|&i| &data[i]).collect();
            let (_, ga, gx) = training_objective(&probe, &refs, cfg.margin, penalty)?;
            pack(&probe.projection, &probe.anchor, &mut params);
            pack(&ga, &gx, &mut grads);
            adam.step(&mut params, &grads, cfg.learning_rate);
            unpack(&params, &mut probe.projection, &mut probe.anchor);
        }
        epochs_run += 1;

        let obj = objective(&probe)?;
        if !obj.is_finite() {
            return Err(Error::DivergedTraining(format!("objective became {obj} at epoch {epochs_run}")));
        }
        if obj < best_obj {
            best_obj = obj;
            best = probe.clone();
        }
        history.push(obj);
        if history.len() > CONVERGENCE_WINDOW {
            let prev = history[history.len() - 1 - CONVERGENCE_WINDOW];
            let change = (prev - obj).abs();
            if change <= cfg.convergence_tol * prev.abs() || (prev == 0.0 && obj == 0.0) {
                converged = true;
                break;
            }
        }
    }

    best.train_meta = OrderTrainMeta {
        seed: cfg.seed,
        epochs: epochs_run,
        final_loss: mean_loss(&best, data, cfg.margin)?,
        converged,
    };
    Ok(best)
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

fn pack(a: &DMatrix<f64>, x: &DVector<f64>, out: &mut [f64]) {
    let n = a.len();
    out[..n].copy_from_slice(a.as_slice());
    out[n..].copy_from_slice(x.as_slice());
}

fn unpack(src: &[f64], a: &mut DMatrix<f64>, x: &mut DVector<f64>) {
    let n = a.len();
    a.as_mut_slice().copy_from_slice(&src[..n]);
    x.as_mut_slice().copy_from_slice(&src[n..]);
}

/// Ranks (1-based) from distances: ascending distance, ties to the lower index.
pub fn ranks_from_distances(distances: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..distances.len()).collect();
    idx.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    let mut ranks = vec![0; distances.len()];
    for (pos, &i) in idx.iter().enumerate() {
        ranks[i] = pos + 1;
    }
    ranks
}

/// Predicted ranks of the W items in `embeddings` (W×H).
pub fn decode_order(probe: &OrderProbe, embeddings: &DMatrix<f64>) -> Result<Vec<usize>> {
    Ok(ranks_from_distances(&probe.distances(embeddings)?))
}

/// Projected item points and the anchor, for plotting.
#[derive(Debug, Clone, PartialEq)]
pub struct VizProjection {
    /// W×d.
    pub points: DMatrix<f64>,
    pub anchor: DVector<f64>,
}

pub fn project_for_viz(probe: &OrderProbe, embeddings: &DMatrix<f64>) -> Result<VizProjection> {
    let d = probe.probe_dim();
    if !(2..=3).contains(&d) {
        return Err(Error::NotVisualizable(d));
    }
    Ok(VizProjection {
        points: probe.project(embeddings)?,
        anchor: probe.anchor.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_probe(h: usize, d: usize, kind: DistanceKind) -> OrderProbe {
        OrderProbe::new(DMatrix::identity(h, d), DVector::zeros(d), kind).unwrap()
    }

    #[test]
    fn hinge_examples() {
        assert_eq!(pair_hinge(0.2, 1.0, 0.5), 0.0);
        assert!((pair_hinge(1.0, 0.8, 0.5) - 0.7).abs() < 1e-12);
        assert_eq!(pair_hinge(3.3, 3.3, 0.0), 0.0);
    }

    #[test]
    fn loss_examples() {
        assert_eq!(order_loss_from_distances(&[0.0, 1.0], &[1, 2], 0.5), 0.0);
        assert_eq!(order_loss_from_distances(&[1.0, 0.0], &[1, 2], 0.5), 1.5);
        // identical projected embeddings: 3 pairs each contribute c
        let probe = identity_probe(2, 2, DistanceKind::SquaredL2);
        let inst = RankedInstance::new("x", DMatrix::from_element(3, 2, 0.7), vec![2, 3, 1]).unwrap();
        assert!((order_loss(&probe, &inst, 0.5).unwrap() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn decode_examples() {
        assert_eq!(ranks_from_distances(&[0.9, 0.1, 0.5]), vec![3, 1, 2]);
        assert_eq!(ranks_from_distances(&[0.2; 4]), vec![1, 2, 3, 4]);
        assert_eq!(ranks_from_distances(&[0.4, 0.3]), vec![2, 1]);
    }

    #[test]
    fn decode_uses_probe_distances() {
        let probe = identity_probe(2, 2, DistanceKind::SquaredL2);
        let e = DMatrix::from_row_slice(3, 2, &[3.0, 0.0, 1.0, 0.0, 2.0, 0.0]);
        assert_eq!(decode_order(&probe, &e).unwrap(), vec![3, 1, 2]);
        let wrong = DMatrix::zeros(3, 5);
        assert!(matches!(decode_order(&probe, &wrong), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn viz_contract() {
        let probe = identity_probe(4, 2, DistanceKind::Dot);
        let e = DMatrix::from_row_slice(3, 4, &[1., 2., 3., 4., 5., 6., 7., 8., 9., 10., 11., 12.]);
        let viz = project_for_viz(&probe, &e).unwrap();
        assert_eq!(viz.points.shape(), (3, 2));
        assert_eq!(viz.points, DMatrix::from_row_slice(3, 2, &[1., 2., 5., 6., 9., 10.]));
        assert_eq!(viz.anchor, DVector::zeros(2));
        let big = identity_probe(4, 4, DistanceKind::Dot);
        assert!(matches!(project_for_viz(&big, &e), Err(Error::NotVisualizable(4))));
    }

    #[test]
    fn probe_dim_above_hidden_dim_is_rejected() {
        let inst = RankedInstance::new("x", DMatrix::from_element(2, 4, 1.0), vec![1, 2]).unwrap();
        let cfg = OrderTrainConfig {
            probe_dim: 8,
            ..Default::default()
        };
        assert!(matches!(
            train_order_probe(&[inst], &cfg, DistanceKind::Dot),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(matches!(
            train_order_probe(&[], &OrderTrainConfig::default(), DistanceKind::Dot),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn single_pair_reaches_zero_loss_for_every_kind() {
        let e = DMatrix::from_row_slice(2, 3, &[1.0, 0.2, -0.5, -0.3, 1.1, 0.4]);
        let inst = RankedInstance::new("x", e, vec![2, 1]).unwrap();
        for kind in DistanceKind::ALL {
            let cfg = OrderTrainConfig {
                probe_dim: 3,
                learning_rate: 1e-2,
                epochs: 500,
                seed: 3,
                ..Default::default()
            };
            let probe = train_order_probe(std::slice::from_ref(&inst), &cfg, kind).unwrap();
            assert_eq!(probe.train_meta.final_loss, 0.0, "{kind}");
            assert_eq!(decode_order(&probe, &inst.embeddings).unwrap(), vec![2, 1]);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<RankedInstance> = (0..6)
            .map(|i| {
                let e = DMatrix::from_fn(4, 5, |_, _| rng.random_range(-1.0..1.0));
                RankedInstance::new(format!("{i}"), e, vec![3, 1, 4, 2]).unwrap()
            })
            .collect();
        let cfg = OrderTrainConfig {
            probe_dim: 3,
            epochs: 20,
            batch_size: 4,
            seed: 11,
            ..Default::default()
        };
        for kind in DistanceKind::ALL {
            let a = train_order_probe(&data, &cfg, kind).unwrap();
            let b = train_order_probe(&data, &cfg, kind).unwrap();
            assert_eq!(a.params(), b.params());
            assert_eq!(a.train_meta, b.train_meta);
        }
    }
}
