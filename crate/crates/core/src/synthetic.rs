//! Seeded generators that plant known order or preference structure in
//! high-dimensional embeddings. They serve as oracles for the probes.
//!
//! Instance `i` draws from its own ChaCha stream derived from `(seed, i)`, so
//! every instance is independent of how many others are generated.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::archive::{
    Archive, ArchiveManifest, GoldLabel, InstanceMeta, LabelSource, PreferencePair, RankedInstance, Side, Tensor3,
};
use crate::error::{Error, Result};

const DIRECTION_STREAM: u64 = 0;
const INSTANCE_STREAM_BASE: u64 = 16;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian(h: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(h, |_, _| rng.sample(StandardNormal))
}

/// Uniformly random unit vector.
pub fn random_unit(h: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    loop {
        let v = gaussian(h, rng);
        let n = v.norm();
        if n > 1e-8 {
            return v / n;
        }
    }
}

/// Random unit vector orthogonal to every vector in `basis` (assumed orthonormal).
pub fn random_orthogonal_unit(basis: &[&DVector<f64>], rng: &mut ChaCha8Rng) -> Result<DVector<f64>> {
    let h = basis.first().map(|b| b.len()).unwrap_or(0);
    if basis.len() >= h {
        return Err(Error::InvalidConfig(format!(
            "cannot find a direction orthogonal to {} vectors in dimension {h}",
            basis.len()
        )));
    }
    loop {
        let mut v = gaussian(h, rng);
        for b in basis {
            let proj = v.dot(b);
            v.axpy(-proj, b, 1.0);
        }
        let n = v.norm();
        if n > 1e-8 {
            return Ok(v / n);
        }
    }
}

/// Seeded unit direction, e.g. for pairing tasks that share a separator.
pub fn seeded_direction(h: usize, seed: u64) -> DVector<f64> {
    random_unit(h, &mut stream_rng(seed, DIRECTION_STREAM))
}

fn random_ranks(w: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut ranks: Vec<usize> = (1..=w).collect();
    for i in (1..w).rev() {
        let j = rng.random_range(0..=i);
        ranks.swap(i, j);
    }
    ranks
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedOrderSpec {
    pub hidden_dim: usize,
    pub items: usize,
    pub instances: usize,
    /// Unit vector along which rank is encoded.
    pub signal_direction: DVector<f64>,
    /// Shared offset orthogonal to the signal. Without it, noise-free items
    /// would be positive multiples of one vector and indistinguishable by
    /// cosine distance.
    pub offset: DVector<f64>,
    pub noise_sigma: f64,
    pub rank_spacing: f64,
    pub seed: u64,
}

impl PlantedOrderSpec {
    /// Signal direction and offset (norm `items * rank_spacing / 2`) are drawn from `seed`.
    pub fn new(hidden_dim: usize, items: usize, instances: usize, noise_sigma: f64, seed: u64) -> Self {
        let mut rng = stream_rng(seed, DIRECTION_STREAM);
        let signal_direction = random_unit(hidden_dim, &mut rng);
        let rank_spacing = 1.0;
        let offset = if hidden_dim > 1 {
            random_orthogonal_unit(&[&signal_direction], &mut rng).expect("hidden_dim > 1")
                * (items as f64 * rank_spacing / 2.0)
        } else {
            DVector::zeros(hidden_dim)
        };
        PlantedOrderSpec {
            hidden_dim,
            items,
            instances,
            signal_direction,
            offset,
            noise_sigma,
            rank_spacing,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.items < 2 {
            return Err(Error::InvalidConfig("need hidden_dim >= 1 and at least 2 items".into()));
        }
        if self.signal_direction.len() != self.hidden_dim || self.offset.len() != self.hidden_dim {
            return Err(Error::DimensionMismatch {
                expected: self.hidden_dim,
                found: self.signal_direction.len(),
            });
        }
        if (self.signal_direction.norm() - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidConfig("signal_direction must be a unit vector".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(self.rank_spacing > 0.0) {
            return Err(Error::InvalidConfig("noise_sigma must be >= 0 and rank_spacing > 0".into()));
        }
        Ok(())
    }

    fn instance(&self, i: usize) -> RankedInstance {
        let mut rng = stream_rng(self.seed, INSTANCE_STREAM_BASE + i as u64);
        let ranks = random_ranks(self.items, &mut rng);
        let mut e = DMatrix::zeros(self.items, self.hidden_dim);
        for (j, &r) in ranks.iter().enumerate() {
            let mut row = &self.offset + &self.signal_direction * (r as f64 * self.rank_spacing);
            if self.noise_sigma > 0.0 {
                row += gaussian(self.hidden_dim, &mut rng) * self.noise_sigma;
            }
            e.set_row(j, &row.transpose());
        }
        RankedInstance {
            id: format!("order-{i:05}"),
            embeddings: e,
            gold_ranks: ranks,
        }
    }
}

/// Item with rank r gets `offset + r·rank_spacing·signal + σ·noise`; item
/// positions are shuffled per instance.
pub fn gen_planted_order(spec: &PlantedOrderSpec) -> Result<Vec<RankedInstance>> {
    spec.validate()?;
    Ok((0..spec.instances).map(|i| spec.instance(i)).collect())
}

/// Replaces every gold permutation with one drawn independently of the embeddings.
pub fn shuffle_gold(instances: &mut [RankedInstance], seed: u64) {
    let mut rng = stream_rng(seed, 1);
    for inst in instances {
        inst.gold_ranks = random_ranks(inst.item_count(), &mut rng);
    }
}

/// The projection that witnesses a zero-loss Dot probe on noise-free planted data:
/// A maps the signal onto the first probe axis, the anchor points along it.
pub fn planted_dot_witness(spec: &PlantedOrderSpec, probe_dim: usize, margin: f64) -> (DMatrix<f64>, DVector<f64>) {
    let mut a = DMatrix::zeros(spec.hidden_dim, probe_dim);
    a.set_column(0, &spec.signal_direction);
    let mut anchor = DVector::zeros(probe_dim);
    // consecutive ranks differ by rank_spacing * scale along the axis
    anchor[0] = margin.max(1e-3) / spec.rank_spacing;
    (a, anchor)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedPreferenceSpec {
    pub hidden_dim: usize,
    pub pairs: usize,
    pub separator: DVector<f64>,
    pub gap: f64,
    pub noise_sigma: f64,
    /// Probability that a pair's label is flipped; must be in [0, 0.5).
    pub label_noise: f64,
    pub seed: u64,
}

impl PlantedPreferenceSpec {
    /// Separator drawn from `seed`; `noise_sigma` defaults to 0.1.
    pub fn new(hidden_dim: usize, pairs: usize, gap: f64, label_noise: f64, seed: u64) -> Self {
        PlantedPreferenceSpec {
            hidden_dim,
            pairs,
            separator: seeded_direction(hidden_dim, seed),
            gap,
            noise_sigma: 0.1,
            label_noise,
            seed,
        }
    }

    pub fn with_separator(mut self, separator: DVector<f64>) -> Self {
        self.separator = separator;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.separator.len() != self.hidden_dim {
            return Err(Error::DimensionMismatch {
                expected: self.hidden_dim,
                found: self.separator.len(),
            });
        }
        if (self.separator.norm() - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidConfig("separator must be a unit vector".into()));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return Err(Error::InvalidConfig(format!("label_noise must be in [0, 0.5), got {}", self.label_noise)));
        }
        if !(self.gap >= 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig("gap and noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Winner `base + gap·s + noise`, loser `base - gap·s + noise`, base ~ N(0, I).
/// Labels flip with probability `label_noise`; the winner's position is a fair coin.
pub fn gen_planted_preference(spec: &PlantedPreferenceSpec) -> Result<Vec<PreferencePair>> {
    spec.validate()?;
    let h = spec.hidden_dim;
    Ok((0..spec.pairs)
        .map(|i| {
            let mut rng = stream_rng(spec.seed, INSTANCE_STREAM_BASE + i as u64);
            let base = gaussian(h, &mut rng);
            let shift = &spec.separator * spec.gap;
            let good = &base + &shift + gaussian(h, &mut rng) * spec.noise_sigma;
            let bad = &base - &shift + gaussian(h, &mut rng) * spec.noise_sigma;
            let flipped = rng.random::<f64>() < spec.label_noise;
            let good_first = rng.random::<bool>();
            let (h_alpha, h_beta) = if good_first { (good, bad) } else { (bad, good) };
            let mut winner = if good_first { Side::First } else { Side::Second };
            if flipped {
                winner = winner.other();
            }
            PreferencePair {
                h_alpha,
                h_beta,
                winner,
                source: LabelSource::Human,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NumberPair {
    pub a: i64,
    pub b: i64,
}

impl NumberPair {
    pub fn winner(&self) -> Side {
        if self.a > self.b {
            Side::First
        } else {
            Side::Second
        }
    }

    pub fn labels(&self) -> [String; 2] {
        [self.a.to_string(), self.b.to_string()]
    }
}

/// Uniform integer pairs in `[low, high]`, resampled on equality.
pub fn gen_number_pairs(count: usize, low: i64, high: i64, seed: u64) -> Result<Vec<NumberPair>> {
    if low >= high {
        return Err(Error::InvalidConfig(format!("need low < high, got [{low}, {high}]")));
    }
    let mut rng = stream_rng(seed, 2);
    Ok((0..count)
        .map(|_| loop {
            let a = rng.random_range(low..=high);
            let b = rng.random_range(low..=high);
            if a != b {
                break NumberPair { a, b };
            }
        })
        .collect())
}

fn matrix_to_f32(m: &DMatrix<f64>, out: &mut Tensor3, layer: usize) {
    for item in 0..m.nrows() {
        for (col, x) in out.row_mut(layer, item).iter_mut().enumerate() {
            *x = m[(item, col)] as f32;
        }
    }
}

/// Single-layer archive holding ranked instances.
pub fn ranked_archive(model_id: &str, task_id: &str, layer_id: u32, data: &[RankedInstance]) -> Result<Archive> {
    let h = data.first().map(|d| d.hidden_dim()).unwrap_or(1);
    let mut manifest = ArchiveManifest::new(model_id, h, vec![layer_id]);
    let mut tensors = Vec::with_capacity(data.len());
    for inst in data {
        let w = inst.item_count();
        manifest.instances.push(InstanceMeta::new(
            inst.id.clone(),
            task_id,
            (0..w).map(|j| format!("item{j}")).collect(),
            GoldLabel::Permutation {
                ranks: inst.gold_ranks.clone(),
            },
        ));
        let mut t = Tensor3::zeros([1, w, h]);
        matrix_to_f32(&inst.embeddings, &mut t, 0);
        tensors.push(t);
    }
    Archive::from_parts(manifest, &tensors)
}

/// Single-layer archive holding preference pairs.
pub fn pair_archive(model_id: &str, task_id: &str, layer_id: u32, pairs: &[PreferencePair]) -> Result<Archive> {
    let h = pairs.first().map(|p| p.hidden_dim()).unwrap_or(1);
    let mut manifest = ArchiveManifest::new(model_id, h, vec![layer_id]);
    let mut tensors = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        manifest.instances.push(InstanceMeta::new(
            format!("{task_id}-{i:05}"),
            task_id,
            vec!["alpha".into(), "beta".into()],
            GoldLabel::Preference {
                winner_index: p.winner.index(),
                source: p.source,
            },
        ));
        let mut t = Tensor3::zeros([1, 2, h]);
        for (x, v) in t.row_mut(0, 0).iter_mut().zip(p.h_alpha.iter()) {
            *x = *v as f32;
        }
        for (x, v) in t.row_mut(0, 1).iter_mut().zip(p.h_beta.iter()) {
            *x = *v as f32;
        }
        tensors.push(t);
    }
    Archive::from_parts(manifest, &tensors)
}

/// Archive with layers `0..layer_count`; the planted order lives only at
/// `signal_layer`, every other layer is i.i.d. Gaussian of comparable scale.
pub fn gen_multilayer_planted(spec: &PlantedOrderSpec, layer_count: usize, signal_layer: usize) -> Result<Archive> {
    spec.validate()?;
    if signal_layer >= layer_count {
        return Err(Error::InvalidConfig(format!(
            "signal layer {signal_layer} outside 0..{layer_count}"
        )));
    }
    let h = spec.hidden_dim;
    let w = spec.items;
    let layer_ids = (0..layer_count as u32).collect();
    let mut manifest = ArchiveManifest::new("planted-multilayer", h, layer_ids);
    let noise_scale = spec.rank_spacing * w as f64 / 2.0;
    let mut tensors = Vec::with_capacity(spec.instances);
    for i in 0..spec.instances {
        let inst = spec.instance(i);
        let mut rng = stream_rng(spec.seed ^ 0x5eed_1a7e, INSTANCE_STREAM_BASE + i as u64);
        let mut t = Tensor3::zeros([layer_count, w, h]);
        for layer in 0..layer_count {
            if layer == signal_layer {
                matrix_to_f32(&inst.embeddings, &mut t, layer);
            } else {
                for item in 0..w {
                    for x in t.row_mut(layer, item) {
                        *x = (rng.sample::<f64, _>(StandardNormal) * noise_scale) as f32;
                    }
                }
            }
        }
        manifest.instances.push(InstanceMeta::new(
            inst.id.clone(),
            "planted-order",
            (0..w).map(|j| format!("item{j}")).collect(),
            GoldLabel::Permutation { ranks: inst.gold_ranks },
        ));
        tensors.push(t);
    }
    Archive::from_parts(manifest, &tensors)
}

/// Unlabeled cross-group pairs for bias reports. Group `g` items sit at
/// `base + shifts[g]·direction + noise`; every unordered pair of groups gets
/// `pairs_per_pairing` pairs with randomized positions.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedGroupSpec {
    pub hidden_dim: usize,
    pub groups: Vec<String>,
    pub shifts: Vec<f64>,
    pub direction: DVector<f64>,
    pub pairs_per_pairing: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

pub fn gen_planted_groups(spec: &PlantedGroupSpec, task_id: &str) -> Result<Archive> {
    let n = spec.groups.len();
    if n < 2 || spec.shifts.len() != n {
        return Err(Error::InvalidConfig("need >= 2 groups and one shift per group".into()));
    }
    if spec.direction.len() != spec.hidden_dim {
        return Err(Error::DimensionMismatch {
            expected: spec.hidden_dim,
            found: spec.direction.len(),
        });
    }
    let h = spec.hidden_dim;
    let mut manifest = ArchiveManifest::new("planted-groups", h, vec![0]);
    let mut tensors = Vec::new();
    let mut counter = 0u64;
    for gi in 0..n {
        for gj in gi + 1..n {
            for p in 0..spec.pairs_per_pairing {
                let mut rng = stream_rng(spec.seed, INSTANCE_STREAM_BASE + counter);
                counter += 1;
                let base = gaussian(h, &mut rng);
                let xi = &base + &spec.direction * spec.shifts[gi] + gaussian(h, &mut rng) * spec.noise_sigma;
                let xj = &base + &spec.direction * spec.shifts[gj] + gaussian(h, &mut rng) * spec.noise_sigma;
                let (first, second, g1, g2) = if rng.random::<bool>() {
                    (xi, xj, gi, gj)
                } else {
                    (xj, xi, gj, gi)
                };
                let mut meta = InstanceMeta::new(
                    format!("{}-{}-{p:04}", spec.groups[gi], spec.groups[gj]),
                    task_id,
                    vec![format!("{}#{p}", spec.groups[g1]), format!("{}#{p}", spec.groups[g2])],
                    GoldLabel::Unlabeled,
                );
                meta.item_groups = Some(vec![spec.groups[g1].clone(), spec.groups[g2].clone()]);
                manifest.instances.push(meta);
                let mut t = Tensor3::zeros([1, 2, h]);
                for (x, v) in t.row_mut(0, 0).iter_mut().zip(first.iter()) {
                    *x = *v as f32;
                }
                for (x, v) in t.row_mut(0, 1).iter_mut().zip(second.iter()) {
                    *x = *v as f32;
                }
                tensors.push(t);
            }
        }
    }
    Archive::from_parts(manifest, &tensors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::DistanceKind;
    use crate::order::{decode_order, order_loss, OrderProbe};

    #[test]
    fn direction_is_unit() {
        let spec = PlantedOrderSpec::new(16, 4, 3, 0.0, 1);
        assert!((spec.signal_direction.norm() - 1.0).abs() < 1e-12);
        assert!(spec.offset.dot(&spec.signal_direction).abs() < 1e-12);
    }

    #[test]
    fn two_items_differ_by_spacing_along_signal() {
        let spec = PlantedOrderSpec::new(8, 2, 1, 0.0, 5);
        let data = gen_planted_order(&spec).unwrap();
        assert_eq!(data.len(), 1);
        let inst = &data[0];
        let (hi, lo) = if inst.gold_ranks[0] == 2 { (0, 1) } else { (1, 0) };
        let diff = inst.embeddings.row(hi) - inst.embeddings.row(lo);
        let expected = spec.signal_direction.transpose() * spec.rank_spacing;
        assert!((diff - expected).norm() < 1e-12);
    }

    #[test]
    fn noise_free_witness_has_zero_loss_and_perfect_decode() {
        let spec = PlantedOrderSpec::new(32, 8, 20, 0.0, 2);
        let data = gen_planted_order(&spec).unwrap();
        let (a, x) = planted_dot_witness(&spec, 4, 0.5);
        let probe = OrderProbe::new(a, x, DistanceKind::Dot).unwrap();
        for inst in &data {
            assert!(order_loss(&probe, inst, 0.5).unwrap() < 1e-9);
            assert_eq!(decode_order(&probe, &inst.embeddings).unwrap(), inst.gold_ranks);
        }
    }

    #[test]
    fn generators_are_deterministic() {
        let spec = PlantedOrderSpec::new(8, 4, 5, 0.3, 9);
        assert_eq!(gen_planted_order(&spec).unwrap(), gen_planted_order(&spec).unwrap());
        let p = PlantedPreferenceSpec::new(8, 10, 1.0, 0.1, 4);
        assert_eq!(gen_planted_preference(&p).unwrap(), gen_planted_preference(&p).unwrap());
        assert_eq!(gen_number_pairs(20, -5, 5, 3).unwrap(), gen_number_pairs(20, -5, 5, 3).unwrap());
    }

    #[test]
    fn instance_streams_do_not_depend_on_count() {
        let small = gen_planted_order(&PlantedOrderSpec::new(8, 4, 3, 0.3, 9)).unwrap();
        let large = gen_planted_order(&PlantedOrderSpec::new(8, 4, 10, 0.3, 9)).unwrap();
        assert_eq!(small[..], large[..3]);
    }

    #[test]
    fn label_noise_must_be_below_half() {
        let p = PlantedPreferenceSpec::new(4, 10, 1.0, 0.5, 1);
        assert!(matches!(gen_planted_preference(&p), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn noise_free_pairs_are_separated_by_the_planted_direction() {
        let p = PlantedPreferenceSpec::new(16, 200, 1.0, 0.0, 8);
        let pairs = gen_planted_preference(&p).unwrap();
        let firsts = pairs.iter().filter(|q| q.winner == Side::First).count();
        assert!(firsts > 70 && firsts < 130, "{firsts}");
        for q in &pairs {
            let (w, l) = q.oriented();
            assert!((w - l).dot(&p.separator) > 0.0);
        }
    }

    #[test]
    fn number_pairs() {
        assert_eq!(NumberPair { a: -3, b: 7 }.winner(), Side::Second);
        let pairs = gen_number_pairs(500, -1000, 1000, 0).unwrap();
        assert_eq!(pairs.len(), 500);
        assert!(pairs.iter().all(|p| p.a != p.b && (-1000..=1000).contains(&p.a) && (-1000..=1000).contains(&p.b)));
        assert!(gen_number_pairs(5, 3, 3, 0).is_err());
    }

    #[test]
    fn multilayer_shape() {
        let spec = PlantedOrderSpec::new(6, 3, 4, 0.0, 1);
        let a = gen_multilayer_planted(&spec, 4, 2).unwrap();
        assert_eq!(a.layer_ids(), &[0, 1, 2, 3]);
        assert_eq!(a.blob_len(), 4 * 4 * 3 * 6 * 4);
        let signal = a.slice_layer(2, None).unwrap().ranked();
        let planted = gen_planted_order(&spec).unwrap();
        for (s, p) in signal.iter().zip(&planted) {
            assert_eq!(s.gold_ranks, p.gold_ranks);
            assert!((&s.embeddings - &p.embeddings).amax() < 1e-5);
        }
        assert!(gen_multilayer_planted(&spec, 4, 4).is_err());
    }

    #[test]
    fn group_archive_pairs_every_grouping() {
        let spec = PlantedGroupSpec {
            hidden_dim: 4,
            groups: vec!["a".into(), "b".into(), "c".into()],
            shifts: vec![1.0, 0.0, -1.0],
            direction: seeded_direction(4, 0),
            pairs_per_pairing: 5,
            noise_sigma: 0.1,
            seed: 3,
        };
        let a = gen_planted_groups(&spec, "groups").unwrap();
        assert_eq!(a.manifest().instances.len(), 15);
        assert!(a.manifest().instances.iter().all(|m| m.item_groups.is_some()));
    }
}
