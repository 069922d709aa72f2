//! A single type over every trainable predictor, plus the `.probe.json`
//! container used to store any of them.
//!
//! Parameters are stored as a base-16 string of little-endian f64 values so
//! that a reload reproduces every bit.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::archive::{fnv1a64, LabelSource, LayerSlice, PreferencePair, RankedInstance};
use crate::baselines::{
    train_concat_logreg, train_maxmargin, AttributeWordSets, ConcatLogReg, MaxMarginProbe, MaxMarginTrainMeta,
};
use crate::error::{Error, Result};
use crate::geometry::DistanceKind;
use crate::order::{train_order_probe, OrderProbe, OrderTrainConfig, OrderTrainMeta};
use crate::preference::{train_bt_probe, BTTrainConfig, PreferenceProbe, PreferenceTrainMeta};

pub const PROBE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    OrderSquaredL2,
    OrderCosine,
    OrderDot,
    BradleyTerry,
    MaxMargin,
    ConcatLogreg,
    Weat,
}

impl ProbeKind {
    pub fn from_distance(kind: DistanceKind) -> Self {
        match kind {
            DistanceKind::SquaredL2 => ProbeKind::OrderSquaredL2,
            DistanceKind::Cosine => ProbeKind::OrderCosine,
            DistanceKind::Dot => ProbeKind::OrderDot,
        }
    }

    pub fn distance(self) -> Option<DistanceKind> {
        match self {
            ProbeKind::OrderSquaredL2 => Some(DistanceKind::SquaredL2),
            ProbeKind::OrderCosine => Some(DistanceKind::Cosine),
            ProbeKind::OrderDot => Some(DistanceKind::Dot),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ProbeKind::OrderSquaredL2 => "order_squared_l2",
            ProbeKind::OrderCosine => "order_cosine",
            ProbeKind::OrderDot => "order_dot",
            ProbeKind::BradleyTerry => "bradley_terry",
            ProbeKind::MaxMargin => "max_margin",
            ProbeKind::ConcatLogreg => "concat_logreg",
            ProbeKind::Weat => "weat",
        }
    }
}

impl fmt::Display for ProbeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How to train a probe, with its hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub enum ProbeFamily {
    Order { kind: DistanceKind, cfg: OrderTrainConfig },
    BradleyTerry(BTTrainConfig),
    MaxMargin { margin: f64, cfg: BTTrainConfig },
    ConcatLogReg(BTTrainConfig),
    Weat,
}

impl ProbeFamily {
    /// Parses the command-line names (`order-l2`, `order-cos`, `order-dot`,
    /// `bt`, `max-margin`, `concat-lr`, `weat`) with default configs.
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "order-l2" => ProbeFamily::Order {
                kind: DistanceKind::SquaredL2,
                cfg: OrderTrainConfig::default(),
            },
            "order-cos" => ProbeFamily::Order {
                kind: DistanceKind::Cosine,
                cfg: OrderTrainConfig::default(),
            },
            "order-dot" => ProbeFamily::Order {
                kind: DistanceKind::Dot,
                cfg: OrderTrainConfig::default(),
            },
            "bt" => ProbeFamily::BradleyTerry(BTTrainConfig::default()),
            "max-margin" => ProbeFamily::MaxMargin {
                margin: 0.5,
                cfg: BTTrainConfig::default(),
            },
            "concat-lr" => ProbeFamily::ConcatLogReg(BTTrainConfig::default()),
            "weat" => ProbeFamily::Weat,
            other => return Err(Error::InvalidConfig(format!("unknown probe kind '{other}'"))),
        })
    }

    pub fn is_order(&self) -> bool {
        matches!(self, ProbeFamily::Order { .. })
    }

    /// Training seed; WEAT has none.
    pub fn seed(&self) -> Option<u64> {
        match self {
            ProbeFamily::Order { cfg, .. } => Some(cfg.seed),
            ProbeFamily::BradleyTerry(cfg) | ProbeFamily::ConcatLogReg(cfg) => Some(cfg.seed),
            ProbeFamily::MaxMargin { cfg, .. } => Some(cfg.seed),
            ProbeFamily::Weat => None,
        }
    }

    /// Name of the metric used to score this family.
    pub fn metric_name(&self) -> &'static str {
        if self.is_order() {
            "spearman"
        } else {
            "accuracy"
        }
    }

    pub fn train_ranked(&self, data: &[RankedInstance]) -> Result<Probe> {
        match self {
            ProbeFamily::Order { kind, cfg } => Ok(Probe::Order(train_order_probe(data, cfg, *kind)?)),
            _ => Err(Error::InvalidConfig("pairwise probe families need preference pairs".into())),
        }
    }

    pub fn train_pairs(&self, pairs: &[PreferencePair]) -> Result<Probe> {
        Ok(match self {
            ProbeFamily::Order { .. } => {
                return Err(Error::InvalidConfig("order probes need ranked instances".into()));
            }
            ProbeFamily::BradleyTerry(cfg) => Probe::BradleyTerry(train_bt_probe(pairs, cfg)?),
            ProbeFamily::MaxMargin { margin, cfg } => Probe::MaxMargin(train_maxmargin(pairs, *margin, cfg)?),
            ProbeFamily::ConcatLogReg(cfg) => Probe::ConcatLogReg(train_concat_logreg(pairs, cfg)?),
            ProbeFamily::Weat => Probe::Weat(AttributeWordSets::from_pairs(pairs)?),
        })
    }

    /// Trains on whichever kind of instance this family consumes.
    pub fn train_slice(&self, slice: &LayerSlice) -> Result<Probe> {
        let mut probe = if self.is_order() {
            self.train_ranked(&slice.ranked())?
        } else {
            self.train_pairs(&slice.pairs())?
        };
        probe.set_layer_id(slice.layer_id);
        Ok(probe)
    }
}

impl FromStr for ProbeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ProbeFamily::from_name(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Probe {
    Order(OrderProbe),
    BradleyTerry(PreferenceProbe),
    MaxMargin(MaxMarginProbe),
    ConcatLogReg(ConcatLogReg),
    Weat(AttributeWordSets),
}

/// Training summary common to every probe kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub final_loss: f64,
    pub iterations: usize,
    pub converged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_source: Option<LabelSource>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeatLabels {
    pub positive: Vec<String>,
    pub negative: Vec<String>,
}

/// On-disk `.probe.json` container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeFile {
    pub format_version: u32,
    pub kind: ProbeKind,
    pub hidden_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe_dim: Option<usize>,
    pub layer_id: u32,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin: Option<f64>,
    #[serde(default)]
    pub normalize: bool,
    pub train: TrainSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<WeatLabels>,
    /// Little-endian f64 values, hex encoded.
    pub params: String,
}

fn encode_params(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    hex::encode(bytes)
}

fn decode_params(text: &str) -> Result<Vec<f64>> {
    let bytes = hex::decode(text).map_err(|e| Error::InvalidProbe(format!("params are not hex: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::InvalidProbe(format!("params length {} is not a multiple of 8", bytes.len())));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidProbe("non-finite parameter".into()));
    }
    Ok(values)
}

impl Probe {
    pub fn kind(&self) -> ProbeKind {
        match self {
            Probe::Order(p) => ProbeKind::from_distance(p.kind),
            Probe::BradleyTerry(_) => ProbeKind::BradleyTerry,
            Probe::MaxMargin(_) => ProbeKind::MaxMargin,
            Probe::ConcatLogReg(_) => ProbeKind::ConcatLogreg,
            Probe::Weat(_) => ProbeKind::Weat,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        match self {
            Probe::Order(p) => p.hidden_dim(),
            Probe::BradleyTerry(p) => p.hidden_dim(),
            Probe::MaxMargin(p) => p.hidden_dim(),
            Probe::ConcatLogReg(p) => p.hidden_dim(),
            Probe::Weat(s) => s.hidden_dim(),
        }
    }

    pub fn layer_id(&self) -> u32 {
        match self {
            Probe::Order(p) => p.layer_id,
            Probe::BradleyTerry(p) => p.layer_id,
            Probe::MaxMargin(p) => p.layer_id,
            Probe::ConcatLogReg(p) => p.layer_id,
            Probe::Weat(_) => 0,
        }
    }

    pub fn set_layer_id(&mut self, layer_id: u32) {
        match self {
            Probe::Order(p) => p.layer_id = layer_id,
            Probe::BradleyTerry(p) => p.layer_id = layer_id,
            Probe::MaxMargin(p) => p.layer_id = layer_id,
            Probe::ConcatLogReg(p) => p.layer_id = layer_id,
            Probe::Weat(_) => {}
        }
    }

    pub fn is_order(&self) -> bool {
        matches!(self, Probe::Order(_))
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            Probe::Order(p) => p.params(),
            Probe::BradleyTerry(p) => p.theta.as_slice().to_vec(),
            Probe::MaxMargin(p) => p.theta.as_slice().to_vec(),
            Probe::ConcatLogReg(p) => p.theta.as_slice().to_vec(),
            Probe::Weat(s) => s
                .positive
                .iter()
                .chain(&s.negative)
                .flat_map(|(_, v)| v.iter().copied())
                .collect(),
        }
    }

    /// FNV-1a over the exact parameter bytes.
    pub fn fingerprint(&self) -> u64 {
        let bytes: Vec<u8> = self.params().iter().flat_map(|v| v.to_le_bytes()).collect();
        fnv1a64(&bytes)
    }

    pub fn summary(&self) -> TrainSummary {
        match self {
            Probe::Order(p) => TrainSummary {
                final_loss: p.train_meta.final_loss,
                iterations: p.train_meta.epochs,
                converged: p.train_meta.converged,
                label_source: None,
            },
            Probe::BradleyTerry(p) => pref_summary(&p.train_meta),
            Probe::ConcatLogReg(p) => pref_summary(&p.train_meta),
            Probe::MaxMargin(p) => TrainSummary {
                final_loss: p.train_meta.final_loss,
                iterations: p.train_meta.iterations,
                converged: p.train_meta.converged,
                label_source: None,
            },
            Probe::Weat(_) => TrainSummary {
                final_loss: 0.0,
                iterations: 0,
                converged: true,
                label_source: None,
            },
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Probe::Order(p) => p.train_meta.seed,
            Probe::BradleyTerry(p) => p.train_meta.seed,
            Probe::MaxMargin(p) => p.train_meta.seed,
            Probe::ConcatLogReg(p) => p.train_meta.seed,
            Probe::Weat(_) => 0,
        }
    }

    pub fn to_file(&self) -> ProbeFile {
        let (probe_dim, margin, normalize, labels) = match self {
            Probe::Order(p) => (Some(p.probe_dim()), Some(p.margin), p.normalize, None),
            Probe::MaxMargin(p) => (None, Some(p.margin), false, None),
            Probe::Weat(s) => (
                None,
                None,
                false,
                Some(WeatLabels {
                    positive: s.positive.iter().map(|(l, _)| l.clone()).collect(),
                    negative: s.negative.iter().map(|(l, _)| l.clone()).collect(),
                }),
            ),
            _ => (None, None, false, None),
        };
        ProbeFile {
            format_version: PROBE_FORMAT_VERSION,
            kind: self.kind(),
            hidden_dim: self.hidden_dim(),
            probe_dim,
            layer_id: self.layer_id(),
            seed: self.seed(),
            margin,
            normalize,
            train: self.summary(),
            labels,
            params: encode_params(&self.params()),
        }
    }

    pub fn from_file(file: &ProbeFile) -> Result<Probe> {
        if file.format_version != PROBE_FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: file.format_version,
                expected: PROBE_FORMAT_VERSION,
            });
        }
        let h = file.hidden_dim;
        let values = decode_params(&file.params)?;
        let expect_len = |n: usize| -> Result<()> {
            if values.len() != n {
                return Err(Error::InvalidProbe(format!(
                    "{} probe with H={h} needs {n} parameters, found {}",
                    file.kind,
                    values.len()
                )));
            }
            Ok(())
        };
        let t = &file.train;
        let pref_meta = || PreferenceTrainMeta {
            seed: file.seed,
            final_nll: t.final_loss,
            iterations: t.iterations,
            converged: t.converged,
            label_source: t.label_source,
        };
        let probe = match file.kind {
            ProbeKind::OrderSquaredL2 | ProbeKind::OrderCosine | ProbeKind::OrderDot => {
                let d = file
                    .probe_dim
                    .ok_or_else(|| Error::InvalidProbe("order probe without probe_dim".into()))?;
                expect_len(h * d + d)?;
                let projection = DMatrix::from_row_slice(h, d, &values[..h * d]);
                let anchor = DVector::from_column_slice(&values[h * d..]);
                let mut p = OrderProbe::new(projection, anchor, file.kind.distance().expect("order kind"))?;
                p.layer_id = file.layer_id;
                p.margin = file.margin.unwrap_or(0.5);
                p.normalize = file.normalize;
                p.train_meta = OrderTrainMeta {
                    seed: file.seed,
                    epochs: t.iterations,
                    final_loss: t.final_loss,
                    converged: t.converged,
                };
                Probe::Order(p)
            }
            ProbeKind::BradleyTerry => {
                expect_len(h)?;
                Probe::BradleyTerry(PreferenceProbe {
                    theta: DVector::from_vec(values),
                    layer_id: file.layer_id,
                    train_meta: pref_meta(),
                })
            }
            ProbeKind::MaxMargin => {
                expect_len(h)?;
                Probe::MaxMargin(MaxMarginProbe {
                    theta: DVector::from_vec(values),
                    margin: file.margin.unwrap_or(0.5),
                    layer_id: file.layer_id,
                    train_meta: MaxMarginTrainMeta {
                        seed: file.seed,
                        final_loss: t.final_loss,
                        iterations: t.iterations,
                        converged: t.converged,
                    },
                })
            }
            ProbeKind::ConcatLogreg => {
                expect_len(2 * h)?;
                Probe::ConcatLogReg(ConcatLogReg {
                    theta: DVector::from_vec(values),
                    layer_id: file.layer_id,
                    train_meta: pref_meta(),
                })
            }
            ProbeKind::Weat => {
                let labels = file
                    .labels
                    .as_ref()
                    .ok_or_else(|| Error::InvalidProbe("weat probe without labels".into()))?;
                let (np, nn) = (labels.positive.len(), labels.negative.len());
                expect_len((np + nn) * h)?;
                let vecs: Vec<DVector<f64>> = values.chunks_exact(h).map(DVector::from_column_slice).collect();
                let positive = labels.positive.iter().cloned().zip(vecs[..np].iter().cloned()).collect();
                let negative = labels.negative.iter().cloned().zip(vecs[np..].iter().cloned()).collect();
                Probe::Weat(AttributeWordSets::new(positive, negative)?)
            }
        };
        Ok(probe)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut text = serde_json::to_string_pretty(&self.to_file()).map_err(|e| Error::json(path, e))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Probe> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ProbeFile = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        Probe::from_file(&file)
    }
}

fn pref_summary(meta: &PreferenceTrainMeta) -> TrainSummary {
    TrainSummary {
        final_loss: meta.final_nll,
        iterations: meta.iterations,
        converged: meta.converged,
        label_source: meta.label_source,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    #[test]
    fn order_probe_round_trips_bit_exact() {
        let a = DMatrix::from_row_slice(3, 2, &[0.1, -0.2, 1.0 / 3.0, 4.5, -1e-300, 7.0]);
        let mut p = OrderProbe::new(a, dvector![0.25, -0.75], DistanceKind::Cosine).unwrap();
        p.layer_id = 12;
        p.train_meta.final_loss = 0.125;
        let probe = Probe::Order(p);
        let back = Probe::from_file(&probe.to_file()).unwrap();
        assert_eq!(back, probe);
        assert_eq!(back.fingerprint(), probe.fingerprint());
    }

    #[test]
    fn weat_round_trip() {
        let sets = AttributeWordSets::new(
            vec![("good".into(), dvector![1.0, 0.5]), ("kind".into(), dvector![0.9, 0.1])],
            vec![("bad".into(), dvector![-1.0, 0.2])],
        )
        .unwrap();
        let probe = Probe::Weat(sets);
        let file = probe.to_file();
        assert_eq!(file.kind, ProbeKind::Weat);
        assert_eq!(Probe::from_file(&file).unwrap(), probe);
    }

    #[test]
    fn corrupted_params_rejected() {
        let probe = Probe::BradleyTerry(PreferenceProbe::from_theta(dvector![1.0, 2.0]));
        let mut file = probe.to_file();
        file.train.final_loss = 0.0;
        file.params.pop();
        assert!(matches!(Probe::from_file(&file), Err(Error::InvalidProbe(_))));
        let mut file = probe.to_file();
        file.hidden_dim = 3;
        assert!(matches!(Probe::from_file(&file), Err(Error::InvalidProbe(_))));
    }

    #[test]
    fn kind_strings_match_serde() {
        for kind in [
            ProbeKind::OrderSquaredL2,
            ProbeKind::OrderCosine,
            ProbeKind::OrderDot,
            ProbeKind::BradleyTerry,
            ProbeKind::MaxMargin,
            ProbeKind::ConcatLogreg,
            ProbeKind::Weat,
        ] {
            assert_eq!(serde_json::to_string(&kind).unwrap(), format!("\"{}\"", kind.as_str()));
        }
    }

    #[test]
    fn family_names() {
        for name in ["order-l2", "order-cos", "order-dot", "bt", "max-margin", "concat-lr", "weat"] {
            assert!(ProbeFamily::from_name(name).is_ok(), "{name}");
        }
        assert!(ProbeFamily::from_name("mlp").is_err());
    }
}
