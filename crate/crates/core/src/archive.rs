//! Activation archives: a JSON manifest beside a raw little-endian float32 blob.
//!
//! The blob is laid out (instance, layer, item, dim) row-major. Instances are
//! stored contiguously in manifest order, so `byte_offset` of instance `i` is
//! the sum of the payload sizes before it. Values are widened to `f64` when read.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST_SUFFIX: &str = ".manifest.json";
const BLOB_SUFFIX: &str = ".blob";

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes.iter().fold(OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}

/// Blob checksum, serialized as 16 lowercase hex digits so that readers
/// without 64-bit integer JSON support see the exact value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Checksum(pub u64);

impl fmt::Display for Checksum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl Serialize for Checksum {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Checksum {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        u64::from_str_radix(&s, 16)
            .map(Checksum)
            .map_err(|e| serde::de::Error::custom(format!("bad checksum '{s}': {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    /// Labels parsed from the model's own answer (LP).
    Model,
    /// Labels from human set assignment (HD).
    Human,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum GoldLabel {
    /// `ranks[j]` is the true rank (1-based) of item `j`.
    Permutation { ranks: Vec<usize> },
    Preference { winner_index: usize, source: LabelSource },
    /// The model gave no parseable answer; kept for inspection, never trained on.
    Abstained,
    /// No label, e.g. controversial test pairs scored only by group.
    Unlabeled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMeta {
    pub id: String,
    pub task_id: String,
    pub item_labels: Vec<String>,
    /// Optional group name per item, used by the bias report.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item_groups: Option<Vec<String>>,
    pub gold: GoldLabel,
    #[serde(default)]
    pub byte_offset: u64,
}

impl InstanceMeta {
    pub fn new(id: impl Into<String>, task_id: impl Into<String>, item_labels: Vec<String>, gold: GoldLabel) -> Self {
        InstanceMeta {
            id: id.into(),
            task_id: task_id.into(),
            item_labels,
            item_groups: None,
            gold,
            byte_offset: 0,
        }
    }

    pub fn item_count(&self) -> usize {
        self.item_labels.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveManifest {
    pub format_version: u32,
    pub model_id: String,
    pub hidden_dim: usize,
    pub layer_ids: Vec<u32>,
    pub instances: Vec<InstanceMeta>,
    pub blob_checksum: Checksum,
}

impl ArchiveManifest {
    pub fn new(model_id: impl Into<String>, hidden_dim: usize, layer_ids: Vec<u32>) -> Self {
        ArchiveManifest {
            format_version: FORMAT_VERSION,
            model_id: model_id.into(),
            hidden_dim,
            layer_ids,
            instances: Vec::new(),
            blob_checksum: Checksum(fnv1a64(&[])),
        }
    }

    /// Bytes occupied by one instance in the blob.
    pub fn payload_size(&self, meta: &InstanceMeta) -> usize {
        self.layer_ids.len() * meta.item_count() * self.hidden_dim * 4
    }

    pub fn layer_position(&self, layer_id: u32) -> Result<usize> {
        self.layer_ids
            .binary_search(&layer_id)
            .map_err(|_| Error::LayerNotFound(layer_id))
    }

    /// Layer at the middle of the stored stack; for a full `0..L` archive this is `L / 2`.
    pub fn middle_layer(&self) -> Option<u32> {
        self.layer_ids.get(self.layer_ids.len() / 2).copied()
    }

    /// Structural checks that do not need the blob.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: self.format_version,
                expected: FORMAT_VERSION,
            });
        }
        if self.hidden_dim == 0 {
            return Err(Error::InvalidManifest("hidden_dim must be positive".into()));
        }
        if self.layer_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidManifest("layer_ids must be strictly ascending".into()));
        }
        let mut seen = HashSet::new();
        for meta in &self.instances {
            if !seen.insert(meta.id.as_str()) {
                return Err(Error::InvalidManifest(format!("duplicate instance id '{}'", meta.id)));
            }
            validate_instance(meta)?;
        }
        Ok(())
    }

    fn expected_blob_len(&self) -> usize {
        self.instances.iter().map(|m| self.payload_size(m)).sum()
    }
}

fn validate_instance(meta: &InstanceMeta) -> Result<()> {
    let w = meta.item_count();
    if w < 2 {
        return Err(Error::InvalidManifest(format!("instance '{}' has {w} items, need at least 2", meta.id)));
    }
    if let Some(groups) = &meta.item_groups {
        if groups.len() != w {
            return Err(Error::InvalidManifest(format!(
                "instance '{}' has {} item groups for {w} items",
                meta.id,
                groups.len()
            )));
        }
    }
    match &meta.gold {
        GoldLabel::Permutation { ranks } => {
            if !is_rank_bijection(ranks) || ranks.len() != w {
                return Err(Error::InvalidManifest(format!(
                    "instance '{}' ranks are not a bijection onto 1..={w}",
                    meta.id
                )));
            }
        }
        GoldLabel::Preference { winner_index, .. } => {
            if w != 2 || *winner_index > 1 {
                return Err(Error::InvalidManifest(format!(
                    "instance '{}': preference labels need exactly 2 items and winner_index in {{0,1}}",
                    meta.id
                )));
            }
        }
        GoldLabel::Abstained | GoldLabel::Unlabeled => {}
    }
    Ok(())
}

/// True when `ranks` is a permutation of `1..=ranks.len()`.
pub fn is_rank_bijection(ranks: &[usize]) -> bool {
    let mut seen = vec![false; ranks.len()];
    for &r in ranks {
        if r == 0 || r > ranks.len() || seen[r - 1] {
            return false;
        }
        seen[r - 1] = true;
    }
    true
}

/// One instance's activations, shaped (layers, items, dim).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    shape: [usize; 3],
    data: Vec<f32>,
}

impl Tensor3 {
    pub fn new(shape: [usize; 3], data: Vec<f32>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} needs {} values, got {}",
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Tensor3 { shape, data })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Tensor3 {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, layer: usize, item: usize) -> &[f32] {
        let h = self.shape[2];
        let start = (layer * self.shape[1] + item) * h;
        &self.data[start..start + h]
    }

    pub fn row_mut(&mut self, layer: usize, item: usize) -> &mut [f32] {
        let h = self.shape[2];
        let start = (layer * self.shape[1] + item) * h;
        &mut self.data[start..start + h]
    }
}

/// Which of two items a label or prediction refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    First,
    Second,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::First => Side::Second,
            Side::Second => Side::First,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Side::First => 0,
            Side::Second => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Side> {
        match i {
            0 => Some(Side::First),
            1 => Some(Side::Second),
            _ => None,
        }
    }
}

/// One sorting prompt at a single layer: a W×H matrix plus the gold permutation.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedInstance {
    pub id: String,
    pub embeddings: DMatrix<f64>,
    pub gold_ranks: Vec<usize>,
}

impl RankedInstance {
    pub fn new(id: impl Into<String>, embeddings: DMatrix<f64>, gold_ranks: Vec<usize>) -> Result<Self> {
        if embeddings.nrows() != gold_ranks.len() {
            return Err(Error::InvalidShape(format!(
                "{} embedding rows for {} ranks",
                embeddings.nrows(),
                gold_ranks.len()
            )));
        }
        if !is_rank_bijection(&gold_ranks) {
            return Err(Error::InvalidShape("gold ranks are not a bijection".into()));
        }
        if embeddings.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidShape("non-finite embedding entry".into()));
        }
        Ok(RankedInstance {
            id: id.into(),
            embeddings,
            gold_ranks,
        })
    }

    pub fn item_count(&self) -> usize {
        self.gold_ranks.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.embeddings.ncols()
    }
}

/// Two item embeddings with the preferred one marked.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub h_alpha: DVector<f64>,
    pub h_beta: DVector<f64>,
    pub winner: Side,
    pub source: LabelSource,
}

impl PreferencePair {
    pub fn new(h_alpha: DVector<f64>, h_beta: DVector<f64>, winner: Side, source: LabelSource) -> Result<Self> {
        if h_alpha.len() != h_beta.len() {
            return Err(Error::DimensionMismatch {
                expected: h_alpha.len(),
                found: h_beta.len(),
            });
        }
        if h_alpha.iter().chain(h_beta.iter()).any(|x| !x.is_finite()) {
            return Err(Error::InvalidShape("non-finite embedding entry".into()));
        }
        Ok(PreferencePair {
            h_alpha,
            h_beta,
            winner,
            source,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.h_alpha.len()
    }

    /// (winner, loser) embeddings.
    pub fn oriented(&self) -> (&DVector<f64>, &DVector<f64>) {
        match self.winner {
            Side::First => (&self.h_alpha, &self.h_beta),
            Side::Second => (&self.h_beta, &self.h_alpha),
        }
    }

    /// The same comparison with argument positions exchanged.
    pub fn swapped(&self) -> PreferencePair {
        PreferencePair {
            h_alpha: self.h_beta.clone(),
            h_beta: self.h_alpha.clone(),
            winner: self.winner.other(),
            source: self.source,
        }
    }
}

/// An archive held in memory: the manifest plus the raw blob bytes.
/// Vectors are decoded from the blob on access.
#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    manifest: ArchiveManifest,
    blob: Vec<u8>,
}

impl Archive {
    /// Lays out `tensors` in manifest order, fills in offsets and the checksum.
    pub fn from_parts(mut manifest: ArchiveManifest, tensors: &[Tensor3]) -> Result<Self> {
        manifest.validate()?;
        if manifest.instances.len() != tensors.len() {
            return Err(Error::InvalidShape(format!(
                "{} instances in manifest, {} tensors",
                manifest.instances.len(),
                tensors.len()
            )));
        }
        let layers = manifest.layer_ids.len();
        let h = manifest.hidden_dim;
        let mut blob = Vec::with_capacity(manifest.expected_blob_len());
        for (meta, tensor) in manifest.instances.iter_mut().zip(tensors) {
            let want = [layers, meta.item_count(), h];
            if tensor.shape != want {
                return Err(Error::InvalidShape(format!(
                    "instance '{}': tensor shape {:?}, manifest implies {want:?}",
                    meta.id, tensor.shape
                )));
            }
            if tensor.data.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidShape(format!("instance '{}': non-finite value", meta.id)));
            }
            meta.byte_offset = blob.len() as u64;
            for x in &tensor.data {
                blob.extend_from_slice(&x.to_le_bytes());
            }
        }
        manifest.blob_checksum = Checksum(fnv1a64(&blob));
        Ok(Archive { manifest, blob })
    }

    pub fn manifest(&self) -> &ArchiveManifest {
        &self.manifest
    }

    pub fn blob_len(&self) -> usize {
        self.blob.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.manifest.hidden_dim
    }

    pub fn layer_ids(&self) -> &[u32] {
        &self.manifest.layer_ids
    }

    /// Writes `<stem>.manifest.json` and `<stem>.blob`.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let (manifest_path, blob_path) = archive_paths(path.as_ref());
        if let Some(parent) = manifest_path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut text = serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::json(&manifest_path, e))?;
        text.push('\n');
        fs::write(&blob_path, &self.blob).map_err(|e| Error::io(&blob_path, e))?;
        fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
        Ok(())
    }

    fn from_bytes(manifest: ArchiveManifest, blob: Vec<u8>) -> Result<Self> {
        manifest.validate()?;
        let mut offset = 0u64;
        for meta in &manifest.instances {
            if meta.byte_offset != offset {
                return Err(Error::CorruptArchive(format!(
                    "instance '{}' at offset {}, expected {offset}",
                    meta.id, meta.byte_offset
                )));
            }
            offset += manifest.payload_size(meta) as u64;
        }
        if offset != blob.len() as u64 {
            return Err(Error::CorruptArchive(format!(
                "blob is {} bytes, manifest describes {offset}",
                blob.len()
            )));
        }
        let actual = Checksum(fnv1a64(&blob));
        if actual != manifest.blob_checksum {
            return Err(Error::CorruptArchive(format!(
                "checksum mismatch: manifest {}, blob {actual}",
                manifest.blob_checksum
            )));
        }
        Ok(Archive { manifest, blob })
    }

    /// Stored vector for (instance, layer position, item), widened to f64.
    pub fn vector(&self, instance: usize, layer_pos: usize, item: usize) -> Vec<f64> {
        let meta = &self.manifest.instances[instance];
        let h = self.manifest.hidden_dim;
        let w = meta.item_count();
        let start = meta.byte_offset as usize + ((layer_pos * w + item) * h) * 4;
        self.blob[start..start + h * 4]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect()
    }

    /// The exact stored float32 tensor of one instance.
    pub fn instance_tensor(&self, instance: usize) -> Tensor3 {
        let meta = &self.manifest.instances[instance];
        let size = self.manifest.payload_size(meta);
        let start = meta.byte_offset as usize;
        let data = self.blob[start..start + size]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor3 {
            shape: [self.manifest.layer_ids.len(), meta.item_count(), self.manifest.hidden_dim],
            data,
        }
    }

    /// W×H matrix of one instance at one stored layer position.
    pub fn layer_matrix(&self, instance: usize, layer_pos: usize) -> DMatrix<f64> {
        let w = self.manifest.instances[instance].item_count();
        let h = self.manifest.hidden_dim;
        let mut m = DMatrix::zeros(w, h);
        for item in 0..w {
            for (col, x) in self.vector(instance, layer_pos, item).into_iter().enumerate() {
                m[(item, col)] = x;
            }
        }
        m
    }

    /// All instances (in manifest order) at `layer_id`, optionally restricted to one task.
    pub fn slice_layer(&self, layer_id: u32, task_id: Option<&str>) -> Result<LayerSlice> {
        let pos = self.manifest.layer_position(layer_id)?;
        let entries = self
            .manifest
            .instances
            .iter()
            .enumerate()
            .filter(|(_, m)| task_id.is_none_or(|t| m.task_id == t))
            .map(|(i, m)| SliceEntry {
                id: m.id.clone(),
                task_id: m.task_id.clone(),
                item_labels: m.item_labels.clone(),
                item_groups: m.item_groups.clone(),
                gold: m.gold.clone(),
                embeddings: self.layer_matrix(i, pos),
            })
            .collect();
        Ok(LayerSlice { layer_id, entries })
    }
}

/// `<stem>.manifest.json` and `<stem>.blob` for a stem or either file path.
pub fn archive_paths(path: &Path) -> (PathBuf, PathBuf) {
    let s = path.to_string_lossy();
    let stem = s
        .strip_suffix(MANIFEST_SUFFIX)
        .or_else(|| s.strip_suffix(BLOB_SUFFIX))
        .unwrap_or(&s)
        .to_string();
    (
        PathBuf::from(format!("{stem}{MANIFEST_SUFFIX}")),
        PathBuf::from(format!("{stem}{BLOB_SUFFIX}")),
    )
}

/// Builds the archive from parts and writes it. Returns the manifest with
/// offsets and checksum filled in.
pub fn write_archive(manifest: ArchiveManifest, tensors: &[Tensor3], path: impl AsRef<Path>) -> Result<ArchiveManifest> {
    let archive = Archive::from_parts(manifest, tensors)?;
    archive.write(path)?;
    Ok(archive.manifest)
}

pub fn read_archive(path: impl AsRef<Path>) -> Result<Archive> {
    let (manifest_path, blob_path) = archive_paths(path.as_ref());
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    // Check the version before the full schema so newer layouts report cleanly.
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::json(&manifest_path, e))?;
    if let Some(v) = raw.get("format_version").and_then(|v| v.as_u64()) {
        if v != u64::from(FORMAT_VERSION) {
            return Err(Error::UnsupportedVersion {
                found: v as u32,
                expected: FORMAT_VERSION,
            });
        }
    }
    let manifest: ArchiveManifest = serde_json::from_value(raw).map_err(|e| Error::json(&manifest_path, e))?;
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    Archive::from_bytes(manifest, blob)
}

#[derive(Debug, Clone)]
pub struct SliceEntry {
    pub id: String,
    pub task_id: String,
    pub item_labels: Vec<String>,
    pub item_groups: Option<Vec<String>>,
    pub gold: GoldLabel,
    /// W×H.
    pub embeddings: DMatrix<f64>,
}

impl SliceEntry {
    pub fn item(&self, j: usize) -> DVector<f64> {
        self.embeddings.row(j).transpose()
    }
}

/// Per-instance W×H slices of one layer, in manifest order.
#[derive(Debug, Clone)]
pub struct LayerSlice {
    pub layer_id: u32,
    pub entries: Vec<SliceEntry>,
}

impl LayerSlice {
    /// Instances with permutation gold.
    pub fn ranked(&self) -> Vec<RankedInstance> {
        self.entries
            .iter()
            .filter_map(|e| match &e.gold {
                GoldLabel::Permutation { ranks } => Some(RankedInstance {
                    id: e.id.clone(),
                    embeddings: e.embeddings.clone(),
                    gold_ranks: ranks.clone(),
                }),
                _ => None,
            })
            .collect()
    }

    /// Instances with preference gold; abstentions and unlabeled pairs are skipped.
    pub fn pairs(&self) -> Vec<PreferencePair> {
        self.entries
            .iter()
            .filter_map(|e| match &e.gold {
                GoldLabel::Preference { winner_index, source } => Some(PreferencePair {
                    h_alpha: e.item(0),
                    h_beta: e.item(1),
                    winner: Side::from_index(*winner_index)?,
                    source: *source,
                }),
                _ => None,
            })
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair_meta(id: &str, winner: usize) -> InstanceMeta {
        InstanceMeta::new(
            id,
            "t",
            vec!["a".into(), "b".into()],
            GoldLabel::Preference {
                winner_index: winner,
                source: LabelSource::Human,
            },
        )
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn checksum_serializes_as_hex() {
        let s = serde_json::to_string(&Checksum(0xab)).unwrap();
        assert_eq!(s, "\"00000000000000ab\"");
        let c: Checksum = serde_json::from_str(&s).unwrap();
        assert_eq!(c, Checksum(0xab));
    }

    #[test]
    fn single_instance_blob_is_24_bytes() {
        let mut m = ArchiveManifest::new("toy", 3, vec![0]);
        m.instances.push(pair_meta("i0", 0));
        let t = Tensor3::new([1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let a = Archive::from_parts(m, std::slice::from_ref(&t)).unwrap();
        assert_eq!(a.blob_len(), 24);
        assert_eq!(a.instance_tensor(0), t);
        assert_eq!(a.vector(0, 0, 1), vec![4.0, 5.0, 6.0]);
    }

    #[test]
    fn empty_archive_has_empty_blob() {
        let a = Archive::from_parts(ArchiveManifest::new("toy", 4, vec![0, 1]), &[]).unwrap();
        assert_eq!(a.blob_len(), 0);
        assert_eq!(a.manifest().blob_checksum, Checksum(fnv1a64(&[])));
    }

    #[test]
    fn two_instance_size_arithmetic() {
        let mut m = ArchiveManifest::new("toy", 8, vec![0, 16]);
        let labels: Vec<String> = (0..4).map(|i| format!("w{i}")).collect();
        for id in ["a", "b"] {
            m.instances.push(InstanceMeta::new(
                id,
                "t",
                labels.clone(),
                GoldLabel::Permutation { ranks: vec![1, 2, 3, 4] },
            ));
        }
        let t = Tensor3::zeros([2, 4, 8]);
        let a = Archive::from_parts(m, &[t.clone(), t]).unwrap();
        assert_eq!(a.blob_len(), 2 * 2 * 4 * 8 * 4);
        assert_eq!(a.manifest().instances[1].byte_offset, 256);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut m = ArchiveManifest::new("toy", 3, vec![0]);
        m.instances.push(pair_meta("i0", 0));
        let err = Archive::from_parts(m, &[Tensor3::zeros([1, 2, 4])]).unwrap_err();
        assert!(matches!(err, Error::InvalidShape(_)));
    }

    #[test]
    fn non_finite_rejected() {
        let mut m = ArchiveManifest::new("toy", 1, vec![0]);
        m.instances.push(pair_meta("i0", 0));
        let t = Tensor3::new([1, 2, 1], vec![1.0, f32::NAN]).unwrap();
        assert!(matches!(Archive::from_parts(m, &[t]), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn manifest_invariants() {
        let mut m = ArchiveManifest::new("toy", 3, vec![4, 4]);
        assert!(matches!(m.validate(), Err(Error::InvalidManifest(_))));
        m.layer_ids = vec![0, 4];
        m.instances.push(pair_meta("x", 0));
        m.instances.push(pair_meta("x", 1));
        assert!(matches!(m.validate(), Err(Error::InvalidManifest(_))));
        m.instances.pop();
        m.instances.push(InstanceMeta::new(
            "y",
            "t",
            vec!["a".into(), "b".into(), "c".into()],
            GoldLabel::Preference {
                winner_index: 0,
                source: LabelSource::Model,
            },
        ));
        assert!(matches!(m.validate(), Err(Error::InvalidManifest(_))));
        m.instances.pop();
        m.instances.push(InstanceMeta::new(
            "z",
            "t",
            vec!["a".into(), "b".into(), "c".into()],
            GoldLabel::Permutation { ranks: vec![1, 1, 3] },
        ));
        assert!(matches!(m.validate(), Err(Error::InvalidManifest(_))));
        m.format_version = 2;
        assert!(matches!(m.validate(), Err(Error::UnsupportedVersion { found: 2, .. })));
    }

    #[test]
    fn paths_accept_stem_or_file() {
        let (m, b) = archive_paths(Path::new("d/x"));
        assert_eq!(m, PathBuf::from("d/x.manifest.json"));
        assert_eq!(b, PathBuf::from("d/x.blob"));
        assert_eq!(archive_paths(Path::new("d/x.manifest.json")).1, b);
        assert_eq!(archive_paths(Path::new("d/x.blob")).0, m);
    }

    #[test]
    fn slice_layer_selects_layer_and_maps_preferences() {
        let mut m = ArchiveManifest::new("toy", 2, vec![0, 8, 16]);
        m.instances.push(pair_meta("p", 1));
        let mut t = Tensor3::zeros([3, 2, 2]);
        for layer in 0..3 {
            for item in 0..2 {
                let base = (layer * 10 + item) as f32;
                t.row_mut(layer, item).copy_from_slice(&[base, base + 0.5]);
            }
        }
        let a = Archive::from_parts(m, &[t]).unwrap();
        let slice = a.slice_layer(8, None).unwrap();
        assert_eq!(slice.entries[0].embeddings, DMatrix::from_row_slice(2, 2, &[10.0, 10.5, 11.0, 11.5]));
        let pairs = slice.pairs();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].winner, Side::Second);
        assert_eq!(pairs[0].oriented().0.as_slice(), &[11.0, 11.5]);
        assert!(matches!(a.slice_layer(7, None), Err(Error::LayerNotFound(7))));
        assert!(a.slice_layer(16, Some("other")).unwrap().is_empty());
    }

    #[test]
    fn abstained_instances_are_not_pairs() {
        let mut m = ArchiveManifest::new("toy", 1, vec![0]);
        m.instances.push(pair_meta("p", 0));
        m.instances
            .push(InstanceMeta::new("q", "t", vec!["a".into(), "b".into()], GoldLabel::Abstained));
        let t = Tensor3::zeros([1, 2, 1]);
        let a = Archive::from_parts(m, &[t.clone(), t]).unwrap();
        let slice = a.slice_layer(0, None).unwrap();
        assert_eq!(slice.entries.len(), 2);
        assert_eq!(slice.pairs().len(), 1);
        assert!(slice.ranked().is_empty());
    }

    #[test]
    fn ranked_instance_validation() {
        let m = DMatrix::from_element(2, 3, 1.0);
        assert!(RankedInstance::new("a", m.clone(), vec![2, 1]).is_ok());
        assert!(RankedInstance::new("a", m.clone(), vec![1, 2, 3]).is_err());
        assert!(RankedInstance::new("a", m, vec![0, 1]).is_err());
        let mut bad = DMatrix::from_element(2, 3, 1.0);
        bad[(0, 0)] = f64::INFINITY;
        assert!(RankedInstance::new("a", bad, vec![1, 2]).is_err());
    }
}
