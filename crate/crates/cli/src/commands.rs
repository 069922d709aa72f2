use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::ValueEnum;
use nalgebra::DVector;
use rankprobe::archive::{read_archive, Archive, GoldLabel, LabelSource, LayerSlice};
use rankprobe::evaluation::{
    averaged_win_rate, evaluate, mean_rate, GroupedPairs, LayerSweepResult, PairwisePredictor, SplitConfig,
    WinRateReport,
};
use rankprobe::probe::{Probe, ProbeFamily};
use rankprobe::synthetic::{
    gen_multilayer_planted, gen_number_pairs, gen_planted_groups, gen_planted_order, gen_planted_preference,
    pair_archive, ranked_archive, seeded_direction, PlantedGroupSpec, PlantedOrderSpec, PlantedPreferenceSpec,
};
use rankprobe::Error;
use serde::Serialize;

use crate::config::{order_config, pairwise_config, seed_or_env};
use crate::output::{display, ensure_dir, json_string, write_csv, write_json, write_report};
use crate::{BiasArgs, EvalArgs, GenArgs, GenKind, HyperArgs, LabelFilter, SweepArgs, TrainArgs};

pub const PROBE_KINDS: [&str; 7] = ["order-l2", "order-cos", "order-dot", "bt", "max-margin", "concat-lr", "weat"];

/// A malformed request rather than bad data; exits with 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                _ if e.is_numerical() => 3,
                Error::InvalidConfig(_) | Error::NotVisualizable(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

/// `middle` or a numeric layer id.
pub fn resolve_layer(archive: &Archive, text: &str) -> Result<u32> {
    if text == "middle" {
        return archive
            .manifest()
            .middle_layer()
            .ok_or_else(|| Error::InvalidManifest("archive has no layers".into()).into());
    }
    text.parse()
        .map_err(|_| UsageError(format!("--layer expects an integer or 'middle', got '{text}'")).into())
}

/// Explicit `--layer`, else the probe's own layer; WEAT probes default to the middle layer.
fn probe_layer(archive: &Archive, probe: &Probe, flag: Option<&str>) -> Result<u32> {
    match (flag, probe) {
        (Some(text), _) => resolve_layer(archive, text),
        (None, Probe::Weat(_)) => resolve_layer(archive, "middle"),
        (None, p) => Ok(p.layer_id()),
    }
}

fn check_hidden_dim(archive: &Archive, probe: &Probe) -> Result<()> {
    if archive.hidden_dim() != probe.hidden_dim() {
        return Err(Error::DimensionMismatch {
            expected: probe.hidden_dim(),
            found: archive.hidden_dim(),
        }
        .into());
    }
    Ok(())
}

fn load_probe(path: &Path) -> Result<Probe> {
    Ok(Probe::load(path)?)
}

fn load_archive(path: &Path) -> Result<Archive> {
    Ok(read_archive(path)?)
}

pub fn family_from(kind: &str, hyper: &HyperArgs) -> Result<ProbeFamily> {
    Ok(match ProbeFamily::from_name(kind)? {
        ProbeFamily::Order { kind, .. } => ProbeFamily::Order {
            kind,
            cfg: order_config(hyper)?,
        },
        ProbeFamily::BradleyTerry(_) => ProbeFamily::BradleyTerry(pairwise_config(hyper)?),
        ProbeFamily::MaxMargin { margin, .. } => ProbeFamily::MaxMargin {
            margin: hyper.margin.unwrap_or(margin),
            cfg: pairwise_config(hyper)?,
        },
        ProbeFamily::ConcatLogReg(_) => ProbeFamily::ConcatLogReg(pairwise_config(hyper)?),
        ProbeFamily::Weat => ProbeFamily::Weat,
    })
}

fn separator(a: &GenArgs, seed: u64) -> Result<DVector<f64>> {
    let h = a.hidden_dim;
    let Some(other) = a.orthogonal_to else {
        return Ok(seeded_direction(h, a.direction_seed.unwrap_or(seed)));
    };
    if h < 2 {
        return Err(UsageError("--orthogonal-to needs --H of at least 2".into()).into());
    }
    let base = seeded_direction(h, other);
    for salt in 0..64u64 {
        let draw = seeded_direction(h, seed.wrapping_add(salt));
        let residual = &draw - &base * base.dot(&draw);
        if residual.norm() > 1e-6 {
            return Ok(residual.normalize());
        }
    }
    Err(Error::DegenerateVector(0.0).into())
}

#[derive(Serialize)]
struct GenSummary {
    kind: String,
    manifest: String,
    instances: usize,
    hidden_dim: usize,
    layer_ids: Vec<u32>,
    blob_checksum: String,
}

#[derive(Serialize)]
struct NumberRow {
    a: i64,
    b: i64,
    winner: i64,
}

pub fn gen(a: &GenArgs) -> Result<()> {
    let seed = seed_or_env(a.seed)?;
    let kind_name = a.kind.to_possible_value().expect("no skipped variants").get_name().to_string();
    let stem = a.name.clone().unwrap_or_else(|| kind_name.clone());
    ensure_dir(&a.out)?;
    let task = |default: &str| a.task.clone().unwrap_or_else(|| default.to_string());
    let (h, w, n) = (a.hidden_dim, a.items, a.instances);
    let archive = match a.kind {
        GenKind::PlantedOrder => {
            let spec = PlantedOrderSpec::new(h, w, n, a.noise.unwrap_or(0.0), seed);
            ranked_archive("planted", &task("planted-order"), a.layer_id, &gen_planted_order(&spec)?)?
        }
        GenKind::PlantedPreference => {
            let mut spec = PlantedPreferenceSpec::new(h, n, a.gap, a.label_noise, seed).with_separator(separator(a, seed)?);
            if let Some(noise) = a.noise {
                spec.noise_sigma = noise;
            }
            pair_archive("planted", &task("planted-preference"), a.layer_id, &gen_planted_preference(&spec)?)?
        }
        GenKind::Multilayer => {
            let spec = PlantedOrderSpec::new(h, w, n, a.noise.unwrap_or(0.0), seed);
            gen_multilayer_planted(&spec, a.layers, a.signal_layer)?
        }
        GenKind::Groups => {
            let shifts = if a.shifts.is_empty() {
                vec![0.0; a.groups.len()]
            } else {
                a.shifts.clone()
            };
            let spec = PlantedGroupSpec {
                hidden_dim: h,
                groups: a.groups.clone(),
                shifts,
                direction: separator(a, seed)?,
                pairs_per_pairing: a.pairs_per_pairing,
                noise_sigma: a.noise.unwrap_or(0.1),
                seed,
            };
            gen_planted_groups(&spec, &task("planted-groups"))?
        }
        GenKind::Numbers => {
            let rows: Vec<NumberRow> = gen_number_pairs(a.count, a.low, a.high, seed)?
                .iter()
                .map(|p| NumberRow {
                    a: p.a,
                    b: p.b,
                    winner: p.a.max(p.b),
                })
                .collect();
            let path = a.out.join(format!("{stem}.csv"));
            write_csv(&path, &rows)?;
            println!("{}", display(&path));
            return Ok(());
        }
    };
    let base = a.out.join(&stem);
    archive.write(&base)?;
    let m = archive.manifest();
    let summary = GenSummary {
        kind: kind_name,
        manifest: format!("{}.manifest.json", display(&base)),
        instances: m.instances.len(),
        hidden_dim: m.hidden_dim,
        layer_ids: m.layer_ids.clone(),
        blob_checksum: m.blob_checksum.to_string(),
    };
    print!("{}", json_string(&summary)?);
    Ok(())
}

fn filter_labels(slice: &mut LayerSlice, filter: LabelFilter) {
    let keep = match filter {
        LabelFilter::Any => return,
        LabelFilter::Human => LabelSource::Human,
        LabelFilter::Model => LabelSource::Model,
    };
    slice
        .entries
        .retain(|e| !matches!(e.gold, GoldLabel::Preference { source, .. } if source != keep));
}

#[derive(Serialize)]
struct TrainLog {
    kind: String,
    layer_id: u32,
    hidden_dim: usize,
    instances: usize,
    seed: u64,
    final_loss: f64,
    iterations: usize,
    converged: bool,
    fingerprint: String,
}

fn log_path(out: &Path) -> PathBuf {
    let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let stem = name.strip_suffix(".json").unwrap_or(&name);
    out.with_file_name(format!("{stem}.log.json"))
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let family = family_from(&a.kind, &a.hyper)?;
    let archive = load_archive(&a.archive)?;
    let layer = resolve_layer(&archive, &a.layer)?;
    let mut slice = archive.slice_layer(layer, a.task.as_deref())?;
    filter_labels(&mut slice, a.labels);
    let instances = if family.is_order() {
        slice.ranked().len()
    } else {
        slice.pairs().len()
    };
    if instances == 0 {
        return Err(Error::EmptyDataset.into());
    }
    let probe = family.train_slice(&slice)?;
    probe.save(&a.out)?;
    let summary = probe.summary();
    let record = TrainLog {
        kind: probe.kind().to_string(),
        layer_id: layer,
        hidden_dim: probe.hidden_dim(),
        instances,
        seed: family.seed().unwrap_or(0),
        final_loss: summary.final_loss,
        iterations: summary.iterations,
        converged: summary.converged,
        fingerprint: format!("{:016x}", probe.fingerprint()),
    };
    log::info!(
        "trained {} on layer {layer}: loss {} after {} iterations (seed {})",
        record.kind,
        record.final_loss,
        record.iterations,
        record.seed
    );
    write_json(&log_path(&a.out), &record)?;
    print!("{}", json_string(&record)?);
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub enum EvalMode {
    Eval,
    Transfer,
}

impl EvalMode {
    fn name(self) -> &'static str {
        match self {
            EvalMode::Eval => "eval",
            EvalMode::Transfer => "transfer",
        }
    }
}

#[derive(Serialize)]
struct EvalReport {
    mode: &'static str,
    kind: String,
    probe_layer_id: u32,
    layer_id: u32,
    metric: String,
    value: f64,
    n: usize,
    fingerprint: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    win_rate: Option<WinRateReport>,
}

#[derive(Serialize)]
struct EvalRow {
    mode: &'static str,
    kind: String,
    layer_id: u32,
    metric: String,
    value: f64,
    n: usize,
    wins: Option<u64>,
    ci_low: Option<f64>,
    ci_high: Option<f64>,
    significant: Option<bool>,
}

pub fn eval(a: &EvalArgs, mode: EvalMode) -> Result<()> {
    let probe = load_probe(&a.probe)?;
    let archive = load_archive(&a.archive)?;
    check_hidden_dim(&archive, &probe)?;
    let layer = probe_layer(&archive, &probe, a.layer.as_deref())?;
    let slice = archive.slice_layer(layer, a.task.as_deref())?;
    let before = probe.fingerprint();
    let result = evaluate(&probe, &slice, seed_or_env(a.seed)?, a.confidence)?;
    assert_eq!(before, probe.fingerprint(), "evaluation must not change probe parameters");
    let report = EvalReport {
        mode: mode.name(),
        kind: probe.kind().to_string(),
        probe_layer_id: probe.layer_id(),
        layer_id: layer,
        metric: result.metric.clone(),
        value: result.value,
        n: result.n,
        fingerprint: format!("{before:016x}"),
        win_rate: result.win_rate.clone(),
    };
    let w = result.win_rate.as_ref();
    let row = EvalRow {
        mode: mode.name(),
        kind: report.kind.clone(),
        layer_id: layer,
        metric: result.metric,
        value: result.value,
        n: result.n,
        wins: w.map(|r| r.wins),
        ci_low: w.map(|r| r.ci_low),
        ci_high: w.map(|r| r.ci_high),
        significant: w.map(|r| r.significant),
    };
    write_report(&a.out, mode.name(), &report, &[row])
}

#[derive(Serialize)]
struct SweepRow {
    layer_id: u32,
    metric: String,
    value: f64,
    best: bool,
    middle: bool,
}

#[derive(Serialize)]
struct SweepReport<'a> {
    kind: &'a str,
    seed: u64,
    test_fraction: f64,
    #[serde(flatten)]
    result: &'a LayerSweepResult,
}

pub fn sweep(a: &SweepArgs) -> Result<()> {
    let family = family_from(&a.kind, &a.hyper)?;
    let seed = match family.seed() {
        Some(s) => s,
        None => seed_or_env(a.hyper.seed)?,
    };
    let archive = load_archive(&a.archive)?;
    let split = SplitConfig {
        test_fraction: a.test_fraction,
        seed,
    };
    let result = rankprobe::evaluation::layer_sweep(&archive, a.task.as_deref(), &family, split)?;
    let rows: Vec<SweepRow> = result
        .layer_ids
        .iter()
        .zip(&result.values)
        .map(|(&layer_id, &value)| SweepRow {
            layer_id,
            metric: result.metric.clone(),
            value,
            best: layer_id == result.best_layer,
            middle: layer_id == result.middle_layer,
        })
        .collect();
    let report = SweepReport {
        kind: &a.kind,
        seed,
        test_fraction: a.test_fraction,
        result: &result,
    };
    write_report(&a.out, "sweep", &report, &rows)
}

#[derive(Debug, Clone, Serialize)]
struct BiasRow {
    probe: usize,
    kind: String,
    layer_id: u32,
    target: String,
    other: String,
    wins: u64,
    n_pairs: u64,
    win_rate: f64,
    ci_low: f64,
    ci_high: f64,
    significant: bool,
}

#[derive(Debug, Clone, Serialize)]
struct BiasSummaryRow {
    target: String,
    averaged_win_rate: f64,
    components: usize,
}

#[derive(Serialize)]
struct BiasReport {
    groups: Vec<String>,
    probes: Vec<String>,
    confidence: f64,
    averaged: Vec<BiasSummaryRow>,
    components: Vec<BiasRow>,
}

pub fn bias_report(a: &BiasArgs) -> Result<()> {
    let probes = a.probes.iter().map(|p| load_probe(p)).collect::<Result<Vec<_>>>()?;
    let archive = load_archive(&a.archive)?;
    let seed = seed_or_env(a.seed)?;
    let mut by_layer: BTreeMap<u32, GroupedPairs> = BTreeMap::new();
    let mut layers = Vec::with_capacity(probes.len());
    for probe in &probes {
        check_hidden_dim(&archive, probe)?;
        let layer = probe_layer(&archive, probe, a.layer.as_deref())?;
        if let std::collections::btree_map::Entry::Vacant(slot) = by_layer.entry(layer) {
            let slice = archive.slice_layer(layer, a.task.as_deref())?;
            slot.insert(GroupedPairs::from_slice(&slice)?);
        }
        layers.push(layer);
    }
    let groups = by_layer.values().next().expect("at least one probe").group_names.clone();
    let mut components = Vec::new();
    let mut averaged = Vec::new();
    for (i, target) in groups.iter().enumerate() {
        let mut rates = Vec::new();
        for (k, (probe, layer)) in probes.iter().zip(&layers).enumerate() {
            let grouped = &by_layer[layer];
            let predictor: &dyn PairwisePredictor = probe;
            let avg = averaged_win_rate(&[predictor], grouped, i, a.confidence, seed)?;
            for r in avg.components {
                rates.push(r.win_rate);
                components.push(BiasRow {
                    probe: k,
                    kind: probe.kind().to_string(),
                    layer_id: *layer,
                    target: target.clone(),
                    other: r.group_names[1].clone(),
                    wins: r.wins,
                    n_pairs: r.n_pairs,
                    win_rate: r.win_rate,
                    ci_low: r.ci_low,
                    ci_high: r.ci_high,
                    significant: r.significant,
                });
            }
        }
        averaged.push(BiasSummaryRow {
            target: target.clone(),
            averaged_win_rate: mean_rate(&rates)?,
            components: rates.len(),
        });
    }
    let report = BiasReport {
        groups,
        probes: probes.iter().map(|p| format!("{:016x}", p.fingerprint())).collect(),
        confidence: a.confidence,
        averaged: averaged.clone(),
        components: components.clone(),
    };
    write_csv(&a.out.join("bias_summary.csv"), &averaged)?;
    write_report(&a.out, "bias", &report, &components)
}
