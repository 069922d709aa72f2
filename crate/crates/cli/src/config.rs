//! Layered configuration: defaults, then `PROBE_SEED`, then a JSON config
//! file, then explicit flags.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use rankprobe::order::OrderTrainConfig;
use rankprobe::preference::BTTrainConfig;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::commands::UsageError;
use crate::{HyperArgs, SEED_ENV};

/// Seed from `--seed`, else `PROBE_SEED`, else 0.
pub fn seed_or_env(flag: Option<u64>) -> Result<u64> {
    match flag {
        Some(s) => Ok(s),
        None => env_seed().map(|s| s.unwrap_or(0)),
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(text) => text
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| UsageError(format!("{SEED_ENV}={text:?} is not an unsigned integer")).into()),
        Err(_) => Ok(None),
    }
}

fn overlay(target: &mut Map<String, Value>, layer: Map<String, Value>, origin: &str) -> Result<()> {
    for (key, value) in layer {
        if !target.contains_key(&key) {
            return Err(UsageError(format!("unknown key '{key}' in {origin}")).into());
        }
        target.insert(key, value);
    }
    Ok(())
}

fn read_object(path: &Path) -> Result<Map<String, Value>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(UsageError(format!("config {} must be a JSON object", path.display())).into()),
        Err(e) => Err(UsageError(format!("config {}: {e}", path.display())).into()),
    }
}

fn resolve<T: Serialize + DeserializeOwned>(defaults: T, file: Option<&Path>, flags: Map<String, Value>) -> Result<T> {
    let Value::Object(mut merged) = serde_json::to_value(defaults)? else {
        unreachable!("configs serialize as objects");
    };
    if let Some(seed) = env_seed()? {
        merged.insert("seed".into(), seed.into());
    }
    if let Some(path) = file {
        overlay(&mut merged, read_object(path)?, &path.display().to_string())?;
    }
    overlay(&mut merged, flags, "flags")?;
    serde_json::from_value(Value::Object(merged)).map_err(|e| UsageError(format!("invalid config: {e}")).into())
}

fn put<V: Into<Value>>(map: &mut Map<String, Value>, key: &str, value: Option<V>) {
    if let Some(v) = value {
        map.insert(key.into(), v.into());
    }
}

pub fn order_config(h: &HyperArgs) -> Result<OrderTrainConfig> {
    if h.max_iterations.is_some() || h.tol.is_some() {
        return Err(UsageError("--max-iter and --tol apply to pairwise probes only".into()).into());
    }
    let mut flags = Map::new();
    put(&mut flags, "seed", h.seed);
    put(&mut flags, "margin", h.margin);
    put(&mut flags, "probe_dim", h.probe_dim);
    put(&mut flags, "learning_rate", h.learning_rate);
    put(&mut flags, "epochs", h.epochs);
    put(&mut flags, "batch_size", h.batch_size);
    put(&mut flags, "convergence_tol", h.convergence_tol);
    put(&mut flags, "l2_penalty", h.l2_penalty);
    if h.normalize {
        flags.insert("normalize".into(), true.into());
    }
    resolve(OrderTrainConfig::default(), h.config.as_deref(), flags)
}

pub fn pairwise_config(h: &HyperArgs) -> Result<BTTrainConfig> {
    let order_only = [
        ("--probe-dim", h.probe_dim.is_some()),
        ("--lr", h.learning_rate.is_some()),
        ("--epochs", h.epochs.is_some()),
        ("--batch-size", h.batch_size.is_some()),
        ("--convergence-tol", h.convergence_tol.is_some()),
        ("--normalize", h.normalize),
    ];
    if let Some((flag, _)) = order_only.iter().find(|(_, set)| *set) {
        return Err(UsageError(format!("{flag} applies to order probes only")).into());
    }
    let mut flags = Map::new();
    put(&mut flags, "seed", h.seed);
    put(&mut flags, "l2_penalty", h.l2_penalty);
    put(&mut flags, "max_iterations", h.max_iterations);
    put(&mut flags, "tol", h.tol);
    resolve(BTTrainConfig::default(), h.config.as_deref(), flags)
}
