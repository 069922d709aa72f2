//! Job specs for the activation extractor.
//!
//! A job lists every prompt instance with its items in presentation order.
//! Pair positions and list orders are shuffled here, from the job seed, so
//! the extractor never has to make a random choice.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{ArgGroup, Args, ValueEnum};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rankprobe::synthetic::gen_number_pairs;
use serde::{Deserialize, Serialize};

use crate::commands::UsageError;
use crate::config::seed_or_env;
use crate::output::{display, write_json};

pub const JOB_FORMAT_VERSION: u32 = 1;
pub const PAIR_TEMPLATE: &str = "Do not be prejudiced. Which is more positive: {word1} or {word2}? Reply with one phrase";
pub const LIST_TEMPLATE: &str = "Sort the following from most to least positive: {items}. Reply with the sorted list";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Labels parsed from the model's own answer.
    #[value(name = "lp")]
    ModelPredicted,
    /// Labels from the fixture sets.
    #[value(name = "hd")]
    HumanDerived,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LayerSelection {
    All(String),
    List(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobInstance {
    pub id: String,
    pub items: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item_groups: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub human_winner_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_ranks: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionJob {
    pub format_version: u32,
    pub model_id: String,
    pub task_id: String,
    pub prompt_template: String,
    pub layers: LayerSelection,
    pub label_mode: LabelMode,
    /// Items are read at their last subword in the prompt.
    pub token_rule: String,
    pub seed: u64,
    /// Archive stem the extractor writes.
    pub output: String,
    pub instances: Vec<JobInstance>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["positive", "groups", "numbers", "lists"])))]
pub struct ExtractArgs {
    #[arg(long)]
    pub model_id: String,
    #[arg(long)]
    pub task: String,
    /// Prompt with `{word1}` and `{word2}`, or `{items}` for lists.
    #[arg(long)]
    pub template: Option<String>,
    /// `all` or a comma-separated list of layer ids.
    #[arg(long, default_value = "all")]
    pub layers: String,
    #[arg(long, value_enum, default_value_t = LabelMode::HumanDerived)]
    pub label_mode: LabelMode,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Preferred phrases, one per line; pairs with `--negative`.
    #[arg(long, requires = "negative")]
    pub positive: Option<PathBuf>,
    #[arg(long, requires = "positive")]
    pub negative: Option<PathBuf>,
    /// `NAME=FILE`; repeat for each group (at least two).
    #[arg(long = "group")]
    pub groups: Vec<String>,
    /// Number of integer pairs.
    #[arg(long)]
    pub numbers: Option<usize>,
    #[arg(long, default_value_t = -1000, allow_hyphen_values = true)]
    pub low: i64,
    #[arg(long, default_value_t = 1000, allow_hyphen_values = true)]
    pub high: i64,
    /// One list per line, comma-separated, in gold order.
    #[arg(long)]
    pub lists: Option<PathBuf>,
    /// Keep a seeded sample of at most this many pairs per pairing.
    #[arg(long)]
    pub max_pairs: Option<usize>,
    /// Archive stem recorded in the job; defaults to the task name.
    #[arg(long)]
    pub archive_stem: Option<String>,
    /// Output job file.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn read_phrases(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let phrases: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    if phrases.is_empty() {
        return Err(rankprobe::Error::EmptyDataset).with_context(|| format!("no phrases in {}", path.display()));
    }
    Ok(phrases)
}

fn parse_layers(text: &str) -> Result<LayerSelection> {
    if text == "all" {
        return Ok(LayerSelection::All("all".into()));
    }
    text.split(',')
        .map(|t| t.trim().parse::<u32>())
        .collect::<Result<Vec<_>, _>>()
        .map(LayerSelection::List)
        .map_err(|_| UsageError(format!("--layers expects 'all' or a list of integers, got '{text}'")).into())
}

/// Every slot must appear exactly once.
pub fn check_template(template: &str, slots: &[&str]) -> Result<()> {
    for slot in slots {
        let count = template.matches(slot).count();
        if count != 1 {
            return Err(UsageError(format!("template must contain {slot} exactly once, found {count}")).into());
        }
    }
    Ok(())
}

/// All cross pairs, or a seeded sample of `max` of them in index order.
fn cross_pairs(a: usize, b: usize, max: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let total = a * b;
    let picks: Vec<usize> = match max {
        Some(m) if m < total => {
            let mut v = index::sample(rng, total, m).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..total).collect(),
    };
    picks.into_iter().map(|k| (k / b, k % b)).collect()
}

fn pair_instance(id: String, first: String, second: String, first_wins: Option<bool>, rng: &mut ChaCha8Rng) -> JobInstance {
    let swap = rng.random::<bool>();
    let (items, winner) = if swap {
        (vec![second, first], first_wins.map(|f| if f { 1 } else { 0 }))
    } else {
        (vec![first, second], first_wins.map(|f| if f { 0 } else { 1 }))
    };
    JobInstance {
        id,
        items,
        item_groups: None,
        human_winner_index: winner,
        gold_ranks: None,
    }
}

pub fn build_job(a: &ExtractArgs) -> Result<ExtractionJob> {
    let seed = seed_or_env(a.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let is_lists = a.lists.is_some();
    let template = a
        .template
        .clone()
        .unwrap_or_else(|| if is_lists { LIST_TEMPLATE } else { PAIR_TEMPLATE }.to_string());
    if is_lists {
        check_template(&template, &["{items}"])?;
    } else {
        check_template(&template, &["{word1}", "{word2}"])?;
    }
    let mut instances = Vec::new();
    if let (Some(pos), Some(neg)) = (&a.positive, &a.negative) {
        let (pos, neg) = (read_phrases(pos)?, read_phrases(neg)?);
        for (i, j) in cross_pairs(pos.len(), neg.len(), a.max_pairs, &mut rng) {
            let id = format!("{}-{:05}", a.task, instances.len());
            instances.push(pair_instance(id, pos[i].clone(), neg[j].clone(), Some(true), &mut rng));
        }
    } else if !a.groups.is_empty() {
        let mut groups = Vec::with_capacity(a.groups.len());
        for spec in &a.groups {
            let (name, file) = spec
                .split_once('=')
                .ok_or_else(|| UsageError(format!("--group expects NAME=FILE, got '{spec}'")))?;
            groups.push((name.to_string(), read_phrases(Path::new(file))?));
        }
        if groups.len() < 2 {
            return Err(UsageError("--group must be given at least twice".into()).into());
        }
        for gi in 0..groups.len() {
            for gj in gi + 1..groups.len() {
                let (ni, wi) = &groups[gi];
                let (nj, wj) = &groups[gj];
                for (i, j) in cross_pairs(wi.len(), wj.len(), a.max_pairs, &mut rng) {
                    let id = format!("{ni}-{nj}-{:05}", instances.len());
                    let mut inst = pair_instance(id, wi[i].clone(), wj[j].clone(), None, &mut rng);
                    inst.item_groups = Some(if inst.items[0] == wi[i] && inst.items[1] == wj[j] {
                        vec![ni.clone(), nj.clone()]
                    } else {
                        vec![nj.clone(), ni.clone()]
                    });
                    instances.push(inst);
                }
            }
        }
    } else if let Some(count) = a.numbers {
        for (k, p) in gen_number_pairs(count, a.low, a.high, seed)?.into_iter().enumerate() {
            instances.push(JobInstance {
                id: format!("{}-{k:05}", a.task),
                items: vec![p.a.to_string(), p.b.to_string()],
                item_groups: None,
                human_winner_index: Some(p.winner().index()),
                gold_ranks: None,
            });
        }
    } else if let Some(path) = &a.lists {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let gold: Vec<String> = line.split(',').map(|s| s.trim().to_string()).collect();
            if gold.len() < 2 {
                return Err(UsageError(format!("list '{line}' has fewer than two items")).into());
            }
            let mut order: Vec<usize> = (0..gold.len()).collect();
            order.shuffle(&mut rng);
            instances.push(JobInstance {
                id: format!("{}-{:05}", a.task, instances.len()),
                items: order.iter().map(|&k| gold[k].clone()).collect(),
                item_groups: None,
                human_winner_index: None,
                gold_ranks: Some(order.iter().map(|&k| k + 1).collect()),
            });
        }
    }
    if instances.is_empty() {
        return Err(rankprobe::Error::EmptyDataset.into());
    }
    Ok(ExtractionJob {
        format_version: JOB_FORMAT_VERSION,
        model_id: a.model_id.clone(),
        task_id: a.task.clone(),
        prompt_template: template,
        layers: parse_layers(&a.layers)?,
        label_mode: a.label_mode,
        token_rule: "last_subword".into(),
        seed,
        output: a.archive_stem.clone().unwrap_or_else(|| a.task.clone()),
        instances,
    })
}

pub fn run(a: &ExtractArgs) -> Result<()> {
    let job = build_job(a)?;
    write_json(&a.out, &job)?;
    println!("{} ({} instances)", display(&a.out), job.instances.len());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_pair_template_has_both_slots() {
        check_template(PAIR_TEMPLATE, &["{word1}", "{word2}"]).unwrap();
        check_template(LIST_TEMPLATE, &["{items}"]).unwrap();
        assert!(check_template("{word1} vs {word1}", &["{word1}", "{word2}"]).is_err());
    }

    #[test]
    fn cross_pairs_sample_is_sorted_and_unique() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let all = cross_pairs(3, 4, None, &mut rng);
        assert_eq!(all.len(), 12);
        let some = cross_pairs(3, 4, Some(5), &mut rng);
        assert_eq!(some.len(), 5);
        assert!(some.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn winner_follows_the_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for k in 0..20 {
            let inst = pair_instance(k.to_string(), "good".into(), "bad".into(), Some(true), &mut rng);
            let w = inst.human_winner_index.unwrap();
            assert_eq!(inst.items[w], "good");
        }
    }

    #[test]
    fn layers_parse() {
        assert_eq!(parse_layers("all").unwrap(), LayerSelection::All("all".into()));
        assert_eq!(parse_layers("1,3").unwrap(), LayerSelection::List(vec![1, 3]));
        assert!(parse_layers("x").is_err());
    }
}
