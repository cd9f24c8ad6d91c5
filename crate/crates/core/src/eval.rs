//! Fidelity metrics, ablation reports and rater-vote aggregation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserParams, LoraSet};
use crate::diffusion::{ancestral_sample, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::stream;
use crate::toyworld::detect::cosine;
use crate::toyworld::World;
use crate::train::mean;
use crate::vocab::PromptTokens;

/// Mean cosine between each image's attribute vector and the prompt indicator.
pub fn text_fidelity(world: &World, images: &[Image], prompt: &PromptTokens) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Parameter(
            "text fidelity needs at least one image".into(),
        ));
    }
    let text = world.text_embed(prompt)?;
    let scores: Vec<f64> = images
        .iter()
        .map(|img| world.image_embed(img).cosine(&text))
        .collect();
    Ok(mean(&scores))
}

/// Mean subject-feature cosine over every (generated, reference) pair.
pub fn subject_fidelity(world: &World, images: &[Image], references: &[Image]) -> Result<f64> {
    if images.is_empty() || references.is_empty() {
        return Err(Error::Parameter(
            "subject fidelity needs generated and reference images".into(),
        ));
    }
    let refs: Vec<Vec<f64>> = references
        .iter()
        .map(|r| world.subject_features(r))
        .collect();
    let mut scores = Vec::with_capacity(images.len() * refs.len());
    for img in images {
        let f = world.subject_features(img);
        scores.extend(refs.iter().map(|r| cosine(&f, r)));
    }
    Ok(mean(&scores))
}

/// A model under evaluation.
#[derive(Debug, Clone, Copy)]
pub struct Candidate<'a> {
    pub label: &'a str,
    pub params: &'a DenoiserParams,
    pub adapters: Option<&'a LoraSet>,
}

/// One row of an ablation report: a (model, prompt) pair aggregated over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub label: String,
    pub prompt: String,
    pub samples: usize,
    /// Seeds joined with `;`.
    pub seeds: String,
    pub text_fidelity: f64,
    pub subject_fidelity: f64,
    /// Oracle reward mean; stands in for learned preference scorers.
    pub mean_reward: f64,
}

/// `n` samples of one prompt. Streams depend only on the seed, the prompt and
/// the sample index, so every model sees the same starting noise.
pub fn sample_images(
    params: &DenoiserParams,
    adapters: Option<&LoraSet>,
    prompt: &PromptTokens,
    n: usize,
    sampler: &SamplerConfig,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<Image>> {
    let model = Denoiser::new(params, adapters);
    let cfg = SamplerConfig {
        record_trajectory: false,
        ..*sampler
    };
    let label = format!("eval/{prompt}");
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, &label, i as u64);
            Ok(ancestral_sample(&model, prompt, &cfg, sched, &mut rng, seed)?.image())
        })
        .collect()
}

/// Sample every (candidate, prompt, seed) and score both fidelity metrics and
/// the oracle reward.
#[allow(clippy::too_many_arguments)]
pub fn ablation_report(
    world: &World,
    candidates: &[Candidate<'_>],
    prompts: &[PromptTokens],
    references: &[Image],
    n: usize,
    seeds: &[u64],
    sampler: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<Vec<MetricRow>> {
    if n == 0 || seeds.is_empty() || prompts.is_empty() {
        return Err(Error::Parameter(
            "ablation report needs n >= 1, a seed and a prompt".into(),
        ));
    }
    let seed_list = seeds
        .iter()
        .map(u64::to_string)
        .collect::<Vec<_>>()
        .join(";");
    let mut rows = Vec::with_capacity(candidates.len() * prompts.len());
    for c in candidates {
        for prompt in prompts {
            let mut images = Vec::with_capacity(n * seeds.len());
            for &seed in seeds {
                images.extend(sample_images(
                    c.params, c.adapters, prompt, n, sampler, sched, seed,
                )?);
            }
            let rewards = images
                .iter()
                .map(|img| world.reward(img, prompt))
                .collect::<Result<Vec<_>>>()?;
            rows.push(MetricRow {
                label: c.label.to_string(),
                prompt: prompt.to_string(),
                samples: images.len(),
                seeds: seed_list.clone(),
                text_fidelity: text_fidelity(world, &images, prompt)?,
                subject_fidelity: subject_fidelity(world, &images, references)?,
                mean_reward: mean(&rewards),
            });
        }
    }
    Ok(rows)
}

pub fn write_metric_csv<W: Write>(out: W, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Choice {
    A,
    B,
    Good,
    Bad,
    Pass,
}

impl FromStr for Choice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Choice::A),
            "B" => Ok(Choice::B),
            "GOOD" => Ok(Choice::Good),
            "BAD" => Ok(Choice::Bad),
            "PASS" => Ok(Choice::Pass),
            other => Err(Error::Votes(format!("unknown choice `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Question {
    /// GOOD / BAD / PASS on a single image.
    Binary,
    /// A / B / PASS between two images; A is the candidate under test.
    Pairwise,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    pub item_id: String,
    pub rater_id: String,
    pub choice: Choice,
}

/// Votes with exactly `raters` distinct raters per item.
#[derive(Debug, Clone, PartialEq)]
pub struct VoteTable {
    question: Question,
    raters: usize,
    items: BTreeMap<String, Vec<Choice>>,
}

impl VoteTable {
    pub fn new(votes: Vec<Vote>, raters: usize) -> Result<Self> {
        if raters == 0 {
            return Err(Error::Votes("rater count must be positive".into()));
        }
        let binary = votes
            .iter()
            .any(|v| matches!(v.choice, Choice::Good | Choice::Bad));
        let pairwise = votes
            .iter()
            .any(|v| matches!(v.choice, Choice::A | Choice::B));
        let question = match (binary, pairwise) {
            (true, true) => {
                return Err(Error::Votes(
                    "table mixes binary and pairwise choices".into(),
                ))
            }
            (false, true) => Question::Pairwise,
            _ => Question::Binary,
        };
        let mut seen: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        let mut items: BTreeMap<String, Vec<Choice>> = BTreeMap::new();
        for v in votes {
            if !seen
                .entry(v.item_id.clone())
                .or_default()
                .insert(v.rater_id.clone())
            {
                return Err(Error::Votes(format!(
                    "rater {} voted twice on item {}",
                    v.rater_id, v.item_id
                )));
            }
            items.entry(v.item_id).or_default().push(v.choice);
        }
        for (item, choices) in &items {
            if choices.len() != raters {
                return Err(Error::Votes(format!(
                    "item {item} has {} rater rows, expected {raters}",
                    choices.len()
                )));
            }
        }
        Ok(Self {
            question,
            raters,
            items,
        })
    }

    /// Reads `item_id,rater_id,choice` rows.
    pub fn read_csv<R: Read>(input: R, raters: usize) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(input);
        let headers = reader.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["item_id", "rater_id", "choice"] {
            return Err(Error::Votes(format!(
                "expected header item_id,rater_id,choice, got {}",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut votes = Vec::new();
        for record in reader.records() {
            let record = record?;
            votes.push(Vote {
                item_id: record[0].to_string(),
                rater_id: record[1].to_string(),
                choice: record[2].parse()?,
            });
        }
        Self::new(votes, raters)
    }

    pub fn question(&self) -> Question {
        self.question
    }

    pub fn raters(&self) -> usize {
        self.raters
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    /// GOOD, or A preferred.
    Positive,
    /// BAD, or B preferred.
    Negative,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Positive => "positive",
            Verdict::Negative => "negative",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoteOutcome {
    pub question: Question,
    pub winners: BTreeMap<String, Verdict>,
    /// Percentage of items with a positive verdict (approval or preference rate).
    pub positive_rate: f64,
}

/// Per-item majority.
///
/// An item is positive when its positive votes (GOOD or A) strictly outnumber
/// the negative ones (BAD or B); even splits are negative. With `pass_as_bad`,
/// PASS counts as a negative vote, otherwise it abstains.
pub fn majority_vote(table: &VoteTable, pass_as_bad: bool) -> VoteOutcome {
    let mut winners = BTreeMap::new();
    for (item, choices) in &table.items {
        let (mut pos, mut neg) = (0usize, 0usize);
        for c in choices {
            match c {
                Choice::Good | Choice::A => pos += 1,
                Choice::Bad | Choice::B => neg += 1,
                Choice::Pass if pass_as_bad => neg += 1,
                Choice::Pass => {}
            }
        }
        let verdict = if pos > neg {
            Verdict::Positive
        } else {
            Verdict::Negative
        };
        winners.insert(item.clone(), verdict);
    }
    let positive = winners
        .values()
        .filter(|v| **v == Verdict::Positive)
        .count();
    let positive_rate = if winners.is_empty() {
        0.0
    } else {
        100.0 * positive as f64 / winners.len() as f64
    };
    VoteOutcome {
        question: table.question,
        winners,
        positive_rate,
    }
}
