//! Pairwise preference oracles and the machinery shared by all of them: seeded
//! slot randomization, demapping, batch labelling, self-consistency and prompt
//! truncation.

mod human;
mod llm;
mod valence;

use std::ops::RangeInclusive;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use human::{HumanOracle, HumanQueue, PendingItem, PostError, QueueProgress};
pub use llm::{
    parse_judge_response, render_template, ChatTransport, HttpTransport, JudgeEndpoint, LlmJudge,
    RenderedPrompt, TemplateId, TransportError, JUDGE_TOKEN_ENV,
};
pub use valence::{valence_judge, ValenceOracle, ValenceTable};

use crate::error::{AplError, Result};
use crate::rng::rng_from_seed;
use crate::vocab::{TokenSequence, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Slot {
    A,
    B,
}

impl std::fmt::Display for Slot {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Slot::A => "A",
            Slot::B => "B",
        })
    }
}

impl std::str::FromStr for Slot {
    type Err = AplError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" => Ok(Slot::A),
            "B" => Ok(Slot::B),
            _ => Err(AplError::invalid(format!("preferred must be \"A\" or \"B\", got `{s}`"))),
        }
    }
}

/// Which original completion (0 = y1, 1 = y2) sits in each slot.
/// Serialized as `[slot_a, slot_b]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "[usize; 2]", try_from = "[usize; 2]")]
pub struct OrderMap {
    pub slot_a: usize,
    pub slot_b: usize,
}

impl OrderMap {
    pub const IDENTITY: OrderMap = OrderMap { slot_a: 0, slot_b: 1 };
    pub const SWAPPED: OrderMap = OrderMap { slot_a: 1, slot_b: 0 };

    pub fn demap(&self, choice: Slot) -> usize {
        match choice {
            Slot::A => self.slot_a,
            Slot::B => self.slot_b,
        }
    }

    /// Inverse of [`demap`](Self::demap).
    pub fn slot_of(&self, original: usize) -> Slot {
        if self.slot_a == original {
            Slot::A
        } else {
            Slot::B
        }
    }
}

impl From<OrderMap> for [usize; 2] {
    fn from(o: OrderMap) -> Self {
        [o.slot_a, o.slot_b]
    }
}

impl TryFrom<[usize; 2]> for OrderMap {
    type Error = String;

    fn try_from(v: [usize; 2]) -> std::result::Result<Self, String> {
        match v {
            [0, 1] => Ok(OrderMap::IDENTITY),
            [1, 0] => Ok(OrderMap::SWAPPED),
            other => Err(format!("invalid presented order {other:?}")),
        }
    }
}

/// A prompt with two candidate completions awaiting a label.
#[derive(Debug, Clone, PartialEq)]
pub struct PairInput {
    pub pair_id: String,
    pub prompt: TokenSequence,
    pub y1: TokenSequence,
    pub y2: TokenSequence,
}

/// A pair as shown to an oracle, completions assigned to slots.
#[derive(Debug, Clone, PartialEq)]
pub struct PresentedPair {
    pub pair_id: String,
    pub prompt: TokenSequence,
    pub slot_a: TokenSequence,
    pub slot_b: TokenSequence,
    pub order: OrderMap,
}

impl PresentedPair {
    pub fn to_request(&self, vocab: &Vocabulary, template: TemplateId, temperature: f64) -> JudgeRequest {
        JudgeRequest {
            template_id: template,
            prompt: vocab.detokenize(&self.prompt.tokens),
            completion_a: vocab.detokenize(&self.slot_a.tokens),
            completion_b: vocab.detokenize(&self.slot_b.tokens),
            temperature,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub template_id: TemplateId,
    pub prompt: String,
    pub completion_a: String,
    pub completion_b: String,
    pub temperature: f64,
}

/// An oracle's answer in slot terms, before demapping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawJudgement {
    pub choice: Slot,
    pub rationale: Option<String>,
    pub latency_ms: u64,
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// One resolved label. `winner_index` refers to the original completions (0 = y1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleJudgement {
    pub pair_id: String,
    pub oracle_id: String,
    pub raw_choice: Slot,
    pub winner_index: usize,
    pub rationale: Option<String>,
    pub presented_order: OrderMap,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "is_false")]
    pub degenerate: bool,
}

impl OracleJudgement {
    pub fn from_raw(pair: &PresentedPair, raw: RawJudgement, oracle_id: &str) -> Self {
        Self {
            pair_id: pair.pair_id.clone(),
            oracle_id: oracle_id.to_string(),
            raw_choice: raw.choice,
            winner_index: pair.order.demap(raw.choice),
            rationale: raw.rationale,
            presented_order: pair.order,
            latency_ms: raw.latency_ms,
            degenerate: pair.slot_a.tokens == pair.slot_b.tokens,
        }
    }
}

pub trait Oracle: Send + Sync {
    fn id(&self) -> &str;

    fn choose(&self, item: &PresentedPair) -> Result<RawJudgement>;

    /// Labels a batch; results come back in input order.
    fn choose_batch(&self, items: &[PresentedPair]) -> Vec<Result<RawJudgement>> {
        items.iter().map(|i| self.choose(i)).collect()
    }
}

/// Assigns y1/y2 to slots A/B with a seeded fair coin.
pub fn present_randomized(pair: &PairInput, seed: u64) -> (PresentedPair, OrderMap) {
    let mut rng = rng_from_seed(seed);
    let order = if rng.gen::<bool>() {
        OrderMap::IDENTITY
    } else {
        OrderMap::SWAPPED
    };
    let (a, b) = match order.slot_a {
        0 => (&pair.y1, &pair.y2),
        _ => (&pair.y2, &pair.y1),
    };
    let presented = PresentedPair {
        pair_id: pair.pair_id.clone(),
        prompt: pair.prompt.clone(),
        slot_a: a.clone(),
        slot_b: b.clone(),
        order,
    };
    (presented, order)
}

/// Randomizes, queries and demaps a batch of pairs. `seeds[i]` drives the coin
/// for `pairs[i]`.
pub fn label_batch(oracle: &dyn Oracle, pairs: &[PairInput], seeds: &[u64]) -> Vec<Result<OracleJudgement>> {
    assert_eq!(pairs.len(), seeds.len());
    let presented: Vec<PresentedPair> = pairs
        .iter()
        .zip(seeds)
        .map(|(p, &s)| present_randomized(p, s).0)
        .collect();
    oracle
        .choose_batch(&presented)
        .into_iter()
        .zip(&presented)
        .map(|(raw, item)| raw.map(|r| OracleJudgement::from_raw(item, r, oracle.id())))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    /// Fraction of evaluated pairs whose demapped winner was unanimous.
    pub consistency: f64,
    pub evaluated: usize,
    pub failed: usize,
}

/// Queries every pair `repeats` times under independent slot randomization.
/// Pairs with any oracle error are excluded and counted in `failed`.
pub fn consistency_check(oracle: &dyn Oracle, pairs: &[PairInput], repeats: usize, seed: u64) -> Result<ConsistencyReport> {
    if repeats < 2 {
        return Err(AplError::invalid("consistency check needs at least two repeats"));
    }
    let mut winners: Vec<Vec<Option<usize>>> = vec![Vec::with_capacity(repeats); pairs.len()];
    for r in 0..repeats {
        let seeds: Vec<u64> = (0..pairs.len())
            .map(|i| crate::rng::derive_seed(seed, crate::rng::Stream::OrderRandomization, r as u64, i as u64))
            .collect();
        for (i, res) in label_batch(oracle, pairs, &seeds).into_iter().enumerate() {
            winners[i].push(res.ok().map(|j| j.winner_index));
        }
    }
    let mut evaluated = 0;
    let mut failed = 0;
    let mut unanimous = 0;
    for w in &winners {
        if w.iter().any(Option::is_none) {
            failed += 1;
            continue;
        }
        evaluated += 1;
        if w.iter().all(|x| *x == w[0]) {
            unanimous += 1;
        }
    }
    let consistency = if evaluated == 0 {
        0.0
    } else {
        unanimous as f64 / evaluated as f64
    };
    Ok(ConsistencyReport { consistency, evaluated, failed })
}

/// Prefix lengths for review-style prompts.
pub const REVIEW_TRUNCATION: RangeInclusive<usize> = 8..=16;
/// Prefix lengths used for the synthetic valence task.
pub const DESK_TRUNCATION: RangeInclusive<usize> = 4..=8;

/// Keeps a prefix whose length is drawn uniformly from `range`, clamped to the input.
pub fn truncate_prompt<R: Rng + ?Sized>(tokens: &TokenSequence, rng: &mut R, range: RangeInclusive<usize>) -> Result<TokenSequence> {
    if tokens.is_empty() {
        return Err(AplError::invalid("cannot truncate an empty prompt"));
    }
    if range.is_empty() || *range.start() == 0 {
        return Err(AplError::invalid("truncation range must be nonempty and start at 1 or more"));
    }
    let keep = rng.gen_range(range).min(tokens.len());
    Ok(TokenSequence::new(tokens.tokens[..keep].to_vec()))
}

pub fn write_judgements_jsonl(path: &std::path::Path, judgements: &[OracleJudgement]) -> Result<()> {
    let mut out = String::new();
    for j in judgements {
        out.push_str(&serde_json::to_string(j)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_judgements_jsonl(path: &std::path::Path) -> Result<Vec<OracleJudgement>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(AplError::from))
        .collect()
}

#[cfg(test)]
mod tests;
