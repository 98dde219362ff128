//! Candidate scoring and top-M selection: random, predictive entropy, preference
//! certainty, and the entropy-then-certainty hybrid.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dpo::implicit_reward;
use crate::error::{AplError, Result};
use crate::policy::PolicyParams;
use crate::rng::{stream_rng, Stream};
use crate::vocab::TokenSequence;

/// Extra draws allowed when both sampled completions come out identical.
pub const MAX_REGENERATIONS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Random,
    Entropy,
    Certainty,
    Hybrid,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Entropy => "entropy",
            Strategy::Certainty => "certainty",
            Strategy::Hybrid => "hybrid",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Strategy {
    type Err = AplError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Strategy::Random),
            "entropy" => Ok(Strategy::Entropy),
            "certainty" => Ok(Strategy::Certainty),
            "hybrid" => Ok(Strategy::Hybrid),
            other => Err(AplError::invalid(format!("unknown strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionConfig {
    pub strategy: Strategy,
    /// S: prompts scored per step.
    pub pool_size: usize,
    /// M: candidates kept per step.
    pub batch_size: usize,
    /// J: hybrid draws J·S prompts before the entropy cut.
    pub oversample: usize,
    /// N: Monte-Carlo samples per entropy estimate.
    pub mc_samples: usize,
    pub gen_temperature: f64,
    pub entropy_temperature: f64,
    pub max_tokens: usize,
    pub beta: f64,
    /// Score with per-token averaged log-probabilities instead of sums.
    pub length_normalized: bool,
    /// Seed for this acquisition round; all per-prompt streams derive from it.
    pub seed: u64,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Certainty,
            pool_size: 256,
            batch_size: 64,
            oversample: 4,
            mc_samples: 8,
            gen_temperature: 0.7,
            entropy_temperature: 1.0,
            max_tokens: 8,
            beta: 0.2,
            length_normalized: false,
            seed: 0,
        }
    }
}

impl AcquisitionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(AplError::config("batch", "acquisition batch M must be positive"));
        }
        if self.batch_size > self.pool_size {
            return Err(AplError::config("batch", "acquisition batch M exceeds pool sample S"));
        }
        if self.oversample == 0 {
            return Err(AplError::config("oversample", "J must be at least 1"));
        }
        if self.mc_samples == 0 {
            return Err(AplError::config("mc_samples", "N must be at least 1"));
        }
        if self.max_tokens == 0 {
            return Err(AplError::config("max_tokens", "must be positive"));
        }
        if !(self.gen_temperature >= 0.0) || !(self.entropy_temperature >= 0.0) {
            return Err(AplError::config("gen_temperature", "temperatures must be nonnegative"));
        }
        Ok(())
    }

    /// Prompts that must be drawn from the pool for this strategy.
    pub fn prompts_needed(&self) -> usize {
        match self.strategy {
            Strategy::Hybrid => self.pool_size * self.oversample,
            _ => self.pool_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub prompt_index: usize,
    pub prompt: TokenSequence,
    pub y1: TokenSequence,
    pub y2: TokenSequence,
    pub entropy_score: Option<f64>,
    pub certainty_score: Option<f64>,
}

impl ScoredCandidate {
    pub fn identical(&self) -> bool {
        self.y1.tokens == self.y2.tokens
    }
}

/// One scored row of the sampled pool, for the optional scores dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub prompt_index: usize,
    pub entropy: Option<f64>,
    pub certainty: Option<f64>,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Acquisition {
    pub selected: Vec<ScoredCandidate>,
    pub scored: Vec<ScoreRow>,
}

fn sequence_score(params: &PolicyParams, prompt: &TokenSequence, y: &TokenSequence, normalized: bool) -> Result<f64> {
    let lp = params.logprob(prompt, y)?;
    Ok(if normalized { lp / y.len() as f64 } else { lp })
}

/// Monte-Carlo predictive entropy −(1/N) Σ log p_θ(yⁿ|x), yⁿ drawn at `temperature`.
pub fn predictive_entropy(
    params: &PolicyParams,
    prompt: &TokenSequence,
    n: usize,
    temperature: f64,
    max_tokens: usize,
    seed: u64,
) -> Result<f64> {
    entropy_estimate(params, prompt, n, temperature, max_tokens, seed, false)
}

fn entropy_estimate(
    params: &PolicyParams,
    prompt: &TokenSequence,
    n: usize,
    temperature: f64,
    max_tokens: usize,
    seed: u64,
    normalized: bool,
) -> Result<f64> {
    if n == 0 {
        return Err(AplError::invalid("entropy needs at least one sample"));
    }
    let mut rng = crate::rng::rng_from_seed(seed);
    let mut total = 0.0;
    for _ in 0..n {
        let y = params.sample_with(prompt, temperature, max_tokens, &mut rng)?;
        total += sequence_score(params, prompt, &y, normalized)?;
    }
    // + 0.0 folds a negative zero into zero
    Ok(-(total / n as f64) + 0.0)
}

/// |r̂(x,y1) − r̂(x,y2)|.
pub fn preference_certainty(
    params: &PolicyParams,
    reference: &PolicyParams,
    beta: f64,
    prompt: &TokenSequence,
    y1: &TokenSequence,
    y2: &TokenSequence,
) -> Result<f64> {
    let r1 = implicit_reward(params, reference, beta, prompt, y1)?;
    let r2 = implicit_reward(params, reference, beta, prompt, y2)?;
    Ok((r1 - r2).abs())
}

fn certainty_score(
    params: &PolicyParams,
    reference: &PolicyParams,
    cfg: &AcquisitionConfig,
    c: &ScoredCandidate,
) -> Result<f64> {
    if !cfg.length_normalized {
        return preference_certainty(params, reference, cfg.beta, &c.prompt, &c.y1, &c.y2);
    }
    let r = |y: &TokenSequence| -> Result<f64> {
        Ok(cfg.beta
            * (sequence_score(params, &c.prompt, y, true)? - sequence_score(reference, &c.prompt, y, true)?))
    };
    Ok((r(&c.y1)? - r(&c.y2)?).abs())
}

/// Uniform sample without replacement via a partial Fisher–Yates shuffle. The
/// first m indices are the same whatever `count` is, so strategies that draw
/// different numbers of prompts still share a common prefix.
pub fn sample_pool_indices<R: Rng + ?Sized>(rng: &mut R, pool_len: usize, count: usize) -> Vec<usize> {
    let count = count.min(pool_len);
    let mut idx: Vec<usize> = (0..pool_len).collect();
    for i in 0..count {
        let j = rng.gen_range(i..pool_len);
        idx.swap(i, j);
    }
    idx.truncate(count);
    idx
}

/// Samples two completions for one prompt from its own derived stream, redrawing
/// (up to [`MAX_REGENERATIONS`] times) while they coincide.
pub fn generate_pair(
    params: &PolicyParams,
    prompt: &TokenSequence,
    temperature: f64,
    max_tokens: usize,
    seed: u64,
    prompt_index: usize,
) -> Result<(TokenSequence, TokenSequence)> {
    let mut rng = stream_rng(seed, Stream::Generation, 0, prompt_index as u64);
    let y1 = params.sample_with(prompt, temperature, max_tokens, &mut rng)?;
    let mut y2 = params.sample_with(prompt, temperature, max_tokens, &mut rng)?;
    let mut tries = 0;
    while y2.tokens == y1.tokens && tries < MAX_REGENERATIONS {
        y2 = params.sample_with(prompt, temperature, max_tokens, &mut rng)?;
        tries += 1;
    }
    Ok((y1, y2))
}

/// Positions of the `m` best scores, ordered by descending score then ascending prompt index.
fn top_m(scores: &[(usize, f64)], m: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .1
            .total_cmp(&scores[a].1)
            .then(scores[a].0.cmp(&scores[b].0))
    });
    order.truncate(m);
    order
}

pub fn acquire_batch(
    params: &PolicyParams,
    reference: &PolicyParams,
    pool: &[TokenSequence],
    cfg: &AcquisitionConfig,
) -> Result<Vec<ScoredCandidate>> {
    acquire_batch_detailed(params, reference, pool, cfg).map(|a| a.selected)
}

/// As [`acquire_batch`], additionally returning the scores of every sampled prompt.
pub fn acquire_batch_detailed(
    params: &PolicyParams,
    reference: &PolicyParams,
    pool: &[TokenSequence],
    cfg: &AcquisitionConfig,
) -> Result<Acquisition> {
    cfg.validate()?;
    params.same_arch(reference)?;
    let needed = cfg.prompts_needed();
    if pool.len() < needed {
        return Err(AplError::invalid(format!(
            "prompt pool has {} prompts, strategy {} needs {needed}",
            pool.len(),
            cfg.strategy
        )));
    }
    let mut rng = stream_rng(cfg.seed, Stream::PoolSampling, 0, 0);
    let sampled = sample_pool_indices(&mut rng, pool.len(), needed);

    let entropy_of = |idx: &usize| -> Result<(usize, f64)> {
        let seed = crate::rng::derive_seed(cfg.seed, Stream::EntropyMc, 0, *idx as u64);
        let h = entropy_estimate(
            params,
            &pool[*idx],
            cfg.mc_samples,
            cfg.entropy_temperature,
            cfg.max_tokens,
            seed,
            cfg.length_normalized,
        )?;
        Ok((*idx, h))
    };
    let candidate_for = |idx: usize, entropy: Option<f64>| -> Result<ScoredCandidate> {
        let (y1, y2) = generate_pair(params, &pool[idx], cfg.gen_temperature, cfg.max_tokens, cfg.seed, idx)?;
        Ok(ScoredCandidate {
            prompt_index: idx,
            prompt: pool[idx].clone(),
            y1,
            y2,
            entropy_score: entropy,
            certainty_score: None,
        })
    };
    let with_certainty = |mut c: ScoredCandidate| -> Result<ScoredCandidate> {
        c.certainty_score = Some(certainty_score(params, reference, cfg, &c)?);
        Ok(c)
    };

    let m = cfg.batch_size;
    match cfg.strategy {
        Strategy::Random => {
            let selected = sampled[..m]
                .par_iter()
                .map(|&i| candidate_for(i, None))
                .collect::<Result<Vec<_>>>()?;
            let scored = sampled
                .iter()
                .enumerate()
                .map(|(pos, &i)| ScoreRow { prompt_index: i, entropy: None, certainty: None, selected: pos < m })
                .collect();
            Ok(Acquisition { selected, scored })
        }
        Strategy::Entropy => {
            let ent: Vec<(usize, f64)> = sampled.par_iter().map(entropy_of).collect::<Result<_>>()?;
            let keep = top_m(&ent, m);
            let selected = keep
                .par_iter()
                .map(|&p| candidate_for(ent[p].0, Some(ent[p].1)))
                .collect::<Result<Vec<_>>>()?;
            let mut scored: Vec<ScoreRow> = ent
                .iter()
                .map(|&(i, h)| ScoreRow { prompt_index: i, entropy: Some(h), certainty: None, selected: false })
                .collect();
            keep.iter().for_each(|&p| scored[p].selected = true);
            Ok(Acquisition { selected, scored })
        }
        Strategy::Certainty => {
            let cands: Vec<ScoredCandidate> = sampled
                .par_iter()
                .map(|&i| candidate_for(i, None).and_then(with_certainty))
                .collect::<Result<_>>()?;
            Ok(select_by_certainty(cands, m, Vec::new()))
        }
        Strategy::Hybrid => {
            let ent: Vec<(usize, f64)> = sampled.par_iter().map(entropy_of).collect::<Result<_>>()?;
            let keep = top_m(&ent, cfg.pool_size);
            let mut dropped: Vec<ScoreRow> = ent
                .iter()
                .map(|&(i, h)| ScoreRow { prompt_index: i, entropy: Some(h), certainty: None, selected: false })
                .collect();
            let mut kept_flags = vec![false; ent.len()];
            keep.iter().for_each(|&p| kept_flags[p] = true);
            dropped = dropped
                .into_iter()
                .zip(&kept_flags)
                .filter(|(_, &k)| !k)
                .map(|(r, _)| r)
                .collect();
            let cands: Vec<ScoredCandidate> = keep
                .par_iter()
                .map(|&p| candidate_for(ent[p].0, Some(ent[p].1)).and_then(with_certainty))
                .collect::<Result<_>>()?;
            Ok(select_by_certainty(cands, m, dropped))
        }
    }
}

fn select_by_certainty(cands: Vec<ScoredCandidate>, m: usize, mut extra_rows: Vec<ScoreRow>) -> Acquisition {
    let scores: Vec<(usize, f64)> = cands
        .iter()
        .map(|c| (c.prompt_index, c.certainty_score.unwrap_or(0.0)))
        .collect();
    let keep = top_m(&scores, m);
    let mut flags = vec![false; cands.len()];
    keep.iter().for_each(|&p| flags[p] = true);
    let mut scored: Vec<ScoreRow> = cands
        .iter()
        .zip(&flags)
        .map(|(c, &sel)| ScoreRow {
            prompt_index: c.prompt_index,
            entropy: c.entropy_score,
            certainty: c.certainty_score,
            selected: sel,
        })
        .collect();
    scored.append(&mut extra_rows);
    let selected = keep.iter().map(|&p| cands[p].clone()).collect();
    Acquisition { selected, scored }
}

/// CSV with columns prompt_index, entropy, certainty, selected.
pub fn write_scores_csv(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests;
