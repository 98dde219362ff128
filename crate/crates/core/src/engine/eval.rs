use serde::{Deserialize, Serialize};

use crate::error::{AplError, Result};
use crate::oracle::{label_batch, Oracle, PairInput};
use crate::policy::PolicyParams;
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::vocab::TokenSequence;

/// Step index reserved for evaluation order randomization.
const EVAL_STEP: u64 = u64::MAX;

/// What θt is compared against.
#[derive(Debug, Clone, PartialEq)]
pub enum Baseline {
    /// Completions sampled from a fixed policy, normally θ0.
    Policy(PolicyParams),
    /// One gold completion per test prompt.
    Reference(Vec<TokenSequence>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WinRate {
    pub rate: f64,
    /// Binomial standard error sqrt(r(1−r)/n).
    pub stderr: f64,
    /// Prompts that contributed (judged plus ties).
    pub n: usize,
    /// Prompts where both completions were identical, scored 0.5 without a judge call.
    pub ties: usize,
    /// Prompts dropped because the judge failed.
    pub failures: usize,
    pub oracle_calls: usize,
}

/// Samples one completion per prompt from `params` and from the baseline, judges
/// each pair under order randomization and returns the fraction won by `params`.
/// Completion streams are keyed by prompt index only, so repeated evaluations
/// with one seed see the same baseline completions.
pub fn evaluate_winrate(
    params: &PolicyParams,
    baseline: &Baseline,
    prompts: &[TokenSequence],
    oracle: &dyn Oracle,
    temperature: f64,
    max_tokens: usize,
    seed: u64,
) -> Result<WinRate> {
    if prompts.is_empty() {
        return Err(AplError::invalid("no evaluation prompts"));
    }
    if let Baseline::Reference(refs) = baseline {
        if refs.len() != prompts.len() {
            return Err(AplError::invalid(format!(
                "{} reference completions for {} prompts",
                refs.len(),
                prompts.len()
            )));
        }
    }
    let mut pairs = Vec::new();
    let mut seeds = Vec::new();
    let mut ties = 0usize;
    for (i, prompt) in prompts.iter().enumerate() {
        let mine = params.sample_with(prompt, temperature, max_tokens, &mut stream_rng(seed, Stream::Evaluation, 0, i as u64))?;
        let theirs = match baseline {
            Baseline::Policy(b) => {
                b.sample_with(prompt, temperature, max_tokens, &mut stream_rng(seed, Stream::EvaluationBaseline, 0, i as u64))?
            }
            Baseline::Reference(refs) => refs[i].clone(),
        };
        if mine == theirs {
            ties += 1;
            continue;
        }
        pairs.push(PairInput {
            pair_id: format!("eval-{i}"),
            prompt: prompt.clone(),
            y1: mine,
            y2: theirs,
        });
        seeds.push(derive_seed(seed, Stream::OrderRandomization, EVAL_STEP, i as u64));
    }
    let mut wins = 0usize;
    let mut judged = 0usize;
    let mut failures = 0usize;
    let mut first_err = None;
    for res in label_batch(oracle, &pairs, &seeds) {
        match res {
            Ok(j) => {
                judged += 1;
                wins += (j.winner_index == 0) as usize;
            }
            Err(AplError::Cancelled(m)) => return Err(AplError::Cancelled(m)),
            Err(e) => {
                failures += 1;
                log::warn!("evaluation judgement failed: {e}");
                first_err.get_or_insert(e);
            }
        }
    }
    let n = judged + ties;
    if n == 0 {
        return Err(first_err.unwrap_or_else(|| AplError::invalid("no evaluation outcomes")));
    }
    let rate = (wins as f64 + 0.5 * ties as f64) / n as f64;
    Ok(WinRate {
        rate,
        stderr: (rate * (1.0 - rate) / n as f64).sqrt(),
        n,
        ties,
        failures,
        oracle_calls: pairs.len(),
    })
}
