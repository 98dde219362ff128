//! DPO objective, implicit reward, gradients and the two fine-tuning regimes.

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{AplError, Result};
use crate::optim::{Adam, AdamConfig};
use crate::policy::PolicyParams;
use crate::rng::{stream_rng, Stream};
use crate::vocab::TokenSequence;

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log σ(x) without overflow in either tail.
pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub patience: usize,
    pub min_delta: f64,
    /// Fraction of the dataset held out for the validation loss.
    pub validation_fraction: f64,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self {
            patience: 5,
            min_delta: 1e-4,
            validation_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpoConfig {
    pub beta: f64,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub minibatch: usize,
    pub epochs: usize,
    pub early_stop: Option<EarlyStop>,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.2,
            lr: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            minibatch: 16,
            epochs: 30,
            early_stop: None,
        }
    }
}

impl DpoConfig {
    /// Hyperparameters used for the billion-parameter models (β 0.2, Adam lr 1e-6,
    /// minibatch 64, 50 epochs). Kept for reference; too small a step for desk scale.
    pub fn large_model_preset() -> Self {
        Self {
            lr: 1e-6,
            minibatch: 64,
            epochs: 50,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(AplError::config("dpo.beta", "beta must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(AplError::config("dpo.lr", "learning rate must be positive"));
        }
        for (name, b) in [("dpo.adam_beta1", self.adam_beta1), ("dpo.adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(AplError::config(name, "must lie in (0, 1)"));
            }
        }
        if self.minibatch == 0 {
            return Err(AplError::config("dpo.minibatch", "minibatch must be at least 1"));
        }
        if let Some(es) = &self.early_stop {
            if !(es.validation_fraction > 0.0 && es.validation_fraction < 1.0) {
                return Err(AplError::config(
                    "dpo.early_stop.validation_fraction",
                    "must lie in (0, 1)",
                ));
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// One labelled comparison: `chosen` (y_w) was preferred over `rejected` (y_l).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: TokenSequence,
    pub chosen: TokenSequence,
    pub rejected: TokenSequence,
    #[serde(rename = "step")]
    pub acquired_step: usize,
    pub entropy: Option<f64>,
    pub certainty: Option<f64>,
}

impl PreferencePair {
    pub fn new(prompt: TokenSequence, chosen: TokenSequence, rejected: TokenSequence) -> Self {
        Self {
            prompt,
            chosen,
            rejected,
            acquired_step: 0,
            entropy: None,
            certainty: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.chosen.tokens == self.rejected.tokens {
            return Err(AplError::invalid("chosen and rejected completions are identical"));
        }
        Ok(())
    }
}

pub fn write_pairs_jsonl(path: &Path, pairs: &[PreferencePair]) -> Result<()> {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&serde_json::to_string(p)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_pairs_jsonl(path: &Path) -> Result<Vec<PreferencePair>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(AplError::from))
        .collect()
}

/// β · (log p_θ(y|x) − log p_ref(y|x)).
pub fn implicit_reward(
    params: &PolicyParams,
    reference: &PolicyParams,
    beta: f64,
    prompt: &TokenSequence,
    completion: &TokenSequence,
) -> Result<f64> {
    params.same_arch(reference)?;
    let cur = params.logprob(prompt, completion)?;
    let base = reference.logprob(prompt, completion)?;
    Ok(beta * (cur - base))
}

/// r̂(x, y_w) − r̂(x, y_l).
pub fn reward_margin(
    params: &PolicyParams,
    reference: &PolicyParams,
    beta: f64,
    pair: &PreferencePair,
) -> Result<f64> {
    Ok(implicit_reward(params, reference, beta, &pair.prompt, &pair.chosen)?
        - implicit_reward(params, reference, beta, &pair.prompt, &pair.rejected)?)
}

fn check_batch(params: &PolicyParams, reference: &PolicyParams, batch: &[PreferencePair]) -> Result<()> {
    if batch.is_empty() {
        return Err(AplError::invalid("preference batch is empty"));
    }
    params.same_arch(reference)
}

/// −mean log σ(r̂(x,y_w) − r̂(x,y_l)).
pub fn dpo_loss(
    params: &PolicyParams,
    reference: &PolicyParams,
    beta: f64,
    batch: &[PreferencePair],
) -> Result<f64> {
    check_batch(params, reference, batch)?;
    let mut total = 0.0;
    for pair in batch {
        total -= log_sigmoid(reward_margin(params, reference, beta, pair)?);
    }
    Ok(total / batch.len() as f64)
}

/// Per-pair weights w = σ(r̂(x,y_l) − r̂(x,y_w)).
pub fn dpo_weights(
    params: &PolicyParams,
    reference: &PolicyParams,
    beta: f64,
    batch: &[PreferencePair],
) -> Result<Vec<f64>> {
    check_batch(params, reference, batch)?;
    batch
        .iter()
        .map(|p| Ok(sigmoid(-reward_margin(params, reference, beta, p)?)))
        .collect()
}

/// Reference-policy log-probabilities (chosen, rejected) for each pair. These stay
/// fixed for a whole fine-tuning run so they are computed once.
pub fn reference_logprobs(reference: &PolicyParams, batch: &[PreferencePair]) -> Result<Vec<(f64, f64)>> {
    batch
        .par_iter()
        .map(|p| {
            Ok((
                reference.logprob(&p.prompt, &p.chosen)?,
                reference.logprob(&p.prompt, &p.rejected)?,
            ))
        })
        .collect()
}

/// Gradient of the DPO loss in the weighted-difference form
/// −β · mean[ w · (∇ log p_θ(y_w|x) − ∇ log p_θ(y_l|x)) ].
pub fn dpo_grad(
    params: &PolicyParams,
    reference: &PolicyParams,
    beta: f64,
    batch: &[PreferencePair],
) -> Result<Vec<f64>> {
    check_batch(params, reference, batch)?;
    let ref_lp = reference_logprobs(reference, batch)?;
    let refs: Vec<&PreferencePair> = batch.iter().collect();
    dpo_grad_cached(params, &ref_lp, beta, &refs).map(|(g, _)| g)
}

/// Weighted-difference gradient against cached reference log-probs. Returns the
/// gradient and the batch loss. Pairs are processed in parallel and summed in
/// batch order, so the result does not depend on scheduling.
pub(crate) fn dpo_grad_cached(
    params: &PolicyParams,
    ref_lp: &[(f64, f64)],
    beta: f64,
    batch: &[&PreferencePair],
) -> Result<(Vec<f64>, f64)> {
    let n = params.len();
    let scale = -beta / batch.len() as f64;
    let per_pair: Vec<(Vec<f64>, f64)> = batch
        .par_iter()
        .zip(ref_lp.par_iter())
        .map(|(pair, &(ref_w, ref_l))| {
            let mut gw = vec![0.0; n];
            let mut gl = vec![0.0; n];
            let lw = params.accumulate_grad_logprob(&pair.prompt, &pair.chosen, 1.0, &mut gw)?;
            let ll = params.accumulate_grad_logprob(&pair.prompt, &pair.rejected, 1.0, &mut gl)?;
            let margin = beta * (lw - ref_w) - beta * (ll - ref_l);
            let w = sigmoid(-margin);
            for (a, b) in gw.iter_mut().zip(&gl) {
                *a = scale * w * (*a - b);
            }
            Ok((gw, -log_sigmoid(margin)))
        })
        .collect::<Result<_>>()?;
    let mut grad = vec![0.0; n];
    let mut loss = 0.0;
    for (g, l) in per_pair {
        for (acc, x) in grad.iter_mut().zip(&g) {
            *acc += x;
        }
        loss += l;
    }
    Ok((grad, loss / batch.len() as f64))
}

/// Gradient of the DPO loss by reverse-mode differentiation through the loss:
/// a forward pass for the margins, then ∂L/∂margin is pushed back into each
/// sequence's token logits with the appropriate sign. Independent of
/// [`dpo_grad`]'s explicit weight formula.
pub fn dpo_grad_backprop(
    params: &PolicyParams,
    reference: &PolicyParams,
    beta: f64,
    batch: &[PreferencePair],
) -> Result<Vec<f64>> {
    check_batch(params, reference, batch)?;
    let b = batch.len() as f64;
    let mut grad = vec![0.0; params.len()];
    for pair in batch {
        let margin = reward_margin(params, reference, beta, pair)?;
        // L_i = -log σ(m) / B  ⇒  ∂L_i/∂m = -(1 - σ(m)) / B
        let dl_dm = -(1.0 - sigmoid(margin)) / b;
        // m = β lp(y_w) - β lp(y_l) + const
        params.accumulate_grad_logprob(&pair.prompt, &pair.chosen, dl_dm * beta, &mut grad)?;
        params.accumulate_grad_logprob(&pair.prompt, &pair.rejected, -dl_dm * beta, &mut grad)?;
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// Resets to θ0 and fine-tunes on the whole dataset; the reference policy is θ0
/// and the optimizer state starts fresh.
pub fn finetune_reset(
    theta0: &PolicyParams,
    dataset: &[PreferencePair],
    cfg: &DpoConfig,
    seed: u64,
) -> Result<PolicyParams> {
    finetune_reset_traced(theta0, dataset, cfg, seed).map(|(p, _)| p)
}

/// As [`finetune_reset`], also returning per-epoch mean minibatch loss (and the
/// validation loss when early stopping is enabled).
pub fn finetune_reset_traced(
    theta0: &PolicyParams,
    dataset: &[PreferencePair],
    cfg: &DpoConfig,
    seed: u64,
) -> Result<(PolicyParams, Vec<EpochStat>)> {
    if dataset.is_empty() {
        return Err(AplError::invalid("preference dataset is empty"));
    }
    cfg.validate()?;
    let arch = theta0.arch();
    let ref_lp = reference_logprobs(theta0, dataset)?;

    let mut train_idx: Vec<usize> = (0..dataset.len()).collect();
    let mut val_idx: Vec<usize> = Vec::new();
    if let Some(es) = &cfg.early_stop {
        let mut rng = stream_rng(seed, Stream::Shuffling, u64::MAX, 0);
        train_idx.shuffle(&mut rng);
        let n_val = ((dataset.len() as f64 * es.validation_fraction).round() as usize)
            .clamp(1, dataset.len().saturating_sub(1).max(1));
        if dataset.len() > 1 {
            val_idx = train_idx.split_off(dataset.len() - n_val);
            train_idx.sort_unstable();
        }
    }

    let mut values = theta0.values().to_vec();
    let mut adam = Adam::new(cfg.adam(), values.len());
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut best_val = f64::INFINITY;
    let mut best_values = values.clone();
    let mut stale = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order = train_idx.clone();
        let mut rng = stream_rng(seed, Stream::Shuffling, epoch as u64, 0);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.minibatch) {
            let params = PolicyParams::from_values(arch, values.clone())?;
            let pairs: Vec<&PreferencePair> = chunk.iter().map(|&i| &dataset[i]).collect();
            let refs: Vec<(f64, f64)> = chunk.iter().map(|&i| ref_lp[i]).collect();
            let (grad, loss) = dpo_grad_cached(&params, &refs, cfg.beta, &pairs)?;
            adam.step(&mut values, &grad);
            epoch_loss += loss;
            batches += 1;
        }
        let mut stat = EpochStat {
            epoch,
            train_loss: epoch_loss / batches.max(1) as f64,
            val_loss: None,
        };
        if let (Some(es), false) = (&cfg.early_stop, val_idx.is_empty()) {
            let params = PolicyParams::from_values(arch, values.clone())?;
            let val: Vec<PreferencePair> = val_idx.iter().map(|&i| dataset[i].clone()).collect();
            let vl = dpo_loss(&params, theta0, cfg.beta, &val)?;
            stat.val_loss = Some(vl);
            trace.push(stat);
            if vl < best_val - es.min_delta {
                best_val = vl;
                best_values = values.clone();
                stale = 0;
            } else {
                stale += 1;
                if stale >= es.patience {
                    values = best_values.clone();
                    break;
                }
            }
            continue;
        }
        trace.push(stat);
    }
    Ok((PolicyParams::from_values(arch, values)?, trace))
}

/// A single Adam step from θt on the most recent batch. `adam` carries the
/// optimizer moments across calls within a run.
pub fn finetune_online(
    theta_t: &PolicyParams,
    theta0: &PolicyParams,
    latest_batch: &[PreferencePair],
    cfg: &DpoConfig,
    adam: &mut Adam,
) -> Result<PolicyParams> {
    check_batch(theta_t, theta0, latest_batch)?;
    let grad = dpo_grad(theta_t, theta0, cfg.beta, latest_batch)?;
    let mut values = theta_t.values().to_vec();
    adam.step(&mut values, &grad);
    PolicyParams::from_values(theta_t.arch(), values)
}

/// Online fine-tuning state: current parameters plus persistent Adam moments.
#[derive(Debug, Clone)]
pub struct OnlineTrainer {
    pub theta: PolicyParams,
    pub adam: Adam,
    pub cfg: DpoConfig,
}

impl OnlineTrainer {
    pub fn new(theta0: &PolicyParams, cfg: DpoConfig) -> Self {
        Self {
            adam: Adam::new(cfg.adam(), theta0.len()),
            theta: theta0.clone(),
            cfg,
        }
    }

    pub fn step(&mut self, theta0: &PolicyParams, latest_batch: &[PreferencePair]) -> Result<&PolicyParams> {
        self.theta = finetune_online(&self.theta, theta0, latest_batch, &self.cfg, &mut self.adam)?;
        Ok(&self.theta)
    }
}
