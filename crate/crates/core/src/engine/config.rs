use serde::{Deserialize, Serialize};

use crate::acquisition::{AcquisitionConfig, Strategy};
use crate::dpo::DpoConfig;
use crate::error::{AplError, Result};
use crate::rng::{derive_seed, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Re-initialise to θ0 and fine-tune on all acquired data after every step.
    #[default]
    Reset,
    /// Keep θt and take one optimizer step on the newest batch.
    Online,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Reset => "reset",
            Mode::Online => "online",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = AplError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reset" => Ok(Mode::Reset),
            "online" => Ok(Mode::Online),
            _ => Err(AplError::invalid(format!("unknown mode `{s}` (expected reset or online)"))),
        }
    }
}

/// Everything that determines a run. `beta` is authoritative and overrides `dpo.beta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// B: total labelling budget.
    pub budget: usize,
    /// M: pairs labelled per step.
    pub batch: usize,
    /// S: prompts scored per step.
    pub pool: usize,
    /// J: hybrid oversampling factor.
    pub oversample: usize,
    /// N: Monte-Carlo samples per entropy estimate.
    pub mc_samples: usize,
    pub beta: f64,
    pub gen_temperature: f64,
    pub eval_temperature: f64,
    pub oracle_temperature: f64,
    pub entropy_temperature: f64,
    pub max_tokens: usize,
    pub length_normalized: bool,
    pub dpo: DpoConfig,
    pub strategy: Strategy,
    pub mode: Mode,
    /// Dataset sizes at which θt is evaluated; 0 evaluates θ0 against itself.
    pub eval_waypoints: Vec<usize>,
    /// Number of held-out prompts used per evaluation.
    pub eval_prompts: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            budget: 512,
            batch: 64,
            pool: 256,
            oversample: 4,
            mc_samples: 8,
            beta: 0.2,
            gen_temperature: 0.7,
            eval_temperature: 0.25,
            oracle_temperature: 0.05,
            entropy_temperature: 1.0,
            max_tokens: 8,
            length_normalized: false,
            dpo: DpoConfig::default(),
            strategy: Strategy::Random,
            mode: Mode::Reset,
            eval_waypoints: vec![0, 64, 128, 256, 512],
            eval_prompts: 512,
            seed: 0,
        }
    }
}

/// T = ⌊B/M⌋.
pub fn plan_steps(budget: usize, batch: usize) -> Result<usize> {
    if budget == 0 {
        return Err(AplError::config("budget", "budget must be positive"));
    }
    if batch == 0 {
        return Err(AplError::config("batch", "batch must be positive"));
    }
    match budget / batch {
        0 => Err(AplError::config(
            "batch",
            format!("budget below one batch: batch M exceeds budget B (M={batch}, B={budget})"),
        )),
        t => Ok(t),
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        plan_steps(self.budget, self.batch)?;
        if self.pool < self.batch {
            return Err(AplError::config(
                "pool",
                format!("pool sample S={} is smaller than batch M={}", self.pool, self.batch),
            ));
        }
        if self.oversample == 0 {
            return Err(AplError::config("oversample", "must be at least 1"));
        }
        if self.mc_samples == 0 {
            return Err(AplError::config("mc_samples", "must be at least 1"));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(AplError::config("beta", "must be positive and finite"));
        }
        for (name, t) in [
            ("gen_temperature", self.gen_temperature),
            ("eval_temperature", self.eval_temperature),
            ("oracle_temperature", self.oracle_temperature),
            ("entropy_temperature", self.entropy_temperature),
        ] {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(AplError::config(name, "temperature must be finite and nonnegative"));
            }
        }
        if self.max_tokens == 0 {
            return Err(AplError::config("max_tokens", "must be at least 1"));
        }
        if self.eval_prompts == 0 {
            return Err(AplError::config("eval_prompts", "must be at least 1"));
        }
        for &w in &self.eval_waypoints {
            if w % self.batch != 0 || w > self.budget {
                return Err(AplError::config(
                    "eval_waypoints",
                    format!("waypoint {w} must be a multiple of M={} no larger than B={}", self.batch, self.budget),
                ));
            }
        }
        self.dpo_config().validate()
    }

    pub fn total_steps(&self) -> usize {
        self.budget / self.batch.max(1)
    }

    /// Budget left over after T full batches.
    pub fn leftover_budget(&self) -> usize {
        self.budget - self.total_steps() * self.batch
    }

    pub fn dpo_config(&self) -> DpoConfig {
        DpoConfig { beta: self.beta, ..self.dpo }
    }

    pub fn is_waypoint(&self, dataset_size: usize) -> bool {
        self.eval_waypoints.contains(&dataset_size)
    }

    /// Acquisition settings for step `t` (1-based). The seed depends on the run
    /// seed and step only, so strategies sharing a seed draw the same pool prefix.
    pub fn acquisition(&self, step: usize) -> AcquisitionConfig {
        AcquisitionConfig {
            strategy: self.strategy,
            pool_size: self.pool,
            batch_size: self.batch,
            oversample: self.oversample,
            mc_samples: self.mc_samples,
            gen_temperature: self.gen_temperature,
            entropy_temperature: self.entropy_temperature,
            max_tokens: self.max_tokens,
            beta: self.beta,
            length_normalized: self.length_normalized,
            seed: derive_seed(self.seed, Stream::PoolSampling, step as u64, 0),
        }
    }
}
