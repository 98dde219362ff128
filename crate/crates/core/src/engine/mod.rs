//! The active preference learning loop: acquire, label, grow the dataset,
//! fine-tune, evaluate at waypoints, checkpoint.

mod config;
mod eval;
mod monitor;
pub mod store;

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use config::{plan_steps, Mode, RunConfig};
pub use eval::{evaluate_winrate, Baseline, WinRate};
pub use monitor::{RunMonitor, RunSnapshot, WaypointMetric};
pub use store::{checkpoint, restore};

use crate::acquisition::{acquire_batch_detailed, write_scores_csv, ScoreRow};
use crate::dpo::{finetune_online, finetune_reset, PreferencePair};
use crate::error::{AplError, Result};
use crate::optim::Adam;
use crate::oracle::{label_batch, Oracle, OracleJudgement, PairInput};
use crate::policy::PolicyParams;
use crate::rng::{derive_seed, Stream};
use crate::vocab::TokenSequence;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    /// Labelling judgements committed to the dataset.
    pub label_calls: usize,
    /// Evaluation judge calls; never drawn from the labelling budget.
    pub eval_calls: usize,
    /// Labelling calls spent on steps that were aborted.
    pub label_failures: usize,
    pub eval_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub dataset_size: usize,
    pub strategy: String,
    pub seed: u64,
    pub win_rate: f64,
    pub stderr: f64,
    pub label_calls: usize,
    pub eval_calls: usize,
}

impl MetricRow {
    pub const HEADER: [&'static str; 8] = [
        "step",
        "dataset_size",
        "strategy",
        "seed",
        "win_rate",
        "stderr",
        "label_calls",
        "eval_calls",
    ];
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    pub step: usize,
    pub total_steps: usize,
    pub dataset: Vec<PreferencePair>,
    pub judgements: Vec<OracleJudgement>,
    pub theta: PolicyParams,
    /// Optimizer moments carried across steps in online mode; untouched in reset mode.
    pub adam: Adam,
    pub counters: Counters,
    pub metrics: Vec<MetricRow>,
}

impl RunState {
    pub fn initial(cfg: &RunConfig, theta0: &PolicyParams) -> Self {
        Self {
            step: 0,
            total_steps: cfg.total_steps(),
            dataset: Vec::new(),
            judgements: Vec::new(),
            theta: theta0.clone(),
            adam: Adam::new(cfg.dpo_config().adam(), theta0.len()),
            counters: Counters::default(),
            metrics: Vec::new(),
        }
    }

    pub fn finished(&self) -> bool {
        self.step >= self.total_steps
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub dataset_size: usize,
    pub evaluation: Option<WinRate>,
    pub scores: Vec<ScoreRow>,
}

pub struct Engine {
    cfg: RunConfig,
    theta0: PolicyParams,
    pool: Vec<TokenSequence>,
    eval_prompts: Vec<TokenSequence>,
    baseline: Baseline,
    oracle: Arc<dyn Oracle>,
    eval_oracle: Arc<dyn Oracle>,
    state: RunState,
    out: Option<PathBuf>,
    monitor: Option<Arc<RunMonitor>>,
    cancel: Arc<AtomicBool>,
    started: bool,
}

impl Engine {
    /// `eval_prompts` must not overlap `pool`; the first `cfg.eval_prompts` are used.
    pub fn new(
        cfg: RunConfig,
        theta0: PolicyParams,
        pool: Vec<TokenSequence>,
        eval_prompts: Vec<TokenSequence>,
        oracle: Arc<dyn Oracle>,
    ) -> Result<Self> {
        cfg.validate()?;
        let needed = cfg.acquisition(1).prompts_needed();
        if pool.len() < needed {
            return Err(AplError::invalid(format!(
                "prompt pool has {} prompts, strategy {} needs {needed}",
                pool.len(),
                cfg.strategy
            )));
        }
        if eval_prompts.len() < cfg.eval_prompts {
            return Err(AplError::invalid(format!(
                "{} evaluation prompts available, config asks for {}",
                eval_prompts.len(),
                cfg.eval_prompts
            )));
        }
        let eval_prompts: Vec<TokenSequence> = eval_prompts.into_iter().take(cfg.eval_prompts).collect();
        let vocab = theta0.arch().vocab;
        for p in pool.iter().chain(&eval_prompts) {
            p.check(vocab)?;
        }
        let train: HashSet<&[u32]> = pool.iter().map(|p| p.as_slice()).collect();
        if let Some(p) = eval_prompts.iter().find(|p| train.contains(p.as_slice())) {
            return Err(AplError::invalid(format!(
                "evaluation prompt {:?} also appears in the training pool",
                p.tokens
            )));
        }
        let state = RunState::initial(&cfg, &theta0);
        Ok(Self {
            baseline: Baseline::Policy(theta0.clone()),
            eval_oracle: oracle.clone(),
            cfg,
            theta0,
            pool,
            eval_prompts,
            oracle,
            state,
            out: None,
            monitor: None,
            cancel: Arc::new(AtomicBool::new(false)),
            started: false,
        })
    }

    /// Judge used for win-rate evaluation when it differs from the labelling oracle.
    pub fn with_eval_oracle(mut self, oracle: Arc<dyn Oracle>) -> Self {
        self.eval_oracle = oracle;
        self
    }

    pub fn with_baseline(mut self, baseline: Baseline) -> Result<Self> {
        if let Baseline::Reference(refs) = &baseline {
            if refs.len() < self.eval_prompts.len() {
                return Err(AplError::invalid("fewer reference completions than evaluation prompts"));
            }
            self.baseline = Baseline::Reference(refs[..self.eval_prompts.len()].to_vec());
        } else {
            self.baseline = baseline;
        }
        Ok(self)
    }

    pub fn with_monitor(mut self, monitor: Arc<RunMonitor>) -> Self {
        monitor.publish(self.snapshot());
        self.monitor = Some(monitor);
        self
    }

    /// Persists the run under `dir`, which must not already hold a run.
    pub fn with_output(mut self, dir: &Path) -> Result<Self> {
        if dir.join("config.json").exists() {
            return Err(AplError::invalid(format!(
                "{} already holds a run; resume it instead",
                dir.display()
            )));
        }
        std::fs::create_dir_all(dir.join("checkpoints"))?;
        std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&self.cfg)?)?;
        self.out = Some(dir.to_path_buf());
        Ok(self)
    }

    /// Reopens a run directory at checkpoint `at` (default: the latest).
    /// Later checkpoints are overwritten as the run advances again.
    pub fn resume(
        run_dir: &Path,
        at: Option<usize>,
        pool: Vec<TokenSequence>,
        eval_prompts: Vec<TokenSequence>,
        oracle: Arc<dyn Oracle>,
    ) -> Result<Self> {
        let step = match at {
            Some(t) => t,
            None => store::latest_step(run_dir)?
                .ok_or_else(|| AplError::invalid(format!("no checkpoints under {}", run_dir.display())))?,
        };
        let (cfg, state) = restore(&store::step_dir(run_dir, step))?;
        let theta0 = store::load_theta0(run_dir)?;
        let mut engine = Engine::new(cfg, theta0, pool, eval_prompts, oracle)?;
        engine.state = state;
        engine.out = Some(run_dir.to_path_buf());
        engine.started = true;
        store::write_run_files(run_dir, &engine.state)?;
        Ok(engine)
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn theta0(&self) -> &PolicyParams {
        &self.theta0
    }

    /// Setting the returned flag stops the run before its next step.
    pub fn cancel_handle(&self) -> Arc<AtomicBool> {
        self.cancel.clone()
    }

    pub fn snapshot(&self) -> RunSnapshot {
        RunSnapshot {
            step: self.state.step,
            total_steps: self.state.total_steps,
            dataset_size: self.state.dataset.len(),
            budget: self.cfg.budget,
            batch: self.cfg.batch,
            strategy: self.cfg.strategy.to_string(),
            mode: self.cfg.mode.to_string(),
            finished: self.state.finished(),
            label_calls: self.state.counters.label_calls,
            eval_calls: self.state.counters.eval_calls,
            waypoint_metrics: self
                .state
                .metrics
                .iter()
                .map(|m| WaypointMetric {
                    size: m.dataset_size,
                    win_rate: m.win_rate,
                    stderr: m.stderr,
                })
                .collect(),
        }
    }

    fn publish(&self) {
        if let Some(m) = &self.monitor {
            m.publish(self.snapshot());
        }
    }

    fn eval_seed(&self) -> u64 {
        derive_seed(self.cfg.seed, Stream::Evaluation, 0, 0)
    }

    fn evaluate(&self, params: &PolicyParams, counters: &mut Counters) -> Result<WinRate> {
        let res = evaluate_winrate(
            params,
            &self.baseline,
            &self.eval_prompts,
            self.eval_oracle.as_ref(),
            self.cfg.eval_temperature,
            self.cfg.max_tokens,
            self.eval_seed(),
        );
        match res {
            Ok(w) => {
                counters.eval_calls += w.oracle_calls;
                counters.eval_failures += w.failures;
                Ok(w)
            }
            Err(e) => {
                counters.eval_failures += 1;
                Err(e)
            }
        }
    }

    fn metric_row(&self, step: usize, size: usize, w: &WinRate, counters: &Counters) -> MetricRow {
        MetricRow {
            step,
            dataset_size: size,
            strategy: self.cfg.strategy.to_string(),
            seed: self.cfg.seed,
            win_rate: w.rate,
            stderr: w.stderr,
            label_calls: counters.label_calls,
            eval_calls: counters.eval_calls,
        }
    }

    fn persist(&self, scores: Option<&[ScoreRow]>) -> Result<()> {
        let Some(dir) = &self.out else { return Ok(()) };
        let cp = store::step_dir(dir, self.state.step);
        checkpoint(&self.cfg, &self.state, &cp)?;
        if let Some(rows) = scores {
            write_scores_csv(&cp.join("scores.csv"), rows)?;
        }
        store::write_run_files(dir, &self.state)?;
        if self.state.finished() {
            store::write_final(dir, &self.cfg, &self.state)?;
        }
        Ok(())
    }

    /// Step 0: evaluates θ0 when 0 is a waypoint and writes the step-0 checkpoint.
    pub fn start(&mut self) -> Result<Option<WinRate>> {
        if self.started {
            return Ok(None);
        }
        let mut counters = self.state.counters;
        let mut eval = None;
        if self.cfg.is_waypoint(0) {
            let w = self.evaluate(&self.theta0, &mut counters)?;
            let row = self.metric_row(0, 0, &w, &counters);
            self.state.metrics.push(row);
            eval = Some(w);
        }
        self.state.counters = counters;
        self.started = true;
        self.persist(None)?;
        self.publish();
        Ok(eval)
    }

    /// Runs one acquisition step. State only changes if the whole step succeeds.
    pub fn step(&mut self) -> Result<StepReport> {
        if self.cancel.load(Ordering::SeqCst) {
            return Err(AplError::Cancelled("run cancelled".into()));
        }
        if self.state.finished() {
            return Err(AplError::RunFinished(self.state.total_steps));
        }
        self.start()?;
        let t = self.state.step + 1;
        let acq = acquire_batch_detailed(&self.state.theta, &self.theta0, &self.pool, &self.cfg.acquisition(t))?;

        let pairs: Vec<PairInput> = acq
            .selected
            .iter()
            .enumerate()
            .map(|(i, c)| PairInput {
                pair_id: format!("t{t}-{i}"),
                prompt: c.prompt.clone(),
                y1: c.y1.clone(),
                y2: c.y2.clone(),
            })
            .collect();
        let seeds: Vec<u64> = (0..pairs.len())
            .map(|i| derive_seed(self.cfg.seed, Stream::OrderRandomization, t as u64, i as u64))
            .collect();
        let results = label_batch(self.oracle.as_ref(), &pairs, &seeds);
        let mut judgements = Vec::with_capacity(results.len());
        let mut first_err = None;
        for r in results {
            match r {
                Ok(j) => judgements.push(j),
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
        if let Some(e) = first_err {
            self.state.counters.label_failures += pairs.len();
            self.publish();
            log::warn!("step {t} aborted during labelling: {e}");
            return Err(e);
        }

        let mut next = self.state.clone();
        for (c, j) in acq.selected.iter().zip(&judgements) {
            let (chosen, rejected) = if j.winner_index == 0 { (&c.y1, &c.y2) } else { (&c.y2, &c.y1) };
            next.dataset.push(PreferencePair {
                prompt: c.prompt.clone(),
                chosen: chosen.clone(),
                rejected: rejected.clone(),
                acquired_step: t,
                entropy: c.entropy_score,
                certainty: c.certainty_score,
            });
        }
        next.judgements.extend(judgements);
        next.counters.label_calls += pairs.len();

        let dpo = self.cfg.dpo_config();
        next.theta = match self.cfg.mode {
            Mode::Reset => finetune_reset(
                &self.theta0,
                &next.dataset,
                &dpo,
                derive_seed(self.cfg.seed, Stream::Shuffling, t as u64, 0),
            )?,
            Mode::Online => {
                let newest = &next.dataset[next.dataset.len() - pairs.len()..];
                finetune_online(&next.theta, &self.theta0, newest, &dpo, &mut next.adam)?
            }
        };
        next.step = t;

        let mut evaluation = None;
        if self.cfg.is_waypoint(next.dataset.len()) {
            let mut counters = next.counters;
            let w = self.evaluate(&next.theta, &mut counters);
            next.counters = counters;
            let w = match w {
                Ok(w) => w,
                Err(e) => {
                    self.state.counters.eval_calls = next.counters.eval_calls;
                    self.state.counters.eval_failures = next.counters.eval_failures;
                    self.state.counters.label_failures += pairs.len();
                    self.publish();
                    return Err(e);
                }
            };
            let row = self.metric_row(t, next.dataset.len(), &w, &next.counters);
            next.metrics.push(row);
            evaluation = Some(w);
        }

        self.state = next;
        self.persist(Some(&acq.scored))?;
        self.publish();
        log::info!(
            "step {t}/{}: dataset {} {}",
            self.state.total_steps,
            self.state.dataset.len(),
            evaluation.map(|w| format!("win-rate {:.3} ± {:.3}", w.rate, w.stderr)).unwrap_or_default()
        );
        Ok(StepReport {
            step: t,
            dataset_size: self.state.dataset.len(),
            evaluation,
            scores: acq.scored,
        })
    }

    /// Runs the remaining steps.
    pub fn run(&mut self) -> Result<&RunState> {
        self.start()?;
        while !self.state.finished() {
            self.step()?;
        }
        Ok(&self.state)
    }
}
