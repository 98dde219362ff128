use std::path::{Path, PathBuf};
use std::sync::atomic::Ordering;
use std::sync::{mpsc, Arc};

use serde_json::{json, Value};

use apl_core::analysis::{analyze_runs, AnalyzeOptions};
use apl_core::engine::{evaluate_winrate, Baseline, Engine, RunMonitor};
use apl_core::oracle::{
    consistency_check, HttpTransport, HumanOracle, HumanQueue, LlmJudge, Oracle, PairInput, ValenceOracle,
};
use apl_core::policy::{load_checkpoint, mean_nll, pretrain, save_checkpoint, Arch, PretrainConfig};
use apl_core::rng::{stream_rng, Stream};
use apl_core::task::{generate, SyntheticTask, TaskConfig};
use apl_core::{AplError, PolicyParams, Result};

use crate::args::{
    AnalyzeArgs, ConsistencyArgs, EvalArgs, GenDataArgs, JudgeArgs, ListenArgs, OracleKind, PretrainArgs, RunArgs,
    RunCommand, ServeArgs,
};
use crate::config::{judge_settings, merged_config, JudgeSettings};
use crate::server::{self, ApiState, API_TOKEN_ENV};

pub fn load_task(dir: Option<&Path>) -> Result<SyntheticTask> {
    match dir {
        Some(d) => SyntheticTask::load(d),
        None => {
            log::info!("no data directory given; generating the default synthetic task");
            generate(&TaskConfig::default())
        }
    }
}

pub fn load_base(path: Option<&Path>, task: &SyntheticTask) -> Result<PolicyParams> {
    let params = match path {
        Some(p) => load_checkpoint(p)?,
        None => {
            log::info!("no base checkpoint given; pretraining with default settings");
            let mut cfg = PretrainConfig::default();
            cfg.arch.vocab = task.vocab.len();
            pretrain(&task.corpus, &cfg)?
        }
    };
    if params.arch().vocab != task.vocab.len() {
        return Err(AplError::invalid(format!(
            "base policy has vocabulary {}, data has {}",
            params.arch().vocab,
            task.vocab.len()
        )));
    }
    Ok(params)
}

fn build_oracle(
    kind: OracleKind,
    task: &SyntheticTask,
    judge: Option<&JudgeSettings>,
    temperature: f64,
    queue: Option<&Arc<HumanQueue>>,
) -> Result<Arc<dyn Oracle>> {
    Ok(match kind {
        OracleKind::Valence => Arc::new(ValenceOracle::new(task.valence.clone())),
        OracleKind::Llm => {
            let s = judge.ok_or_else(|| AplError::config("judge", "the llm oracle needs --judge-url and --judge-model"))?;
            let transport = HttpTransport::new(&s.endpoint)?;
            Arc::new(LlmJudge::new(
                Box::new(transport),
                s.endpoint.model.clone(),
                s.template,
                temperature,
                task.vocab.clone(),
            ))
        }
        OracleKind::Human => {
            let q = queue.ok_or_else(|| AplError::config("oracle", "the human oracle needs the labelling API"))?;
            Arc::new(HumanOracle::new(q.clone(), task.vocab.clone()))
        }
    })
}

pub fn gen_data(a: GenDataArgs) -> Result<Value> {
    let d = TaskConfig::default();
    let cfg = TaskConfig {
        seed: a.seed,
        corpus_size: a.corpus_size.unwrap_or(d.corpus_size),
        pool_size: a.pool_size.unwrap_or(d.pool_size),
        eval_size: a.eval_size.unwrap_or(d.eval_size),
        ..d
    };
    let task = generate(&cfg)?;
    task.save(&a.out)?;
    Ok(json!({
        "out": a.out,
        "vocab": task.vocab.len(),
        "corpus": task.corpus.len(),
        "pool": task.pool.len(),
        "eval": task.eval.len(),
    }))
}

pub fn pretrain_cmd(a: PretrainArgs) -> Result<Value> {
    let task = load_task(a.data.as_deref())?;
    let d = PretrainConfig::default();
    let arch = Arch::new(
        task.vocab.len(),
        a.context.unwrap_or(d.arch.context),
        a.embed.unwrap_or(d.arch.embed),
        a.hidden.unwrap_or(d.arch.hidden),
    )?;
    let cfg = PretrainConfig {
        arch,
        epochs: a.epochs.unwrap_or(d.epochs),
        lr: a.lr.unwrap_or(d.lr),
        minibatch: a.minibatch.unwrap_or(d.minibatch),
        seed: a.seed,
    };
    let params = pretrain(&task.corpus, &cfg)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    save_checkpoint(&params, &a.out)?;
    Ok(json!({
        "out": a.out,
        "params": params.len(),
        "mean_nll": mean_nll(&params, &task.corpus)?,
        "eval_nll": mean_nll(&params, &task.eval)?,
    }))
}

/// Runs (or resumes) a loop, serving the labelling API while it runs in human mode.
fn execute_run(run: &RunArgs, out: &Path, listen: &ListenArgs, default_oracle: OracleKind, always_serve: bool) -> Result<Value> {
    let kind = run.oracle.unwrap_or(default_oracle);
    if run.eval_oracle == OracleKind::Human {
        return Err(AplError::config("eval_oracle", "win-rate evaluation cannot use the human oracle"));
    }
    let serve = always_serve || kind == OracleKind::Human;
    if serve {
        server::check_bind(&listen.addr, listen.allow_external)?;
    }
    let cfg = merged_config(run)?;
    let task = load_task(cfg.data_dir.as_deref())?;
    let queue = (kind == OracleKind::Human).then(|| Arc::new(HumanQueue::new()));
    let oracle = build_oracle(kind, &task, cfg.judge.as_ref(), cfg.run.oracle_temperature, queue.as_ref())?;
    let eval_oracle = build_oracle(run.eval_oracle, &task, cfg.judge.as_ref(), cfg.run.oracle_temperature, None)?;
    let monitor = Arc::new(RunMonitor::new());

    let engine = if run.resume {
        log::info!("resuming {}; configuration comes from its checkpoint", out.display());
        Engine::resume(out, None, task.pool.clone(), task.eval.clone(), oracle)?
    } else {
        let theta0 = load_base(cfg.base_checkpoint.as_deref(), &task)?;
        Engine::new(cfg.run.clone(), theta0, task.pool.clone(), task.eval.clone(), oracle)?.with_output(out)?
    };
    let mut engine = engine.with_eval_oracle(eval_oracle).with_monitor(monitor.clone());

    let handle = if serve {
        let cancel = engine.cancel_handle();
        let q = queue.clone();
        let on_interrupt = Box::new(move || {
            cancel.store(true, Ordering::SeqCst);
            if let Some(q) = q {
                q.abort();
            }
        });
        let state = ApiState {
            queue: queue.clone(),
            monitor: Some(monitor),
            token: std::env::var(API_TOKEN_ENV).ok(),
        };
        let h = server::spawn(listen.addr, state, Some(on_interrupt))?;
        eprintln!("labelling API listening on http://{}", h.addr);
        Some(h)
    } else {
        None
    };

    let result = engine.run().cloned();
    if let Some(h) = handle {
        h.shutdown();
    }
    let state = result?;
    let last = state.metrics.last();
    Ok(json!({
        "run_dir": out,
        "steps": state.step,
        "dataset_size": state.dataset.len(),
        "label_calls": state.counters.label_calls,
        "eval_calls": state.counters.eval_calls,
        "final_size": last.map(|m| m.dataset_size),
        "final_win_rate": last.map(|m| m.win_rate),
        "final_stderr": last.map(|m| m.stderr),
    }))
}

pub fn run_cmd(c: RunCommand) -> Result<Value> {
    execute_run(&c.run, &c.out, &c.listen, OracleKind::Valence, false)
}

pub fn serve_cmd(s: ServeArgs) -> Result<Value> {
    if let Some(out) = &s.out {
        return execute_run(&s.run, out, &s.listen, OracleKind::Human, true);
    }
    server::check_bind(&s.listen.addr, s.listen.allow_external)?;
    let (tx, rx) = mpsc::channel::<()>();
    let state = ApiState {
        token: std::env::var(API_TOKEN_ENV).ok(),
        ..ApiState::default()
    };
    let h = server::spawn(
        s.listen.addr,
        state,
        Some(Box::new(move || {
            let _ = tx.send(());
        })),
    )?;
    eprintln!("labelling API listening on http://{} with no run attached", h.addr);
    let _ = rx.recv();
    h.shutdown();
    Ok(json!({ "served": true }))
}

fn judge_only(flags: &JudgeArgs) -> Result<Option<JudgeSettings>> {
    judge_settings(None, flags)
}

pub fn eval_cmd(a: EvalArgs) -> Result<Value> {
    if a.oracle == OracleKind::Human {
        return Err(AplError::config("oracle", "win-rate evaluation cannot use the human oracle"));
    }
    let task = load_task(a.data.as_deref())?;
    let params = load_checkpoint(&a.checkpoint)?;
    let baseline = match &a.baseline {
        Some(p) => load_checkpoint(p)?,
        None => load_base(a.base.as_deref(), &task)?,
    };
    let judge = judge_only(&a.judge)?;
    let oracle = build_oracle(a.oracle, &task, judge.as_ref(), a.oracle_temperature, None)?;
    let n = a.prompts.min(task.eval.len());
    let w = evaluate_winrate(
        &params,
        &Baseline::Policy(baseline),
        &task.eval[..n],
        oracle.as_ref(),
        a.temperature,
        a.max_tokens,
        a.seed,
    )?;
    Ok(serde_json::to_value(w)?)
}

pub fn consistency_cmd(a: ConsistencyArgs) -> Result<Value> {
    if a.oracle == OracleKind::Human {
        return Err(AplError::config("oracle", "the consistency check cannot use the human oracle"));
    }
    let task = load_task(a.data.as_deref())?;
    let base = load_base(a.base.as_deref(), &task)?;
    let judge = judge_only(&a.judge)?;
    let oracle = build_oracle(a.oracle, &task, judge.as_ref(), a.oracle_temperature, None)?;
    let n = a.pairs.min(task.pool.len());
    let mut pairs = Vec::with_capacity(n);
    for (i, prompt) in task.pool[..n].iter().enumerate() {
        let mut r1 = stream_rng(a.seed, Stream::Generation, 0, 2 * i as u64);
        let mut r2 = stream_rng(a.seed, Stream::Generation, 0, 2 * i as u64 + 1);
        pairs.push(PairInput {
            pair_id: format!("c-{i}"),
            prompt: prompt.clone(),
            y1: base.sample_with(prompt, a.temperature, a.max_tokens, &mut r1)?,
            y2: base.sample_with(prompt, a.temperature, a.max_tokens, &mut r2)?,
        });
    }
    let report = consistency_check(oracle.as_ref(), &pairs, a.repeats, a.seed)?;
    Ok(json!({ "oracle": oracle.id(), "repeats": a.repeats, "report": report }))
}

pub fn analyze_cmd(a: AnalyzeArgs) -> Result<Value> {
    let dirs: Vec<&Path> = a.runs.iter().map(PathBuf::as_path).collect();
    let opts = AnalyzeOptions {
        scoring: a.scoring,
        min_step: a.min_step,
        waypoints: a.waypoints.clone(),
    };
    let report = analyze_runs(&dirs, &a.out, &opts)?;
    print!("{}", report.table.to_text());
    Ok(json!({ "out": a.out, "runs": report.runs, "confidence": report.confidence }))
}
