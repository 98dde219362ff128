//! Run directory and checkpoint files.
//!
//! ```text
//! run/
//!   config.json  prefs.jsonl  judgements.jsonl  metrics.csv
//!   checkpoints/step-<t>/  params.aplm adam.bin rng.json state.json prefs.jsonl judgements.jsonl [scores.csv]
//!   final/                 params.aplm state.json
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Counters, MetricRow, RunConfig, RunState};
use crate::dpo::{read_pairs_jsonl, write_pairs_jsonl};
use crate::error::{AplError, Result};
use crate::optim::Adam;
use crate::oracle::{read_judgements_jsonl, write_judgements_jsonl};
use crate::policy::{load_checkpoint, save_checkpoint, PolicyParams};
use crate::rng::Stream;

pub const STATE_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct StateFile {
    version: u32,
    step: usize,
    total_steps: usize,
    counters: Counters,
    metrics: Vec<MetricRow>,
    config: RunConfig,
}

/// Every stream is derived from (seed, stream, step, index), so the position of
/// all streams is fully described by the seed and the next step to run.
#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct RngFile {
    seed: u64,
    next_step: usize,
    streams: Vec<Stream>,
}

pub fn step_dir(run_dir: &Path, step: usize) -> PathBuf {
    run_dir.join("checkpoints").join(format!("step-{step}"))
}

fn integrity(path: &Path, e: impl std::fmt::Display) -> AplError {
    AplError::Integrity {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| integrity(path, e))
}

/// Writes a complete checkpoint into `dir`. Files go to a sibling temp directory
/// first and are renamed into place, so an interrupted write never leaves a
/// half-written checkpoint under the final name.
pub fn checkpoint(cfg: &RunConfig, state: &RunState, dir: &Path) -> Result<()> {
    let parent = dir.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(parent)?;
    let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint");
    let tmp = parent.join(format!(".{name}.tmp"));
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp)?;
    }
    std::fs::create_dir_all(&tmp)?;
    save_checkpoint(&state.theta, &tmp.join("params.aplm"))?;
    std::fs::write(tmp.join("adam.bin"), state.adam.to_bytes())?;
    let rng = RngFile {
        seed: cfg.seed,
        next_step: state.step + 1,
        streams: Stream::ALL.to_vec(),
    };
    std::fs::write(tmp.join("rng.json"), serde_json::to_string_pretty(&rng)?)?;
    let st = StateFile {
        version: STATE_VERSION,
        step: state.step,
        total_steps: state.total_steps,
        counters: state.counters,
        metrics: state.metrics.clone(),
        config: cfg.clone(),
    };
    std::fs::write(tmp.join("state.json"), serde_json::to_string_pretty(&st)?)?;
    write_pairs_jsonl(&tmp.join("prefs.jsonl"), &state.dataset)?;
    write_judgements_jsonl(&tmp.join("judgements.jsonl"), &state.judgements)?;
    if dir.exists() {
        std::fs::remove_dir_all(dir)?;
    }
    std::fs::rename(&tmp, dir)?;
    Ok(())
}

/// Inverse of [`checkpoint`].
pub fn restore(dir: &Path) -> Result<(RunConfig, RunState)> {
    let state_path = dir.join("state.json");
    let st: StateFile = serde_json::from_str(&read_text(&state_path)?).map_err(|e| integrity(&state_path, e))?;
    if st.version != STATE_VERSION {
        return Err(AplError::Incompatible {
            path: state_path,
            found: st.version,
            expected: STATE_VERSION,
        });
    }
    let rng_path = dir.join("rng.json");
    let rng: RngFile = serde_json::from_str(&read_text(&rng_path)?).map_err(|e| integrity(&rng_path, e))?;
    if rng.seed != st.config.seed || rng.next_step != st.step + 1 {
        return Err(integrity(&rng_path, "stream positions disagree with state.json"));
    }
    let theta = load_checkpoint(&dir.join("params.aplm"))?;
    let adam_path = dir.join("adam.bin");
    let adam_bytes = std::fs::read(&adam_path).map_err(|e| integrity(&adam_path, e))?;
    let adam = Adam::from_bytes(st.config.dpo_config().adam(), &adam_bytes, &adam_path)?;
    if adam.len() != theta.len() {
        return Err(integrity(&adam_path, "optimizer size does not match parameters"));
    }
    let prefs_path = dir.join("prefs.jsonl");
    let dataset = read_pairs_jsonl(&prefs_path).map_err(|e| integrity(&prefs_path, e))?;
    let judg_path = dir.join("judgements.jsonl");
    let judgements = read_judgements_jsonl(&judg_path).map_err(|e| integrity(&judg_path, e))?;
    if dataset.len() != st.step * st.config.batch || judgements.len() != dataset.len() {
        return Err(integrity(
            &prefs_path,
            format!("{} pairs and {} judgements at step {}", dataset.len(), judgements.len(), st.step),
        ));
    }
    let state = RunState {
        step: st.step,
        total_steps: st.total_steps,
        dataset,
        judgements,
        theta,
        adam,
        counters: st.counters,
        metrics: st.metrics,
    };
    Ok((st.config, state))
}

/// Latest complete `checkpoints/step-<t>` under a run directory.
pub fn latest_step(run_dir: &Path) -> Result<Option<usize>> {
    let dir = run_dir.join("checkpoints");
    if !dir.exists() {
        return Ok(None);
    }
    let mut best = None;
    for entry in std::fs::read_dir(&dir)? {
        let name = entry?.file_name();
        if let Some(t) = name.to_str().and_then(|n| n.strip_prefix("step-")).and_then(|n| n.parse::<usize>().ok()) {
            best = best.max(Some(t));
        }
    }
    Ok(best)
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(MetricRow::HEADER)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(AplError::from)).collect()
}

/// Rewrites the run-level files so they describe `state`.
pub fn write_run_files(run_dir: &Path, state: &RunState) -> Result<()> {
    write_pairs_jsonl(&run_dir.join("prefs.jsonl"), &state.dataset)?;
    write_judgements_jsonl(&run_dir.join("judgements.jsonl"), &state.judgements)?;
    write_metrics_csv(&run_dir.join("metrics.csv"), &state.metrics)
}

pub fn write_final(run_dir: &Path, cfg: &RunConfig, state: &RunState) -> Result<()> {
    checkpoint(cfg, state, &run_dir.join("final"))
}

pub fn load_theta0(run_dir: &Path) -> Result<PolicyParams> {
    load_checkpoint(&step_dir(run_dir, 0).join("params.aplm"))
}
