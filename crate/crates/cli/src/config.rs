use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use apl_core::engine::RunConfig;
use apl_core::oracle::{JudgeEndpoint, TemplateId};
use apl_core::{AplError, Result};

use crate::args::{JudgeArgs, RunArgs};

fn sentiment() -> TemplateId {
    TemplateId::Sentiment
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeSettings {
    #[serde(flatten)]
    pub endpoint: JudgeEndpoint,
    #[serde(default = "sentiment")]
    pub template: TemplateId,
}

/// A run configuration file: the `RunConfig` fields at top level, plus where
/// the data, the base policy and the remote judge live.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CliConfig {
    #[serde(flatten)]
    pub run: RunConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge: Option<JudgeSettings>,
}

const EXTRA_KEYS: [&str; 3] = ["data_dir", "base_checkpoint", "judge"];

/// Finds the first key of `overlay` that breaks deserialization when merged
/// into `base`, descending into nested objects.
fn locate(base: &Value, overlay: &Map<String, Value>, path: &str, probe: &dyn Fn(&Value) -> bool) -> Option<String> {
    for (k, v) in overlay {
        let mut trial = base.clone();
        trial[k.as_str()] = v.clone();
        if probe(&trial) {
            continue;
        }
        let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
        if let (Some(inner @ Value::Object(_)), Value::Object(o)) = (base.get(k), v) {
            let sub = |candidate: &Value| {
                let mut t = base.clone();
                t[k.as_str()] = candidate.clone();
                probe(&t)
            };
            if let Some(p) = locate(inner, o, &here, &sub) {
                return Some(p);
            }
        }
        return Some(here);
    }
    None
}

pub fn parse_config(text: &str) -> Result<CliConfig> {
    let value: Value = serde_json::from_str(text).map_err(|e| AplError::config("<file>", e.to_string()))?;
    let Value::Object(map) = &value else {
        return Err(AplError::config("<file>", "expected a JSON object"));
    };
    let defaults = serde_json::to_value(RunConfig::default())?;
    for k in map.keys() {
        if defaults.get(k).is_none() && !EXTRA_KEYS.contains(&k.as_str()) {
            return Err(AplError::config(k.clone(), "unknown field"));
        }
    }
    let mut run_part = Map::new();
    for (k, v) in map {
        if !EXTRA_KEYS.contains(&k.as_str()) {
            run_part.insert(k.clone(), v.clone());
        }
    }
    if let Err(e) = serde_json::from_value::<RunConfig>(Value::Object(run_part.clone())) {
        let probe = |v: &Value| serde_json::from_value::<RunConfig>(v.clone()).is_ok();
        let field = locate(&defaults, &run_part, "", &probe).unwrap_or_else(|| "<file>".into());
        return Err(AplError::config(field, e.to_string()));
    }
    serde_json::from_value(value.clone()).map_err(|e| {
        let field = EXTRA_KEYS
            .iter()
            .find(|k| map.contains_key(**k))
            .map(|k| k.to_string())
            .unwrap_or_else(|| "<file>".into());
        AplError::config(field, e.to_string())
    })
}

pub fn load_config(path: &Path) -> Result<CliConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| AplError::config("--config", format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

/// File values overridden by flags, then validated.
pub fn merged_config(args: &RunArgs) -> Result<CliConfig> {
    let mut cfg = match &args.config {
        Some(p) => load_config(p)?,
        None => CliConfig::default(),
    };
    if let Some(s) = args.strategy {
        cfg.run.strategy = s;
    }
    if let Some(s) = args.seed {
        cfg.run.seed = s;
    }
    if let Some(m) = args.mode {
        cfg.run.mode = m;
    }
    if args.data.is_some() {
        cfg.data_dir = args.data.clone();
    }
    if args.base.is_some() {
        cfg.base_checkpoint = args.base.clone();
    }
    cfg.judge = judge_settings(cfg.judge.take(), &args.judge)?;
    cfg.run.validate()?;
    Ok(cfg)
}

/// Overlays judge flags on file settings. `None` when neither names an endpoint.
pub fn judge_settings(file: Option<JudgeSettings>, flags: &JudgeArgs) -> Result<Option<JudgeSettings>> {
    let mut s = match (file, &flags.judge_url) {
        (Some(s), _) => s,
        (None, Some(url)) => JudgeSettings {
            endpoint: serde_json::from_value(serde_json::json!({ "base_url": url, "model": "" }))?,
            template: TemplateId::Sentiment,
        },
        (None, None) => {
            if flags.judge_model.is_some() || flags.judge_template.is_some() {
                return Err(AplError::config("judge.base_url", "judge flags given without --judge-url"));
            }
            return Ok(None);
        }
    };
    if let Some(u) = &flags.judge_url {
        s.endpoint.base_url = u.clone();
    }
    if let Some(m) = &flags.judge_model {
        s.endpoint.model = m.clone();
    }
    if let Some(t) = flags.judge_template {
        s.template = t;
    }
    if s.endpoint.model.is_empty() {
        return Err(AplError::config("judge.model", "a judge model name is required"));
    }
    Ok(Some(s))
}
