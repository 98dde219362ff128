use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{OracleJudgement, OrderMap, Oracle, PresentedPair, RawJudgement, Slot};
use crate::error::{AplError, Result};
use crate::policy::EOS;
use crate::vocab::TokenSequence;

/// Per-token valence weights plus an optional penalty per immediate repetition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValenceTable {
    pub values: Vec<f64>,
    #[serde(default)]
    pub repetition_penalty: f64,
}

impl ValenceTable {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let t = Self { values, repetition_penalty: 0.0 };
        t.validate()?;
        Ok(t)
    }

    pub fn with_repetition_penalty(mut self, penalty: f64) -> Self {
        self.repetition_penalty = penalty;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() <= EOS as usize {
            return Err(AplError::invalid("valence table does not cover EOS"));
        }
        if self.values[EOS as usize] != 0.0 {
            return Err(AplError::invalid("EOS valence must be 0"));
        }
        if self.values.iter().any(|v| !v.is_finite()) || !self.repetition_penalty.is_finite() {
            return Err(AplError::invalid("valence weights must be finite"));
        }
        Ok(())
    }

    pub fn covers(&self, vocab_size: usize) -> bool {
        self.values.len() == vocab_size
    }

    /// Σ valence minus the repetition penalty for each token equal to its predecessor.
    pub fn score(&self, completion: &TokenSequence) -> f64 {
        let sum: f64 = completion
            .tokens
            .iter()
            .map(|&t| self.values.get(t as usize).copied().unwrap_or(0.0))
            .sum();
        let repeats = completion.tokens.windows(2).filter(|w| w[0] == w[1]).count();
        sum - self.repetition_penalty * repeats as f64
    }

    /// Orders two completions; `Greater` means `a` is preferred.
    pub fn compare(&self, a: &TokenSequence, b: &TokenSequence) -> Ordering {
        self.score(a)
            .total_cmp(&self.score(b))
            .then_with(|| b.len().cmp(&a.len()))
            .then_with(|| b.tokens.cmp(&a.tokens))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let t: ValenceTable = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        t.validate()?;
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Rule-based judgement: larger valence wins, then the shorter completion, then
/// the lexicographically smaller one. Identical inputs return y1, flagged degenerate.
pub fn valence_judge(
    table: &ValenceTable,
    _prompt: &TokenSequence,
    y1: &TokenSequence,
    y2: &TokenSequence,
) -> OracleJudgement {
    let degenerate = y1.tokens == y2.tokens;
    let winner = if degenerate || table.compare(y1, y2) == Ordering::Greater {
        0
    } else {
        1
    };
    OracleJudgement {
        pair_id: String::new(),
        oracle_id: ValenceOracle::ID.to_string(),
        raw_choice: if winner == 0 { Slot::A } else { Slot::B },
        winner_index: winner,
        rationale: None,
        presented_order: OrderMap::IDENTITY,
        latency_ms: 0,
        degenerate,
    }
}

#[derive(Debug, Clone)]
pub struct ValenceOracle {
    pub table: ValenceTable,
}

impl ValenceOracle {
    pub const ID: &'static str = "valence";

    pub fn new(table: ValenceTable) -> Self {
        Self { table }
    }
}

impl Oracle for ValenceOracle {
    fn id(&self) -> &str {
        Self::ID
    }

    fn choose(&self, item: &PresentedPair) -> Result<RawJudgement> {
        let j = valence_judge(&self.table, &item.prompt, &item.slot_a, &item.slot_b);
        Ok(RawJudgement {
            choice: j.raw_choice,
            rationale: None,
            latency_ms: 0,
        })
    }
}
