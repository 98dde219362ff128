use std::collections::{HashMap, HashSet};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{Oracle, PresentedPair, RawJudgement, Slot};
use crate::error::{AplError, Result};
use crate::vocab::Vocabulary;

/// A comparison waiting for a human label, rendered as text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingItem {
    pub id: String,
    pub prompt: String,
    pub slot_a: String,
    pub slot_b: String,
    pub issued_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PostError {
    NotFound,
    Conflict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueProgress {
    /// Items labelled in the batch currently being waited on.
    pub labeled: usize,
    pub batch: usize,
}

#[derive(Default)]
struct State {
    pending: Vec<(PendingItem, Instant)>,
    resolved: HashMap<String, RawJudgement>,
    seen: HashSet<String>,
    batch: usize,
    labeled: usize,
    aborted: bool,
}

/// Pending-comparison queue shared by the engine (enqueue, wait) and the HTTP
/// API (list, post). The first judgement posted for an id wins.
#[derive(Default)]
pub struct HumanQueue {
    state: Mutex<State>,
    cond: Condvar,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl HumanQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn enqueue(&self, items: Vec<PendingItem>) -> Result<()> {
        let mut st = self.state.lock().unwrap();
        if st.aborted {
            return Err(AplError::Cancelled("run aborted".into()));
        }
        for it in &items {
            if !st.seen.insert(it.id.clone()) {
                return Err(AplError::invalid(format!("duplicate pending id {}", it.id)));
            }
        }
        st.batch = items.len();
        st.labeled = 0;
        let now = Instant::now();
        st.pending.extend(items.into_iter().map(|i| (i, now)));
        Ok(())
    }

    pub fn pending(&self, limit: Option<usize>) -> Vec<PendingItem> {
        let st = self.state.lock().unwrap();
        st.pending
            .iter()
            .take(limit.unwrap_or(usize::MAX))
            .map(|(i, _)| i.clone())
            .collect()
    }

    pub fn progress(&self) -> QueueProgress {
        let st = self.state.lock().unwrap();
        QueueProgress { labeled: st.labeled, batch: st.batch }
    }

    pub fn post(&self, id: &str, choice: Slot, rationale: Option<String>) -> std::result::Result<(), PostError> {
        let mut st = self.state.lock().unwrap();
        let Some(pos) = st.pending.iter().position(|(i, _)| i.id == id) else {
            return Err(if st.seen.contains(id) { PostError::Conflict } else { PostError::NotFound });
        };
        let (_, issued) = st.pending.remove(pos);
        st.resolved.insert(
            id.to_string(),
            RawJudgement {
                choice,
                rationale,
                latency_ms: issued.elapsed().as_millis() as u64,
            },
        );
        st.labeled += 1;
        self.cond.notify_all();
        Ok(())
    }

    /// Blocks until every id has a judgement, or the queue is aborted.
    pub fn wait_all(&self, ids: &[String]) -> Result<Vec<RawJudgement>> {
        let mut st = self.state.lock().unwrap();
        loop {
            if st.aborted {
                return Err(AplError::Cancelled("run aborted while labels were pending".into()));
            }
            if ids.iter().all(|id| st.resolved.contains_key(id)) {
                return Ok(ids.iter().map(|id| st.resolved.remove(id).unwrap()).collect());
            }
            st = self.cond.wait(st).unwrap();
        }
    }

    pub fn abort(&self) {
        let mut st = self.state.lock().unwrap();
        st.aborted = true;
        st.pending.clear();
        self.cond.notify_all();
    }

    pub fn is_aborted(&self) -> bool {
        self.state.lock().unwrap().aborted
    }
}

/// Routes comparisons to people through a [`HumanQueue`].
pub struct HumanOracle {
    pub queue: Arc<HumanQueue>,
    pub vocab: Vocabulary,
}

impl HumanOracle {
    pub const ID: &'static str = "human";

    pub fn new(queue: Arc<HumanQueue>, vocab: Vocabulary) -> Self {
        Self { queue, vocab }
    }

    fn pending_item(&self, item: &PresentedPair) -> PendingItem {
        PendingItem {
            id: item.pair_id.clone(),
            prompt: self.vocab.detokenize(&item.prompt.tokens),
            slot_a: self.vocab.detokenize(&item.slot_a.tokens),
            slot_b: self.vocab.detokenize(&item.slot_b.tokens),
            issued_at: now_ms(),
        }
    }
}

impl Oracle for HumanOracle {
    fn id(&self) -> &str {
        Self::ID
    }

    fn choose(&self, item: &PresentedPair) -> Result<RawJudgement> {
        self.queue.enqueue(vec![self.pending_item(item)])?;
        let mut out = self.queue.wait_all(std::slice::from_ref(&item.pair_id))?;
        Ok(out.remove(0))
    }

    fn choose_batch(&self, items: &[PresentedPair]) -> Vec<Result<RawJudgement>> {
        let pending = items.iter().map(|i| self.pending_item(i)).collect();
        let ids: Vec<String> = items.iter().map(|i| i.pair_id.clone()).collect();
        match self.queue.enqueue(pending).and_then(|_| self.queue.wait_all(&ids)) {
            Ok(v) => v.into_iter().map(Ok).collect(),
            Err(e) => {
                let msg = e.to_string();
                items.iter().map(|_| Err(AplError::Cancelled(msg.clone()))).collect()
            }
        }
    }
}
