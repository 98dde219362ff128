use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaypointMetric {
    pub size: usize,
    pub win_rate: f64,
    pub stderr: f64,
}

/// Read-only view of a run between steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSnapshot {
    pub step: usize,
    pub total_steps: usize,
    pub dataset_size: usize,
    pub budget: usize,
    pub batch: usize,
    pub strategy: String,
    pub mode: String,
    pub finished: bool,
    pub label_calls: usize,
    pub eval_calls: usize,
    pub waypoint_metrics: Vec<WaypointMetric>,
}

/// Holds the latest snapshot; the engine swaps it whole after each step.
#[derive(Debug, Default)]
pub struct RunMonitor {
    current: RwLock<Option<Arc<RunSnapshot>>>,
}

impl RunMonitor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn publish(&self, snapshot: RunSnapshot) {
        *self.current.write().unwrap() = Some(Arc::new(snapshot));
    }

    pub fn snapshot(&self) -> Option<Arc<RunSnapshot>> {
        self.current.read().unwrap().clone()
    }
}
