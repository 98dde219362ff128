use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AplError, Result};

const ADAM_MAGIC: &[u8; 4] = b"APLA";
const ADAM_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected first and second moments. Minimizes.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, n: usize) -> Self {
        Self {
            cfg,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "adam state / parameter length mismatch");
        assert_eq!(grad.len(), self.m.len(), "adam state / gradient length mismatch");
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }

    /// Little-endian: magic "APLA", version u32, step u64, count u64, then m and v as f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 16 * self.m.len());
        out.extend_from_slice(ADAM_MAGIC);
        out.extend_from_slice(&ADAM_VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.m.len() as u64).to_le_bytes());
        for x in self.m.iter().chain(&self.v) {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(cfg: AdamConfig, bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |message: &str| AplError::Integrity {
            path: path.to_path_buf(),
            message: message.to_string(),
        };
        if bytes.len() < 24 || &bytes[..4] != ADAM_MAGIC {
            return Err(bad("missing APLA header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != ADAM_VERSION {
            return Err(AplError::Incompatible {
                path: path.to_path_buf(),
                found: version,
                expected: ADAM_VERSION,
            });
        }
        let step = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let n = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        if bytes.len() != 24 + 16 * n {
            return Err(bad("length does not match declared state size"));
        }
        let vals: Vec<f64> = bytes[24..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if vals.iter().any(|x| !x.is_finite()) {
            return Err(bad("non-finite moment"));
        }
        Ok(Self {
            cfg,
            step,
            m: vals[..n].to_vec(),
            v: vals[n..].to_vec(),
        })
    }
}
