use std::path::Path;

use super::{Arch, PolicyParams};
use crate::error::{AplError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"APLM";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 * 4 + 8;

impl PolicyParams {
    /// Little-endian: "APLM", version u32, V/k/d/h as u32, count u64, then f64 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let a = self.arch();
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for dim in [a.vocab, a.context, a.embed, a.hidden] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for v in self.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |message: String| AplError::Integrity {
            path: path.to_path_buf(),
            message,
        };
        if bytes.len() < HEADER_LEN {
            return Err(bad(format!("truncated header ({} bytes)", bytes.len())));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic, expected APLM".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != CHECKPOINT_VERSION {
            return Err(AplError::Incompatible {
                path: path.to_path_buf(),
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let arch = Arch {
            vocab: u32_at(8) as usize,
            context: u32_at(12) as usize,
            embed: u32_at(16) as usize,
            hidden: u32_at(20) as usize,
        };
        arch.validate().map_err(|e| bad(e.to_string()))?;
        let count = u64::from_le_bytes(bytes[24..32].try_into().unwrap()) as usize;
        if count != arch.param_count() {
            return Err(bad(format!(
                "parameter count {count} does not match architecture ({})",
                arch.param_count()
            )));
        }
        let body = &bytes[HEADER_LEN..];
        if body.len() != count * 8 {
            return Err(bad(format!(
                "expected {} bytes of parameters, found {}",
                count * 8,
                body.len()
            )));
        }
        let values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        PolicyParams::from_values(arch, values).map_err(|e| bad(e.to_string()))
    }
}

pub fn save_checkpoint(params: &PolicyParams, path: &Path) -> Result<()> {
    std::fs::write(path, params.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyParams> {
    let bytes = std::fs::read(path)?;
    PolicyParams::from_bytes(&bytes, path)
}
