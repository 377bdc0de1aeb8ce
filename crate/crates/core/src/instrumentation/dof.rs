use serde::Serialize;

use crate::{Error, Result};

/// Free parameters of an `M x N` similarity matrix seen through both softmax directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DofReport {
    pub total: u64,
    pub shared: u64,
    pub unique: u64,
}

/// Row softmax ignores per-row offsets and column softmax per-column offsets,
/// leaving `MN - 1` controllable entries, `(M-1)(N-1)` of them seen by both.
pub fn dof_calc(m: usize, n: usize) -> Result<DofReport> {
    if m == 0 || n == 0 {
        return Err(Error::Config(format!("latents and tokens must be positive, got {m} and {n}")));
    }
    let (m, n) = (m as u64, n as u64);
    Ok(DofReport {
        total: m * n - 1,
        shared: (m - 1) * (n - 1),
        unique: m + n - 2,
    })
}
