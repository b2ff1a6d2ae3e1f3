//! Byte accounting for dense-array storage.
//!
//! Every [`Array`](super::Array) buffer registers its size here on creation
//! and releases it on drop. The high-water mark is the portable "peak
//! memory" definition the benchmark harness reports, and an optional limit
//! turns oversized allocations into hard errors instead of process aborts.

use std::sync::atomic::{AtomicU64, Ordering};

use super::NumError;

static CURRENT: AtomicU64 = AtomicU64::new(0);
static PEAK: AtomicU64 = AtomicU64::new(0);
/// 0 means unlimited.
static LIMIT: AtomicU64 = AtomicU64::new(0);

pub(crate) fn register(bytes: usize) -> Result<(), NumError> {
    let bytes = bytes as u64;
    let limit = LIMIT.load(Ordering::Relaxed);
    if limit != 0 {
        let in_use = CURRENT.load(Ordering::Relaxed);
        if in_use.saturating_add(bytes) > limit {
            return Err(NumError::AllocLimit {
                requested: bytes as usize,
                limit: limit as usize,
                in_use: in_use as usize,
            });
        }
    }
    let now = CURRENT.fetch_add(bytes, Ordering::Relaxed) + bytes;
    PEAK.fetch_max(now, Ordering::Relaxed);
    Ok(())
}

pub(crate) fn release(bytes: usize) {
    CURRENT.fetch_sub(bytes as u64, Ordering::Relaxed);
}

/// Bytes currently held by live arrays.
pub fn current_bytes() -> usize {
    CURRENT.load(Ordering::Relaxed) as usize
}

/// High-water mark since the last [`reset_peak`].
pub fn peak_bytes() -> usize {
    PEAK.load(Ordering::Relaxed) as usize
}

/// Resets the high-water mark to the currently live byte count.
pub fn reset_peak() {
    PEAK.store(CURRENT.load(Ordering::Relaxed), Ordering::Relaxed);
}

/// Caps total live array bytes; `None` removes the cap. Allocations that
/// would exceed the cap fail with [`NumError::AllocLimit`].
pub fn set_limit(limit: Option<usize>) {
    LIMIT.store(limit.unwrap_or(0) as u64, Ordering::Relaxed);
}
