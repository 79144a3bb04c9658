use std::sync::atomic::{AtomicI64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

/// Source of turn timestamps (UTC milliseconds).
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> i64;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> i64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as i64).unwrap_or(0)
    }
}

/// Deterministic clock: returns `start`, `start + step`, `start + 2*step`, ...
#[derive(Debug)]
pub struct TickClock {
    next: AtomicI64,
    step: i64,
}

impl TickClock {
    pub fn new(start: i64, step: i64) -> Self {
        Self { next: AtomicI64::new(start), step }
    }
}

impl Clock for TickClock {
    fn now_ms(&self) -> i64 {
        self.next.fetch_add(self.step, Ordering::SeqCst)
    }
}
