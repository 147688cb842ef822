//! Injectable time source.
//!
//! Everything that reads or waits on time (lease expiry, idle-gap detection,
//! motion execution) takes an `Arc<dyn Clock>`. Production code uses
//! [`SystemClock`]; tests and `--sim-clock` scenarios use [`SimClock`], which
//! only moves when told to and turns "sleeping" into an instant advance.

use std::fmt::Debug;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

/// Microsecond-resolution time source.
pub trait Clock: Send + Sync + Debug {
    /// Microseconds since the Unix epoch (or since simulation start).
    fn now_us(&self) -> u64;

    fn now_ms(&self) -> u64 {
        self.now_us() / 1_000
    }

    /// Blocks for `us` microseconds of this clock's time.
    fn sleep_us(&self, us: u64);
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_us(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_micros() as u64)
            .unwrap_or(0)
    }

    fn sleep_us(&self, us: u64) {
        std::thread::sleep(Duration::from_micros(us));
    }
}

/// Simulated clock. Time advances only through [`SimClock::advance_us`],
/// [`SimClock::set_us`] or [`Clock::sleep_us`].
#[derive(Debug, Default)]
pub struct SimClock {
    now_us: AtomicU64,
}

impl SimClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn starting_at_ms(ms: u64) -> Self {
        Self {
            now_us: AtomicU64::new(ms * 1_000),
        }
    }

    pub fn advance_us(&self, us: u64) {
        self.now_us.fetch_add(us, Ordering::SeqCst);
    }

    pub fn advance_ms(&self, ms: u64) {
        self.advance_us(ms * 1_000);
    }

    /// Moves the clock forward to `us`. Never moves it backwards.
    pub fn set_us(&self, us: u64) {
        self.now_us.fetch_max(us, Ordering::SeqCst);
    }
}

impl Clock for SimClock {
    fn now_us(&self) -> u64 {
        self.now_us.load(Ordering::SeqCst)
    }

    fn sleep_us(&self, us: u64) {
        self.advance_us(us);
    }
}
