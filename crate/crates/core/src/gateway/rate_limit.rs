//! Sliding-window rate limiter with an injectable clock.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

/// Time source abstraction so the limiter can be tested with a virtual clock.
pub trait Clock: Send + Sync {
    fn now_millis(&self) -> u64;
    fn sleep_millis(&self, ms: u64);
}

pub struct SystemClock {
    start: std::time::Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        Self {
            start: std::time::Instant::now(),
        }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now_millis(&self) -> u64 {
        self.start.elapsed().as_millis() as u64
    }

    fn sleep_millis(&self, ms: u64) {
        std::thread::sleep(std::time::Duration::from_millis(ms));
    }
}

/// Virtual clock: `sleep_millis` advances time instantly.
pub struct VirtualClock {
    now: Mutex<u64>,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self { now: Mutex::new(0) }
    }
}

impl Default for VirtualClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for VirtualClock {
    fn now_millis(&self) -> u64 {
        *self.now.lock().unwrap()
    }

    fn sleep_millis(&self, ms: u64) {
        *self.now.lock().unwrap() += ms;
    }
}

/// Grants at most `per_second` dispatches in any sliding 1-second window.
/// Waiters are served in the order they obtain the internal lock (FIFO under
/// an uncontended mutex; fairness under heavy contention follows the platform
/// mutex).
pub struct RateLimiter {
    per_second: u32,
    clock: Arc<dyn Clock>,
    grants: Mutex<VecDeque<u64>>,
}

impl RateLimiter {
    pub fn new(per_second: u32, clock: Arc<dyn Clock>) -> Self {
        assert!(per_second > 0, "rate limit must be positive");
        Self {
            per_second,
            clock,
            grants: Mutex::new(VecDeque::new()),
        }
    }

    /// Blocks until a dispatch slot is available, then records the grant.
    /// Returns the grant timestamp in clock milliseconds.
    pub fn acquire(&self) -> u64 {
        loop {
            let wait = {
                let mut grants = self.grants.lock().unwrap();
                let now = self.clock.now_millis();
                while let Some(&front) = grants.front() {
                    if now.saturating_sub(front) >= 1000 {
                        grants.pop_front();
                    } else {
                        break;
                    }
                }
                if (grants.len() as u32) < self.per_second {
                    grants.push_back(now);
                    return now;
                }
                grants.front().unwrap() + 1000 - now
            };
            self.clock.sleep_millis(wait);
        }
    }
}
