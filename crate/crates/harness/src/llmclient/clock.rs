use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::{Duration, Instant};

/// Time source for backoff and rate limiting, so both can be tested without
/// waiting.
pub trait Clock: Send + Sync {
    /// Time elapsed since an arbitrary fixed origin.
    fn now(&self) -> Duration;
    fn sleep(&self, duration: Duration);
}

pub struct SystemClock {
    origin: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        Self { origin: Instant::now() }
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }

    fn sleep(&self, duration: Duration) {
        std::thread::sleep(duration);
    }
}

/// A clock that only moves when slept on.
#[derive(Default)]
pub struct VirtualClock {
    now: Mutex<Duration>,
    slept: Mutex<Vec<Duration>>,
}

impl VirtualClock {
    pub fn advance(&self, by: Duration) {
        *self.now.lock().unwrap() += by;
    }

    /// Every sleep requested so far, in order.
    pub fn sleeps(&self) -> Vec<Duration> {
        self.slept.lock().unwrap().clone()
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> Duration {
        *self.now.lock().unwrap()
    }

    fn sleep(&self, duration: Duration) {
        self.slept.lock().unwrap().push(duration);
        self.advance(duration);
    }
}

pub const RATE_WINDOW: Duration = Duration::from_secs(60);

/// Sliding-window limiter: at most `limit` acquisitions in any window of
/// [`RATE_WINDOW`].
pub struct RateLimiter {
    limit: Option<u32>,
    stamps: Mutex<VecDeque<Duration>>,
}

impl RateLimiter {
    pub fn new(limit_per_minute: Option<u32>) -> Self {
        Self { limit: limit_per_minute.filter(|l| *l > 0), stamps: Mutex::new(VecDeque::new()) }
    }

    /// Blocks (through `clock`) until a request may go out, then records it.
    pub fn acquire(&self, clock: &dyn Clock) {
        let Some(limit) = self.limit else { return };
        loop {
            let wait = {
                let mut stamps = self.stamps.lock().unwrap();
                let now = clock.now();
                while stamps.front().is_some_and(|t| *t + RATE_WINDOW <= now) {
                    stamps.pop_front();
                }
                if stamps.len() < limit as usize {
                    stamps.push_back(now);
                    return;
                }
                stamps[0] + RATE_WINDOW - now
            };
            clock.sleep(wait);
        }
    }
}
