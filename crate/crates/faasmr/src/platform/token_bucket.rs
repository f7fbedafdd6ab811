//! Admission throttle for new synchronous invocations.
//!
//! Refills happen in whole-window steps: at every one-second boundary of the
//! virtual clock, `rate` tokens arrive at once (capped at `capacity`). A
//! burst of simultaneous requests is therefore admitted in batches of `rate`
//! one second apart, so the first-to-last admission spread of `n` requests
//! against an idle bucket of capacity `rate` is exactly `ceil(n/rate) - 1`
//! seconds.

pub const WINDOW_US: u64 = 1_000_000;

#[derive(Debug, Clone)]
pub struct TokenBucket {
    rate_per_window: f64,
    capacity: f64,
    tokens: f64,
    last_window: u64,
}

impl TokenBucket {
    /// Bucket starting full at virtual time 0. `rate <= 0` disables
    /// throttling: every acquire succeeds immediately.
    pub fn new(rate_per_sec: f64, capacity: u32) -> Self {
        Self {
            rate_per_window: rate_per_sec,
            capacity: f64::from(capacity),
            tokens: f64::from(capacity),
            last_window: 0,
        }
    }

    pub fn disabled(&self) -> bool {
        self.rate_per_window <= 0.0
    }

    fn refill(&mut self, now_us: u64) {
        let window = now_us / WINDOW_US;
        if window > self.last_window {
            let elapsed = (window - self.last_window) as f64;
            self.tokens = (self.tokens + elapsed * self.rate_per_window).min(self.capacity);
            self.last_window = window;
        }
    }

    /// Take one token if available at `now_us`.
    pub fn try_acquire(&mut self, now_us: u64) -> bool {
        if self.disabled() {
            return true;
        }
        self.refill(now_us);
        if self.tokens >= 1.0 {
            self.tokens -= 1.0;
            true
        } else {
            false
        }
    }

    /// The next window boundary strictly after `now_us`; tokens can only
    /// appear there.
    pub fn next_refill_time(&self, now_us: u64) -> u64 {
        (now_us / WINDOW_US + 1) * WINDOW_US
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Closed-form admission schedule: feed `n` simultaneous requests and
    /// record when each would be admitted, polling at refill boundaries.
    fn admission_times(n: usize, rate: f64, burst: u32) -> Vec<u64> {
        let mut bucket = TokenBucket::new(rate, burst);
        let mut out = Vec::with_capacity(n);
        let mut now = 0u64;
        while out.len() < n {
            if bucket.try_acquire(now) {
                out.push(now);
            } else {
                now = bucket.next_refill_time(now);
            }
        }
        out
    }

    #[test]
    fn twenty_five_requests_spread_two_seconds() {
        let times = admission_times(25, 10.0, 10);
        assert_eq!(times.iter().filter(|&&t| t == 0).count(), 10);
        assert_eq!(times.iter().filter(|&&t| t == WINDOW_US).count(), 10);
        assert_eq!(times.iter().filter(|&&t| t == 2 * WINDOW_US).count(), 5);
        assert_eq!(times.last().unwrap() - times.first().unwrap(), 2 * WINDOW_US);
    }

    #[test]
    fn five_hundred_twelve_requests_spread_fifty_one_seconds() {
        let times = admission_times(512, 10.0, 10);
        assert_eq!(times.last().unwrap() - times.first().unwrap(), 51 * WINDOW_US);
    }

    #[test]
    fn any_one_second_window_admits_at_most_burst() {
        let times = admission_times(137, 10.0, 10);
        for &t0 in &times {
            let in_window = times.iter().filter(|&&t| t >= t0 && t < t0 + WINDOW_US).count();
            assert!(in_window <= 10, "window at {t0} admitted {in_window}");
        }
    }

    #[test]
    fn disabled_bucket_admits_everything_at_once() {
        let times = admission_times(1000, 0.0, 10);
        assert!(times.iter().all(|&t| t == 0));
    }

    #[test]
    fn tokens_accumulate_only_to_capacity() {
        let mut bucket = TokenBucket::new(10.0, 10);
        // Drain fully, wait 100 windows, then only capacity tokens exist.
        for _ in 0..10 {
            assert!(bucket.try_acquire(0));
        }
        assert!(!bucket.try_acquire(0));
        let later = 100 * WINDOW_US;
        let mut admitted = 0;
        while bucket.try_acquire(later) {
            admitted += 1;
        }
        assert_eq!(admitted, 10);
    }

    #[test]
    fn fractional_rate_accumulates_across_windows() {
        let mut bucket = TokenBucket::new(0.5, 1);
        assert!(bucket.try_acquire(0));
        assert!(!bucket.try_acquire(0));
        assert!(!bucket.try_acquire(WINDOW_US));
        assert!(bucket.try_acquire(2 * WINDOW_US));
    }
}
