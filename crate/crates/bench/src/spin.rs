use std::hint;
use std::time::{Duration, Instant};

/// Busy-waits for `d` of wall-clock time.
pub fn spin_for(d: Duration) {
    let start = Instant::now();
    while start.elapsed() < d {
        hint::spin_loop();
    }
}
