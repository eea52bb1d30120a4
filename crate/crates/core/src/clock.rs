//! Host-wide monotonic clock in microseconds.
//!
//! Every probe and packet timestamp in the crate comes from here so that
//! separate processes on one host share a time base.

/// Microseconds on the host's monotonic clock.
#[cfg(unix)]
pub fn now_us() -> u64 {
    let mut ts = libc::timespec {
        tv_sec: 0,
        tv_nsec: 0,
    };
    // SAFETY: clock_gettime only writes into the provided timespec.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_MONOTONIC, &mut ts) };
    debug_assert_eq!(rc, 0);
    ts.tv_sec as u64 * 1_000_000 + ts.tv_nsec as u64 / 1_000
}

#[cfg(not(unix))]
pub fn now_us() -> u64 {
    use std::sync::OnceLock;
    use std::time::Instant;
    static EPOCH: OnceLock<Instant> = OnceLock::new();
    EPOCH.get_or_init(Instant::now).elapsed().as_micros() as u64
}

/// CPU time consumed by the calling thread, in microseconds.
#[cfg(unix)]
pub fn thread_cpu_us() -> u64 {
    let mut ts = libc::timespec {
        tv_sec: 0,
        tv_nsec: 0,
    };
    // SAFETY: as above.
    unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    ts.tv_sec as u64 * 1_000_000 + ts.tv_nsec as u64 / 1_000
}

#[cfg(not(unix))]
pub fn thread_cpu_us() -> u64 {
    0
}

/// Sleeps until `deadline_us`, spinning for the final stretch to keep
/// wake-up jitter well under a millisecond.
pub fn sleep_until_us(deadline_us: u64) {
    const SPIN_US: u64 = 300;
    loop {
        let now = now_us();
        if now >= deadline_us {
            return;
        }
        let left = deadline_us - now;
        if left > SPIN_US {
            std::thread::sleep(std::time::Duration::from_micros(left - SPIN_US));
        } else {
            std::thread::yield_now();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monotonic() {
        let a = now_us();
        let b = now_us();
        assert!(b >= a);
    }

    #[test]
    fn sleep_reaches_deadline() {
        let target = now_us() + 2_000;
        sleep_until_us(target);
        assert!(now_us() >= target);
    }
}
