use std::sync::{Condvar, Mutex};

/// Bounds the number of in-flight requests to one backend.
///
/// Each request takes a token for its duration and returns it on drop; callers
/// block while the bucket is empty.
#[derive(Debug)]
pub struct ConcurrencyLimiter {
    capacity: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a> {
    limiter: &'a ConcurrencyLimiter,
}

impl ConcurrencyLimiter {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().expect("limiter lock poisoned");
        while *n >= self.capacity {
            n = self.freed.wait(n).expect("limiter lock poisoned");
        }
        *n += 1;
        Permit { limiter: self }
    }

    pub fn in_flight(&self) -> usize {
        *self.in_flight.lock().expect("limiter lock poisoned")
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.limiter.in_flight.lock().expect("limiter lock poisoned");
        *n -= 1;
        self.limiter.freed.notify_one();
    }
}
