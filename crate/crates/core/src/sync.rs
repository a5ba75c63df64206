//! Blocking counting semaphores used to cap child processes and in-flight requests.

use std::collections::HashMap;
use std::sync::{Arc, Condvar, Mutex};

#[derive(Debug)]
pub struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Self { permits: Mutex::new(permits.max(1)), freed: Condvar::new() }
    }

    pub fn acquire(self: &Arc<Self>) -> Permit {
        let mut n = self.permits.lock().unwrap_or_else(|e| e.into_inner());
        while *n == 0 {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n -= 1;
        Permit { sem: Arc::clone(self) }
    }

    pub fn available(&self) -> usize {
        *self.permits.lock().unwrap_or_else(|e| e.into_inner())
    }
}

/// Returns its permit on drop.
#[derive(Debug)]
pub struct Permit {
    sem: Arc<Semaphore>,
}

impl Drop for Permit {
    fn drop(&mut self) {
        let mut n = self.sem.permits.lock().unwrap_or_else(|e| e.into_inner());
        *n += 1;
        self.sem.freed.notify_one();
    }
}

/// One semaphore per key, created lazily with a shared capacity.
#[derive(Debug)]
pub struct KeyedLimiter {
    cap: usize,
    slots: Mutex<HashMap<String, Arc<Semaphore>>>,
}

impl KeyedLimiter {
    pub fn new(cap: usize) -> Self {
        Self { cap: cap.max(1), slots: Mutex::new(HashMap::new()) }
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn acquire(&self, key: &str) -> Permit {
        let sem = {
            let mut slots = self.slots.lock().unwrap_or_else(|e| e.into_inner());
            Arc::clone(slots.entry(key.to_string()).or_insert_with(|| Arc::new(Semaphore::new(self.cap))))
        };
        sem.acquire()
    }
}
