use std::sync::{Arc, Condvar, Mutex};

/// Counting pool of CPU slots shared by every step a process executes.
#[derive(Debug)]
pub struct WorkerPool {
    size: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

/// Slots held until dropped.
#[derive(Debug)]
pub struct SlotGuard {
    pool: Arc<WorkerPool>,
    slots: usize,
}

impl WorkerPool {
    pub fn new(size: usize) -> Arc<Self> {
        Arc::new(WorkerPool {
            size: size.max(1),
            used: Mutex::new(0),
            freed: Condvar::new(),
        })
    }

    /// One slot per available CPU.
    pub fn with_cpu_count() -> Arc<Self> {
        Self::new(std::thread::available_parallelism().map_or(1, |n| n.get()))
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn in_use(&self) -> usize {
        *self.used.lock().unwrap()
    }

    /// Requests above the pool size are clamped to it.
    pub fn clamp(&self, slots: usize) -> usize {
        slots.clamp(1, self.size)
    }

    pub fn try_acquire(self: &Arc<Self>, slots: usize) -> Option<SlotGuard> {
        let slots = self.clamp(slots);
        let mut used = self.used.lock().unwrap();
        if *used + slots <= self.size {
            *used += slots;
            Some(SlotGuard {
                pool: Arc::clone(self),
                slots,
            })
        } else {
            None
        }
    }

    pub fn acquire(self: &Arc<Self>, slots: usize) -> SlotGuard {
        let slots = self.clamp(slots);
        let mut used = self.used.lock().unwrap();
        while *used + slots > self.size {
            used = self.freed.wait(used).unwrap();
        }
        *used += slots;
        SlotGuard {
            pool: Arc::clone(self),
            slots,
        }
    }
}

impl SlotGuard {
    pub fn slots(&self) -> usize {
        self.slots
    }
}

impl Drop for SlotGuard {
    fn drop(&mut self) {
        let mut used = self.pool.used.lock().unwrap();
        *used -= self.slots;
        self.pool.freed.notify_all();
    }
}
