use super::{FabricError, WorkerId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Residency {
    pub current: u64,
    pub peak: u64,
}

/// Accounted resident bytes per worker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryMeter {
    capacity: u64,
    workers: Vec<Residency>,
}

impl MemoryMeter {
    pub fn new(workers: usize, capacity: u64) -> Self {
        Self {
            capacity,
            workers: vec![Residency::default(); workers],
        }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn residency(&self, worker: WorkerId) -> Residency {
        self.workers[worker.0]
    }

    pub fn reserve(&mut self, worker: WorkerId, bytes: u64) -> Result<(), FabricError> {
        let r = &mut self.workers[worker.0];
        let next = r.current + bytes;
        meter_assert(worker, next, self.capacity)?;
        r.current = next;
        r.peak = r.peak.max(next);
        Ok(())
    }

    pub fn release(&mut self, worker: WorkerId, bytes: u64) {
        let r = &mut self.workers[worker.0];
        r.current = r.current.saturating_sub(bytes);
    }
}

/// Inclusive capacity check: `resident == capacity` fits.
pub fn meter_assert(worker: WorkerId, resident: u64, capacity: u64) -> Result<(), FabricError> {
    if resident > capacity {
        return Err(FabricError::CapacityBreach {
            worker,
            resident,
            capacity,
        });
    }
    Ok(())
}
