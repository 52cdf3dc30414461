use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::time::VirtualTime;

/// A scheduled delivery. Events fire in `(fire_at, seq)` order.
#[derive(Clone, Debug)]
pub struct SimEvent<A, T> {
    pub fire_at: VirtualTime,
    pub seq: u64,
    pub target: A,
    pub payload: T,
}

impl<A, T> PartialEq for SimEvent<A, T> {
    fn eq(&self, other: &Self) -> bool {
        self.fire_at == other.fire_at && self.seq == other.seq
    }
}

impl<A, T> Eq for SimEvent<A, T> {}

impl<A, T> PartialOrd for SimEvent<A, T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<A, T> Ord for SimEvent<A, T> {
    // Reversed so the max-heap pops the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.fire_at, other.seq).cmp(&(self.fire_at, self.seq))
    }
}

/// Future event list with a monotone virtual clock.
#[derive(Debug)]
pub struct EventQueue<A, T> {
    heap: BinaryHeap<SimEvent<A, T>>,
    next_seq: u64,
    now: VirtualTime,
}

impl<A, T> Default for EventQueue<A, T> {
    fn default() -> Self {
        Self { heap: BinaryHeap::new(), next_seq: 0, now: VirtualTime::ZERO }
    }
}

impl<A, T> EventQueue<A, T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> VirtualTime {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Schedules `payload` for `target`. Times in the past are clamped to now.
    pub fn schedule(&mut self, fire_at: VirtualTime, target: A, payload: T) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(SimEvent { fire_at: fire_at.max(self.now), seq, target, payload });
        seq
    }

    pub fn schedule_in(&mut self, delay: u64, target: A, payload: T) -> u64 {
        self.schedule(self.now + delay, target, payload)
    }

    pub fn peek_time(&self) -> Option<VirtualTime> {
        self.heap.peek().map(|e| e.fire_at)
    }

    /// Removes the next event and advances the clock to its time.
    pub fn pop(&mut self) -> Option<SimEvent<A, T>> {
        let ev = self.heap.pop()?;
        debug_assert!(ev.fire_at >= self.now);
        self.now = ev.fire_at;
        Some(ev)
    }
}
