//! Single-threaded discrete-event scheduler.
//!
//! Events fire in `(time, insertion order)` order, so a run is a pure function
//! of its inputs and seeds.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

#[derive(Clone)]
struct Entry<E> {
    at_ns: i64,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.at_ns == other.at_ns && self.seq == other.seq
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other.at_ns.cmp(&self.at_ns).then_with(|| other.seq.cmp(&self.seq))
    }
}

#[derive(Clone)]
pub struct Scheduler<E> {
    queue: BinaryHeap<Entry<E>>,
    next_seq: u64,
    now_ns: i64,
}

impl<E> std::fmt::Debug for Scheduler<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Scheduler").field("now_ns", &self.now_ns).field("pending", &self.queue.len()).finish()
    }
}

impl<E> Default for Scheduler<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> Scheduler<E> {
    pub fn new() -> Self {
        Self { queue: BinaryHeap::new(), next_seq: 0, now_ns: 0 }
    }

    pub fn now_ns(&self) -> i64 {
        self.now_ns
    }

    /// Schedules `event` at `at_ns`; times in the past are clamped to now.
    pub fn schedule(&mut self, at_ns: i64, event: E) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Entry { at_ns: at_ns.max(self.now_ns), seq, event });
    }

    pub fn schedule_in(&mut self, delay_ns: i64, event: E) {
        self.schedule(self.now_ns + delay_ns, event);
    }

    pub fn peek_time(&self) -> Option<i64> {
        self.queue.peek().map(|e| e.at_ns)
    }

    /// Pops the next event and advances the clock to it.
    pub fn pop(&mut self) -> Option<(i64, E)> {
        let e = self.queue.pop()?;
        self.now_ns = e.at_ns;
        Some((e.at_ns, e.event))
    }

    /// Pops the next event only if it fires at or before `limit_ns`.
    pub fn pop_until(&mut self, limit_ns: i64) -> Option<(i64, E)> {
        if self.peek_time()? > limit_ns {
            return None;
        }
        self.pop()
    }

    /// Moves the clock forward without firing anything.
    pub fn advance_to(&mut self, t_ns: i64) {
        self.now_ns = self.now_ns.max(t_ns);
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }
}
