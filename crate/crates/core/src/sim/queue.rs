use std::cmp::Ordering;
use std::collections::BinaryHeap;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum QueueError {
    #[error("event at {at} is before the current clock {now}")]
    PastEvent { at: f64, now: f64 },
    #[error("event time {0} is not finite")]
    NonFinite(f64),
}

struct Entry<E> {
    at: f64,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.seq == other.seq
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    // BinaryHeap is a max-heap, so the comparison is reversed.
    fn cmp(&self, other: &Self) -> Ordering {
        other.at.total_cmp(&self.at).then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Priority queue of timestamped events. Events at the same time fire in
/// the order they were scheduled.
pub struct EventQueue<E> {
    heap: BinaryHeap<Entry<E>>,
    now: f64,
    next_seq: u64,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        EventQueue { heap: BinaryHeap::new(), now: 0.0, next_seq: 0 }
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn schedule(&mut self, at: f64, event: E) -> Result<u64, QueueError> {
        if !at.is_finite() {
            return Err(QueueError::NonFinite(at));
        }
        if at < self.now {
            return Err(QueueError::PastEvent { at, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Entry { at, seq, event });
        Ok(seq)
    }

    pub fn peek_time(&self) -> Option<f64> {
        self.heap.peek().map(|e| e.at)
    }

    /// Removes the earliest event and advances the clock to its time.
    pub fn pop(&mut self) -> Option<(f64, u64, E)> {
        let e = self.heap.pop()?;
        self.now = e.at;
        Some((e.at, e.seq, e.event))
    }

    /// Moves the clock forward without firing anything.
    pub fn advance_to(&mut self, t: f64) {
        if t > self.now {
            self.now = t;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;

    #[test]
    fn equal_times_fire_in_schedule_order() {
        let mut q = EventQueue::new();
        q.schedule(5.0, "A").unwrap();
        q.schedule(5.0, "B").unwrap();
        assert_eq!(q.pop().unwrap().2, "A");
        assert_eq!(q.pop().unwrap().2, "B");
    }

    #[test]
    fn event_at_now_fires_before_clock_moves() {
        let mut q = EventQueue::new();
        q.schedule(3.0, 1).unwrap();
        q.pop().unwrap();
        q.schedule(10.0, 2).unwrap();
        q.schedule(3.0, 3).unwrap();
        let (t, _, e) = q.pop().unwrap();
        assert_eq!((t, e), (3.0, 3));
    }

    #[test]
    fn past_events_rejected() {
        let mut q = EventQueue::new();
        q.schedule(4.0, ()).unwrap();
        q.pop();
        assert_eq!(q.schedule(3.9, ()), Err(QueueError::PastEvent { at: 3.9, now: 4.0 }));
        assert!(matches!(q.schedule(f64::NAN, ()), Err(QueueError::NonFinite(_))));
    }

    #[test]
    fn million_random_events_in_order() {
        let mut q = EventQueue::new();
        let mut r = substream(1, "queue-test");
        for i in 0..1_000_000u32 {
            q.schedule(r.gen_range(0.0..1000.0f64).floor(), i).unwrap();
        }
        let mut last = (f64::NEG_INFINITY, 0u64);
        while let Some((t, seq, _)) = q.pop() {
            assert!(t > last.0 || (t == last.0 && seq > last.1));
            last = (t, seq);
        }
    }
}
