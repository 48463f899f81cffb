//! Discrete-event core: virtual clock, event queue, latency model, message
//! accounting and a running digest of everything that fired.

pub mod churn;
pub mod queue;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use churn::{ChurnEvent, ChurnSchedule, TargetSelector};
pub use queue::{EventQueue, QueueError};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("event cap of {0} exceeded; aborting (livelock?)")]
    EventCap(u64),
    #[error(transparent)]
    Queue(#[from] QueueError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Latency units per plane unit.
    pub latency_scale: f64,
    /// Added to every delivery so zero-distance exchanges still order causally.
    pub min_delta: f64,
    pub event_cap: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig { latency_scale: 1.0, min_delta: 1e-6, event_cap: 100_000_000 }
    }
}

impl SimConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.latency_scale.is_finite() && self.latency_scale > 0.0) {
            v.push(format!("latency_scale must be positive, got {}", self.latency_scale));
        }
        if !(self.min_delta.is_finite() && self.min_delta > 0.0) {
            v.push(format!("min_delta must be positive, got {}", self.min_delta));
        }
        if self.event_cap == 0 {
            v.push("event_cap must be positive".into());
        }
        v
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MessageStats {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
}

impl MessageStats {
    pub fn in_flight(&self) -> u64 {
        self.sent - self.delivered - self.dropped
    }
}

pub struct Engine<E> {
    queue: EventQueue<E>,
    cfg: SimConfig,
    hasher: Sha256,
    processed: u64,
    pub stats: MessageStats,
}

impl<E> Engine<E> {
    pub fn new(cfg: SimConfig) -> Self {
        Engine { queue: EventQueue::new(), cfg, hasher: Sha256::new(), processed: 0, stats: MessageStats::default() }
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn now(&self) -> f64 {
        self.queue.now()
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn processed(&self) -> u64 {
        self.processed
    }

    /// One-way delay for a link of the given length.
    pub fn latency(&self, length: f64) -> f64 {
        length * self.cfg.latency_scale + self.cfg.min_delta
    }

    pub fn schedule_at(&mut self, at: f64, event: E) -> Result<(), SimError> {
        self.queue.schedule(at, event)?;
        Ok(())
    }

    pub fn schedule_in(&mut self, delay: f64, event: E) {
        let at = self.now() + delay.max(0.0);
        self.queue.schedule(at, event).expect("delay is non-negative and finite");
    }

    /// Schedules a message delivery across a link of `length` and counts it as sent.
    pub fn send(&mut self, length: f64, event: E) {
        self.stats.sent += 1;
        let d = self.latency(length);
        self.schedule_in(d, event);
    }

    pub fn peek_time(&self) -> Option<f64> {
        self.queue.peek_time()
    }

    /// Pops the next event if it fires no later than `until`.
    pub fn next_until(&mut self, until: f64) -> Result<Option<(f64, E)>, SimError> {
        match self.queue.peek_time() {
            Some(t) if t <= until => {}
            _ => {
                self.queue.advance_to(until);
                return Ok(None);
            }
        }
        if self.processed >= self.cfg.event_cap {
            return Err(SimError::EventCap(self.cfg.event_cap));
        }
        self.processed += 1;
        let (t, seq, e) = self.queue.pop().expect("peeked");
        self.hasher.update(t.to_bits().to_le_bytes());
        self.hasher.update(seq.to_le_bytes());
        Ok(Some((t, e)))
    }

    /// Folds extra words describing the event just handled into the digest.
    pub fn trace(&mut self, words: &[u64]) {
        for w in words {
            self.hasher.update(w.to_le_bytes());
        }
    }

    pub fn digest(&self) -> String {
        hex::encode(self.hasher.clone().finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_run_quiesces_immediately() {
        let mut e: Engine<()> = Engine::new(SimConfig::default());
        assert_eq!(e.next_until(100.0).unwrap(), None);
        assert_eq!(e.processed(), 0);
        assert_eq!(e.now(), 100.0);
    }

    #[test]
    fn request_reply_takes_one_rtt() {
        let mut e: Engine<u8> = Engine::new(SimConfig { min_delta: 0.0, ..Default::default() });
        e.send(25.0, 1);
        let (t1, _) = e.next_until(f64::INFINITY).unwrap().unwrap();
        e.send(25.0, 2);
        let (t2, _) = e.next_until(f64::INFINITY).unwrap().unwrap();
        assert_eq!(t1, 25.0);
        assert_eq!(t2, 50.0);
    }

    #[test]
    fn colocated_delivery_uses_min_delta() {
        let mut e: Engine<u8> = Engine::new(SimConfig::default());
        e.send(0.0, 1);
        let (t, _) = e.next_until(1.0).unwrap().unwrap();
        assert_eq!(t, 1e-6);
    }

    #[test]
    fn event_cap_aborts() {
        let mut e: Engine<u8> = Engine::new(SimConfig { event_cap: 3, ..Default::default() });
        for _ in 0..5 {
            e.schedule_in(1.0, 0);
        }
        for _ in 0..3 {
            e.next_until(10.0).unwrap();
        }
        assert_eq!(e.next_until(10.0), Err(SimError::EventCap(3)));
    }

    #[test]
    fn digest_is_reproducible() {
        let run = || {
            let mut e: Engine<u8> = Engine::new(SimConfig::default());
            for i in 0..100u8 {
                e.schedule_in(f64::from(i % 7), i);
            }
            while let Some((_, x)) = e.next_until(50.0).unwrap() {
                e.trace(&[u64::from(x)]);
            }
            e.digest()
        };
        assert_eq!(run(), run());
        assert_eq!(run().len(), 64);
    }
}
