use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::types::{PeerId, Seconds};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "subject")]
pub enum EventKind {
    PeerStart(PeerId),
    AnnounceDue(PeerId),
    ChokeRound(PeerId),
    OptimisticRound(PeerId),
    PeerDepart(PeerId),
    PmTimer(PeerId),
    MetricsBinClose,
    /// Re-announces of peers that lost a neighbour at this instant.
    Reannounce,
    Disruption(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub time: Seconds,
    pub seq: u64,
    pub kind: EventKind,
}

impl Eq for Event {}

impl Ord for Event {
    // Reversed so the max-heap pops the earliest (time, seq) first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Time-ordered queue; equal times pop in insertion order.
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Event>,
    seq: u64,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, time: Seconds, kind: EventKind) {
        debug_assert!(time >= 0.0 && time.is_finite(), "bad event time {time}");
        self.heap.push(Event {
            time,
            seq: self.seq,
            kind,
        });
        self.seq += 1;
    }

    pub fn peek_time(&self) -> Option<Seconds> {
        self.heap.peek().map(|e| e.time)
    }

    pub fn pop(&mut self) -> Option<Event> {
        self.heap.pop()
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ties_pop_in_insertion_order() {
        let mut q = EventQueue::new();
        q.push(5.0, EventKind::PeerStart(PeerId(2)));
        q.push(1.0, EventKind::MetricsBinClose);
        q.push(5.0, EventKind::PeerStart(PeerId(1)));
        assert_eq!(q.pop().unwrap().kind, EventKind::MetricsBinClose);
        assert_eq!(q.pop().unwrap().kind, EventKind::PeerStart(PeerId(2)));
        assert_eq!(q.pop().unwrap().kind, EventKind::PeerStart(PeerId(1)));
        assert!(q.pop().is_none());
    }

    proptest! {
        #[test]
        fn pops_are_non_decreasing(times in proptest::collection::vec(0.0f64..1e6, 1..200)) {
            let mut q = EventQueue::new();
            for t in &times {
                q.push(*t, EventKind::MetricsBinClose);
            }
            let mut last = (f64::NEG_INFINITY, 0u64);
            while let Some(e) = q.pop() {
                prop_assert!(e.time > last.0 || (e.time == last.0 && e.seq > last.1));
                last = (e.time, e.seq);
            }
        }
    }
}
