use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::domain::Publication;

pub const DEFAULT_BUFFER_CAPACITY: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferEntry {
    /// Per-subscription delivery sequence number, starting at 1.
    pub dseq: u64,
    pub publication: Publication,
}

/// Bounded FIFO of publications accepted for one subscription and not yet
/// acknowledged. Overflow evicts the oldest entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetransmitBuffer {
    capacity: usize,
    entries: VecDeque<BufferEntry>,
    next_dseq: u64,
    acked: u64,
    evicted: u64,
}

impl RetransmitBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), entries: VecDeque::new(), next_dseq: 1, acked: 0, evicted: 0 }
    }

    /// Accepts `p`; returns its delivery sequence number and the evicted
    /// entry, if the buffer was full.
    pub fn push(&mut self, p: Publication) -> (u64, Option<BufferEntry>) {
        let dseq = self.next_dseq;
        self.next_dseq += 1;
        let evicted = if self.entries.len() == self.capacity {
            self.evicted += 1;
            self.entries.pop_front()
        } else {
            None
        };
        self.entries.push_back(BufferEntry { dseq, publication: p });
        (dseq, evicted)
    }

    /// Cumulative acknowledgement: drops every entry with `dseq <= upto`.
    pub fn ack(&mut self, upto: u64) {
        self.acked = self.acked.max(upto);
        while self.entries.front().is_some_and(|e| e.dseq <= upto) {
            self.entries.pop_front();
        }
    }

    pub fn unacked(&self) -> impl Iterator<Item = &BufferEntry> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn acked(&self) -> u64 {
        self.acked
    }

    /// Number of delivery sequence numbers handed out so far.
    pub fn accepted(&self) -> u64 {
        self.next_dseq - 1
    }

    pub fn evicted(&self) -> u64 {
        self.evicted
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Topic;

    fn publ(seq: u64) -> Publication {
        Publication::raw(Topic::new("t").unwrap(), "P", seq, 0, 1, vec![])
    }

    #[test]
    fn cumulative_ack() {
        let mut b = RetransmitBuffer::new(8);
        for s in 1..=7 {
            b.push(publ(s));
        }
        b.ack(2);
        b.ack(6);
        assert_eq!(b.unacked().map(|e| e.dseq).collect::<Vec<_>>(), vec![7]);
        b.ack(7);
        assert!(b.is_empty());
    }

    #[test]
    fn overflow_evicts_oldest() {
        let mut b = RetransmitBuffer::new(2);
        b.push(publ(1));
        b.push(publ(2));
        let (dseq, ev) = b.push(publ(3));
        assert_eq!(dseq, 3);
        assert_eq!(ev.map(|e| e.dseq), Some(1));
        assert_eq!(b.evicted(), 1);
        assert_eq!(b.len(), 2);
    }
}
