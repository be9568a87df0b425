use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use sha2::{Digest, Sha256};

use crate::domain::{Micros, NodeId, Publication, Topic};

use super::scenario::TopicWorkload;

/// Publication generator of one topic. Each topic draws from its own ChaCha
/// stream (selected by a hash of the topic name) so topics never perturb each
/// other's arrivals.
#[derive(Clone, Debug)]
pub struct TopicSource {
    pub topic: Topic,
    pub publisher: NodeId,
    spec: TopicWorkload,
    rng: ChaCha8Rng,
    exp: Exp<f64>,
    drawn: u64,
    next_seq: u64,
}

fn stream_of(topic: &Topic) -> u64 {
    let digest = Sha256::digest(topic.to_string().as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

impl TopicSource {
    pub fn new(topic: Topic, publisher: NodeId, spec: TopicWorkload, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_of(&topic));
        let exp = Exp::new(spec.rate_per_s).expect("rates are validated positive");
        Self { topic, publisher, spec, rng, exp, drawn: 0, next_seq: 1 }
    }

    /// Time of the first arrival.
    pub fn first(&mut self) -> Option<Micros> {
        self.after(self.spec.start_ms * 1000)
    }

    /// Next arrival after one at `now`, or `None` once `max_count` arrivals
    /// have been drawn.
    pub fn after(&mut self, now: Micros) -> Option<Micros> {
        if self.spec.max_count.is_some_and(|m| self.drawn >= m) {
            return None;
        }
        self.drawn += 1;
        let gap = if self.spec.periodic {
            (1e6 / self.spec.rate_per_s).round() as Micros
        } else {
            (self.exp.sample(&mut self.rng) * 1e6).round() as Micros
        };
        let at = now + gap.max(1);
        if self.spec.stop_ms.is_some_and(|stop| at > stop * 1000) {
            return None;
        }
        Some(at)
    }

    /// Publication due now. Payload values are integers in `0..=9`.
    pub fn publish(&mut self, now: Micros) -> Publication {
        let payload = (0..self.spec.payload_len).map(|_| self.rng.random_range(0..=9u8) as f64).collect();
        let seq = self.next_seq;
        self.next_seq += 1;
        Publication::raw(self.topic.clone(), self.publisher.as_str(), seq, now, self.spec.size_bytes, payload)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(periodic: bool) -> TopicWorkload {
        TopicWorkload { size_bytes: 10, rate_per_s: 100.0, periodic, max_count: Some(5), start_ms: 2, stop_ms: None, payload_len: 3 }
    }

    fn arrivals(mut s: TopicSource) -> Vec<Micros> {
        let mut out = Vec::new();
        let mut t = s.first();
        while let Some(now) = t {
            out.push(now);
            t = s.after(now);
        }
        out
    }

    #[test]
    fn periodic_arrivals() {
        let s = TopicSource::new(Topic::new("a").unwrap(), "P".into(), spec(true), 0);
        assert_eq!(arrivals(s), vec![12_000, 22_000, 32_000, 42_000, 52_000]);
    }

    #[test]
    fn stop_time_ends_arrivals() {
        let s = TopicSource::new(Topic::new("a").unwrap(), "P".into(), TopicWorkload { stop_ms: Some(32), ..spec(true) }, 0);
        assert_eq!(arrivals(s), vec![12_000, 22_000, 32_000]);
    }

    #[test]
    fn streams_are_seeded_per_topic() {
        let a = || TopicSource::new(Topic::new("a").unwrap(), "P".into(), spec(false), 7);
        let b = TopicSource::new(Topic::new("b").unwrap(), "P".into(), spec(false), 7);
        assert_eq!(arrivals(a()), arrivals(a()));
        assert_ne!(arrivals(a()), arrivals(b));
        let p = a().publish(0);
        assert_eq!(p.payload.len(), 3);
        assert!(p.payload.iter().all(|v| (0.0..=9.0).contains(v) && v.fract() == 0.0));
    }
}
