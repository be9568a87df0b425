use serde::{Deserialize, Serialize};

use super::{Micros, Topic};

pub type Payload = Vec<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PublicationTag {
    /// Emitted by the originating publisher, untouched by any stage.
    Raw,
    Derived,
}

/// Identity of a publication for deduplication: `(source, topic, seq)`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PublicationKey {
    pub source: String,
    pub topic: Topic,
    pub seq: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Publication {
    pub topic: Topic,
    /// Publisher node id, or funnel stage id for funnel emissions.
    pub source: String,
    pub seq: u64,
    pub ts_us: Micros,
    pub size_bytes: u64,
    pub payload: Payload,
    pub tag: PublicationTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic_tag: Option<String>,
}

impl Publication {
    pub fn raw(
        topic: Topic,
        source: impl Into<String>,
        seq: u64,
        ts_us: Micros,
        size_bytes: u64,
        payload: Payload,
    ) -> Self {
        Self {
            topic,
            source: source.into(),
            seq,
            ts_us,
            size_bytes: size_bytes.max(1),
            payload,
            tag: PublicationTag::Raw,
            semantic_tag: None,
        }
    }

    pub fn key(&self) -> PublicationKey {
        PublicationKey { source: self.source.clone(), topic: self.topic.clone(), seq: self.seq }
    }

    /// Canonical combination order for funnels.
    pub fn sort_key(&self) -> (&Topic, &str, u64) {
        (&self.topic, self.source.as_str(), self.seq)
    }
}
