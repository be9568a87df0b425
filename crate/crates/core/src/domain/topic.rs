use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TopicError {
    #[error("topic is empty")]
    Empty,
    #[error("topic {0:?} has an empty segment")]
    EmptySegment(String),
    #[error("topic {0:?} contains a wildcard character")]
    Wildcard(String),
    #[error("filter {0:?}: '#' must be the last segment")]
    HashNotLast(String),
    #[error("filter {0:?}: wildcard must occupy a whole segment")]
    PartialWildcard(String),
}

/// A concrete publication channel such as `net/cell1/kpi`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Topic {
    segments: Vec<String>,
}

impl Topic {
    pub fn new(s: &str) -> Result<Self, TopicError> {
        if s.is_empty() {
            return Err(TopicError::Empty);
        }
        let segments: Vec<String> = s.split('/').map(str::to_string).collect();
        for seg in &segments {
            if seg.is_empty() {
                return Err(TopicError::EmptySegment(s.to_string()));
            }
            if seg.contains(['+', '#']) {
                return Err(TopicError::Wildcard(s.to_string()));
            }
        }
        Ok(Self { segments })
    }

    pub fn segments(&self) -> &[String] {
        &self.segments
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
enum FilterSegment {
    Name(String),
    Plus,
    Hash,
}

/// Subscription filter with `+` (one segment) and trailing `#` (any suffix,
/// including none) wildcards.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TopicFilter {
    segments: Vec<FilterSegment>,
}

impl TopicFilter {
    pub fn new(s: &str) -> Result<Self, TopicError> {
        if s.is_empty() {
            return Err(TopicError::Empty);
        }
        let raw: Vec<&str> = s.split('/').collect();
        let mut segments = Vec::with_capacity(raw.len());
        for (i, seg) in raw.iter().enumerate() {
            let parsed = match *seg {
                "" => return Err(TopicError::EmptySegment(s.to_string())),
                "+" => FilterSegment::Plus,
                "#" if i + 1 == raw.len() => FilterSegment::Hash,
                "#" => return Err(TopicError::HashNotLast(s.to_string())),
                other if other.contains(['+', '#']) => {
                    return Err(TopicError::PartialWildcard(s.to_string()))
                }
                other => FilterSegment::Name(other.to_string()),
            };
            segments.push(parsed);
        }
        Ok(Self { segments })
    }

    /// Filter matching exactly one topic.
    pub fn exact(topic: &Topic) -> Self {
        Self {
            segments: topic.segments.iter().cloned().map(FilterSegment::Name).collect(),
        }
    }

    /// `#`: matches every topic.
    pub fn any() -> Self {
        Self { segments: vec![FilterSegment::Hash] }
    }

    pub fn has_wildcards(&self) -> bool {
        self.segments.iter().any(|s| !matches!(s, FilterSegment::Name(_)))
    }

    pub fn matches(&self, topic: &Topic) -> bool {
        match_filter(self, topic)
    }
}

/// True iff `topic` matches `filter` under `+`/`#` semantics.
pub fn match_filter(filter: &TopicFilter, topic: &Topic) -> bool {
    let mut topics = topic.segments.iter();
    for f in &filter.segments {
        match f {
            FilterSegment::Hash => return true,
            FilterSegment::Plus => {
                if topics.next().is_none() {
                    return false;
                }
            }
            FilterSegment::Name(name) => match topics.next() {
                Some(t) if t == name => {}
                _ => return false,
            },
        }
    }
    topics.next().is_none()
}

impl fmt::Display for Topic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.segments.join("/"))
    }
}

impl fmt::Display for TopicFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = self
            .segments
            .iter()
            .map(|s| match s {
                FilterSegment::Name(n) => n.as_str(),
                FilterSegment::Plus => "+",
                FilterSegment::Hash => "#",
            })
            .collect();
        f.write_str(&parts.join("/"))
    }
}

impl FromStr for Topic {
    type Err = TopicError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Topic::new(s)
    }
}

impl FromStr for TopicFilter {
    type Err = TopicError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TopicFilter::new(s)
    }
}

macro_rules! string_serde {
    ($ty:ty) => {
        impl Serialize for $ty {
            fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
                serializer.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
                let s = String::deserialize(deserializer)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

string_serde!(Topic);
string_serde!(TopicFilter);
