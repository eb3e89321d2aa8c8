//! Annotation answers and the oracle abstraction.

use std::fmt;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::graph::{Graph, OpenSetSplit};

/// The wire spelling of [`Answer::Unknown`].
pub const UNKNOWN_SENTINEL: &str = "UNKNOWN";

/// What an annotator says about a node: one of the `C` known classes, or
/// that it belongs to none of them.
///
/// Serialized as the bare class index or the string `"UNKNOWN"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Answer {
    Id(usize),
    Unknown,
}

impl Answer {
    pub fn is_id(self) -> bool {
        matches!(self, Answer::Id(_))
    }
}

impl Serialize for Answer {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Answer::Id(c) => s.serialize_u64(*c as u64),
            Answer::Unknown => s.serialize_str(UNKNOWN_SENTINEL),
        }
    }
}

impl<'de> Deserialize<'de> for Answer {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct AnswerVisitor;

        impl Visitor<'_> for AnswerVisitor {
            type Value = Answer;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "a class index or {UNKNOWN_SENTINEL:?}")
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Answer, E> {
                Ok(Answer::Id(v as usize))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Answer, E> {
                usize::try_from(v)
                    .map(Answer::Id)
                    .map_err(|_| E::custom(format!("negative class index {v}")))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<Answer, E> {
                if v.eq_ignore_ascii_case(UNKNOWN_SENTINEL) {
                    Ok(Answer::Unknown)
                } else {
                    Err(E::custom(format!("unexpected answer {v:?}")))
                }
            }
        }

        d.deserialize_any(AnswerVisitor)
    }
}

/// Source of annotations. Implementations must answer consistently when a
/// node is asked twice.
pub trait Oracle {
    fn query(&mut self, node: usize) -> Answer;
}

/// Answers from ground-truth labels: ID classes are remapped to `0..C`,
/// everything else is [`Answer::Unknown`].
#[derive(Debug, Clone)]
pub struct SimulatedOracle {
    answers: Vec<Answer>,
    calls: Vec<u32>,
}

impl SimulatedOracle {
    pub fn new(graph: &Graph, split: &OpenSetSplit) -> Self {
        let answers = graph
            .labels()
            .iter()
            .map(|&y| split.to_id_label(y).map_or(Answer::Unknown, Answer::Id))
            .collect();
        Self {
            answers,
            calls: vec![0; graph.n_nodes()],
        }
    }

    /// Answer without recording a call.
    pub fn peek(&self, node: usize) -> Answer {
        self.answers[node]
    }

    /// How many times `node` has been queried.
    pub fn calls(&self, node: usize) -> u32 {
        self.calls[node]
    }

    pub fn max_calls(&self) -> u32 {
        self.calls.iter().copied().max().unwrap_or(0)
    }
}

impl Oracle for SimulatedOracle {
    fn query(&mut self, node: usize) -> Answer {
        self.calls[node] += 1;
        self.answers[node]
    }
}

/// Builds the ground-truth oracle for `split` on `graph`.
pub fn simulated_oracle(graph: &Graph, split: &OpenSetSplit) -> SimulatedOracle {
    SimulatedOracle::new(graph, split)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn answer_wire_format() {
        assert_eq!(serde_json::to_string(&Answer::Id(3)).unwrap(), "3");
        assert_eq!(serde_json::to_string(&Answer::Unknown).unwrap(), "\"UNKNOWN\"");
        assert_eq!(serde_json::from_str::<Answer>("2").unwrap(), Answer::Id(2));
        assert_eq!(serde_json::from_str::<Answer>("\"unknown\"").unwrap(), Answer::Unknown);
        assert!(serde_json::from_str::<Answer>("-1").is_err());
        assert!(serde_json::from_str::<Answer>("\"cat\"").is_err());
    }
}
