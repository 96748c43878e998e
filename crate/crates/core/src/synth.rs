//! The bundled synthetic QA set and the mock model that goes with it.
//!
//! Half the queries are marked correct and registered as robust with the
//! mock, so their predictions ignore interventions; the other half are
//! marked incorrect and mix in a prompt-dependent distribution.

use crate::backend::MockLM;
use crate::dataset::{parse_qa_jsonl, QueryRecord};

/// The shipped dataset file, regenerated by [`synthetic_dataset`].
pub const SYNTHETIC_JSONL: &str = include_str!("../data/synthetic_qa.jsonl");

pub const SYNTHETIC_QUERIES: usize = 200;

const SUBJECTS: &[&str] = &[
    "river", "mountain", "painter", "composer", "element", "planet", "language", "festival", "bridge", "island",
    "novel", "glacier", "volcano", "cathedral", "inventor", "desert", "harbour", "emperor", "telescope", "forest",
];

const TEMPLATES: &[&str] = &[
    "Which country is home to the {s} called Northwind {n}?",
    "In what year was the famous {s} number {n} first recorded?",
    "What colour is usually associated with the {s} catalogued as item {n}?",
    "Who first described the {s} listed under reference {n}?",
    "How many visitors does the {s} known as Site {n} receive each year?",
    "Which city lies closest to the {s} registered as entry {n}?",
    "What material was used to build the {s} named Landmark {n}?",
    "Which language is spoken near the {s} labelled Region {n}?",
    "What is the traditional name of the {s} marked on chart {n}?",
    "Which museum holds records about the {s} archived as folder {n}?",
];

/// Deterministic 200-query dataset; even-numbered queries are correct.
pub fn synthetic_dataset() -> Vec<QueryRecord> {
    (0..SYNTHETIC_QUERIES)
        .map(|i| {
            let subject = SUBJECTS[i % SUBJECTS.len()];
            let template = TEMPLATES[(i / SUBJECTS.len() + i) % TEMPLATES.len()];
            QueryRecord {
                query_id: format!("syn{i:03}"),
                question: template.replace("{s}", subject).replace("{n}", &(i + 1).to_string()),
                context: None,
                references: vec![format!("answer {i}")],
                correct: Some(i % 2 == 0),
            }
        })
        .collect()
}

/// The shipped file, parsed.
pub fn bundled_dataset() -> Vec<QueryRecord> {
    parse_qa_jsonl(SYNTHETIC_JSONL).expect("bundled dataset parses")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MockSettings {
    pub seed: u64,
    pub vocab_size: usize,
    pub max_len: usize,
    pub sensitivity: f64,
}

impl Default for MockSettings {
    fn default() -> Self {
        MockSettings {
            seed: 0,
            vocab_size: 128,
            max_len: 8,
            sensitivity: 0.5,
        }
    }
}

/// A mock with every query of `records` registered; correct queries are
/// robust, incorrect and unlabeled ones are not.
pub fn mock_for(records: &[QueryRecord], settings: MockSettings) -> MockLM {
    records.iter().fold(
        MockLM::new(settings.seed, settings.vocab_size, settings.max_len, settings.sensitivity),
        |lm, r| lm.with_query(r.query_id.clone(), r.prompt(), r.correct == Some(true)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_file_matches_generator() {
        assert_eq!(bundled_dataset(), synthetic_dataset());
    }

    #[test]
    fn balanced_and_distinct() {
        let d = synthetic_dataset();
        assert_eq!(d.len(), 200);
        assert_eq!(d.iter().filter(|r| r.correct == Some(true)).count(), 100);
        let qs: std::collections::HashSet<_> = d.iter().map(|r| &r.question).collect();
        assert_eq!(qs.len(), 200);
    }

    #[test]
    fn mock_registers_labels() {
        let d = synthetic_dataset();
        let lm = mock_for(&d[..2], MockSettings::default());
        assert!(lm.query("syn000").unwrap().robust);
        assert!(!lm.query("syn001").unwrap().robust);
        assert_eq!(lm.query("syn001").unwrap().original, d[1].prompt());
    }
}
