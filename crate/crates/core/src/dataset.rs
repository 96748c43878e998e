use std::collections::HashSet;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("duplicate query_id `{query_id}` (lines {first_line} and {line})")]
    DuplicateId {
        query_id: String,
        first_line: usize,
        line: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    QaJsonl,
}

/// One question with its optional supporting document and correctness label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRecord {
    pub query_id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub references: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
}

impl QueryRecord {
    pub fn parts(&self) -> PromptParts {
        PromptParts {
            question: self.question.clone(),
            context: self.context.clone(),
        }
    }

    pub fn prompt(&self) -> String {
        self.parts().render()
    }
}

/// The pieces of a prompt that interventions may touch. The instruction
/// text around them is never intervened.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptParts {
    pub question: String,
    pub context: Option<String>,
}

pub const QA_INSTRUCTION: &str = "Please directly answer the following question with one or few words:";
pub const CONTEXT_QA_INSTRUCTION: &str =
    "Please read the above article and Q&A, and directly answer the following question with one or few words:";

impl PromptParts {
    /// Applies the QA template. Records with a context (document plus any
    /// `Q: .. A: ..` history) use the conversational template.
    pub fn render(&self) -> String {
        match &self.context {
            None => format!("{QA_INSTRUCTION}\n{}", self.question),
            Some(ctx) => format!("{ctx}\n\n{CONTEXT_QA_INSTRUCTION}\nQ: {} A:", self.question),
        }
    }
}

pub fn load_dataset(path: impl AsRef<Path>, format: DatasetFormat) -> Result<Vec<QueryRecord>, DatasetError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    match format {
        DatasetFormat::QaJsonl => parse_qa_jsonl(&text),
    }
}

pub fn parse_qa_jsonl(text: &str) -> Result<Vec<QueryRecord>, DatasetError> {
    let mut seen: std::collections::HashMap<String, usize> = Default::default();
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: QueryRecord = serde_json::from_str(raw).map_err(|e| DatasetError::Parse {
            line,
            reason: e.to_string(),
        })?;
        if rec.query_id.is_empty() {
            return Err(DatasetError::Parse { line, reason: "empty query_id".into() });
        }
        if rec.question.trim().is_empty() {
            return Err(DatasetError::Parse { line, reason: "empty question".into() });
        }
        if let Some(&first_line) = seen.get(&rec.query_id) {
            return Err(DatasetError::DuplicateId {
                query_id: rec.query_id,
                first_line,
                line,
            });
        }
        seen.insert(rec.query_id.clone(), line);
        out.push(rec);
    }
    Ok(out)
}

pub fn write_dataset(path: impl AsRef<Path>, records: &[QueryRecord]) -> io::Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)
}

/// Query ids missing a correctness label.
pub fn unlabeled(records: &[QueryRecord]) -> Vec<&str> {
    records
        .iter()
        .filter(|r| r.correct.is_none())
        .map(|r| r.query_id.as_str())
        .collect()
}

pub fn ids(records: &[QueryRecord]) -> HashSet<&str> {
    records.iter().map(|r| r.query_id.as_str()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_records_in_order() {
        let text = r#"{"query_id":"b","question":"Q2?"}
{"query_id":"a","question":"Q1?","references":["x"],"correct":true}
{"query_id":"c","question":"Q3?","context":"Doc.","correct":false}
"#;
        let recs = parse_qa_jsonl(text).unwrap();
        let ids: Vec<_> = recs.iter().map(|r| r.query_id.as_str()).collect();
        assert_eq!(ids, ["b", "a", "c"]);
        assert_eq!(recs[1].references, vec!["x".to_string()]);
        assert_eq!(recs[2].correct, Some(false));
        assert_eq!(recs[0].correct, None);
    }

    #[test]
    fn duplicate_id_named() {
        let text = "{\"query_id\":\"q\",\"question\":\"a\"}\n{\"query_id\":\"q\",\"question\":\"b\"}\n";
        match parse_qa_jsonl(text) {
            Err(DatasetError::DuplicateId { query_id, first_line, line }) => {
                assert_eq!((query_id.as_str(), first_line, line), ("q", 1, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_question_cites_line() {
        let text = "{\"query_id\":\"q1\",\"question\":\"a\"}\n{\"query_id\":\"q2\"}\n";
        match parse_qa_jsonl(text) {
            Err(DatasetError::Parse { line, reason }) => {
                assert_eq!(line, 2);
                assert!(reason.contains("question"), "{reason}");
            }
            other => panic!("unexpected {other:?}"),
        }
        let err = parse_qa_jsonl("{\"query_id\":\"q\",\"question\":\"  \"}").unwrap_err();
        assert!(matches!(err, DatasetError::Parse { line: 1, .. }));
    }

    #[test]
    fn templates() {
        let plain = PromptParts { question: "Who?".into(), context: None };
        assert_eq!(
            plain.render(),
            "Please directly answer the following question with one or few words:\nWho?"
        );
        let ctx = PromptParts {
            question: "Where?".into(),
            context: Some("Doc text.\nQ: Who? A: Ann".into()),
        };
        let r = ctx.render();
        assert!(r.starts_with("Doc text.\nQ: Who? A: Ann\n\nPlease read the above article"));
        assert!(r.ends_with("\nQ: Where? A:"));
    }

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let recs = vec![QueryRecord {
            query_id: "x".into(),
            question: "q?".into(),
            context: None,
            references: vec![],
            correct: Some(true),
        }];
        write_dataset(&p, &recs).unwrap();
        assert_eq!(load_dataset(&p, DatasetFormat::QaJsonl).unwrap(), recs);
    }
}
