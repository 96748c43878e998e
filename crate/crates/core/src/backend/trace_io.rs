//! Trace files: one JSON object per `(query_id, prompt_variant_id)`.
//!
//! Logits are written as 64-bit floats in shortest round-trip form and read
//! back bit-exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::BackendError;
use crate::metrics::TruncatedDistribution;
use crate::scoring::{SampledTrace, TokenTrace};
use crate::token::Token;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub query_id: String,
    pub prompt_variant_id: String,
    pub k: usize,
    pub response_tokens: Vec<Token>,
    pub positions: Vec<Vec<(Token, f64)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen_logprobs: Option<Vec<f64>>,
}

impl TraceRecord {
    pub fn from_trace(query_id: impl Into<String>, trace: &TokenTrace<f64>) -> Self {
        TraceRecord {
            query_id: query_id.into(),
            prompt_variant_id: trace.prompt_ref().to_string(),
            k: trace.positions().iter().map(|p| p.k()).max().unwrap_or(0),
            response_tokens: trace.response_tokens().to_vec(),
            positions: trace.positions().iter().map(|p| p.entries().to_vec()).collect(),
            chosen_logprobs: None,
        }
    }

    pub fn from_sample(query_id: impl Into<String>, sample: &SampledTrace<f64>) -> Self {
        TraceRecord {
            chosen_logprobs: Some(sample.chosen_logprobs.clone()),
            ..Self::from_trace(query_id, &sample.trace)
        }
    }

    pub fn to_trace(&self) -> Result<TokenTrace<f64>, BackendError> {
        let positions = self
            .positions
            .iter()
            .map(|entries| TruncatedDistribution::from_entries(entries.clone(), self.k))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| BackendError::Protocol(format!("{}/{}: {e}", self.query_id, self.prompt_variant_id)))?;
        Ok(TokenTrace::new(
            self.prompt_variant_id.clone(),
            self.response_tokens.clone(),
            positions,
        )?)
    }

    pub fn to_sample(&self) -> Result<SampledTrace<f64>, BackendError> {
        let chosen_logprobs = self.chosen_logprobs.clone().ok_or_else(|| {
            BackendError::Protocol(format!(
                "{}/{} has no sampled-token log-probabilities",
                self.query_id, self.prompt_variant_id
            ))
        })?;
        Ok(SampledTrace {
            trace: self.to_trace()?,
            chosen_logprobs,
        })
    }
}

pub fn write_trace(path: impl AsRef<Path>, records: &[TraceRecord]) -> Result<(), BackendError> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for r in records {
        if let Some(bad) = r.positions.iter().flatten().find(|(_, l)| !l.is_finite()) {
            return Err(BackendError::InvalidRequest(format!(
                "{}/{}: non-finite logit for {}",
                r.query_id, r.prompt_variant_id, bad.0
            )));
        }
        serde_json::to_writer(&mut buf, r).map_err(BackendError::protocol)?;
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|source| BackendError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<Vec<TraceRecord>, BackendError> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|source| BackendError::Io {
        path: shown.clone(),
        source,
    })?;
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let body = line.trim_end_matches(['\n', '\r']);
        if !body.trim().is_empty() {
            let rec: TraceRecord = serde_json::from_str(body).map_err(|e| BackendError::Parse {
                path: shown.clone(),
                offset: offset + byte_column(body, e.column()),
                reason: e.to_string(),
            })?;
            out.push(rec);
        }
        offset += line.len();
    }
    Ok(out)
}

// serde_json columns are 1-based character counts within the line.
fn byte_column(line: &str, column: usize) -> usize {
    line.char_indices()
        .nth(column.saturating_sub(1))
        .map(|(i, _)| i)
        .unwrap_or(line.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::truncate_topk;
    use proptest::prelude::*;

    fn sample_trace() -> TokenTrace<f64> {
        let positions = vec![
            truncate_topk(vec![(Token::with_id("a", 1), -0.1), (Token::with_id("b", 2), -2.4000000000000004)], 3).unwrap(),
            truncate_topk(vec![(Token::with_id("c", 3), 0.1 + 0.2), (Token::with_id("a", 1), -1e-300)], 3).unwrap(),
            truncate_topk(vec![(Token::with_id("<eos>", 0), -5e-324)], 3).unwrap(),
        ];
        let toks = positions.iter().map(|p| p.top().clone()).collect();
        TokenTrace::new("original", toks, positions).unwrap()
    }

    #[test]
    fn round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let tr = sample_trace();
        write_trace(&path, &[TraceRecord::from_trace("q1", &tr)]).unwrap();
        let back = read_trace(&path).unwrap();
        assert_eq!(back.len(), 1);
        let tr2 = back[0].to_trace().unwrap();
        assert_eq!(tr2, tr);
        for (p, q) in tr.positions().iter().zip(tr2.positions()) {
            for ((_, a), (_, b)) in p.entries().iter().zip(q.entries()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn empty_list_is_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.jsonl");
        write_trace(&path, &[]).unwrap();
        assert_eq!(fs::read(&path).unwrap().len(), 0);
        assert!(read_trace(&path).unwrap().is_empty());
    }

    #[test]
    fn corrupted_file_reports_byte_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        write_trace(&path, &[TraceRecord::from_trace("q1", &sample_trace())]).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let first_len = bytes.len();
        bytes.extend_from_slice(b"{\"query_id\": oops}\n");
        fs::write(&path, &bytes).unwrap();
        match read_trace(&path) {
            Err(BackendError::Parse { offset, .. }) => {
                assert_eq!(offset, first_len + "{\"query_id\": ".len());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wire_layout() {
        let line = serde_json::to_string(&TraceRecord::from_trace("q", &sample_trace())).unwrap();
        assert!(line.starts_with(r#"{"query_id":"q","prompt_variant_id":"original","k":3,"response_tokens":["#));
        assert!(line.contains(r#""positions":[[[{"text":"a","id":1},-0.1],"#));
        assert!(!line.contains("chosen_logprobs"));
    }

    #[test]
    fn samples_keep_logprobs() {
        let s = SampledTrace { trace: sample_trace(), chosen_logprobs: vec![-0.1, -0.3, -1e-9] };
        let rec = TraceRecord::from_sample("q", &s);
        assert_eq!(rec.to_sample().unwrap(), s);
        assert!(TraceRecord::from_trace("q", &s.trace).to_sample().is_err());
    }

    #[test]
    fn non_finite_logits_rejected_on_write() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = TraceRecord::from_trace("q", &sample_trace());
        rec.positions[0][0].1 = f64::NEG_INFINITY;
        assert!(write_trace(dir.path().join("x"), &[rec]).is_err());
    }

    proptest! {
        #[test]
        fn any_finite_logit_round_trips(bits in prop::collection::vec(any::<u64>(), 1..20)) {
            let logits: Vec<f64> = bits.into_iter().map(f64::from_bits).filter(|x| x.is_finite()).collect();
            prop_assume!(!logits.is_empty());
            let n = logits.len();
            let entries: Vec<(Token, f64)> = logits.iter().enumerate().map(|(i, &l)| (Token::with_id(format!("t{i}"), i as u32), l)).collect();
            let pos = truncate_topk(entries, n).unwrap();
            let tr = TokenTrace::new("v0", vec![pos.top().clone()], vec![pos]).unwrap();
            let json = serde_json::to_string(&TraceRecord::from_trace("q", &tr)).unwrap();
            let back: TraceRecord = serde_json::from_str(&json).unwrap();
            let tr2 = back.to_trace().unwrap();
            for ((_, a), (_, b)) in tr.positions()[0].entries().iter().zip(tr2.positions()[0].entries()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
