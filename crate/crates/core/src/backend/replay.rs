use std::collections::HashMap;
use std::path::Path;

use super::{read_trace, sample_id, BackendError, LogitProvider, Prompt, ProviderCapabilities, TraceRecord, ORIGINAL};
use crate::metrics::truncate_topk;
use crate::scoring::{SampledTrace, TokenTrace};
use crate::token::{same_tokens, Token};

/// Serves previously recorded traces, keyed by `(query_id, prompt_variant_id)`.
#[derive(Debug, Default, Clone)]
pub struct ReplayBackend {
    records: HashMap<(String, String), TraceRecord>,
    max_k: usize,
}

impl ReplayBackend {
    pub fn new(records: impl IntoIterator<Item = TraceRecord>) -> Self {
        let mut out = ReplayBackend::default();
        out.extend(records);
        out
    }

    pub fn from_files<P: AsRef<Path>>(paths: &[P]) -> Result<Self, BackendError> {
        let mut out = ReplayBackend::default();
        for p in paths {
            out.extend(read_trace(p)?);
        }
        Ok(out)
    }

    pub fn extend(&mut self, records: impl IntoIterator<Item = TraceRecord>) {
        for r in records {
            self.max_k = self.max_k.max(r.k);
            self.records
                .insert((r.query_id.clone(), r.prompt_variant_id.clone()), r);
        }
    }

    fn lookup(&self, query_id: &str, variant_id: &str) -> Result<&TraceRecord, BackendError> {
        self.records
            .get(&(query_id.to_string(), variant_id.to_string()))
            .ok_or_else(|| BackendError::NotFound(format!("{query_id}/{variant_id}")))
    }
}

fn truncated(trace: TokenTrace<f64>, k: usize) -> Result<TokenTrace<f64>, BackendError> {
    let positions = trace
        .positions()
        .iter()
        .map(|p| truncate_topk(p.entries().iter().cloned(), k.max(1)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(BackendError::protocol)?;
    Ok(TokenTrace::new(trace.prompt_ref(), trace.response_tokens().to_vec(), positions)?)
}

impl LogitProvider for ReplayBackend {
    fn capabilities(&self) -> ProviderCapabilities {
        ProviderCapabilities {
            max_top_k: self.max_k,
            supports_teacher_forcing: true,
            supports_sampling: self.records.values().any(|r| r.chosen_logprobs.is_some()),
            supports_chat: false,
        }
    }

    fn generate_greedy(&self, prompt: &Prompt, max_tokens: usize, k: usize) -> Result<TokenTrace<f64>, BackendError> {
        let rec = self.lookup(&prompt.query_id, ORIGINAL)?;
        if rec.response_tokens.len() > max_tokens {
            return Err(BackendError::InvalidRequest(format!(
                "recorded response has {} tokens, more than max_tokens {max_tokens}",
                rec.response_tokens.len()
            )));
        }
        truncated(rec.to_trace()?, k)
    }

    fn score_teacher_forced(&self, prompt: &Prompt, response: &[Token], k: usize) -> Result<TokenTrace<f64>, BackendError> {
        let rec = self.lookup(&prompt.query_id, &prompt.variant_id())?;
        if rec.positions.len() != response.len() {
            return Err(BackendError::TraceAlignment {
                expected: response.len(),
                actual: rec.positions.len(),
            });
        }
        if !same_tokens(&rec.response_tokens, response) {
            return Err(BackendError::Protocol(format!(
                "recorded continuation for {}/{} differs from the requested one",
                prompt.query_id,
                prompt.variant_id()
            )));
        }
        truncated(rec.to_trace()?, k)
    }

    fn sample_responses(
        &self,
        prompt: &Prompt,
        n: usize,
        _temperature: f64,
        _max_tokens: usize,
        k: usize,
        _seed: u64,
    ) -> Result<Vec<SampledTrace<f64>>, BackendError> {
        (0..n)
            .map(|i| {
                let s = self.lookup(&prompt.query_id, &sample_id(i))?.to_sample()?;
                Ok(SampledTrace {
                    trace: truncated(s.trace, k)?,
                    chosen_logprobs: s.chosen_logprobs,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MockLM;

    #[test]
    fn replays_mock_traces() {
        let m = MockLM::new(4, 8, 4, 0.5).with_query("q", "orig", false);
        let orig = Prompt::original("q", "orig");
        let var = Prompt::variant("q", 2, "orgi");
        let g = m.generate_greedy(&orig, 4, 8).unwrap();
        let v = m.score_teacher_forced(&var, g.response_tokens(), 8).unwrap();
        let samples = m.sample_responses(&orig, 2, 1.0, 4, 8, 0).unwrap();
        let mut recs = vec![TraceRecord::from_trace("q", &g), TraceRecord::from_trace("q", &v)];
        recs.extend(samples.iter().map(|s| TraceRecord::from_sample("q", s)));
        let r = ReplayBackend::new(recs);

        assert_eq!(r.generate_greedy(&orig, 4, 8).unwrap(), g);
        assert_eq!(r.score_teacher_forced(&var, g.response_tokens(), 8).unwrap(), v);
        assert_eq!(r.sample_responses(&orig, 2, 1.0, 4, 8, 0).unwrap(), samples);
        let caps = r.capabilities();
        assert_eq!(caps.max_top_k, 8);
        assert!(caps.supports_sampling);

        let small = r.score_teacher_forced(&var, g.response_tokens(), 2).unwrap();
        assert!(small.positions().iter().all(|p| p.len() == 2));

        assert!(matches!(
            r.score_teacher_forced(&Prompt::variant("q", 9, "x"), g.response_tokens(), 8),
            Err(BackendError::NotFound(_))
        ));
        let short = &g.response_tokens()[..g.len() - 1];
        if !short.is_empty() {
            match r.score_teacher_forced(&var, short, 8) {
                Err(BackendError::TraceAlignment { expected, actual }) => {
                    assert_eq!((expected, actual), (short.len(), g.len()));
                }
                other => panic!("unexpected {other:?}"),
            }
        }
    }
}
