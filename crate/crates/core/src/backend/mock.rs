use std::collections::BTreeMap;

use rand::Rng;
use sha2::{Digest, Sha256};

use super::{BackendError, ChatMessage, ChatParams, ChatProvider, LogitProvider, Prompt, ProviderCapabilities};
use crate::metrics::{softmax, truncate_topk, TruncatedDistribution};
use crate::rng::{derive_rng, stream_id};
use crate::scoring::{SampledTrace, TokenTrace};
use crate::token::Token;

/// Largest number of sequences [`enumerate_sequences`] will visit.
pub const MAX_ENUMERATION: f64 = 1e6;

/// A language model whose next-token distribution can be queried directly.
pub trait SequenceModel {
    fn vocab_size(&self) -> usize;
    fn max_len(&self) -> usize;
    /// Absorbing end-of-sequence token, if any.
    fn eos(&self) -> Option<u32>;
    /// Full next-token distribution over `0..vocab_size`.
    fn next_dist(&self, prompt: &Prompt, context: &[u32]) -> Vec<f64>;
}

/// Per-query setup of the mock: the original prompt text and whether the
/// model's predictions survive interventions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockQuery {
    pub original: String,
    pub robust: bool,
}

/// Deterministic toy language model.
///
/// The distribution for the original prompt of a query is a hash-derived
/// point on the simplex, keyed by `(seed, query_id, context)`. Any other
/// prompt text for the same query mixes in a second, independently hashed
/// distribution keyed by the text:
/// `(1 - λ) · original + λ · perturbed`, with `λ = 0` for robust queries.
/// Token 0 is an absorbing end-of-sequence token.
#[derive(Debug, Clone)]
pub struct MockLM {
    pub seed: u64,
    pub vocab_size: usize,
    pub max_len: usize,
    pub eos_token: u32,
    /// Mixing weight λ for non-robust queries.
    pub sensitivity: f64,
    /// Spread of the hashed logits; larger is peakier.
    pub sharpness: f64,
    queries: BTreeMap<String, MockQuery>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl MockLM {
    pub fn new(seed: u64, vocab_size: usize, max_len: usize, sensitivity: f64) -> Self {
        assert!(vocab_size >= 2, "mock vocabulary needs at least two tokens");
        assert!(max_len >= 1);
        MockLM {
            seed,
            vocab_size,
            max_len,
            eos_token: 0,
            sensitivity,
            sharpness: 6.0,
            queries: BTreeMap::new(),
        }
    }

    pub fn with_sharpness(mut self, sharpness: f64) -> Self {
        self.sharpness = sharpness;
        self
    }

    pub fn register(&mut self, query_id: impl Into<String>, query: MockQuery) {
        self.queries.insert(query_id.into(), query);
    }

    pub fn with_query(mut self, query_id: impl Into<String>, original: impl Into<String>, robust: bool) -> Self {
        self.register(query_id, MockQuery { original: original.into(), robust });
        self
    }

    pub fn query(&self, query_id: &str) -> Option<&MockQuery> {
        self.queries.get(query_id)
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.queries.keys().map(String::as_str)
    }

    /// λ applied to a prompt: zero for the registered original text and for
    /// robust queries.
    pub fn effective_sensitivity(&self, prompt: &Prompt) -> f64 {
        match self.queries.get(&prompt.query_id) {
            Some(q) if q.original == prompt.text || q.robust => 0.0,
            _ => self.sensitivity,
        }
    }

    pub fn token(&self, id: u32) -> Token {
        if id == self.eos_token {
            Token::with_id("<eos>", id)
        } else {
            Token::with_id(format!("w{id}"), id)
        }
    }

    pub fn token_id(&self, token: &Token) -> Option<u32> {
        let id = match token.id() {
            Some(id) => id,
            None if token.as_str() == "<eos>" => self.eos_token,
            None => token.as_str().strip_prefix('w')?.parse().ok()?,
        };
        ((id as usize) < self.vocab_size).then_some(id)
    }

    fn key(&self, parts: &[&str], context: &[u32]) -> u64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        for p in parts {
            h.update((p.len() as u64).to_le_bytes());
            h.update(p.as_bytes());
        }
        h.update((context.len() as u64).to_le_bytes());
        for c in context {
            h.update(c.to_le_bytes());
        }
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("digest has 8 bytes"))
    }

    fn simplex(&self, parts: &[&str], context: &[u32]) -> Vec<f64> {
        let key = self.key(parts, context);
        let logits: Vec<f64> = (0..self.vocab_size as u64)
            .map(|v| {
                let u = (splitmix64(key ^ splitmix64(v)) >> 11) as f64 / (1u64 << 53) as f64;
                self.sharpness * u
            })
            .collect();
        softmax(&logits)
    }

    /// Next-token distribution; the end-of-sequence token is absorbing.
    pub fn mock_next_dist(&self, prompt: &Prompt, context: &[u32]) -> Vec<f64> {
        if context.last() == Some(&self.eos_token) {
            let mut one_hot = vec![0.0; self.vocab_size];
            one_hot[self.eos_token as usize] = 1.0;
            return one_hot;
        }
        let base = self.simplex(&["base", &prompt.query_id], context);
        let lambda = self.effective_sensitivity(prompt);
        if lambda == 0.0 {
            return base;
        }
        let perturbed = self.simplex(&["perturbed", &prompt.query_id, &prompt.text], context);
        base.iter()
            .zip(&perturbed)
            .map(|(b, p)| (1.0 - lambda) * b + lambda * p)
            .collect()
    }

    fn position(&self, dist: &[f64], k: usize) -> Result<TruncatedDistribution<f64>, BackendError> {
        let entries = dist
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(v, &p)| (self.token(v as u32), p.ln()));
        truncate_topk(entries, k).map_err(BackendError::protocol)
    }

    fn context_ids(&self, response: &[Token]) -> Result<Vec<u32>, BackendError> {
        response
            .iter()
            .map(|t| {
                self.token_id(t)
                    .ok_or_else(|| BackendError::InvalidRequest(format!("token {t} not in mock vocabulary")))
            })
            .collect()
    }
}

impl SequenceModel for MockLM {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn eos(&self) -> Option<u32> {
        Some(self.eos_token)
    }

    fn next_dist(&self, prompt: &Prompt, context: &[u32]) -> Vec<f64> {
        self.mock_next_dist(prompt, context)
    }
}

impl LogitProvider for MockLM {
    fn capabilities(&self) -> ProviderCapabilities {
        ProviderCapabilities {
            max_top_k: self.vocab_size,
            supports_teacher_forcing: true,
            supports_sampling: true,
            supports_chat: false,
        }
    }

    fn generate_greedy(&self, prompt: &Prompt, max_tokens: usize, k: usize) -> Result<TokenTrace<f64>, BackendError> {
        if max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be at least 1".into()));
        }
        let mut context = Vec::new();
        let mut tokens = Vec::new();
        let mut positions = Vec::new();
        while context.len() < max_tokens.min(self.max_len) {
            let pos = self.position(&self.mock_next_dist(prompt, &context), k)?;
            let chosen = pos.top().clone();
            let id = chosen.id().expect("mock tokens carry ids");
            tokens.push(chosen);
            positions.push(pos);
            context.push(id);
            if id == self.eos_token {
                break;
            }
        }
        Ok(TokenTrace::new(prompt.variant_id(), tokens, positions)?)
    }

    fn score_teacher_forced(&self, prompt: &Prompt, response: &[Token], k: usize) -> Result<TokenTrace<f64>, BackendError> {
        let ids = self.context_ids(response)?;
        if ids.len() > self.max_len {
            return Err(BackendError::InvalidRequest(format!(
                "continuation of {} tokens exceeds mock max_len {}",
                ids.len(),
                self.max_len
            )));
        }
        let positions = (0..ids.len())
            .map(|t| self.position(&self.mock_next_dist(prompt, &ids[..t]), k))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(TokenTrace::new(prompt.variant_id(), response.to_vec(), positions)?)
    }

    fn sample_responses(
        &self,
        prompt: &Prompt,
        n: usize,
        temperature: f64,
        max_tokens: usize,
        k: usize,
        seed: u64,
    ) -> Result<Vec<SampledTrace<f64>>, BackendError> {
        if !(temperature > 0.0) {
            return Err(BackendError::InvalidRequest("temperature must be positive".into()));
        }
        if max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be at least 1".into()));
        }
        let text_key = format!("{:016x}", self.key(&[&prompt.text], &[]));
        (0..n)
            .map(|i| {
                let mut rng = derive_rng(
                    seed ^ self.seed,
                    &stream_id(&["sample", &prompt.query_id, &text_key, &i.to_string()]),
                );
                let mut context = Vec::new();
                let mut tokens = Vec::new();
                let mut positions = Vec::new();
                let mut chosen_logprobs = Vec::new();
                while context.len() < max_tokens.min(self.max_len) {
                    let dist = self.mock_next_dist(prompt, &context);
                    let tempered: Vec<f64> = dist
                        .iter()
                        .map(|&p| if p > 0.0 { p.ln() / temperature } else { f64::NEG_INFINITY })
                        .collect();
                    let q = softmax(&tempered);
                    let u: f64 = rng.gen();
                    let mut acc = 0.0;
                    let mut pick = q.iter().rposition(|&x| x > 0.0).unwrap_or(0);
                    for (v, &x) in q.iter().enumerate() {
                        acc += x;
                        if u < acc {
                            pick = v;
                            break;
                        }
                    }
                    positions.push(self.position(&dist, k)?);
                    tokens.push(self.token(pick as u32));
                    chosen_logprobs.push(dist[pick].ln());
                    context.push(pick as u32);
                    if pick as u32 == self.eos_token {
                        break;
                    }
                }
                Ok(SampledTrace {
                    trace: TokenTrace::new(super::sample_id(i), tokens, positions)?,
                    chosen_logprobs,
                })
            })
            .collect()
    }
}

/// Probability of every full-length sequence (end-of-sequence padded) under
/// `model`, skipping zero-probability branches.
pub fn enumerate_sequences<M: SequenceModel + ?Sized>(
    model: &M,
    prompt: &Prompt,
) -> Result<BTreeMap<Vec<u32>, f64>, BackendError> {
    let (v, t) = (model.vocab_size(), model.max_len());
    if (v as f64).powi(t as i32) > MAX_ENUMERATION {
        return Err(BackendError::EnumerationTooLarge { vocab: v, len: t });
    }
    let mut out = BTreeMap::new();
    let mut stack: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 1.0)];
    while let Some((prefix, p)) = stack.pop() {
        if prefix.len() == t {
            out.insert(prefix, p);
            continue;
        }
        let dist = model.next_dist(prompt, &prefix);
        for (tok, &q) in dist.iter().enumerate() {
            if q > 0.0 {
                let mut next = prefix.clone();
                next.push(tok as u32);
                stack.push((next, p * q));
            }
        }
    }
    Ok(out)
}

/// Offline paraphrase provider: rewrites the final `Question:` line of the
/// request with fixed phrasings, in a question-dependent order.
#[derive(Debug, Clone, Default)]
pub struct MockChat {
    pub per_call: usize,
}

const PHRASINGS: &[&str] = &[
    "Could you tell me: {}",
    "I'd like to know: {}",
    "Quick question: {}",
    "{} Please answer briefly.",
    "Here is my question: {}",
    "Answer this: {}",
    "Can you answer the following? {}",
    "Question for you: {}",
];

impl MockChat {
    pub fn new(per_call: usize) -> Self {
        MockChat { per_call }
    }
}

impl ChatProvider for MockChat {
    fn chat(&self, messages: &[ChatMessage], _params: &ChatParams) -> Result<String, BackendError> {
        let last = messages.last().ok_or_else(|| BackendError::InvalidRequest("no messages".into()))?;
        let question = last
            .content
            .lines()
            .rev()
            .find_map(|l| l.strip_prefix("Question: "))
            .unwrap_or(&last.content);
        let offset = question.bytes().fold(0usize, |a, b| a.wrapping_mul(31).wrapping_add(b as usize));
        let n = self.per_call.min(PHRASINGS.len());
        Ok((0..n)
            .map(|i| {
                let template = PHRASINGS[(offset + i) % PHRASINGS.len()];
                format!("Rephrase {}: {}\n", i + 1, template.replace("{}", question))
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::check_greedy;

    fn lm() -> MockLM {
        MockLM::new(11, 6, 5, 0.5)
            .with_query("robust", "orig robust", true)
            .with_query("spur", "orig spur", false)
    }

    #[test]
    fn next_dist_is_deterministic_simplex() {
        let m = lm();
        let p = Prompt::original("spur", "orig spur");
        let a = m.mock_next_dist(&p, &[3, 1]);
        assert_eq!(a, m.mock_next_dist(&p, &[3, 1]));
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(a.iter().all(|&x| x >= 0.0));
        assert_ne!(a, m.mock_next_dist(&p, &[3, 2]));
        let other_seed = MockLM { seed: 12, ..m.clone() };
        assert_ne!(a, other_seed.mock_next_dist(&p, &[3, 1]));
    }

    #[test]
    fn eos_is_absorbing() {
        let m = lm();
        let d = m.mock_next_dist(&Prompt::original("spur", "x"), &[2, 0]);
        assert_eq!(d, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn variant_mixture() {
        let m = lm();
        let orig = m.mock_next_dist(&Prompt::original("spur", "orig spur"), &[1]);
        let var = m.mock_next_dist(&Prompt::variant("spur", 0, "orig spr"), &[1]);
        assert_ne!(orig, var);
        let pert = m.simplex(&["perturbed", "spur", "orig spr"], &[1]);
        for i in 0..6 {
            assert!((var[i] - (0.5 * orig[i] + 0.5 * pert[i])).abs() < 1e-15);
        }
        // robust queries ignore the prompt text entirely
        let r0 = m.mock_next_dist(&Prompt::original("robust", "orig robust"), &[]);
        let r1 = m.mock_next_dist(&Prompt::variant("robust", 3, "orig rbust"), &[]);
        assert_eq!(r0, r1);
        // identical text is the original even when labelled as a variant
        assert_eq!(orig, m.mock_next_dist(&Prompt::variant("spur", 1, "orig spur"), &[1]));
    }

    #[test]
    fn greedy_contract() {
        let m = lm();
        let p = Prompt::original("spur", "orig spur");
        let tr = m.generate_greedy(&p, 16, 6).unwrap();
        assert_eq!(tr, m.generate_greedy(&p, 16, 6).unwrap());
        check_greedy(&tr).unwrap();
        assert!(tr.len() <= 5);
        for (tok, pos) in tr.response_tokens().iter().zip(tr.positions()) {
            assert_eq!(tok, pos.top());
        }
        let tf = m.score_teacher_forced(&p, tr.response_tokens(), 6).unwrap();
        assert_eq!(tf.positions(), tr.positions());
    }

    #[test]
    fn greedy_stops_at_eos() {
        // find a query whose first greedy token is EOS
        let m = (0..200)
            .map(|i| MockLM::new(5, 3, 4, 0.5).with_query(format!("q{i}"), "x", false))
            .find(|m| {
                let d = m.mock_next_dist(&Prompt::original(m.queries().next().unwrap(), "x"), &[]);
                d[0] > d[1] && d[0] > d[2]
            })
            .expect("some query starts with EOS");
        let qid = m.queries().next().unwrap().to_string();
        let tr = m.generate_greedy(&Prompt::original(qid, "x"), 10, 3).unwrap();
        assert_eq!(tr.len(), 1);
        assert_eq!(tr.response_tokens()[0].as_str(), "<eos>");
    }

    #[test]
    fn robust_variant_traces_match_original() {
        let m = lm();
        let tr = m.generate_greedy(&Prompt::original("robust", "orig robust"), 5, 4).unwrap();
        let v = m.score_teacher_forced(&Prompt::variant("robust", 0, "rbust"), tr.response_tokens(), 4).unwrap();
        assert_eq!(v.positions(), tr.positions());
    }

    #[test]
    fn sampling_is_reproducible_and_cold_limit_is_greedy() {
        let m = lm();
        let p = Prompt::original("spur", "orig spur");
        let a = m.sample_responses(&p, 10, 1.0, 8, 6, 3).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a, m.sample_responses(&p, 10, 1.0, 8, 6, 3).unwrap());
        for s in &a {
            assert_eq!(s.chosen_logprobs.len(), s.trace.len());
            assert!(s.chosen_logprobs.iter().all(|&lp| lp <= 0.0));
        }
        let greedy = m.generate_greedy(&p, 8, 6).unwrap();
        for s in m.sample_responses(&p, 5, 1e-6, 8, 6, 3).unwrap() {
            assert_eq!(s.trace.response_tokens(), greedy.response_tokens());
        }
        assert!(m.sample_responses(&p, 1, 0.0, 8, 6, 3).is_err());
    }

    #[test]
    fn enumeration() {
        let m = MockLM::new(1, 2, 1, 0.3);
        let seqs = enumerate_sequences(&m, &Prompt::original("q", "x")).unwrap();
        assert_eq!(seqs.len(), 2);
        assert!((seqs.values().sum::<f64>() - 1.0).abs() < 1e-12);

        let m = MockLM::new(1, 4, 4, 0.3);
        let seqs = enumerate_sequences(&m, &Prompt::original("q", "x")).unwrap();
        assert!(seqs.len() <= 256);
        assert!((seqs.values().sum::<f64>() - 1.0).abs() < 1e-9);
        // EOS padding: after the first 0 everything is 0
        for s in seqs.keys() {
            if let Some(i) = s.iter().position(|&t| t == 0) {
                assert!(s[i..].iter().all(|&t| t == 0));
            }
        }

        let big = MockLM::new(1, 50, 10, 0.3);
        assert!(matches!(
            enumerate_sequences(&big, &Prompt::original("q", "x")),
            Err(BackendError::EnumerationTooLarge { vocab: 50, len: 10 })
        ));
    }

    #[test]
    fn token_mapping() {
        let m = lm();
        assert_eq!(m.token_id(&Token::text("w3")), Some(3));
        assert_eq!(m.token_id(&Token::text("<eos>")), Some(0));
        assert_eq!(m.token_id(&Token::text("w99")), None);
        assert!(m.score_teacher_forced(&Prompt::original("spur", "x"), &[Token::text("zzz")], 3).is_err());
    }

    #[test]
    fn mock_chat_rephrases_final_question() {
        let chat = MockChat::new(4);
        let msgs = crate::intervene::build_paraphrase_request("Who won?").unwrap();
        let out = chat.chat(&msgs, &ChatParams::default()).unwrap();
        let parsed = crate::intervene::parse_paraphrases(&out).unwrap();
        assert_eq!(parsed.len(), 4);
        assert!(parsed.iter().all(|p| p.contains("Who won?")));
    }
}
