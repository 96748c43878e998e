//! Semantic-preserving prompt interventions and variant pools.
//!
//! A word is a maximal run of non-whitespace; characters are Unicode scalar
//! values and positions are 1-based. Whitespace between words is kept as is.

use std::collections::HashSet;
use std::fs;
use std::io;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, ChatMessage, ChatParams, ChatProvider};
use crate::config::InterventionMethod;
use crate::dataset::PromptParts;
use crate::rng::{derive_rng, stream_id};

#[derive(Debug, Error)]
pub enum InterveneError {
    #[error("question must be non-empty")]
    EmptyQuestion,
    #[error("no `Rephrase <n>: <text>` lines found after {calls} call(s)")]
    NoParaphrases { calls: usize },
    #[error("paraphrase intervention needs a chat provider")]
    MissingChatProvider,
    #[error("paraphrase provider failed on call {calls}: {source}")]
    Backend {
        calls: usize,
        #[source]
        source: BackendError,
    },
    #[error("pool size must be positive")]
    EmptyPool,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path} line {line}: {reason}")]
    Parse { path: String, line: usize, reason: String },
}

/// Character-level noise parameters shared by SOC and typo.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CharNoise {
    /// First position (1-based) that may be touched.
    pub min_len: usize,
    /// Probability that a word is intervened.
    pub prob: f64,
}

impl Default for CharNoise {
    fn default() -> Self {
        CharNoise { min_len: 3, prob: 0.3 }
    }
}

/// Removes the character at 1-based position `k`.
pub fn remove_char_at(word: &str, k: usize) -> String {
    word.chars()
        .enumerate()
        .filter(|(i, _)| i + 1 != k)
        .map(|(_, c)| c)
        .collect()
}

/// Replaces the character at 1-based position `k`.
pub fn replace_char_at(word: &str, k: usize, with: char) -> String {
    word.chars()
        .enumerate()
        .map(|(i, c)| if i + 1 == k { with } else { c })
        .collect()
}

fn draw_position<R: Rng + ?Sized>(word: &str, min_len: usize, rng: &mut R) -> Option<usize> {
    let n = word.chars().count();
    (n >= min_len && min_len >= 1).then(|| rng.gen_range(min_len..=n))
}

/// Skip-One-Char on a single word: drops one character at a position drawn
/// uniformly from `min_len..=len`; shorter words come back unchanged.
pub fn soc_word<R: Rng + ?Sized>(word: &str, min_len: usize, rng: &mut R) -> String {
    match draw_position(word, min_len, rng) {
        Some(k) => remove_char_at(word, k),
        None => word.to_string(),
    }
}

/// Lowercase letter different from `original`, uniformly.
fn typo_letter<R: Rng + ?Sized>(original: char, rng: &mut R) -> char {
    let choices: Vec<char> = ('a'..='z').filter(|&c| c != original).collect();
    choices[rng.gen_range(0..choices.len())]
}

pub fn typo_word<R: Rng + ?Sized>(word: &str, min_len: usize, rng: &mut R) -> String {
    match draw_position(word, min_len, rng) {
        Some(k) => {
            let original = word.chars().nth(k - 1).expect("position within word");
            replace_char_at(word, k, typo_letter(original, rng))
        }
        None => word.to_string(),
    }
}

/// Splits into alternating runs, keeping separators: `(is_word, text)`.
fn runs(text: &str) -> Vec<(bool, &str)> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut current: Option<bool> = None;
    for (i, c) in text.char_indices() {
        let is_word = !c.is_whitespace();
        match current {
            Some(w) if w == is_word => {}
            Some(w) => {
                out.push((w, &text[start..i]));
                start = i;
                current = Some(is_word);
            }
            None => current = Some(is_word),
        }
    }
    if let Some(w) = current {
        out.push((w, &text[start..]));
    }
    out
}

pub fn words(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

fn map_words<R, F>(prompt: &str, prob: f64, rng: &mut R, mut f: F) -> String
where
    R: Rng + ?Sized,
    F: FnMut(&str, &mut R) -> String,
{
    let mut out = String::with_capacity(prompt.len());
    for (is_word, run) in runs(prompt) {
        if is_word && rng.gen_bool(prob) {
            out.push_str(&f(run, rng));
        } else {
            out.push_str(run);
        }
    }
    out
}

/// Applies [`soc_word`] to each word independently with probability `prob`.
pub fn soc_prompt<R: Rng + ?Sized>(prompt: &str, noise: CharNoise, rng: &mut R) -> String {
    map_words(prompt, noise.prob, rng, |w, r| soc_word(w, noise.min_len, r))
}

/// Like [`soc_prompt`] but substitutes a random lowercase letter instead of
/// deleting, so word lengths are preserved.
pub fn typo_prompt<R: Rng + ?Sized>(prompt: &str, noise: CharNoise, rng: &mut R) -> String {
    map_words(prompt, noise.prob, rng, |w, r| typo_word(w, noise.min_len, r))
}

/// Word-level substitution resource (for example an antonym lexicon).
pub trait WordSubstitution {
    /// Replacement for `word`, or `None` when the resource has no entry.
    fn substitute(&self, word: &str) -> Option<String>;
}

/// Replaces one uniformly chosen word that the resource knows.
pub fn substitute_one_word<R: Rng + ?Sized>(
    prompt: &str,
    hook: &dyn WordSubstitution,
    rng: &mut R,
) -> String {
    let pieces = runs(prompt);
    let candidates: Vec<usize> = pieces
        .iter()
        .enumerate()
        .filter(|(_, (is_word, w))| *is_word && hook.substitute(w).is_some())
        .map(|(i, _)| i)
        .collect();
    if candidates.is_empty() {
        return prompt.to_string();
    }
    let pick = candidates[rng.gen_range(0..candidates.len())];
    pieces
        .iter()
        .enumerate()
        .map(|(i, (_, w))| if i == pick { hook.substitute(w).unwrap_or_default() } else { w.to_string() })
        .collect()
}

const PARAPHRASE_TEMPLATE: &str = "In this task, you will receive a single question, and your goal is to generate multiple versions of it that convey the same meaning as the original. Please format your responses as follows:
Rephrase 1: [Your rephrased question]
Rephrase 2: [Another rephrased question]
Rephrase 3: [Yet another rephrased question]
....
Ensure that each rephrased question is distinct from the others.

Here are two examples:
Question: When did the manhattan project began and end?
Rephrase 1: What were the start and end dates of the Manhattan Project?
Rephrase 2: The manhattan project began and ended in ?
Rephrase 3: What were the starting and ending dates of the Manhattan Project?
Rephrase 4: Can you tell me when the Manhattan Project started and concluded?
Rephrase 5: When was the Manhattan Project initiated and concluded?
Rephrase 6: What time period does the Manhattan Project cover, from start to finish?
Rephrase 7: Can you provide the beginning and ending dates of the Manhattan Project?


Question: Who played george washington in the john adams series?
Rephrase 1: In the John Adams series, who portrayed George Washington?
Rephrase 2: In the John Adams series, which actor portrayed George Washington?
Rephrase 3: Who portrayed George Washington in the John Adams series?
Rephrase 4: Which actor took on the role of George Washington in the John Adams series?
Rephrase 5: In the series about John Adams, who acted as George Washington?
Rephrase 6: Who was cast as George Washington in the John Adams series?
Rephrase 7: Who took on the role of George Washington in the John Adams series?

Question: ";

/// Few-shot paraphrasing request for a chat backend.
pub fn build_paraphrase_request(question: &str) -> Result<Vec<ChatMessage>, InterveneError> {
    let q = question.trim();
    if q.is_empty() {
        return Err(InterveneError::EmptyQuestion);
    }
    Ok(vec![ChatMessage::user(format!("{PARAPHRASE_TEMPLATE}{q}"))])
}

/// `Rephrase <n>: <text>` lines in order, trimmed, first occurrence kept.
pub fn parse_paraphrases(completion: &str) -> Result<Vec<String>, InterveneError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for line in completion.lines() {
        if let Some(text) = rephrase_line(line) {
            if seen.insert(text.to_string()) {
                out.push(text.to_string());
            }
        }
    }
    if out.is_empty() {
        return Err(InterveneError::NoParaphrases { calls: 1 });
    }
    Ok(out)
}

fn rephrase_line(line: &str) -> Option<&str> {
    let rest = line.trim().strip_prefix("Rephrase")?.trim_start();
    let digits = rest.len() - rest.trim_start_matches(|c: char| c.is_ascii_digit()).len();
    if digits == 0 {
        return None;
    }
    let text = rest[digits..].trim_start().strip_prefix(':')?.trim();
    (!text.is_empty()).then_some(text)
}

pub fn render_paraphrases(items: &[String]) -> String {
    items
        .iter()
        .enumerate()
        .map(|(i, t)| format!("Rephrase {}: {t}\n", i + 1))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub text: String,
    pub method: InterventionMethod,
    #[serde(skip)]
    pub origin_query_id: String,
    pub variant_index: usize,
}

/// A rendered prompt and its intervened variants.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantPool {
    pub query_id: String,
    pub original: String,
    pub variants: Vec<Variant>,
}

impl VariantPool {
    pub fn pool_size(&self) -> usize {
        self.variants.len()
    }
}

#[derive(Debug, Clone)]
pub struct PoolSettings {
    pub method: InterventionMethod,
    pub pool_size: usize,
    pub noise: CharNoise,
    /// Maximum chat calls when paraphrasing.
    pub max_paraphrase_calls: usize,
    pub seed: u64,
}

impl Default for PoolSettings {
    fn default() -> Self {
        PoolSettings {
            method: InterventionMethod::Soc,
            pool_size: 40,
            noise: CharNoise::default(),
            max_paraphrase_calls: 3,
            seed: 0,
        }
    }
}

/// Builds the variant pool for one query.
///
/// Character-level methods intervene the context and the question. Paraphrase
/// rewrites only the (last) question and tops up with SOC variants when the
/// provider yields fewer distinct paraphrases than `pool_size`.
pub fn build_variant_pool(
    query_id: &str,
    parts: &PromptParts,
    settings: &PoolSettings,
    chat: Option<&dyn ChatProvider>,
) -> Result<VariantPool, InterveneError> {
    if settings.pool_size == 0 {
        return Err(InterveneError::EmptyPool);
    }
    if parts.question.trim().is_empty() {
        return Err(InterveneError::EmptyQuestion);
    }
    let original = parts.render();
    let mut rng = derive_rng(
        settings.seed,
        &stream_id(&[query_id, "intervene", settings.method.as_str()]),
    );
    let variant = |text: String, method, variant_index| Variant {
        text,
        method,
        origin_query_id: query_id.to_string(),
        variant_index,
    };
    let char_level = |rng: &mut crate::rng::StreamRng, method: InterventionMethod| {
        let f = match method {
            InterventionMethod::Typo => typo_prompt::<crate::rng::StreamRng>,
            _ => soc_prompt::<crate::rng::StreamRng>,
        };
        let context = parts.context.as_ref().map(|c| f(c, settings.noise, rng));
        let question = f(&parts.question, settings.noise, rng);
        PromptParts { question, context }.render()
    };

    let variants = match settings.method {
        InterventionMethod::Identity => (0..settings.pool_size)
            .map(|i| variant(original.clone(), InterventionMethod::Identity, i))
            .collect(),
        m @ (InterventionMethod::Soc | InterventionMethod::Typo) => (0..settings.pool_size)
            .map(|i| variant(char_level(&mut rng, m), m, i))
            .collect(),
        InterventionMethod::Paraphrase => {
            let chat = chat.ok_or(InterveneError::MissingChatProvider)?;
            let paraphrases = collect_paraphrases(&parts.question, settings, chat)?;
            let mut out: Vec<Variant> = paraphrases
                .into_iter()
                .enumerate()
                .map(|(i, q)| {
                    let text = PromptParts { question: q, context: parts.context.clone() }.render();
                    variant(text, InterventionMethod::Paraphrase, i)
                })
                .collect();
            while out.len() < settings.pool_size {
                let i = out.len();
                out.push(variant(char_level(&mut rng, InterventionMethod::Soc), InterventionMethod::Soc, i));
            }
            out
        }
    };
    Ok(VariantPool {
        query_id: query_id.to_string(),
        original,
        variants,
    })
}

fn collect_paraphrases(
    question: &str,
    settings: &PoolSettings,
    chat: &dyn ChatProvider,
) -> Result<Vec<String>, InterveneError> {
    let messages = build_paraphrase_request(question)?;
    let params = ChatParams::default();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    let mut calls = 0;
    while calls < settings.max_paraphrase_calls && out.len() < settings.pool_size {
        calls += 1;
        let completion = chat
            .chat(&messages, &params)
            .map_err(|source| InterveneError::Backend { calls, source })?;
        let Ok(batch) = parse_paraphrases(&completion) else {
            log::warn!("paraphrase call {calls} returned no parseable lines");
            continue;
        };
        for p in batch {
            if out.len() < settings.pool_size && seen.insert(p.clone()) {
                out.push(p);
            }
        }
    }
    if out.is_empty() {
        return Err(InterveneError::NoParaphrases { calls });
    }
    Ok(out)
}

pub fn write_pools(path: impl AsRef<Path>, pools: &[VariantPool]) -> Result<(), InterveneError> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for p in pools {
        serde_json::to_writer(&mut buf, p).expect("pool serializes");
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|source| InterveneError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_pools(path: impl AsRef<Path>) -> Result<Vec<VariantPool>, InterveneError> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|source| InterveneError::Io {
        path: shown.clone(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut pool: VariantPool = serde_json::from_str(line).map_err(|e| InterveneError::Parse {
            path: shown.clone(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        for v in &mut pool.variants {
            v.origin_query_id = pool.query_id.clone();
        }
        out.push(pool);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use proptest::prelude::*;
    use rand::rngs::mock::StepRng;
    use std::sync::Mutex;

    #[test]
    fn removal_rule_examples() {
        assert_eq!(remove_char_at("which", 4), "whih");
        assert_eq!(remove_char_at("team", 3), "tem");
        assert_eq!(remove_char_at("blast", 5), "blas");
        let mut rng = derive_rng(1, "t");
        assert_eq!(soc_word("of", 3, &mut rng), "of");
        assert_eq!(typo_word("of", 3, &mut rng), "of");
        assert_eq!(replace_char_at("team", 3, 'x'), "texm");
    }

    #[test]
    fn soc_word_draws_from_inclusive_range() {
        let mut rng = derive_rng(3, "range");
        let mut seen = HashSet::new();
        for _ in 0..500 {
            let out = soc_word("blast", 3, &mut rng);
            assert_eq!(&out[..2], "bl");
            seen.insert(out);
        }
        let want: HashSet<String> = ["blst", "blat", "blas"].iter().map(|s| s.to_string()).collect();
        assert_eq!(seen, want);
    }

    #[test]
    fn soc_word_counts_scalars() {
        let mut rng = derive_rng(0, "u");
        let out = soc_word("ñandú", 5, &mut rng);
        assert_eq!(out, "ñand");
    }

    #[test]
    fn p_zero_is_identity() {
        let mut rng = derive_rng(0, "p0");
        let noise = CharNoise { min_len: 3, prob: 0.0 };
        let s = "For which  team did\tBabe Ruth blast his last home run?";
        assert_eq!(soc_prompt(s, noise, &mut rng), s);
        assert_eq!(typo_prompt(s, noise, &mut rng), s);
    }

    #[test]
    fn p_one_hits_every_eligible_word() {
        let mut rng = derive_rng(0, "p1");
        let noise = CharNoise { min_len: 3, prob: 1.0 };
        let out = soc_prompt("a bb ccc dddd", noise, &mut rng);
        let w = words(&out);
        assert_eq!(&w[..2], ["a", "bb"]);
        assert_eq!(w[2].len(), 2);
        assert_eq!(w[3].len(), 3);
        assert!(w[2].starts_with("cc") && w[3].starts_with("dd"));
    }

    #[test]
    fn typo_replaces_with_other_letter() {
        // an all-zero generator draws the lowest position (3) and the first
        // letter that differs from the original 'a'
        let mut rng = StepRng::new(0, 0);
        assert_eq!(typo_word("team", 3, &mut rng), "tebm");
        let mut rng = derive_rng(9, "typo");
        for _ in 0..200 {
            let out = typo_word("team", 3, &mut rng);
            assert_eq!(out.len(), 4);
            assert_ne!(out, "team");
            assert!(out.chars().all(|c| c.is_ascii_lowercase()));
        }
    }

    #[test]
    fn paraphrase_template_shape() {
        let msgs = build_paraphrase_request("Q?").unwrap();
        assert_eq!(msgs.len(), 1);
        let body = &msgs[0].content;
        assert_eq!(body.lines().last().unwrap(), "Question: Q?");
        assert!(body.contains("Question: When did the manhattan project began and end?"));
        assert!(body.contains("Question: Who played george washington in the john adams series?"));
        assert_eq!(body.matches("Rephrase 7:").count(), 2);
        assert!(matches!(build_paraphrase_request("  "), Err(InterveneError::EmptyQuestion)));
    }

    #[test]
    fn paraphrase_parsing() {
        assert_eq!(parse_paraphrases("Rephrase 1: A?\nRephrase 2: B?").unwrap(), ["A?", "B?"]);
        assert_eq!(parse_paraphrases("Rephrase 1: A?\nRephrase 2: A?").unwrap(), ["A?"]);
        assert_eq!(
            parse_paraphrases("Sure!\n  Rephrase 10 :  C?  \nRephrase: nope\nRephrase 3: c?").unwrap(),
            ["C?", "c?"]
        );
        assert!(matches!(
            parse_paraphrases("no matches here"),
            Err(InterveneError::NoParaphrases { .. })
        ));
    }

    struct Canned {
        replies: Vec<String>,
        calls: Mutex<usize>,
    }

    impl ChatProvider for Canned {
        fn chat(&self, _: &[ChatMessage], _: &ChatParams) -> Result<String, BackendError> {
            let mut n = self.calls.lock().unwrap();
            let reply = self.replies.get(*n).cloned();
            *n += 1;
            reply.ok_or(BackendError::Transport { attempts: 4, message: "down".into() })
        }
    }

    fn canned(replies: &[&str]) -> Canned {
        Canned {
            replies: replies.iter().map(|s| s.to_string()).collect(),
            calls: Mutex::new(0),
        }
    }

    fn parts(q: &str, ctx: Option<&str>) -> PromptParts {
        PromptParts { question: q.into(), context: ctx.map(String::from) }
    }

    #[test]
    fn soc_pool_has_requested_size() {
        let settings = PoolSettings { pool_size: 40, ..Default::default() };
        let pool = build_variant_pool("q1", &parts("For which team did Babe Ruth blast his last home run?", None), &settings, None).unwrap();
        assert_eq!(pool.pool_size(), 40);
        assert!(pool.variants.iter().all(|v| v.method == InterventionMethod::Soc));
        assert!(pool.variants.iter().enumerate().all(|(i, v)| v.variant_index == i));
        assert!(pool.variants.iter().all(|v| v.text.starts_with(crate::dataset::QA_INSTRUCTION)));
        let again = build_variant_pool("q1", &parts("For which team did Babe Ruth blast his last home run?", None), &settings, None).unwrap();
        assert_eq!(pool, again);
    }

    #[test]
    fn paraphrase_pool_supplemented_with_soc() {
        let reply = "Rephrase 1: A?\nRephrase 2: B?\nRephrase 3: C?\nRephrase 4: A?";
        let chat = canned(&[reply, "Rephrase 1: D?\nRephrase 2: E?", "Rephrase 1: F?\nRephrase 2: G?\nRephrase 3: B?"]);
        let settings = PoolSettings {
            method: InterventionMethod::Paraphrase,
            pool_size: 10,
            ..Default::default()
        };
        let pool = build_variant_pool("q", &parts("Who wrote Hamlet originally?", None), &settings, Some(&chat)).unwrap();
        let methods: Vec<_> = pool.variants.iter().map(|v| v.method).collect();
        assert_eq!(methods.iter().filter(|m| **m == InterventionMethod::Paraphrase).count(), 7);
        assert_eq!(methods.iter().filter(|m| **m == InterventionMethod::Soc).count(), 3);
        assert_eq!(*chat.calls.lock().unwrap(), 3);
        let para: HashSet<_> = pool.variants[..7].iter().map(|v| v.text.clone()).collect();
        assert_eq!(para.len(), 7);
    }

    #[test]
    fn paraphrase_only_touches_last_question() {
        let chat = canned(&["Rephrase 1: Where was she born?"]);
        let settings = PoolSettings {
            method: InterventionMethod::Paraphrase,
            pool_size: 1,
            ..Default::default()
        };
        let doc = "Some long document.\nQ: Who is she? A: Ann";
        let pool = build_variant_pool("q", &parts("Where is her birthplace?", Some(doc)), &settings, Some(&chat)).unwrap();
        assert!(pool.variants[0].text.starts_with(doc));
        assert!(pool.variants[0].text.ends_with("Q: Where was she born? A:"));
    }

    #[test]
    fn paraphrase_errors() {
        let settings = PoolSettings {
            method: InterventionMethod::Paraphrase,
            pool_size: 5,
            ..Default::default()
        };
        let p = parts("Who?", None);
        assert!(matches!(build_variant_pool("q", &p, &settings, None), Err(InterveneError::MissingChatProvider)));
        let junk = canned(&["nothing", "still nothing", "nope"]);
        assert!(matches!(
            build_variant_pool("q", &p, &settings, Some(&junk)),
            Err(InterveneError::NoParaphrases { calls: 3 })
        ));
        let down = canned(&[]);
        match build_variant_pool("q", &p, &settings, Some(&down)) {
            Err(InterveneError::Backend { calls, .. }) => assert_eq!(calls, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn identity_pool_is_original() {
        let settings = PoolSettings { method: InterventionMethod::Identity, pool_size: 1, ..Default::default() };
        let p = parts("What is the capital of France?", None);
        let pool = build_variant_pool("q", &p, &settings, None).unwrap();
        assert_eq!(pool.variants.len(), 1);
        assert_eq!(pool.variants[0].text, p.render());
        assert_eq!(pool.original, p.render());
    }

    struct Opposites;
    impl WordSubstitution for Opposites {
        fn substitute(&self, word: &str) -> Option<String> {
            match word {
                "hot" => Some("cold".into()),
                "big" => Some("small".into()),
                _ => None,
            }
        }
    }

    #[test]
    fn substitution_hook_replaces_one_known_word() {
        let mut rng = derive_rng(5, "sub");
        let out = substitute_one_word("a big hot day", &Opposites, &mut rng);
        assert!(out == "a small hot day" || out == "a big cold day", "{out}");
        assert_eq!(substitute_one_word("nothing here", &Opposites, &mut rng), "nothing here");
    }

    #[test]
    fn pool_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pools.jsonl");
        let settings = PoolSettings { pool_size: 3, ..Default::default() };
        let pools = vec![
            build_variant_pool("a", &parts("Which river is the longest?", None), &settings, None).unwrap(),
            build_variant_pool("b", &parts("Who painted the ceiling?", Some("Doc")), &settings, None).unwrap(),
        ];
        write_pools(&path, &pools).unwrap();
        assert_eq!(read_pools(&path).unwrap(), pools);
        let line = fs::read_to_string(&path).unwrap();
        assert!(line.starts_with("{\"query_id\":\"a\",\"original\":"));
        assert!(line.contains("\"variants\":[{\"text\":"));
    }

    fn word_strategy() -> impl Strategy<Value = String> {
        "[a-zA-Z0-9é,.?']{1,12}"
    }

    proptest! {
        #[test]
        fn soc_invariants(ws in prop::collection::vec(word_strategy(), 1..30), seed in any::<u64>(), min_len in 2usize..5) {
            // min_len 1 may delete a one-letter word outright
            let prompt = ws.join(" ");
            let mut rng = derive_rng(seed, "prop");
            let out = soc_prompt(&prompt, CharNoise { min_len, prob: 0.5 }, &mut rng);
            let a = words(&prompt);
            let b = words(&out);
            prop_assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(&b) {
                let xc: Vec<char> = x.chars().collect();
                let yc: Vec<char> = y.chars().collect();
                prop_assert!(yc.len() == xc.len() || yc.len() + 1 == xc.len());
                let keep = (min_len - 1).min(yc.len());
                prop_assert_eq!(&xc[..keep], &yc[..keep]);
                if yc.len() + 1 == xc.len() {
                    prop_assert!(xc.len() >= min_len);
                }
            }
        }

        #[test]
        fn typo_invariants(ws in prop::collection::vec(word_strategy(), 1..30), seed in any::<u64>()) {
            let prompt = ws.join(" ");
            let mut rng = derive_rng(seed, "typo");
            let out = typo_prompt(&prompt, CharNoise { min_len: 3, prob: 0.7 }, &mut rng);
            for (x, y) in words(&prompt).iter().zip(words(&out)) {
                let xc: Vec<char> = x.chars().collect();
                let yc: Vec<char> = y.chars().collect();
                prop_assert_eq!(xc.len(), yc.len());
                prop_assert!(xc.iter().zip(&yc).filter(|(a, b)| a != b).count() <= 1);
                prop_assert_eq!(&xc[..2.min(xc.len())], &yc[..2.min(yc.len())]);
            }
        }

        #[test]
        fn paraphrase_render_parse_identity(items in prop::collection::btree_set("[A-Za-z][A-Za-z ?]{0,20}[A-Za-z?]", 1..8)) {
            let list: Vec<String> = items.into_iter().collect();
            prop_assert_eq!(parse_paraphrases(&render_paraphrases(&list)).unwrap(), list);
        }
    }
}
