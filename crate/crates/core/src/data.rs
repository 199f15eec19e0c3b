//! Synthetic preference corpus: generation, JSONL interchange and splitting.
//!
//! The task is continuation under a fixed stochastic grammar. A prompt is a
//! rule digit followed by a few letters produced by that rule; the chosen
//! response keeps generating with the same rule. Each rule maps a letter to a
//! frequent successor (probability [`P_MAJOR`]) or a rarer one.
//!
//! The rejected response replays the chosen response's branch decisions but
//! applies seeded edits at the pair's corruption rate:
//!
//! * derail: emit a letter that is neither legal successor,
//! * collapse: from this point on always take the frequent successor.
//!
//! Derails make the rejected response less likely under a trained model;
//! collapses make it more likely. Mixing a low and a high corruption tier
//! yields pairs the reference separates easily and pairs it gets backwards.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub const N_RULES: usize = 4;
pub const N_LETTERS: usize = 26;
pub const P_MAJOR: f64 = 0.75;
const GRAMMAR_SEED: u64 = 0x5eed_6a11;
const REDRAWS: usize = 8;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("split needs at least 10 pairs, got {0}")]
    TooFewPairs(usize),
    #[error("eval fraction must be in (0, 1), got {0}")]
    InvalidFraction(f64),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub id: String,
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
}

/// Inclusive length range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub min: usize,
    pub max: usize,
}

impl Span {
    pub const fn new(min: usize, max: usize) -> Self {
        Self { min, max }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_pairs: usize,
    /// Prompt characters, rule digit included.
    pub prompt_len: Span,
    /// Response characters, EOS excluded.
    pub response_len: Span,
    pub low_rate: f64,
    pub high_rate: f64,
    /// Share of pairs drawn from the high-rate tier.
    pub high_fraction: f64,
    /// Longest allowed encoded sequence (BOS, SEP and EOS included).
    pub max_total_len: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_pairs: 2000,
            prompt_len: Span::new(3, 6),
            response_len: Span::new(6, 14),
            low_rate: 0.05,
            high_rate: 0.4,
            high_fraction: 0.5,
            max_total_len: 32,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidSpec(m.to_string()));
        if self.n_pairs == 0 {
            return bad("n_pairs must be positive");
        }
        if self.prompt_len.min > self.prompt_len.max || self.response_len.min > self.response_len.max {
            return bad("length range is empty");
        }
        if self.prompt_len.min < 2 {
            return bad("prompts need a rule digit and at least one letter");
        }
        if self.response_len.min < 1 {
            return bad("responses need at least one character");
        }
        for (name, r) in [
            ("low_rate", self.low_rate),
            ("high_rate", self.high_rate),
            ("high_fraction", self.high_fraction),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(DataError::InvalidSpec(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.longest_sequence() > self.max_total_len {
            return Err(DataError::InvalidSpec(format!(
                "longest pair needs {} tokens but max_total_len is {}",
                self.longest_sequence(),
                self.max_total_len
            )));
        }
        Ok(())
    }

    /// BOS + prompt + SEP + response + EOS at maximal lengths.
    pub fn longest_sequence(&self) -> usize {
        self.prompt_len.max + self.response_len.max + 3
    }
}

/// Successor tables of the fixed stochastic grammar.
#[derive(Debug, Clone)]
pub struct Grammar {
    major: [[u8; N_LETTERS]; N_RULES],
    minor: [[u8; N_LETTERS]; N_RULES],
}

impl Default for Grammar {
    fn default() -> Self {
        Self::fixed()
    }
}

impl Grammar {
    pub fn fixed() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(GRAMMAR_SEED);
        let mut major = [[0u8; N_LETTERS]; N_RULES];
        let mut minor = [[0u8; N_LETTERS]; N_RULES];
        for r in 0..N_RULES {
            let mut perm: Vec<u8> = (0..N_LETTERS as u8).collect();
            perm.shuffle(&mut rng);
            major[r].copy_from_slice(&perm);
            for c in 0..N_LETTERS {
                loop {
                    let m = rng.random_range(0..N_LETTERS as u8);
                    if m != major[r][c] {
                        minor[r][c] = m;
                        break;
                    }
                }
            }
        }
        Self { major, minor }
    }

    pub fn major(&self, rule: usize, letter: u8) -> u8 {
        self.major[rule][letter as usize]
    }

    pub fn minor(&self, rule: usize, letter: u8) -> u8 {
        self.minor[rule][letter as usize]
    }

    fn next(&self, rule: usize, prev: u8, take_major: bool) -> u8 {
        if take_major {
            self.major(rule, prev)
        } else {
            self.minor(rule, prev)
        }
    }

    /// Whether `next` is a legal successor of `prev` under `rule`.
    pub fn is_legal(&self, rule: usize, prev: u8, next: u8) -> bool {
        next == self.major(rule, prev) || next == self.minor(rule, prev)
    }
}

fn letter(c: u8) -> char {
    (b'a' + c) as char
}

#[derive(Clone, Copy)]
enum Edit {
    Derail(u8),
    Collapse,
}

fn render(
    grammar: &Grammar,
    rule: usize,
    start: u8,
    branches: &[bool],
    edits: &[Option<Edit>],
) -> Vec<u8> {
    let mut prev = start;
    let mut greedy = false;
    let mut out = Vec::with_capacity(branches.len());
    for (t, &b) in branches.iter().enumerate() {
        let tok = match edits[t] {
            None => grammar.next(rule, prev, b || greedy),
            Some(Edit::Collapse) => {
                greedy = true;
                grammar.major(rule, prev)
            }
            Some(Edit::Derail(salt)) => {
                // first letter at or after `salt` that is not a legal successor
                (0..N_LETTERS as u8)
                    .map(|k| (salt + k) % N_LETTERS as u8)
                    .find(|&c| !grammar.is_legal(rule, prev, c))
                    .expect("at most two legal successors")
            }
        };
        out.push(tok);
        prev = tok;
    }
    out
}

fn generate_pair(spec: &CorpusSpec, grammar: &Grammar, index: usize) -> PreferencePair {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);

    let rule = rng.random_range(0..N_RULES);
    let plen = rng.random_range(spec.prompt_len.min..=spec.prompt_len.max);
    let rlen = rng.random_range(spec.response_len.min..=spec.response_len.max);

    let mut prompt_letters = vec![rng.random_range(0..N_LETTERS as u8)];
    while prompt_letters.len() < plen - 1 {
        let prev = *prompt_letters.last().expect("non-empty");
        let b = rng.random_bool(P_MAJOR);
        prompt_letters.push(grammar.next(rule, prev, b));
    }
    let start = *prompt_letters.last().expect("non-empty");

    let branches: Vec<bool> = (0..rlen).map(|_| rng.random_bool(P_MAJOR)).collect();
    let clean = vec![None; rlen];
    let chosen = render(grammar, rule, start, &branches, &clean);

    let rate = if rng.random_bool(spec.high_fraction) {
        spec.high_rate
    } else {
        spec.low_rate
    };
    let mut rejected = chosen.clone();
    for _ in 0..REDRAWS {
        let edits: Vec<Option<Edit>> = (0..rlen)
            .map(|_| {
                if rng.random_bool(rate) {
                    Some(if rng.random_bool(0.5) {
                        Edit::Derail(rng.random_range(0..N_LETTERS as u8))
                    } else {
                        Edit::Collapse
                    })
                } else {
                    None
                }
            })
            .collect();
        rejected = render(grammar, rule, start, &branches, &edits);
        if rejected != chosen {
            break;
        }
    }
    if rejected == chosen {
        let mut edits = clean;
        edits[rng.random_range(0..rlen)] = Some(Edit::Derail(rng.random_range(0..N_LETTERS as u8)));
        rejected = render(grammar, rule, start, &branches, &edits);
    }

    let mut prompt = String::with_capacity(plen);
    prompt.push(char::from(b'0' + rule as u8));
    prompt.extend(prompt_letters.iter().map(|&c| letter(c)));
    PreferencePair {
        id: format!("pair-{index:06}"),
        prompt,
        chosen: chosen.iter().map(|&c| letter(c)).collect(),
        rejected: rejected.iter().map(|&c| letter(c)).collect(),
    }
}

/// Deterministic corpus for `spec`. Pair `i` depends only on `(spec, i)`, so
/// shards can be generated independently; output is ordered by id.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<PreferencePair>, DataError> {
    spec.validate()?;
    let grammar = Grammar::fixed();
    Ok((0..spec.n_pairs)
        .map(|i| generate_pair(spec, &grammar, i))
        .collect())
}

/// Pairs `start..end` of the corpus for `spec`.
pub fn generate_shard(spec: &CorpusSpec, start: usize, end: usize) -> Result<Vec<PreferencePair>, DataError> {
    spec.validate()?;
    let grammar = Grammar::fixed();
    Ok((start..end.min(spec.n_pairs))
        .map(|i| generate_pair(spec, &grammar, i))
        .collect())
}

pub fn to_jsonl(pairs: &[PreferencePair]) -> String {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&serde_json::to_string(p).expect("strings serialize"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl(pairs: &[PreferencePair], path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let io = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(to_jsonl(pairs).as_bytes()).map_err(io)?;
    Ok(())
}

/// Parses JSONL text. CRLF and LF line endings are equivalent; blank lines
/// are skipped.
pub fn parse_jsonl(text: &str) -> Result<Vec<PreferencePair>, DataError> {
    let mut pairs = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.split('\n').enumerate() {
        let line = i + 1;
        let raw = raw.strip_suffix('\r').unwrap_or(raw);
        if raw.trim().is_empty() {
            continue;
        }
        let malformed = |msg: String| DataError::Malformed { line, msg };
        let value: Value =
            serde_json::from_str(raw).map_err(|e| malformed(format!("invalid JSON: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| malformed("expected a JSON object".into()))?;
        let mut fields = ["id", "prompt", "chosen", "rejected"].into_iter().map(|name| {
            match obj.get(name) {
                None => Err(malformed(format!("missing field {name}"))),
                Some(Value::String(s)) if !s.is_empty() => Ok(s.clone()),
                Some(Value::String(_)) => Err(malformed(format!("field {name} is empty"))),
                Some(_) => Err(malformed(format!("field {name} must be a string"))),
            }
        });
        let mut next = || fields.next().expect("four fields");
        let pair = PreferencePair {
            id: next()?,
            prompt: next()?,
            chosen: next()?,
            rejected: next()?,
        };
        if pair.chosen == pair.rejected {
            return Err(malformed(format!("pair {} has chosen equal to rejected", pair.id)));
        }
        if !seen.insert(pair.id.clone()) {
            return Err(malformed(format!("duplicate id {}", pair.id)));
        }
        pairs.push(pair);
    }
    Ok(pairs)
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<PreferencePair>, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_jsonl(&text)
}

/// Seeded disjoint partition into `(train, eval)`, each keeping input order.
pub fn split(
    pairs: &[PreferencePair],
    eval_fraction: f64,
    seed: u64,
) -> Result<(Vec<PreferencePair>, Vec<PreferencePair>), DataError> {
    if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
        return Err(DataError::InvalidFraction(eval_fraction));
    }
    let n = pairs.len();
    if n < 10 {
        return Err(DataError::TooFewPairs(n));
    }
    let n_eval = ((n as f64 * eval_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_eval = vec![false; n];
    for &i in &order[..n_eval] {
        is_eval[i] = true;
    }
    let (eval, train): (Vec<_>, Vec<_>) = pairs
        .iter()
        .cloned()
        .zip(is_eval)
        .partition(|(_, e)| *e);
    Ok((
        train.into_iter().map(|(p, _)| p).collect(),
        eval.into_iter().map(|(p, _)| p).collect(),
    ))
}
