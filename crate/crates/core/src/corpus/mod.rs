//! Synthetic micro-markup corpus with exact ground-truth rasters.

pub mod grammar;
pub mod io;
pub mod render;

use std::collections::HashSet;

use thiserror::Error;

use crate::numerics::{Purpose, RngStream};
pub use grammar::{detokenize, tokenize, Node, Token, VOCAB_SIZE};
pub use render::{render, RenderedImage, IMAGE_HEIGHT, IMAGE_WIDTH};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorpusError {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("invalid document: {0}")]
    Invalid(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("malformed file {path}: {message}")]
    Format { path: String, message: String },
}

/// A tokenized markup document.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkupDoc {
    pub tokens: Vec<Token>,
    pub source_text: String,
    /// Seed the document was sampled from (0 for hand-written documents).
    pub seed: u64,
    layout: Vec<Node>,
}

impl MarkupDoc {
    /// Parses hand-written markup. Any non-empty valid document of at most
    /// 48 tokens and nesting depth 2 is accepted.
    pub fn parse(text: &str) -> Result<Self, CorpusError> {
        Self::with_seed(text, 0)
    }

    fn with_seed(text: &str, seed: u64) -> Result<Self, CorpusError> {
        let tokens = tokenize(text)?;
        if tokens.is_empty() || tokens.len() > grammar::MAX_TOKENS {
            return Err(CorpusError::Invalid(format!("{} tokens, expected 1..={}", tokens.len(), grammar::MAX_TOKENS)));
        }
        if grammar::depth(&tokens) > grammar::MAX_DEPTH {
            return Err(CorpusError::Invalid(format!("nesting deeper than {}", grammar::MAX_DEPTH)));
        }
        let layout = grammar::parse(&tokens)?;
        let source_text = detokenize(&tokens);
        Ok(Self { tokens, source_text, seed, layout })
    }

    /// Regenerates the document sampled from `seed` by [`generate`].
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = RngStream::new(seed, Purpose::Corpus, 0);
        let text = sample_source(&mut rng);
        Self::with_seed(&text, seed).expect("sampler emits grammatical markup")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn layout(&self) -> &[Node] {
        &self.layout
    }

    pub fn contains_frac(&self) -> bool {
        self.tokens.contains(&Token::Frac)
    }

    pub fn contains_script(&self) -> bool {
        self.tokens.iter().any(|t| matches!(t, Token::Sup | Token::Sub))
    }
}

fn operand(rng: &mut RngStream) -> String {
    const LETTERS: &[u8] = b"abcdefghijklmnopqrstuvwxyz";
    const DIGITS: &[u8] = b"0123456789";
    let pick = |rng: &mut RngStream| {
        if rng.bernoulli(0.6) {
            LETTERS[rng.below(LETTERS.len())] as char
        } else {
            DIGITS[rng.below(DIGITS.len())] as char
        }
    };
    let mut s = String::new();
    s.push(pick(rng));
    if rng.bernoulli(0.3) {
        s.push(pick(rng));
    }
    s
}

fn operator(rng: &mut RngStream) -> char {
    ['+', '-', '='][rng.below(3)]
}

fn flat(rng: &mut RngStream, min_terms: usize, max_terms: usize) -> Vec<String> {
    let k = min_terms + rng.below(max_terms - min_terms + 1);
    (0..k).map(|_| operand(rng)).collect()
}

fn join(terms: &[String], rng: &mut RngStream) -> String {
    let mut s = String::new();
    for (i, t) in terms.iter().enumerate() {
        if i > 0 {
            s.push(operator(rng));
        }
        s.push_str(t);
    }
    s
}

fn script(rng: &mut RngStream) -> String {
    let base = operand(rng).chars().next().expect("non-empty operand");
    let marker = if rng.bernoulli(0.5) { '^' } else { '_' };
    let body = flat(rng, 1, 2);
    format!("{base}{marker}{{{}}}", join(&body, rng))
}

/// Samples one document: 40% flat, 30% with one fraction, 30% with one
/// script.
fn sample_source(rng: &mut RngStream) -> String {
    let u = rng.uniform();
    if u < 0.4 {
        let terms = flat(rng, 2, 6);
        join(&terms, rng)
    } else if u < 0.7 {
        let mut s = String::new();
        if rng.bernoulli(0.5) {
            s.push_str(&join(&flat(rng, 1, 2), rng));
            s.push(operator(rng));
        }
        let num = if rng.bernoulli(0.2) { script(rng) } else { join(&flat(rng, 1, 2), rng) };
        let den = join(&flat(rng, 1, 2), rng);
        s.push_str(&format!("\\frac{{{num}}}{{{den}}}"));
        if rng.bernoulli(0.5) {
            s.push(operator(rng));
            s.push_str(&join(&flat(rng, 1, 2), rng));
        }
        s
    } else {
        let mut terms = flat(rng, 2, 4);
        let at = rng.below(terms.len());
        terms[at] = script(rng);
        join(&terms, rng)
    }
}

fn doc_seed(seed: u64, index: u64, attempt: u64) -> u64 {
    RngStream::keyed(seed, Purpose::Corpus, index, attempt).next_u64()
}

/// Samples `count` distinct documents. Identical arguments give identical
/// corpora. Documents that would overflow the image width, fall outside
/// 3..=48 tokens, or duplicate an earlier document are resampled.
pub fn generate(seed: u64, count: usize) -> Vec<MarkupDoc> {
    let mut seen = HashSet::new();
    let mut docs = Vec::with_capacity(count);
    for index in 0..count as u64 {
        for attempt in 0.. {
            let s = doc_seed(seed, index, attempt);
            let doc = MarkupDoc::from_seed(s);
            let fits = render::layout_width(doc.layout()) < IMAGE_WIDTH;
            if (3..=grammar::MAX_TOKENS).contains(&doc.len()) && fits && seen.insert(doc.source_text.clone()) {
                docs.push(doc);
                break;
            }
        }
    }
    docs
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        assert_eq!(generate(7, 3), generate(7, 3));
    }

    #[test]
    fn different_seeds_differ() {
        assert_ne!(generate(7, 1)[0].source_text, generate(8, 1)[0].source_text);
        let differing = (0..50).filter(|&s| generate(s, 1)[0].source_text != generate(s + 1000, 1)[0].source_text).count();
        assert!(differing >= 48);
    }

    #[test]
    fn fraction_share() {
        let docs = generate(7, 1000);
        let fracs = docs.iter().filter(|d| d.contains_frac()).count() as f64 / 1000.0;
        assert!((fracs - 0.30).abs() <= 0.04, "fraction share {fracs}");
    }

    #[test]
    fn generated_docs_satisfy_invariants() {
        let docs = generate(11, 300);
        let mut texts = HashSet::new();
        for d in &docs {
            assert!((3..=48).contains(&d.len()), "{}", d.source_text);
            assert!(grammar::depth(&d.tokens) <= 2);
            assert_eq!(tokenize(&detokenize(&d.tokens)).unwrap(), d.tokens);
            assert!(render(d).ink_pixels() >= 1);
            assert_eq!(MarkupDoc::from_seed(d.seed), *d);
            assert!(texts.insert(d.source_text.clone()));
        }
    }

    #[test]
    fn rejects_oversized_documents() {
        assert!(MarkupDoc::parse(&"a".repeat(49)).is_err());
        assert!(MarkupDoc::parse("").is_err());
        assert!(MarkupDoc::parse("\\frac{a_{\\frac{b}{c}}}{d}").is_err());
    }
}
