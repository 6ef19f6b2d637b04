//! Byte-level documents, content-derived ids and a seeded synthetic corpus.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::Result;

pub const BOS: usize = 256;
pub const PAD: usize = 257;

/// Desk-scale minimum word count for calibration documents.
pub const DEFAULT_MIN_WORDS: usize = 30;

/// Identifier derived from the document text, so the same text always gets
/// the same id.
pub type DocId = u64;

pub fn doc_id(text: &str) -> DocId {
    let digest = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub id: DocId,
    pub text: String,
}

/// A contiguous window of one document's tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Chunk {
    pub doc_id: DocId,
    pub index: usize,
    pub tokens: Vec<usize>,
}

impl Document {
    pub fn new(text: impl Into<String>) -> Self {
        let text = text.into();
        Self { id: doc_id(&text), text }
    }

    pub fn word_count(&self) -> usize {
        self.text.split_whitespace().count()
    }

    /// `[BOS]` followed by the UTF-8 bytes.
    pub fn tokens(&self) -> Vec<usize> {
        std::iter::once(BOS)
            .chain(self.text.bytes().map(usize::from))
            .collect()
    }

    /// Split the token sequence into windows of at most `max_seq` tokens.
    pub fn chunks(&self, max_seq: usize) -> Vec<Chunk> {
        self.tokens()
            .chunks(max_seq.max(1))
            .enumerate()
            .map(|(index, t)| Chunk {
                doc_id: self.id,
                index,
                tokens: t.to_vec(),
            })
            .collect()
    }
}

pub fn chunk_documents(docs: &[Document], max_seq: usize) -> Vec<Chunk> {
    docs.iter().flat_map(|d| d.chunks(max_seq)).collect()
}

/// One document per non-empty line, keeping lines with more than
/// `min_words` words.
pub fn parse_corpus(text: &str, min_words: usize) -> Vec<Document> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(Document::new)
        .filter(|d| d.word_count() > min_words)
        .collect()
}

pub fn load_corpus(path: &Path, min_words: usize) -> Result<Vec<Document>> {
    Ok(parse_corpus(&std::fs::read_to_string(path)?, min_words))
}

/// All documents packed into one stream, each introduced by `BOS`.
pub fn packed_stream(docs: &[Document]) -> Vec<usize> {
    docs.iter().flat_map(Document::tokens).collect()
}

struct Topic {
    nouns: &'static [&'static str],
    verbs: &'static [&'static str],
    places: &'static [&'static str],
    adjectives: &'static [&'static str],
}

const TOPICS: &[Topic] = &[
    Topic {
        nouns: &["the farmer", "a goat", "the old mill", "her brother", "the barn cat", "a tired horse"],
        verbs: &["carries", "watches", "feeds", "follows", "repairs", "finds"],
        places: &["near the river", "behind the barn", "in the wet field", "at the edge of the orchard"],
        adjectives: &["muddy", "quiet", "cold", "green", "slow"],
    },
    Topic {
        nouns: &["the captain", "a young sailor", "the lighthouse", "the crew", "a small boat", "the harbor master"],
        verbs: &["signals", "steers", "loads", "paints", "counts", "calls"],
        places: &["across the bay", "on the stone pier", "under grey clouds", "past the northern rocks"],
        adjectives: &["salty", "windy", "bright", "rough", "calm"],
    },
    Topic {
        nouns: &["the teacher", "a curious student", "the library", "the head clerk", "a new book", "the class"],
        verbs: &["reads", "writes", "borrows", "explains", "copies", "studies"],
        places: &["in the reading room", "after the lesson", "beside the window", "before the bell rings"],
        adjectives: &["careful", "long", "dusty", "patient", "clear"],
    },
    Topic {
        nouns: &["the baker", "a hungry child", "the market", "the cook", "a warm loaf", "the grocer"],
        verbs: &["sells", "bakes", "tastes", "wraps", "prepares", "orders"],
        places: &["in the morning", "on the busy street", "at the corner shop", "by the hot oven"],
        adjectives: &["sweet", "fresh", "crowded", "golden", "small"],
    },
];

const LINKS: &[&str] = &["then", "later", "after that", "meanwhile", "soon"];

fn sentence(topic: &Topic, rng: &mut ChaCha8Rng) -> String {
    let pick = |xs: &'static [&'static str], rng: &mut ChaCha8Rng| *xs.choose(rng).expect("non-empty word list");
    let s = pick(topic.nouns, rng);
    let o = pick(topic.nouns, rng);
    let v = pick(topic.verbs, rng);
    let p = pick(topic.places, rng);
    let a = pick(topic.adjectives, rng);
    let b = pick(topic.adjectives, rng);
    let body = match rng.random_range(0..5) {
        0 => format!("{s} {v} {o} {p}"),
        1 => format!("{p} {s} {v} {o}"),
        2 => format!("{s} is {a} and {b}"),
        3 => format!("{} {s} {v} {o}", pick(LINKS, rng)),
        _ => format!("{s} {v} the {a} things {p}"),
    };
    let mut chars = body.chars();
    let first = chars.next().map(|c| c.to_ascii_uppercase()).unwrap_or(' ');
    format!("{first}{}.", chars.as_str())
}

/// Seeded English-like documents of a little over 30 words each. Every
/// document stays within one topic so there is structure beyond a sentence.
pub fn synthetic_corpus(n_docs: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_docs)
        .map(|_| {
            let topic = &TOPICS[rng.random_range(0..TOPICS.len())];
            let mut sentences = Vec::new();
            let mut words = 0;
            while words <= DEFAULT_MIN_WORDS {
                let s = sentence(topic, &mut rng);
                words += s.split_whitespace().count();
                sentences.push(s);
            }
            sentences.join(" ")
        })
        .collect()
}
