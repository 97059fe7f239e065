//! Seeded toy language with long-range copy structure.
//!
//! Text is a bigram chain over a small random lexicon. Interleaved with it are
//! copy blocks `<key> filler... [key]`: the closing key repeats a random
//! opening key, so it is only predictable by looking far back.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The 64-symbol character vocabulary; token id = index.
pub const ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz0123456789 .,;:!?()[]{}<>=+-*/#@$%&^_~";

pub const VOCAB_SIZE: usize = 64;

const LEXICON_SIZE: usize = 24;
const SUCCESSORS: usize = 3;

pub fn encode(text: &str) -> Result<Vec<usize>> {
    text.chars()
        .map(|c| {
            ALPHABET
                .find(c)
                .ok_or_else(|| Error::Input(format!("character {c:?} not in vocabulary")))
        })
        .collect()
}

pub fn decode(tokens: &[usize]) -> String {
    let chars: Vec<char> = ALPHABET.chars().collect();
    tokens
        .iter()
        .map(|&t| chars.get(t).copied().unwrap_or('\u{fffd}'))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub seed: u64,
    /// Number of sequences generated before de-duplication.
    pub size: usize,
    pub seq_len: usize,
    /// Chance that the next segment opens a copy block.
    pub copy_prob: f64,
    pub key_len: usize,
    /// Filler words between a key and its repetition.
    pub min_gap: usize,
    pub max_gap: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 400,
            seq_len: 96,
            copy_prob: 0.25,
            key_len: 3,
            min_gap: 1,
            max_gap: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<Vec<usize>>,
    pub eval: Vec<Vec<usize>>,
}

struct Grammar {
    words: Vec<String>,
    next: Vec<[usize; SUCCESSORS]>,
}

impl Grammar {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let letters: Vec<char> = "abcdefghijklmnopqrstuvwxyz".chars().collect();
        let mut words = Vec::with_capacity(LEXICON_SIZE);
        let mut seen = HashSet::new();
        while words.len() < LEXICON_SIZE {
            let len = rng.random_range(2..=6);
            let w: String = (0..len).map(|_| letters[rng.random_range(0..letters.len())]).collect();
            if seen.insert(w.clone()) {
                words.push(w);
            }
        }
        let next = (0..LEXICON_SIZE)
            .map(|_| std::array::from_fn(|_| rng.random_range(0..LEXICON_SIZE)))
            .collect();
        Self { words, next }
    }

    /// Successor choice is skewed: the first listed successor is the most likely.
    fn step(&self, word: usize, rng: &mut ChaCha8Rng) -> usize {
        let r: f64 = rng.random();
        let slot = if r < 0.6 {
            0
        } else if r < 0.85 {
            1
        } else {
            2
        };
        self.next[word][slot]
    }
}

fn sequence(g: &Grammar, spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> String {
    let keychars: Vec<char> = "0123456789abcdefghijklmnopqrstuvwxyz".chars().collect();
    let mut out = String::with_capacity(spec.seq_len);
    let mut word = rng.random_range(0..LEXICON_SIZE);
    loop {
        let room = spec.seq_len - out.len();
        let segment = if rng.random_bool(spec.copy_prob) {
            let key: String = (0..spec.key_len)
                .map(|_| keychars[rng.random_range(0..keychars.len())])
                .collect();
            let gap = rng.random_range(spec.min_gap..=spec.max_gap);
            let mut s = format!("<{key}> ");
            for _ in 0..gap {
                word = g.step(word, rng);
                s.push_str(&g.words[word]);
                s.push(' ');
            }
            s.push_str(&format!("[{key}] "));
            s
        } else {
            word = g.step(word, rng);
            let punct = if rng.random_bool(0.15) { "." } else { "" };
            format!("{}{punct} ", g.words[word])
        };
        if segment.len() > room {
            // pad with the periodic tail so no delimiter is left open
            let tail: String = ".".repeat(room);
            out.push_str(&tail);
            return out;
        }
        out.push_str(&segment);
    }
}

/// Generates, de-duplicates and splits a corpus: the last 5% of the distinct
/// sequences form the evaluation split.
pub fn make_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    if spec.size == 0 || spec.seq_len == 0 {
        return Err(Error::Config("corpus size and seq_len must be positive".into()));
    }
    if spec.min_gap > spec.max_gap || !(0.0..=1.0).contains(&spec.copy_prob) {
        return Err(Error::Config("invalid copy-block settings".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let grammar = Grammar::new(&mut rng);
    let mut seen = HashSet::new();
    let mut all = Vec::with_capacity(spec.size);
    for _ in 0..spec.size {
        let s = sequence(&grammar, spec, &mut rng);
        if seen.insert(s.clone()) {
            all.push(encode(&s)?);
        }
    }
    let n_eval = (all.len() * 5).div_ceil(100).max(1).min(all.len().saturating_sub(1));
    let eval = all.split_off(all.len() - n_eval);
    Ok(Corpus { train: all, eval })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alphabet_has_vocab_size_distinct_symbols() {
        let set: HashSet<char> = ALPHABET.chars().collect();
        assert_eq!(set.len(), VOCAB_SIZE);
        assert_eq!(ALPHABET.chars().count(), VOCAB_SIZE);
    }

    #[test]
    fn encode_decode_round_trip() {
        let s = "<ab1> word [ab1] .";
        assert_eq!(decode(&encode(s).unwrap()), s);
        assert!(encode("é").is_err());
    }
}
