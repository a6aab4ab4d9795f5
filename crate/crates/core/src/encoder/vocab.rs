use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use super::{EncoderError, Result};
use crate::treebank::PhraseTree;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const NUM_SPECIAL: usize = 5;

const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];
const PIECE_PREFIX: &str = "##";

/// Word-level vocabulary with single-character pieces as the fallback for
/// unseen words. Ids are positions in `tokens`; the five special tokens
/// always occupy ids 0-4.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// Inclusive `(first, last)` subtoken positions of each surface token,
/// counted in the full sequence including the leading `[CLS]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenAlignment {
    ranges: Vec<(usize, usize)>,
}

impl TokenAlignment {
    pub fn new(ranges: Vec<(usize, usize)>) -> Self {
        TokenAlignment { ranges }
    }

    pub fn ranges(&self) -> &[(usize, usize)] {
        &self.ranges
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    /// Subtoken positions covered by surface tokens `st..=en` (1-based).
    pub fn span(&self, st: usize, en: usize) -> Option<(usize, usize)> {
        if st == 0 || st > en || en > self.ranges.len() {
            return None;
        }
        Some((self.ranges[st - 1].0, self.ranges[en - 1].1))
    }
}

/// A tokenized sentence: `[CLS] subtokens... [SEP]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    pub alignment: TokenAlignment,
}

fn piece(c: char) -> String {
    format!("{PIECE_PREFIX}{c}")
}

impl Vocabulary {
    /// Words seen at least `min_count` times, most frequent first, then one
    /// piece for every character in the corpus.
    pub fn build(trees: &[PhraseTree], min_count: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut chars = BTreeSet::new();
        for t in trees {
            for w in &t.tokens {
                let w = w.to_lowercase();
                chars.extend(w.chars());
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count.max(1)).collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w))
            .chain(chars.into_iter().map(piece))
            .collect();
        Self::from_tokens(tokens).expect("built vocabulary is well formed")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(EncoderError::Vocab(format!("line {} must be {s}", i + 1)));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(EncoderError::Vocab(format!("line {} is empty", i + 1)));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(EncoderError::Vocab(format!("duplicate token `{t}` on line {}", i + 1)));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Subtoken ids for one surface word.
    pub fn word_pieces(&self, word: &str) -> Vec<usize> {
        let w = word.to_lowercase();
        if let Some(id) = self.id(&w) {
            return vec![id];
        }
        let pieces: Option<Vec<usize>> = w.chars().map(|c| self.id(&piece(c))).collect();
        match pieces {
            Some(p) if !p.is_empty() => p,
            _ => vec![UNK],
        }
    }

    pub fn tokenize<S: AsRef<str>>(&self, words: &[S]) -> Result<Encoded> {
        if words.is_empty() {
            return Err(EncoderError::Domain("cannot tokenize an empty sentence".into()));
        }
        let mut ids = vec![CLS];
        let mut ranges = Vec::with_capacity(words.len());
        for w in words {
            let first = ids.len();
            ids.extend(self.word_pieces(w.as_ref()));
            ranges.push((first, ids.len() - 1));
        }
        ids.push(SEP);
        Ok(Encoded {
            ids,
            alignment: TokenAlignment::new(ranges),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        let trees = crate::treebank::parse_corpus("(3 (2 Good) (2 movie))\n(1 (2 is) (1 (2 n't) (3 good)))").unwrap();
        Vocabulary::build(&trees, 1)
    }

    #[test]
    fn in_vocabulary_words_are_single_subtokens() {
        let e = vocab().tokenize(&["Good", "movie"]).unwrap();
        assert_eq!(e.ids.len(), 4);
        assert_eq!(e.alignment.ranges(), &[(1, 1), (2, 2)]);
        assert_eq!((e.ids[0], e.ids[3]), (CLS, SEP));
    }

    #[test]
    fn unseen_words_fall_back_to_characters() {
        let v = vocab();
        let e = v.tokenize(&["zed", "n't"]).unwrap();
        // "z" never occurs in the corpus.
        assert_eq!(e.ids[1], UNK);
        let e = v.tokenize(&["mood", "n't"]).unwrap();
        assert_eq!(e.alignment.ranges(), &[(1, 4), (5, 5)]);
        assert_eq!(v.token(e.ids[1]), "##m");
        assert_eq!(v.token(e.ids[5]), "n't");
    }

    #[test]
    fn empty_sentence_is_rejected() {
        assert!(matches!(vocab().tokenize::<&str>(&[]), Err(EncoderError::Domain(_))));
    }

    #[test]
    fn file_round_trip() {
        let v = vocab();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
        std::fs::write(&p, "[PAD]\n[CLS]\n").unwrap();
        assert!(matches!(Vocabulary::load(&p), Err(EncoderError::Vocab(_))));
    }

    #[test]
    fn span_lookup() {
        let a = TokenAlignment::new(vec![(1, 1), (2, 4), (5, 5)]);
        assert_eq!(a.span(1, 3), Some((1, 5)));
        assert_eq!(a.span(2, 2), Some((2, 4)));
        assert_eq!(a.span(2, 4), None);
    }
}
