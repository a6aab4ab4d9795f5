use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{TokenAlignment, MASK, NUM_SPECIAL};
use super::{EncoderError, Result};

/// Which corruption a selected word received.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Treatment {
    Mask,
    Random,
    Keep,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskingPolicy {
    pub opinion_word_prob: f64,
    pub other_word_prob: f64,
    /// Probabilities of (mask, random, keep) for a selected word.
    pub split: [f64; 3],
    pub lexicon: HashSet<String>,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        MaskingPolicy {
            opinion_word_prob: 0.20,
            other_word_prob: 0.15,
            split: [0.8, 0.1, 0.1],
            lexicon: HashSet::new(),
        }
    }
}

impl MaskingPolicy {
    pub fn with_lexicon<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        MaskingPolicy {
            lexicon: words.into_iter().map(|w| w.as_ref().to_lowercase()).collect(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(EncoderError::Config(format!("{name} must lie in [0, 1], got {p}")))
            }
        };
        unit("opinion_word_prob", self.opinion_word_prob)?;
        unit("other_word_prob", self.other_word_prob)?;
        for p in self.split {
            unit("replacement split entry", p)?;
        }
        let total: f64 = self.split.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(EncoderError::Config(format!("replacement split sums to {total}, not 1")));
        }
        Ok(())
    }

    pub fn is_opinion_word(&self, word: &str) -> bool {
        self.lexicon.contains(&word.to_lowercase())
    }
}

/// Read a word list: one word per line; blank lines and `#` comments are skipped.
pub fn load_lexicon(path: &Path) -> Result<HashSet<String>> {
    Ok(fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_lowercase)
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MlmTarget {
    pub position: usize,
    pub original: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedInput {
    pub ids: Vec<usize>,
    pub targets: Vec<MlmTarget>,
    /// Surface word index and treatment for every selected word.
    pub selected: Vec<(usize, Treatment)>,
}

/// Corrupt a tokenized sentence for masked language modeling.
///
/// Selection happens per surface word; every subtoken of a selected word
/// becomes a target and receives the same treatment. Random replacements
/// never produce a special id.
pub fn apply_masking<S: AsRef<str>, R: Rng + ?Sized>(
    ids: &[usize],
    alignment: &TokenAlignment,
    words: &[S],
    vocab_size: usize,
    policy: &MaskingPolicy,
    rng: &mut R,
) -> MaskedInput {
    debug_assert_eq!(words.len(), alignment.len());
    let mut out = MaskedInput {
        ids: ids.to_vec(),
        targets: Vec::new(),
        selected: Vec::new(),
    };
    for (w, &(first, last)) in alignment.ranges().iter().enumerate() {
        let p = if policy.is_opinion_word(words[w].as_ref()) {
            policy.opinion_word_prob
        } else {
            policy.other_word_prob
        };
        if rng.gen::<f64>() >= p {
            continue;
        }
        let u: f64 = rng.gen();
        let treatment = if u < policy.split[0] {
            Treatment::Mask
        } else if u < policy.split[0] + policy.split[1] {
            Treatment::Random
        } else {
            Treatment::Keep
        };
        out.selected.push((w, treatment));
        for pos in first..=last {
            out.targets.push(MlmTarget {
                position: pos,
                original: ids[pos],
            });
            match treatment {
                Treatment::Mask => out.ids[pos] = MASK,
                Treatment::Random if vocab_size > NUM_SPECIAL => out.ids[pos] = rng.gen_range(NUM_SPECIAL..vocab_size),
                _ => {}
            }
        }
    }
    out
}
