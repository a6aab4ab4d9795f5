//! Shared setup for the acceptance suite in `tests/acceptance.rs`.

use std::io::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use senticomp::encoder::{EncoderConfig, MaskingPolicy};
use senticomp::evalsuite::evaluate;
use senticomp::objective::{Example, Model};
use senticomp::synth::{opinion_words, SentimentGrammar};
use senticomp::treebank::{DifficultyOptions, PhraseTree};

/// Print a `[PASS]` or `[FAIL]` line for one criterion. It goes straight to
/// stderr so the test harness never captures it.
pub fn verdict(id: u32, name: &str, passed: bool, detail: &str) {
    let tag = if passed { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[{tag}] criterion {id}: {name}: {detail}");
}

pub fn lexicon_policy() -> MaskingPolicy {
    MaskingPolicy::with_lexicon(opinion_words())
}

pub fn grammar_corpus(seed: u64, n: usize) -> Vec<PhraseTree> {
    SentimentGrammar::default().corpus(&mut ChaCha8Rng::seed_from_u64(seed), n)
}

/// Four heads and a feed-forward width of twice the model width.
pub fn encoder(vocab: usize, layers: usize, d: usize, dropout: f64) -> EncoderConfig {
    EncoderConfig {
        layers,
        heads: 4,
        model_dim: d,
        ffn_dim: 2 * d,
        max_len: 64,
        vocab_size: vocab,
        dropout,
    }
}

pub fn phrase_acc(model: &Model, examples: &[Example]) -> f64 {
    let preds = model.predict_all(examples).expect("prediction");
    let trees: Vec<PhraseTree> = examples.iter().map(|e| e.tree.clone()).collect();
    evaluate(&preds, &trees, DifficultyOptions::default())
        .expect("evaluation")
        .phrase_accuracy
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}
