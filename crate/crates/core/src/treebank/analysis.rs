//! Sentiment-switch difficulty metrics, negation counts, contrastive
//! `X but Y` triple-lets and corpus statistics.
//!
//! A sentiment switch is a parent/child edge whose labels differ. Metrics
//! expect three-class (or two-class) labels; five-class trees are rejected.

use std::collections::HashSet;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Granularity, NodeId, PhraseTree, Result, TreebankError};

pub const DEFAULT_NEGATIONS: [&str; 3] = ["no", "n't", "not"];

/// Global-difficulty bins as `(low, high, key)`; the last bin is open-ended.
pub const GLOBAL_BINS: [(usize, usize, &str); 5] = [
    (0, 4, "0-4"),
    (5, 9, "5-9"),
    (10, 14, "10-14"),
    (15, 19, "15-19"),
    (20, usize::MAX, "20-23"),
];

pub const LOCAL_BINS: [&str; 3] = ["0", "1", "2"];
pub const NEGATION_BINS: [&str; 3] = ["0", "1", "2+"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DifficultyOptions {
    /// Ignore edges from a phrase to a token (leaf) child.
    pub phrase_edges_only: bool,
}

fn require_coarse(tree: &PhraseTree) -> Result<()> {
    if tree.granularity() == Granularity::Five {
        return Err(TreebankError::Domain(
            "difficulty metrics need three- or two-class labels; coarsen first".into(),
        ));
    }
    Ok(())
}

/// Number of children (0-2) whose label differs from the node's.
pub fn local_difficulty(tree: &PhraseTree, node: NodeId, opts: DifficultyOptions) -> Result<u8> {
    require_coarse(tree)?;
    let n = tree.node(node);
    let (l, r) = n.children().ok_or_else(|| {
        TreebankError::Domain(format!("local difficulty is undefined for token node {node}"))
    })?;
    Ok([l, r]
        .into_iter()
        .map(|c| tree.node(c))
        .filter(|c| !(opts.phrase_edges_only && c.is_leaf()))
        .filter(|c| c.label != n.label)
        .count() as u8)
}

/// Total number of sentiment switches in the tree.
pub fn global_difficulty(tree: &PhraseTree, opts: DifficultyOptions) -> Result<usize> {
    require_coarse(tree)?;
    tree.phrases()
        .map(|n| local_difficulty(tree, n.id, opts).map(usize::from))
        .sum()
}

pub fn global_bin(difficulty: usize) -> usize {
    GLOBAL_BINS
        .iter()
        .position(|&(lo, hi, _)| (lo..=hi).contains(&difficulty))
        .expect("bins cover every value")
}

pub fn negation_bin(count: usize) -> usize {
    count.min(2)
}

pub fn default_negations() -> HashSet<String> {
    DEFAULT_NEGATIONS.iter().map(|s| s.to_string()).collect()
}

/// Tokens whose lowercase form is in `lexicon` (which must be lowercase).
pub fn count_negations(tree: &PhraseTree, lexicon: &HashSet<String>) -> usize {
    tree.tokens
        .iter()
        .filter(|t| lexicon.contains(&t.to_lowercase()))
        .count()
}

/// A contrastive `X but Y` node with its two constituents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub parent: NodeId,
    pub left: NodeId,
    pub right: NodeId,
}

/// Every node shaped `(X (but Y))` or `((X but) Y)` where `but` is the only
/// token between X and Y and the gold labels of X and Y differ.
pub fn extract_but_triplets(tree: &PhraseTree) -> Result<Vec<Triplet>> {
    require_coarse(tree)?;
    let is_but = |id: NodeId| {
        let n = tree.node(id);
        n.is_leaf() && tree.tokens[n.span.0 - 1].eq_ignore_ascii_case("but")
    };
    let mut out = Vec::new();
    for p in tree.phrases() {
        let (a, b) = p.children().expect("phrase nodes have children");
        let mut candidates = Vec::with_capacity(2);
        if let Some((bl, br)) = tree.node(b).children() {
            if is_but(bl) {
                candidates.push((a, br));
            }
        }
        if let Some((al, ar)) = tree.node(a).children() {
            if is_but(ar) {
                candidates.push((al, b));
            }
        }
        for (x, y) in candidates {
            if tree.node(x).label != tree.node(y).label {
                out.push(Triplet {
                    parent: p.id,
                    left: x,
                    right: y,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreebankStats {
    pub sentences: usize,
    pub phrase_nodes: usize,
    /// Phrase nodes per local difficulty.
    pub local_difficulty: IndexMap<String, usize>,
    /// Sentences per global-difficulty bin.
    pub global_difficulty: IndexMap<String, usize>,
    /// Sentences per negation-count bin.
    pub negation: IndexMap<String, usize>,
}

pub fn compute_stats(trees: &[PhraseTree], opts: DifficultyOptions) -> Result<TreebankStats> {
    let negations = default_negations();
    let mut local = [0usize; 3];
    let mut global = [0usize; GLOBAL_BINS.len()];
    let mut neg = [0usize; 3];
    let mut phrase_nodes = 0;
    for t in trees {
        let mut total = 0;
        for p in t.phrases() {
            let d = local_difficulty(t, p.id, opts)?;
            local[d as usize] += 1;
            total += d as usize;
            phrase_nodes += 1;
        }
        require_coarse(t)?;
        global[global_bin(total)] += 1;
        neg[negation_bin(count_negations(t, &negations))] += 1;
    }
    let map = |keys: &[&str], counts: &[usize]| -> IndexMap<String, usize> {
        keys.iter().map(|k| k.to_string()).zip(counts.iter().copied()).collect()
    };
    let global_keys: Vec<&str> = GLOBAL_BINS.iter().map(|b| b.2).collect();
    Ok(TreebankStats {
        sentences: trees.len(),
        phrase_nodes,
        local_difficulty: map(&LOCAL_BINS, &local),
        global_difficulty: map(&global_keys, &global),
        negation: map(&NEGATION_BINS, &neg),
    })
}

/// Which nodes of one tree contribute to the phrase loss.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupervisionMask(Vec<bool>);

impl SupervisionMask {
    pub fn none(tree: &PhraseTree) -> Self {
        SupervisionMask(vec![false; tree.nodes.len()])
    }

    /// Every phrase (non-leaf) node.
    pub fn all_phrases(tree: &PhraseTree) -> Self {
        SupervisionMask(tree.nodes.iter().map(|n| !n.is_leaf()).collect())
    }

    /// Only the root, whether or not it is a leaf.
    pub fn root_only(tree: &PhraseTree) -> Self {
        let mut m = Self::none(tree);
        m.0[PhraseTree::ROOT] = true;
        m
    }

    pub fn from_flags(flags: Vec<bool>) -> Self {
        SupervisionMask(flags)
    }

    pub fn is_supervised(&self, id: NodeId) -> bool {
        self.0.get(id).copied().unwrap_or(false)
    }

    pub fn set(&mut self, id: NodeId, on: bool) {
        self.0[id] = on;
    }

    pub fn union(&self, other: &SupervisionMask) -> SupervisionMask {
        SupervisionMask(self.0.iter().zip(&other.0).map(|(a, b)| *a || *b).collect())
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Keep phrase supervision on `round(fraction * N)` of the corpus's `N`
/// phrase nodes, drawn uniformly across the whole corpus.
pub fn subsample_phrase_labels(trees: &[PhraseTree], fraction: f64, seed: u64) -> Result<Vec<SupervisionMask>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(TreebankError::Domain(format!("label fraction {fraction} outside [0, 1]")));
    }
    let mut pool: Vec<(usize, NodeId)> = trees
        .iter()
        .enumerate()
        .flat_map(|(i, t)| t.phrases().map(move |n| (i, n.id)))
        .collect();
    let keep = (fraction * pool.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    let mut masks: Vec<SupervisionMask> = trees.iter().map(SupervisionMask::none).collect();
    for &(i, id) in &pool[..keep] {
        masks[i].set(id, true);
    }
    Ok(masks)
}
