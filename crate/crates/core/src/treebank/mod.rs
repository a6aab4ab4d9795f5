//! Binary constituency trees with per-node sentiment labels, in the
//! bracketed one-tree-per-line format of the Stanford Sentiment Treebank:
//!
//! ```text
//! (3 (2 Good) (2 movie))
//! ```
//!
//! Nodes are stored in pre-order, so the root is always node 0 and every
//! parent precedes its children. Spans are 1-based and inclusive over the
//! surface tokens.

mod analysis;
mod parse;

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use analysis::{
    compute_stats, count_negations, default_negations, extract_but_triplets, global_bin, global_difficulty,
    local_difficulty, negation_bin, subsample_phrase_labels, DifficultyOptions, SupervisionMask, TreebankStats,
    Triplet, DEFAULT_NEGATIONS, GLOBAL_BINS, LOCAL_BINS, NEGATION_BINS,
};

#[derive(Debug, Error)]
pub enum TreebankError {
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    #[error("node at byte {offset} has {children} children; trees must be binary")]
    Arity { offset: usize, children: usize },

    #[error("label `{label}` at byte {offset} is outside 0-4")]
    Label { offset: usize, label: String },

    #[error("line {line}: {source}")]
    Line {
        line: usize,
        #[source]
        source: Box<TreebankError>,
    },

    #[error("cannot convert {from:?} labels to {to:?}")]
    Granularity { from: Granularity, to: Granularity },

    #[error("{0}")]
    Domain(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TreebankError {
    /// 1-based line number for errors raised while reading a file.
    pub fn line(&self) -> Option<usize> {
        match self {
            TreebankError::Line { line, .. } => Some(*line),
            _ => None,
        }
    }
}

pub type Result<T, E = TreebankError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Granularity {
    Five,
    Three,
    Two,
}

impl Granularity {
    pub fn num_classes(self) -> usize {
        match self {
            Granularity::Five => 5,
            Granularity::Three => 3,
            Granularity::Two => 2,
        }
    }

    pub fn from_classes(n: usize) -> Option<Self> {
        match n {
            5 => Some(Granularity::Five),
            3 => Some(Granularity::Three),
            2 => Some(Granularity::Two),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SentimentLabel {
    value: u8,
    granularity: Granularity,
}

impl SentimentLabel {
    pub fn new(value: u8, granularity: Granularity) -> Option<Self> {
        ((value as usize) < granularity.num_classes()).then_some(SentimentLabel { value, granularity })
    }

    pub fn value(self) -> u8 {
        self.value
    }

    pub fn class(self) -> usize {
        self.value as usize
    }

    pub fn granularity(self) -> Granularity {
        self.granularity
    }

    /// Map to a coarser scale. `None` means the label has no counterpart
    /// (neutral under two classes); such nodes stay in the tree but are
    /// excluded from losses and accuracies.
    pub fn coarsen(self, target: Granularity) -> Result<Option<SentimentLabel>> {
        use Granularity::*;
        let polarity = |v: u8, neutral: u8| match v.cmp(&neutral) {
            std::cmp::Ordering::Less => 0u8,
            std::cmp::Ordering::Equal => 1,
            std::cmp::Ordering::Greater => 2,
        };
        let value = match (self.granularity, target) {
            (a, b) if a == b => Some(self.value),
            (Five, Three) => Some(polarity(self.value, 2)),
            (Five, Two) => match polarity(self.value, 2) {
                0 => Some(0),
                1 => None,
                _ => Some(1),
            },
            (Three, Two) => match self.value {
                0 => Some(0),
                1 => None,
                _ => Some(1),
            },
            (from, to) => return Err(TreebankError::Granularity { from, to }),
        };
        Ok(value.map(|value| SentimentLabel { value, granularity: target }))
    }
}

/// Node identifier: index into [`PhraseTree::nodes`].
pub type NodeId = usize;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhraseNode {
    pub id: NodeId,
    /// 1-based inclusive token span.
    pub span: (usize, usize),
    /// `None` only after coarsening to two classes removed a neutral label.
    pub label: Option<SentimentLabel>,
    pub left: Option<NodeId>,
    pub right: Option<NodeId>,
}

impl PhraseNode {
    pub fn is_leaf(&self) -> bool {
        self.left.is_none()
    }

    pub fn children(&self) -> Option<(NodeId, NodeId)> {
        self.left.zip(self.right)
    }

    pub fn len(&self) -> usize {
        self.span.1 - self.span.0 + 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhraseTree {
    pub nodes: Vec<PhraseNode>,
    pub tokens: Vec<String>,
}

impl PhraseTree {
    pub const ROOT: NodeId = 0;

    pub fn parse(text: &str) -> Result<Self> {
        parse::parse_ptb(text)
    }

    pub fn root(&self) -> &PhraseNode {
        &self.nodes[Self::ROOT]
    }

    pub fn node(&self, id: NodeId) -> &PhraseNode {
        &self.nodes[id]
    }

    pub fn granularity(&self) -> Granularity {
        self.nodes
            .iter()
            .find_map(|n| n.label.map(SentimentLabel::granularity))
            .unwrap_or(Granularity::Two)
    }

    pub fn phrases(&self) -> impl Iterator<Item = &PhraseNode> {
        self.nodes.iter().filter(|n| !n.is_leaf())
    }

    pub fn leaves(&self) -> impl Iterator<Item = &PhraseNode> {
        self.nodes.iter().filter(|n| n.is_leaf())
    }

    /// Node ids with every child before its parent.
    pub fn post_order(&self) -> Vec<NodeId> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![(Self::ROOT, false)];
        while let Some((id, expanded)) = stack.pop() {
            match (self.nodes[id].children(), expanded) {
                (Some((l, r)), false) => {
                    stack.push((id, true));
                    stack.push((r, false));
                    stack.push((l, false));
                }
                _ => out.push(id),
            }
        }
        out
    }

    /// Surface text covered by a node.
    pub fn text(&self, id: NodeId) -> String {
        let (st, en) = self.nodes[id].span;
        self.tokens[st - 1..en].join(" ")
    }

    /// Parent of every node (`None` for the root).
    pub fn parents(&self) -> Vec<Option<NodeId>> {
        let mut parents = vec![None; self.nodes.len()];
        for n in &self.nodes {
            if let Some((l, r)) = n.children() {
                parents[l] = Some(n.id);
                parents[r] = Some(n.id);
            }
        }
        parents
    }

    /// Relabel every node at a coarser granularity.
    pub fn coarsen(&self, target: Granularity) -> Result<PhraseTree> {
        let mut out = self.clone();
        for node in &mut out.nodes {
            if let Some(label) = node.label {
                node.label = label.coarsen(target)?;
            }
        }
        Ok(out)
    }

    /// Check structural invariants; parsing always produces valid trees, so
    /// this is for trees assembled by hand.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TreebankError::Domain(msg));
        if self.nodes.is_empty() {
            return bad("tree has no nodes".into());
        }
        if self.root().span != (1, self.tokens.len()) {
            return bad(format!("root span {:?} does not cover {} tokens", self.root().span, self.tokens.len()));
        }
        let mut seen = vec![false; self.nodes.len()];
        seen[Self::ROOT] = true;
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id != i {
                return bad(format!("node {i} carries id {}", n.id));
            }
            let (st, en) = n.span;
            if st == 0 || st > en {
                return bad(format!("node {i} has span {:?}", n.span));
            }
            match (n.left, n.right) {
                (None, None) if st != en => return bad(format!("leaf {i} spans {:?}", n.span)),
                (None, None) => {}
                (Some(l), Some(r)) => {
                    for c in [l, r] {
                        if c <= i || c >= self.nodes.len() || seen[c] {
                            return bad(format!("node {i} has invalid child {c}"));
                        }
                        seen[c] = true;
                    }
                    let (ls, rs) = (self.nodes[l].span, self.nodes[r].span);
                    if ls.0 != st || rs.1 != en || ls.1 + 1 != rs.0 {
                        return bad(format!("node {i} span {:?} is not the union of {ls:?} and {rs:?}", n.span));
                    }
                }
                _ => return bad(format!("node {i} has exactly one child")),
            }
        }
        if let Some(orphan) = seen.iter().position(|s| !s) {
            return bad(format!("node {orphan} is unreachable"));
        }
        Ok(())
    }
}

impl fmt::Display for PhraseTree {
    /// Bracketed form; labels that were removed by coarsening print as `-`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn go(t: &PhraseTree, id: NodeId, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            let n = &t.nodes[id];
            match n.label {
                Some(l) => write!(f, "({}", l.value())?,
                None => write!(f, "(-")?,
            }
            match n.children() {
                Some((l, r)) => {
                    write!(f, " ")?;
                    go(t, l, f)?;
                    write!(f, " ")?;
                    go(t, r, f)?;
                }
                None => write!(f, " {}", t.tokens[n.span.0 - 1])?,
            }
            write!(f, ")")
        }
        go(self, Self::ROOT, f)
    }
}

/// Parse one tree per non-blank line.
pub fn parse_corpus(text: &str) -> Result<Vec<PhraseTree>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            parse::parse_ptb(l).map_err(|e| TreebankError::Line {
                line: i + 1,
                source: Box::new(e),
            })
        })
        .collect()
}

pub fn read_corpus(path: &Path) -> Result<Vec<PhraseTree>> {
    parse_corpus(&std::fs::read_to_string(path)?)
}

pub fn coarsen_corpus(trees: &[PhraseTree], target: Granularity) -> Result<Vec<PhraseTree>> {
    trees.iter().map(|t| t.coarsen(target)).collect()
}
