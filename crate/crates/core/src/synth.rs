//! Synthetic labelled treebanks in the SST bracket format.
//!
//! [`SentimentGrammar`] produces sentences whose phrase labels follow fixed
//! composition rules (intensifiers strengthen, negators flip, `but` hands the
//! label to its right conjunct), so that tree structure carries real signal.
//! [`random_tree`] produces arbitrarily bracketed trees with uniform random
//! labels for property tests.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::treebank::{Granularity, PhraseNode, PhraseTree, SentimentLabel};

const VERY_POSITIVE: &[&str] = &["brilliant", "wonderful", "superb", "terrific", "masterful", "delightful"];
const POSITIVE: &[&str] = &[
    "good", "funny", "charming", "clever", "moving", "fresh", "witty", "engaging", "frenetic", "smart",
    "warm", "enjoyable",
];
const NEGATIVE: &[&str] = &[
    "dull", "bland", "silly", "messy", "tedious", "flat", "tired", "clumsy", "predictable", "slow",
];
const VERY_NEGATIVE: &[&str] = &["awful", "terrible", "dreadful", "unwatchable", "painful", "atrocious"];
const NOUNS: &[&str] = &[
    "movie", "film", "story", "plot", "script", "cast", "direction", "ending", "picture", "premise",
    "performance", "dialogue",
];
const DETERMINERS: &[&str] = &["the", "this", "its", "a"];
const INTENSIFIERS: &[&str] = &["really", "very", "truly", "so"];
const NEGATORS: &[&str] = &["not", "n't", "never"];
const COPULAS: &[&str] = &["is", "was", "seems", "feels"];

/// Every word the grammar can emit that carries sentiment on its own.
pub fn opinion_words() -> Vec<&'static str> {
    [VERY_POSITIVE, POSITIVE, NEGATIVE, VERY_NEGATIVE].concat()
}

/// Intermediate tree used while generating.
enum Node {
    Leaf(u8, &'static str),
    Pair(u8, Box<Node>, Box<Node>),
}

impl Node {
    fn label(&self) -> u8 {
        match self {
            Node::Leaf(l, _) | Node::Pair(l, _, _) => *l,
        }
    }

    fn pair(label: u8, a: Node, b: Node) -> Node {
        Node::Pair(label, Box::new(a), Box::new(b))
    }
}

fn word<R: Rng + ?Sized>(rng: &mut R, pool: &[&'static str], label: u8) -> Node {
    Node::Leaf(label, pool.choose(rng).expect("non-empty pool"))
}

fn intensify(l: u8) -> u8 {
    match l {
        3 => 4,
        1 => 0,
        other => other,
    }
}

fn negate(l: u8) -> u8 {
    match l {
        4 | 3 => 1,
        1 | 0 => 3,
        other => other,
    }
}

fn coordinate(a: u8, b: u8) -> u8 {
    match (a.cmp(&2), b.cmp(&2)) {
        (x, y) if x == y => {
            if a > 2 {
                a.max(b)
            } else {
                a.min(b)
            }
        }
        (std::cmp::Ordering::Equal, _) => b,
        (_, std::cmp::Ordering::Equal) => a,
        _ => 2,
    }
}

/// Compositional sentence generator.
#[derive(Clone, Debug)]
pub struct SentimentGrammar {
    pub p_intensify: f64,
    pub p_negate: f64,
    pub p_contrast: f64,
    pub p_coordinate: f64,
    pub p_sentence_contrast: f64,
    pub max_depth: usize,
}

impl Default for SentimentGrammar {
    fn default() -> Self {
        SentimentGrammar {
            p_intensify: 0.25,
            p_negate: 0.3,
            p_contrast: 0.12,
            p_coordinate: 0.08,
            p_sentence_contrast: 0.25,
            max_depth: 3,
        }
    }
}

impl SentimentGrammar {
    fn adjective<R: Rng + ?Sized>(&self, rng: &mut R) -> Node {
        match rng.gen_range(0..10) {
            0 | 1 => word(rng, VERY_POSITIVE, 4),
            2..=4 => word(rng, POSITIVE, 3),
            5..=7 => word(rng, NEGATIVE, 1),
            _ => word(rng, VERY_NEGATIVE, 0),
        }
    }

    fn adjp<R: Rng + ?Sized>(&self, rng: &mut R, depth: usize) -> Node {
        if depth >= self.max_depth {
            return self.adjective(rng);
        }
        let u: f64 = rng.gen();
        let mut t = self.p_intensify;
        if u < t {
            let inner = self.adjp(rng, depth + 1);
            let l = intensify(inner.label());
            return Node::pair(l, word(rng, INTENSIFIERS, 2), inner);
        }
        t += self.p_negate;
        if u < t {
            let inner = self.adjp(rng, depth + 1);
            let l = negate(inner.label());
            return Node::pair(l, word(rng, NEGATORS, 2), inner);
        }
        t += self.p_contrast;
        if u < t {
            let x = self.adjp(rng, depth + 1);
            let y = self.adjp(rng, depth + 1);
            let l = y.label();
            return Node::pair(l, x, Node::pair(l, Node::Leaf(2, "but"), y));
        }
        t += self.p_coordinate;
        if u < t {
            let x = self.adjective(rng);
            let y = self.adjective(rng);
            let l = coordinate(x.label(), y.label());
            let yl = y.label();
            return Node::pair(l, x, Node::pair(yl, Node::Leaf(2, "and"), y));
        }
        self.adjective(rng)
    }

    fn noun_phrase<R: Rng + ?Sized>(&self, rng: &mut R) -> Node {
        let det = word(rng, DETERMINERS, 2);
        let noun = word(rng, NOUNS, 2);
        if rng.gen_bool(0.4) {
            let adj = self.adjective(rng);
            let l = adj.label();
            Node::pair(l, det, Node::pair(l, adj, noun))
        } else {
            Node::pair(2, det, noun)
        }
    }

    fn clause<R: Rng + ?Sized>(&self, rng: &mut R) -> Node {
        let np = self.noun_phrase(rng);
        let ap = self.adjp(rng, 1);
        let vp_label = ap.label();
        let vp = Node::pair(vp_label, word(rng, COPULAS, 2), ap);
        let l = if vp_label != 2 { vp_label } else { np.label() };
        Node::pair(l, np, vp)
    }

    fn sentence_node<R: Rng + ?Sized>(&self, rng: &mut R) -> Node {
        let body = if rng.gen_bool(0.2) {
            self.adjp(rng, 0)
        } else if rng.gen_bool(self.p_sentence_contrast) {
            let x = self.clause(rng);
            let y = self.clause(rng);
            let (lx, ly) = (x.label(), y.label());
            if rng.gen_bool(0.5) {
                Node::pair(ly, x, Node::pair(ly, Node::Leaf(2, "but"), y))
            } else {
                Node::pair(ly, Node::pair(lx, x, Node::Leaf(2, "but")), y)
            }
        } else {
            self.clause(rng)
        };
        let l = body.label();
        Node::pair(l, body, Node::Leaf(2, "."))
    }

    pub fn sentence<R: Rng + ?Sized>(&self, rng: &mut R) -> PhraseTree {
        build(&self.sentence_node(rng))
    }

    /// `n` sentences, distinct by surface text.
    pub fn corpus<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<PhraseTree> {
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0;
        while out.len() < n {
            let t = self.sentence(rng);
            attempts += 1;
            if seen.insert(t.tokens.join(" ")) || attempts > 50 * n {
                out.push(t);
            }
        }
        out
    }
}

fn build(root: &Node) -> PhraseTree {
    fn go(n: &Node, nodes: &mut Vec<PhraseNode>, tokens: &mut Vec<String>) -> usize {
        let id = nodes.len();
        let label = |l: u8| SentimentLabel::new(l, Granularity::Five);
        nodes.push(PhraseNode {
            id,
            span: (0, 0),
            label: label(n.label()),
            left: None,
            right: None,
        });
        match n {
            Node::Leaf(_, w) => {
                tokens.push(w.to_string());
                nodes[id].span = (tokens.len(), tokens.len());
            }
            Node::Pair(_, a, b) => {
                let l = go(a, nodes, tokens);
                let r = go(b, nodes, tokens);
                nodes[id].left = Some(l);
                nodes[id].right = Some(r);
                nodes[id].span = (nodes[l].span.0, nodes[r].span.1);
            }
        }
        id
    }
    let mut nodes = Vec::new();
    let mut tokens = Vec::new();
    go(root, &mut nodes, &mut tokens);
    PhraseTree { nodes, tokens }
}

const FILLER: &[&str] = &[
    "the", "film", "is", "good", "bad", "really", "funny", "dull", "plot", "a", "with", "and", ",", ".",
    "not", "n't", "no", "but", "But", "NOT",
];

/// A uniformly bracketed tree over `n_tokens` words with independent uniform
/// five-class labels. With probability `p_contrast` a split is forced into
/// the `(X (but Y))` shape when the span allows it.
pub fn random_tree<R: Rng + ?Sized>(rng: &mut R, n_tokens: usize, p_contrast: f64) -> PhraseTree {
    assert!(n_tokens > 0);
    fn go<R: Rng + ?Sized>(rng: &mut R, n: usize, p_contrast: f64) -> Node {
        let label = rng.gen_range(0..5u8);
        if n == 1 {
            return Node::Leaf(label, FILLER.choose(rng).unwrap());
        }
        if n >= 3 && rng.gen_bool(p_contrast) {
            let left = rng.gen_range(1..n - 1);
            let x = go(rng, left, p_contrast);
            let y = go(rng, n - left - 1, p_contrast);
            let but = Node::Leaf(rng.gen_range(0..5u8), "but");
            let inner = Node::pair(rng.gen_range(0..5u8), but, y);
            return Node::pair(label, x, inner);
        }
        let left = rng.gen_range(1..n);
        let a = go(rng, left, p_contrast);
        let b = go(rng, n - left, p_contrast);
        Node::pair(label, a, b)
    }
    build(&go(rng, n_tokens, p_contrast))
}
