//! Bottom-up phrase composition over a binary tree.
//!
//! Two attention layers with separate parameters:
//!
//! * **tokens**: a phrase queries the tokens it spans with their mean and
//!   turns the attended summary into an initial vector `v`;
//! * **children**: a phrase queries its two children and itself with `v`
//!   and produces the refined vector `p`.
//!
//! Scores come from a bilinear form squashed into (-1, 1):
//! `tanh(selu((W1 a)ᵀ W3 selu(W2 b)) / alpha)`.

use ndtensor::{Graph, ParamId, ParamStore, Tensor, TensorError, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::TokenAlignment;
use crate::treebank::{NodeId, PhraseTree};

pub const ALPHA: f64 = 4.0;

#[derive(Debug, Error)]
pub enum CompositionError {
    #[error("node {node} spans tokens {span:?} but the alignment covers {tokens} tokens")]
    Alignment { node: NodeId, span: (usize, usize), tokens: usize },

    #[error("{0}")]
    Domain(String),

    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = CompositionError> = std::result::Result<T, E>;

#[derive(Clone, Debug)]
pub struct ScoreParams {
    pub w1: ParamId,
    pub w2: ParamId,
    pub w3: ParamId,
}

#[derive(Clone, Debug)]
pub struct TokenLayer {
    pub score: ScoreParams,
    pub ff_w: ParamId,
    pub ff_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct ChildLayer {
    pub score: ScoreParams,
    pub ff1_w: ParamId,
    pub ff1_b: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub ff2_w: ParamId,
    pub ff2_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct CompositionParams {
    pub tokens: TokenLayer,
    pub children: ChildLayer,
    pub alpha: f64,
    pub dim: usize,
}

fn score_params<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut R) -> ScoreParams {
    ScoreParams {
        w1: store.add_uniform(format!("{prefix}.w1"), &[d, d], d, rng),
        w2: store.add_uniform(format!("{prefix}.w2"), &[d, d], d, rng),
        w3: store.add_uniform(format!("{prefix}.w3"), &[d, d], d, rng),
    }
}

impl CompositionParams {
    pub fn new<R: Rng + ?Sized>(d: usize, store: &mut ParamStore, rng: &mut R) -> Self {
        let tokens = TokenLayer {
            score: score_params(store, "composition.tokens.score", d, rng),
            ff_w: store.add_uniform("composition.tokens.ff.weight", &[2 * d, d], 2 * d, rng),
            ff_b: store.add("composition.tokens.ff.bias", Tensor::zeros(&[d])),
        };
        let children = ChildLayer {
            score: score_params(store, "composition.children.score", d, rng),
            ff1_w: store.add_uniform("composition.children.ff1.weight", &[2 * d, d], 2 * d, rng),
            ff1_b: store.add("composition.children.ff1.bias", Tensor::zeros(&[d])),
            ln_gain: store.add("composition.children.ln.gain", Tensor::filled(&[d], 1.0)),
            ln_bias: store.add("composition.children.ln.bias", Tensor::zeros(&[d])),
            ff2_w: store.add_uniform("composition.children.ff2.weight", &[d, d], d, rng),
            ff2_b: store.add("composition.children.ff2.bias", Tensor::zeros(&[d])),
        };
        CompositionParams {
            tokens,
            children,
            alpha: ALPHA,
            dim: d,
        }
    }
}

fn linear(g: &mut Graph<'_>, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let w = g.param(w);
    let b = g.param(b);
    let y = g.matmul(x, w)?;
    Ok(g.add_bias(y, b)?)
}

fn squash(g: &mut Graph<'_>, raw: Var, alpha: f64) -> Var {
    let s = g.selu(raw);
    let s = g.scale(s, 1.0 / alpha);
    g.tanh(s)
}

/// Score of `b` as seen from `a`, strictly inside (-1, 1).
pub fn attention_score(g: &mut Graph<'_>, a: Var, b: Var, p: &ScoreParams, alpha: f64) -> Result<Var> {
    let (w1, w2, w3) = (g.param(p.w1), g.param(p.w2), g.param(p.w3));
    let u = g.matmul(w1, a)?;
    let s = g.matmul(w2, b)?;
    let s = g.selu(s);
    let w = g.matmul(w3, s)?;
    let raw = g.matmul(u, w)?;
    Ok(squash(g, raw, alpha))
}

/// Rows of `selu(K W2ᵀ) W3ᵀ`: the query-independent half of the score for
/// every key in `keys` (shape `[k, d]`).
fn key_transform(g: &mut Graph<'_>, keys: Var, p: &ScoreParams) -> Result<Var> {
    let (w2, w3) = (g.param(p.w2), g.param(p.w3));
    let w2t = g.transpose(w2)?;
    let w3t = g.transpose(w3)?;
    let s = g.matmul(keys, w2t)?;
    let s = g.selu(s);
    Ok(g.matmul(s, w3t)?)
}

/// Scores of a query against pre-transformed keys, shape `[k]`.
fn scores_against(g: &mut Graph<'_>, query: Var, transformed: Var, p: &ScoreParams, alpha: f64) -> Result<Var> {
    let w1 = g.param(p.w1);
    let u = g.matmul(w1, query)?;
    let raw = g.matmul(transformed, u)?;
    Ok(squash(g, raw, alpha))
}

fn rows_of(g: &Graph<'_>, x: Var, what: &str) -> Result<usize> {
    match g.shape(x) {
        [0, _] => Err(CompositionError::Domain(format!("{what}: empty range"))),
        [k, _] => Ok(*k),
        s => Err(CompositionError::Domain(format!("{what}: expected a [k, d] matrix, got {s:?}"))),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TokenAttention {
    pub q: Var,
    pub weights: Var,
    pub o: Var,
    pub v: Var,
}

/// First layer over the rows of `h_span` (shape `[k, d]`).
pub fn attend_to_tokens(g: &mut Graph<'_>, h_span: Var, p: &TokenLayer, alpha: f64) -> Result<TokenAttention> {
    rows_of(g, h_span, "attend_to_tokens")?;
    let keys = key_transform(g, h_span, &p.score)?;
    tokens_with_keys(g, h_span, keys, p, alpha)
}

fn tokens_with_keys(g: &mut Graph<'_>, h_span: Var, keys: Var, p: &TokenLayer, alpha: f64) -> Result<TokenAttention> {
    let q = g.mean(h_span, 0)?;
    let t = scores_against(g, q, keys, &p.score, alpha)?;
    let weights = g.softmax(t)?;
    let o = g.matmul(weights, h_span)?;
    let joined = g.concat(&[o, q])?;
    let v = linear(g, joined, p.ff_w, p.ff_b)?;
    let v = g.selu(v);
    Ok(TokenAttention { q, weights, o, v })
}

#[derive(Clone, Copy, Debug)]
pub struct ChildAttention {
    /// Softmax over (left, right, self), in that order.
    pub weights: Var,
    pub f: Var,
    pub p: Var,
}

/// Second layer: mix the children and the node itself, then refine.
pub fn attend_to_children(
    g: &mut Graph<'_>,
    v_self: Var,
    v_left: Var,
    v_right: Var,
    p: &ChildLayer,
    alpha: f64,
) -> Result<ChildAttention> {
    let keys = g.stack(&[v_left, v_right, v_self])?;
    let transformed = key_transform(g, keys, &p.score)?;
    let c = scores_against(g, v_self, transformed, &p.score, alpha)?;
    let weights = g.softmax(c)?;
    let f = g.matmul(weights, keys)?;
    let joined = g.concat(&[f, v_self])?;
    let y = linear(g, joined, p.ff1_w, p.ff1_b)?;
    let y = g.selu(y);
    let (gain, bias) = (g.param(p.ln_gain), g.param(p.ln_bias));
    let y = g.layer_norm(y, gain, bias)?;
    let y = linear(g, y, p.ff2_w, p.ff2_b)?;
    let out = g.gelu(y);
    Ok(ChildAttention { weights, f, p: out })
}

/// Attention-weighted mix of a token's subtoken vectors, queried by the
/// parent phrase's `v`. Returns the vector and the weights.
pub fn leaf_representation(
    g: &mut Graph<'_>,
    h_sub: Var,
    query: Var,
    p: &ScoreParams,
    alpha: f64,
) -> Result<(Var, Var)> {
    rows_of(g, h_sub, "leaf_representation")?;
    let keys = key_transform(g, h_sub, p)?;
    leaf_with_keys(g, h_sub, keys, query, p, alpha)
}

fn leaf_with_keys(g: &mut Graph<'_>, h_sub: Var, keys: Var, query: Var, p: &ScoreParams, alpha: f64) -> Result<(Var, Var)> {
    let s = scores_against(g, query, keys, p, alpha)?;
    let w = g.softmax(s)?;
    Ok((g.matmul(w, h_sub)?, w))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChildWeights {
    pub left: f64,
    pub right: f64,
    #[serde(rename = "self")]
    pub own: f64,
}

impl ChildWeights {
    pub fn sum(&self) -> f64 {
        self.left + self.right + self.own
    }
}

#[derive(Clone, Debug)]
pub struct NodeState {
    pub q: Var,
    pub v: Var,
    /// For phrases the composed vector; for a token node, the subtoken
    /// mix its parent attended to.
    pub p: Var,
    pub token_weights: Vec<f64>,
    pub child_weights: Option<ChildWeights>,
    pub subtoken_weights: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct PhraseStates {
    pub nodes: Vec<NodeState>,
    /// Node ids in the order their `p` was produced.
    pub order: Vec<NodeId>,
}

fn subtoken_ranges(tree: &PhraseTree, alignment: &TokenAlignment, rows: usize) -> Result<Vec<(usize, usize)>> {
    let n = alignment.len();
    let mut out = Vec::with_capacity(tree.nodes.len());
    for node in &tree.nodes {
        let mismatch = || CompositionError::Alignment {
            node: node.id,
            span: node.span,
            tokens: n,
        };
        if node.id == PhraseTree::ROOT && node.span != (1, n) {
            return Err(mismatch());
        }
        let range = alignment.span(node.span.0, node.span.1).ok_or_else(mismatch)?;
        if range.1 >= rows {
            return Err(mismatch());
        }
        out.push(range);
    }
    Ok(out)
}

fn values(g: &Graph<'_>, v: Var) -> Vec<f64> {
    g.value(v).data().to_vec()
}

/// Run both layers over a tree. `h` is the encoder output for the whole
/// subtoken sequence; `alignment` maps surface tokens into its rows.
pub fn forward_tree(
    g: &mut Graph<'_>,
    tree: &PhraseTree,
    h: Var,
    alignment: &TokenAlignment,
    params: &CompositionParams,
) -> Result<PhraseStates> {
    let rows = rows_of(g, h, "forward_tree")?;
    let ranges = subtoken_ranges(tree, alignment, rows)?;
    let alpha = params.alpha;
    let keys1 = key_transform(g, h, &params.tokens.score)?;
    let keys2 = key_transform(g, h, &params.children.score)?;
    let slice = |g: &mut Graph<'_>, x: Var, (a, b): (usize, usize)| -> Result<Var> {
        let idx: Vec<usize> = (a..=b).collect();
        Ok(g.rows(x, &idx)?)
    };

    let mut nodes: Vec<NodeState> = Vec::with_capacity(tree.nodes.len());
    for (id, &range) in ranges.iter().enumerate() {
        let h_span = slice(g, h, range)?;
        let k_span = slice(g, keys1, range)?;
        let att = tokens_with_keys(g, h_span, k_span, &params.tokens, alpha)?;
        debug_assert_eq!(id, nodes.len());
        nodes.push(NodeState {
            q: att.q,
            v: att.v,
            p: att.v,
            token_weights: values(g, att.weights),
            child_weights: None,
            subtoken_weights: None,
        });
    }

    let leaf_for = |g: &mut Graph<'_>, nodes: &mut [NodeState], leaf: NodeId, query: Var| -> Result<Var> {
        let h_sub = slice(g, h, ranges[leaf])?;
        let k_sub = slice(g, keys2, ranges[leaf])?;
        let (vec, w) = leaf_with_keys(g, h_sub, k_sub, query, &params.children.score, alpha)?;
        nodes[leaf].p = vec;
        nodes[leaf].subtoken_weights = Some(values(g, w));
        Ok(vec)
    };

    let order = tree.post_order();
    for &id in &order {
        let node = tree.node(id);
        let v_self = nodes[id].v;
        match node.children() {
            None => {
                if id == PhraseTree::ROOT {
                    leaf_for(g, &mut nodes, id, v_self)?;
                }
            }
            Some((l, r)) => {
                let left = if tree.node(l).is_leaf() { leaf_for(g, &mut nodes, l, v_self)? } else { nodes[l].p };
                let right = if tree.node(r).is_leaf() { leaf_for(g, &mut nodes, r, v_self)? } else { nodes[r].p };
                let att = attend_to_children(g, v_self, left, right, &params.children, alpha)?;
                let w = g.value(att.weights).data();
                nodes[id].child_weights = Some(ChildWeights {
                    left: w[0],
                    right: w[1],
                    own: w[2],
                });
                nodes[id].p = att.p;
            }
        }
    }
    Ok(PhraseStates { nodes, order })
}

/// Baseline without composition: every node is the mean of the `h` rows it
/// spans.
pub fn forward_mean_pooling(g: &mut Graph<'_>, tree: &PhraseTree, h: Var, alignment: &TokenAlignment) -> Result<PhraseStates> {
    let rows = rows_of(g, h, "forward_mean_pooling")?;
    let ranges = subtoken_ranges(tree, alignment, rows)?;
    let mut nodes = Vec::with_capacity(ranges.len());
    for &(a, b) in &ranges {
        let idx: Vec<usize> = (a..=b).collect();
        let span = g.rows(h, &idx)?;
        let m = g.mean(span, 0)?;
        nodes.push(NodeState {
            q: m,
            v: m,
            p: m,
            token_weights: vec![1.0 / idx.len() as f64; idx.len()],
            child_weights: None,
            subtoken_weights: None,
        });
    }
    Ok(PhraseStates {
        nodes,
        order: tree.post_order(),
    })
}

/// Which phrase representation feeds the sentiment head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Composer {
    #[default]
    Attention,
    MeanPooling,
}
