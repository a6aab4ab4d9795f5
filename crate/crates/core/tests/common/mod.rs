//! Plain-`f64` re-implementations used as oracles. Nothing here touches the
//! tensor library; parameters are read from the store by name.

#![allow(dead_code)]

use ndtensor::ParamStore;
use std::collections::HashSet;

use senticomp::treebank::PhraseTree;

pub const SELU_L: f64 = 1.0507009873554804934193349852946;
pub const SELU_A: f64 = 1.6732632423543772848170429916717;

pub fn selu(x: f64) -> f64 {
    if x > 0.0 {
        SELU_L * x
    } else {
        SELU_L * SELU_A * (x.exp() - 1.0)
    }
}

/// erf by its Maclaurin series near zero and a continued fraction for the
/// complement further out.
pub fn erf(x: f64) -> f64 {
    if x < 0.0 {
        return -erf(-x);
    }
    if x < 2.5 {
        let mut term = x;
        let mut sum = x;
        for n in 1..200 {
            term *= -x * x / n as f64;
            let add = term / (2 * n + 1) as f64;
            sum += add;
            if add.abs() < 1e-18 {
                break;
            }
        }
        return sum * 2.0 / std::f64::consts::PI.sqrt();
    }
    // erfc(x) = exp(-x²)/√π · 1/(x + 1/2/(x + 1/(x + 3/2/(x + ...))))
    let mut f = x;
    for k in (1..120).rev() {
        f = x + (k as f64 / 2.0) / f;
    }
    1.0 - (-x * x).exp() / std::f64::consts::PI.sqrt() / f
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let sd = (var + 1e-5).sqrt();
    x.iter().enumerate().map(|(i, v)| gain[i] * (v - mu) / sd + bias[i]).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `W a` for a row-major `W` with `a.len()` columns.
pub fn mat_vec(w: &[f64], a: &[f64]) -> Vec<f64> {
    w.chunks(a.len()).map(|row| dot(row, a)).collect()
}

/// `x W + b` for a row-major `W` of shape `[x.len(), b.len()]`.
pub fn affine(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let cols = b.len();
    let mut out = b.to_vec();
    for (i, xi) in x.iter().enumerate() {
        for k in 0..cols {
            out[k] += xi * w[i * cols + k];
        }
    }
    out
}

pub fn cat(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().chain(b).copied().collect()
}

pub fn mix(weights: &[f64], rows: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; rows[0].len()];
    for (w, r) in weights.iter().zip(rows) {
        for (o, x) in out.iter_mut().zip(r) {
            *o += w * x;
        }
    }
    out
}

pub struct Score {
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
    pub w3: Vec<f64>,
}

impl Score {
    pub fn score(&self, a: &[f64], b: &[f64]) -> f64 {
        let u = mat_vec(&self.w1, a);
        let s: Vec<f64> = mat_vec(&self.w2, b).into_iter().map(selu).collect();
        let w = mat_vec(&self.w3, &s);
        (selu(dot(&u, &w)) / 4.0).tanh()
    }

    pub fn attend(&self, query: &[f64], keys: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
        let t: Vec<f64> = keys.iter().map(|k| self.score(query, k)).collect();
        let a = softmax(&t);
        (mix(&a, keys), a)
    }
}

fn param(store: &ParamStore, name: &str) -> Vec<f64> {
    let id = store.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
    store.get(id).data().to_vec()
}

pub struct Oracle {
    pub tok_score: Score,
    pub tok_w: Vec<f64>,
    pub tok_b: Vec<f64>,
    pub child_score: Score,
    pub ff1_w: Vec<f64>,
    pub ff1_b: Vec<f64>,
    pub ln_g: Vec<f64>,
    pub ln_b: Vec<f64>,
    pub ff2_w: Vec<f64>,
    pub ff2_b: Vec<f64>,
}

pub struct TokenOut {
    pub q: Vec<f64>,
    pub a: Vec<f64>,
    pub o: Vec<f64>,
    pub v: Vec<f64>,
}

pub struct ChildOut {
    pub r: [f64; 3],
    pub f: Vec<f64>,
    pub p: Vec<f64>,
}

impl Oracle {
    pub fn from_store(store: &ParamStore) -> Self {
        let score = |prefix: &str| Score {
            w1: param(store, &format!("{prefix}.w1")),
            w2: param(store, &format!("{prefix}.w2")),
            w3: param(store, &format!("{prefix}.w3")),
        };
        Oracle {
            tok_score: score("composition.tokens.score"),
            tok_w: param(store, "composition.tokens.ff.weight"),
            tok_b: param(store, "composition.tokens.ff.bias"),
            child_score: score("composition.children.score"),
            ff1_w: param(store, "composition.children.ff1.weight"),
            ff1_b: param(store, "composition.children.ff1.bias"),
            ln_g: param(store, "composition.children.ln.gain"),
            ln_b: param(store, "composition.children.ln.bias"),
            ff2_w: param(store, "composition.children.ff2.weight"),
            ff2_b: param(store, "composition.children.ff2.bias"),
        }
    }

    pub fn tokens(&self, h: &[Vec<f64>]) -> TokenOut {
        let d = h[0].len();
        let mut q = vec![0.0; d];
        for row in h {
            for (qi, x) in q.iter_mut().zip(row) {
                *qi += x / h.len() as f64;
            }
        }
        let (o, a) = self.tok_score.attend(&q, h);
        let v = affine(&cat(&o, &q), &self.tok_w, &self.tok_b).into_iter().map(selu).collect();
        TokenOut { q, a, o, v }
    }

    pub fn children(&self, v_self: &[f64], left: &[f64], right: &[f64]) -> ChildOut {
        let keys = [left.to_vec(), right.to_vec(), v_self.to_vec()];
        let (f, r) = self.child_score.attend(v_self, &keys);
        let y: Vec<f64> = affine(&cat(&f, v_self), &self.ff1_w, &self.ff1_b).into_iter().map(selu).collect();
        let y = layer_norm(&y, &self.ln_g, &self.ln_b);
        let p = affine(&y, &self.ff2_w, &self.ff2_b).into_iter().map(gelu).collect();
        ChildOut {
            r: [r[0], r[1], r[2]],
            f,
            p,
        }
    }

    pub fn leaf(&self, h_sub: &[Vec<f64>], query: &[f64]) -> Vec<f64> {
        self.child_score.attend(query, h_sub).0
    }

    /// `p` of every node by plain recursion from the root. `ranges[i]` is
    /// the inclusive row range of surface token `i`.
    pub fn tree(&self, tree: &PhraseTree, h: &[Vec<f64>], ranges: &[(usize, usize)]) -> Vec<Vec<f64>> {
        let mut p = vec![Vec::new(); tree.nodes.len()];
        let rows_of = |id: usize| -> Vec<Vec<f64>> {
            let (st, en) = tree.node(id).span;
            h[ranges[st - 1].0..=ranges[en - 1].1].to_vec()
        };
        fn go(o: &Oracle, tree: &PhraseTree, id: usize, rows_of: &dyn Fn(usize) -> Vec<Vec<f64>>, p: &mut Vec<Vec<f64>>) {
            let v = o.tokens(&rows_of(id)).v;
            match tree.node(id).children() {
                None => p[id] = o.leaf(&rows_of(id), &v),
                Some((l, r)) => {
                    let child = |c: usize, p: &mut Vec<Vec<f64>>| -> Vec<f64> {
                        if tree.node(c).is_leaf() {
                            p[c] = o.leaf(&rows_of(c), &v);
                        } else {
                            go(o, tree, c, rows_of, p);
                        }
                        p[c].clone()
                    };
                    let lv = child(l, p);
                    let rv = child(r, p);
                    p[id] = o.children(&v, &lv, &rv).p;
                }
            }
        }
        go(self, tree, PhraseTree::ROOT, &rows_of, &mut p);
        p
    }
}

/// Minimal reader for `(label child child)` / `(label word)` trees that
/// returns, for every node in pre-order, its label and 1-based token span.
pub fn reference_spans(text: &str) -> Vec<(u8, (usize, usize))> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut pos = 0;
    let mut next_token = 1;
    fn skip(chars: &[char], pos: &mut usize) {
        while *pos < chars.len() && chars[*pos].is_whitespace() {
            *pos += 1;
        }
    }
    fn node(chars: &[char], pos: &mut usize, next: &mut usize, out: &mut Vec<(u8, (usize, usize))>) {
        skip(chars, pos);
        assert_eq!(chars[*pos], '(');
        *pos += 1;
        let label = chars[*pos].to_digit(10).unwrap() as u8;
        *pos += 1;
        let slot = out.len();
        out.push((label, (0, 0)));
        let start = *next;
        loop {
            skip(chars, pos);
            match chars[*pos] {
                ')' => {
                    *pos += 1;
                    break;
                }
                '(' => node(chars, pos, next, out),
                _ => {
                    while !chars[*pos].is_whitespace() && chars[*pos] != ')' {
                        *pos += 1;
                    }
                    *next += 1;
                }
            }
        }
        out[slot].1 = (start, *next - 1);
    }
    node(&chars, &mut pos, &mut next_token, &mut out);
    out
}

/// Brute-force three-class helpers over a tree given as parent/child label
/// lists, independent of the library's metric code.
pub fn brute_local(tree: &PhraseTree, id: usize, phrase_edges_only: bool) -> usize {
    let n = &tree.nodes[id];
    let mut count = 0;
    for c in [n.left, n.right].into_iter().flatten() {
        let child = &tree.nodes[c];
        let leaf = child.left.is_none();
        if phrase_edges_only && leaf {
            continue;
        }
        if child.label.map(|l| l.value()) != n.label.map(|l| l.value()) {
            count += 1;
        }
    }
    count
}

/// `(parent, x, y)` for every `but` leaf whose parent and grandparent form
/// `(X (but Y))` or `((X but) Y)` with differing X and Y labels.
pub fn brute_triplets(tree: &PhraseTree) -> HashSet<(usize, usize, usize)> {
    let parents = tree.parents();
    let mut out = HashSet::new();
    for b in tree.leaves() {
        if tree.tokens[b.span.0 - 1].to_lowercase() != "but" {
            continue;
        }
        let Some(q) = parents[b.id] else { continue };
        let Some(p) = parents[q] else { continue };
        let (ql, qr) = tree.node(q).children().unwrap();
        let (pl, pr) = tree.node(p).children().unwrap();
        let pair = if ql == b.id && pr == q {
            Some((pl, qr))
        } else if qr == b.id && pl == q {
            Some((ql, pr))
        } else {
            None
        };
        if let Some((x, y)) = pair {
            if tree.node(x).label != tree.node(y).label {
                out.insert((p, x, y));
            }
        }
    }
    out
}

