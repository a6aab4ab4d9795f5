//! Accuracy metrics and the compositional breakdowns: local and global
//! sentiment-switch difficulty, negation count, contrastive `X but Y`
//! triple-lets, plus attention trace export.
//!
//! Only phrase (non-leaf) nodes with a gold label are scored. Difficulty,
//! negation and triple-let grouping always uses a three-class view of the
//! gold labels; correctness is judged at the corpus's own granularity.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::composition::ChildWeights;
use crate::treebank::{
    count_negations, default_negations, extract_but_triplets, global_bin, global_difficulty, local_difficulty,
    negation_bin, DifficultyOptions, Granularity, NodeId, PhraseTree, SentimentLabel, TreebankError, GLOBAL_BINS,
    LOCAL_BINS, NEGATION_BINS,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("sentence {sentence}: no prediction for phrase node {node}")]
    Coverage { sentence: usize, node: NodeId },

    #[error("{0}")]
    Mismatch(String),

    #[error(transparent)]
    Treebank(#[from] TreebankError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Model output for one tree, indexed by node id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TreePrediction {
    pub labels: Vec<Option<u8>>,
    pub child_weights: Vec<Option<ChildWeights>>,
    pub token_weights: Vec<Vec<f64>>,
}

impl TreePrediction {
    pub fn from_labels(labels: Vec<Option<u8>>) -> Self {
        let n = labels.len();
        TreePrediction {
            labels,
            child_weights: vec![None; n],
            token_weights: vec![Vec::new(); n],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

impl BinStat {
    fn add(&mut self, hit: bool) {
        self.total += 1;
        self.correct += hit as usize;
    }

    fn finish(mut self) -> Self {
        self.accuracy = if self.total == 0 { 0.0 } else { self.correct as f64 / self.total as f64 };
        self
    }
}

/// One scored or traced node of the per-node dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub sentence: usize,
    pub node: NodeId,
    pub span: (usize, usize),
    pub gold: Option<u8>,
    pub predicted: Option<u8>,
    pub r: Option<ChildWeights>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub phrase_accuracy: f64,
    pub phrase_nodes: usize,
    pub root_accuracy: f64,
    pub roots: usize,
    pub accuracy_by_local_difficulty: IndexMap<String, BinStat>,
    pub accuracy_by_global_difficulty_bin: IndexMap<String, BinStat>,
    pub accuracy_by_negation_bin: IndexMap<String, BinStat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contrastive_triplet_accuracy: Option<f64>,
    pub triplets: usize,
    pub nodes: Vec<NodeRecord>,
}

fn check_coverage(predictions: &[TreePrediction], corpus: &[PhraseTree]) -> Result<()> {
    if predictions.len() != corpus.len() {
        return Err(EvalError::Mismatch(format!(
            "{} predictions for {} sentences",
            predictions.len(),
            corpus.len()
        )));
    }
    for (i, (p, t)) in predictions.iter().zip(corpus).enumerate() {
        for n in t.phrases() {
            if p.labels.get(n.id).copied().flatten().is_none() {
                return Err(EvalError::Coverage { sentence: i, node: n.id });
            }
        }
    }
    Ok(())
}

/// Gold labels on the three-class scale used for grouping. Under two
/// classes a missing label is the neutral class.
pub fn three_class_view(tree: &PhraseTree) -> Result<PhraseTree> {
    match tree.granularity() {
        Granularity::Five => Ok(tree.coarsen(Granularity::Three)?),
        Granularity::Three => Ok(tree.clone()),
        Granularity::Two => {
            let mut out = tree.clone();
            for n in &mut out.nodes {
                let v = match n.label.map(SentimentLabel::value) {
                    Some(0) => 0,
                    Some(_) => 2,
                    None => 1,
                };
                n.label = SentimentLabel::new(v, Granularity::Three);
            }
            Ok(out)
        }
    }
}

/// `(node, correct)` for every scored phrase node of one tree.
fn scored(tree: &PhraseTree, pred: &TreePrediction) -> Vec<(NodeId, bool)> {
    tree.phrases()
        .filter_map(|n| n.label.map(|l| (n.id, pred.labels[n.id] == Some(l.value()))))
        .collect()
}

/// Fraction of labelled phrase nodes predicted correctly.
pub fn phrase_accuracy(predictions: &[TreePrediction], corpus: &[PhraseTree]) -> Result<f64> {
    check_coverage(predictions, corpus)?;
    let mut stat = BinStat::default();
    for (p, t) in predictions.iter().zip(corpus) {
        for (_, hit) in scored(t, p) {
            stat.add(hit);
        }
    }
    Ok(stat.finish().accuracy)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DifficultyBreakdown {
    pub local: IndexMap<String, BinStat>,
    pub global: IndexMap<String, BinStat>,
}

fn keyed(keys: &[&str], stats: &[BinStat]) -> IndexMap<String, BinStat> {
    keys.iter()
        .zip(stats)
        .filter(|(_, s)| s.total > 0)
        .map(|(k, s)| (k.to_string(), s.finish()))
        .collect()
}

/// Node accuracy grouped by each node's local difficulty and by the global
/// difficulty bin of its sentence. Empty bins are left out.
pub fn difficulty_breakdown(
    predictions: &[TreePrediction],
    corpus: &[PhraseTree],
    opts: DifficultyOptions,
) -> Result<DifficultyBreakdown> {
    check_coverage(predictions, corpus)?;
    let mut local = [BinStat::default(); 3];
    let mut global = [BinStat::default(); GLOBAL_BINS.len()];
    for (p, t) in predictions.iter().zip(corpus) {
        let view = three_class_view(t)?;
        let bin = global_bin(global_difficulty(&view, opts)?);
        for (id, hit) in scored(t, p) {
            local[local_difficulty(&view, id, opts)? as usize].add(hit);
            global[bin].add(hit);
        }
    }
    Ok(DifficultyBreakdown {
        local: keyed(&LOCAL_BINS, &local),
        global: keyed(&GLOBAL_BINS.map(|b| b.2), &global),
    })
}

fn negation_breakdown(predictions: &[TreePrediction], corpus: &[PhraseTree]) -> IndexMap<String, BinStat> {
    let lexicon = default_negations();
    let mut bins = [BinStat::default(); 3];
    for (p, t) in predictions.iter().zip(corpus) {
        let bin = negation_bin(count_negations(t, &lexicon));
        for (_, hit) in scored(t, p) {
            bins[bin].add(hit);
        }
    }
    keyed(&NEGATION_BINS, &bins)
}

/// Share of `X but Y` triple-lets whose three nodes are all predicted
/// correctly; `None` when the corpus has no triple-lets.
pub fn contrastive_accuracy(predictions: &[TreePrediction], corpus: &[PhraseTree]) -> Result<Option<f64>> {
    Ok(contrastive_counts(predictions, corpus)?.map(|(hit, n)| hit as f64 / n as f64))
}

fn contrastive_counts(predictions: &[TreePrediction], corpus: &[PhraseTree]) -> Result<Option<(usize, usize)>> {
    check_coverage(predictions, corpus)?;
    let (mut hit, mut total) = (0, 0);
    for (p, t) in predictions.iter().zip(corpus) {
        let view = three_class_view(t)?;
        for tr in extract_but_triplets(&view)? {
            let ids = [tr.parent, tr.left, tr.right];
            // Under two classes a neutral member has no gold label to match.
            if ids.iter().any(|&id| t.node(id).label.is_none()) {
                continue;
            }
            total += 1;
            let ok = ids
                .iter()
                .all(|&id| p.labels.get(id).copied().flatten() == t.node(id).label.map(SentimentLabel::value));
            hit += ok as usize;
        }
    }
    Ok((total > 0).then_some((hit, total)))
}

/// The full report for one prediction set.
pub fn evaluate(predictions: &[TreePrediction], corpus: &[PhraseTree], opts: DifficultyOptions) -> Result<EvalReport> {
    check_coverage(predictions, corpus)?;
    let mut phrases = BinStat::default();
    let mut roots = BinStat::default();
    let mut nodes = Vec::new();
    for (i, (p, t)) in predictions.iter().zip(corpus).enumerate() {
        for (_, hit) in scored(t, p) {
            phrases.add(hit);
        }
        if let Some(l) = t.root().label {
            roots.add(p.labels[0] == Some(l.value()));
        }
        for n in &t.nodes {
            nodes.push(NodeRecord {
                sentence: i,
                node: n.id,
                span: n.span,
                gold: n.label.map(SentimentLabel::value),
                predicted: p.labels.get(n.id).copied().flatten(),
                r: p.child_weights.get(n.id).copied().flatten(),
            });
        }
    }
    let difficulty = difficulty_breakdown(predictions, corpus, opts)?;
    let contrast = contrastive_counts(predictions, corpus)?;
    let (phrases, roots) = (phrases.finish(), roots.finish());
    Ok(EvalReport {
        phrase_accuracy: phrases.accuracy,
        phrase_nodes: phrases.total,
        root_accuracy: roots.accuracy,
        roots: roots.total,
        accuracy_by_local_difficulty: difficulty.local,
        accuracy_by_global_difficulty_bin: difficulty.global,
        accuracy_by_negation_bin: negation_breakdown(predictions, corpus),
        contrastive_triplet_accuracy: contrast.map(|(h, n)| h as f64 / n as f64),
        triplets: contrast.map_or(0, |(_, n)| n),
        nodes,
    })
}

/// Per-bin accuracy differences `a - b` for bins present in both reports.
pub fn compare_reports(a: &EvalReport, b: &EvalReport) -> IndexMap<String, f64> {
    let mut out = IndexMap::new();
    out.insert("phrase_accuracy".to_string(), a.phrase_accuracy - b.phrase_accuracy);
    out.insert("root_accuracy".to_string(), a.root_accuracy - b.root_accuracy);
    let groups = [
        ("local", &a.accuracy_by_local_difficulty, &b.accuracy_by_local_difficulty),
        ("global", &a.accuracy_by_global_difficulty_bin, &b.accuracy_by_global_difficulty_bin),
        ("negation", &a.accuracy_by_negation_bin, &b.accuracy_by_negation_bin),
    ];
    for (name, x, y) in groups {
        for (k, s) in x {
            if let Some(t) = y.get(k) {
                out.insert(format!("{name}.{k}"), s.accuracy - t.accuracy);
            }
        }
    }
    if let (Some(x), Some(y)) = (a.contrastive_triplet_accuracy, b.contrastive_triplet_accuracy) {
        out.insert("contrastive".to_string(), x - y);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceNode {
    pub id: NodeId,
    pub span: (usize, usize),
    pub text: String,
    pub children: Option<(NodeId, NodeId)>,
    pub gold: Option<u8>,
    pub predicted: Option<u8>,
    pub token_weights: Vec<f64>,
    pub r: Option<ChildWeights>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub sentence: usize,
    pub granularity: Granularity,
    pub tokens: Vec<String>,
    pub nodes: Vec<TraceNode>,
}

pub fn build_trace(sentence: usize, tree: &PhraseTree, pred: &TreePrediction) -> Trace {
    Trace {
        sentence,
        granularity: tree.granularity(),
        tokens: tree.tokens.clone(),
        nodes: tree
            .nodes
            .iter()
            .map(|n| TraceNode {
                id: n.id,
                span: n.span,
                text: tree.text(n.id),
                children: n.children(),
                gold: n.label.map(SentimentLabel::value),
                predicted: pred.labels.get(n.id).copied().flatten(),
                token_weights: pred.token_weights.get(n.id).cloned().unwrap_or_default(),
                r: pred.child_weights.get(n.id).copied().flatten(),
            })
            .collect(),
    }
}

/// -1, 0 or 1 for a label on the given scale.
pub fn polarity(label: u8, granularity: Granularity) -> i8 {
    match granularity {
        Granularity::Five => (label as i8 - 2).signum(),
        Granularity::Three => label as i8 - 1,
        Granularity::Two => 2 * label as i8 - 1,
    }
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Graphviz rendering: nodes colored by predicted polarity, each parent
/// labelled with its (left, self, right) weights, each edge with the weight
/// its child received.
pub fn trace_to_dot(trace: &Trace) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "digraph sentence_{} {{", trace.sentence);
    let _ = writeln!(out, "  node [shape=box, style=\"rounded,filled\", fontname=\"Helvetica\"];");
    for n in &trace.nodes {
        let color = match n.predicted.map(|l| polarity(l, trace.granularity)) {
            Some(-1) => "#f4a6a6",
            Some(1) => "#a6cdf4",
            Some(_) => "#e0e0e0",
            None => "#ffffff",
        };
        let mut label = dot_escape(&n.text);
        if let Some(p) = n.predicted {
            let _ = write!(label, "\\npred {p}");
        }
        if let Some(r) = n.r {
            let _ = write!(label, "\\nr=({:.3}, {:.3}, {:.3})", r.left, r.own, r.right);
        }
        let _ = writeln!(out, "  n{} [label=\"{}\", fillcolor=\"{}\"];", n.id, label, color);
    }
    for n in &trace.nodes {
        if let Some((l, r)) = n.children {
            let (wl, wr) = n.r.map_or((None, None), |w| (Some(w.left), Some(w.right)));
            for (child, w) in [(l, wl), (r, wr)] {
                match w {
                    Some(w) => {
                        let _ = writeln!(out, "  n{} -> n{} [label=\"{:.3}\"];", n.id, child, w);
                    }
                    None => {
                        let _ = writeln!(out, "  n{} -> n{};", n.id, child);
                    }
                }
            }
        }
    }
    out.push_str("}\n");
    out
}

/// Write `<stem>.json` and `<stem>.dot` into `dir`.
pub fn export_traces(
    sentence: usize,
    tree: &PhraseTree,
    pred: &TreePrediction,
    dir: &Path,
    stem: &str,
) -> Result<(PathBuf, PathBuf)> {
    let trace = build_trace(sentence, tree, pred);
    let json = dir.join(format!("{stem}.json"));
    let dot = dir.join(format!("{stem}.dot"));
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| EvalError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    fs::write(&json, serde_json::to_string_pretty(&trace)? + "\n").map_err(io(&json))?;
    fs::write(&dot, trace_to_dot(&trace)).map_err(io(&dot))?;
    Ok((json, dot))
}
