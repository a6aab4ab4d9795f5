//! Losses, the model bundle, and the training loop.

use ndtensor::{Gradients, Graph, ParamId, ParamStore, Tensor, TensorError, Var};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::composition::{self, ChildWeights, Composer, CompositionError, CompositionParams, PhraseStates};
use crate::encoder::{apply_masking, Encoded, Encoder, EncoderConfig, EncoderError, MaskedInput, MaskingPolicy, Vocabulary};
use crate::evalsuite::TreePrediction;
use crate::treebank::{subsample_phrase_labels, Granularity, PhraseTree, SupervisionMask, TreebankError};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss at epoch {epoch}, step {step}; first non-finite gradient: {param}")]
    NonFinite { epoch: usize, step: usize, param: String },

    #[error(transparent)]
    Encoder(#[from] EncoderError),

    #[error(transparent)]
    Composition(#[from] CompositionError),

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Treebank(#[from] TreebankError),
}

pub type Result<T, E = ObjectiveError> = std::result::Result<T, E>;

/// Linear map from phrase vectors to class logits.
#[derive(Clone, Debug)]
pub struct SentimentHead {
    pub weight: ParamId,
    pub bias: ParamId,
    pub classes: usize,
}

impl SentimentHead {
    pub fn new<R: Rng + ?Sized>(d: usize, classes: usize, store: &mut ParamStore, rng: &mut R) -> Self {
        SentimentHead {
            weight: store.add_uniform("head.weight", &[d, classes], d, rng),
            bias: store.add("head.bias", Tensor::zeros(&[classes])),
            classes,
        }
    }

    /// Logits for a vector `[d]` or a stack of vectors `[m, d]`.
    pub fn logits(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        Ok(g.add_bias(y, b)?)
    }

    /// Arg-max class for a plain vector, outside any graph.
    pub fn classify(&self, store: &ParamStore, x: &[f64]) -> usize {
        let w = store.get(self.weight);
        let b = store.get(self.bias).data();
        let c = self.classes;
        let mut logits = b.to_vec();
        for (i, xi) in x.iter().enumerate() {
            for (k, l) in logits.iter_mut().enumerate() {
                *l += xi * w.data()[i * c + k];
            }
        }
        argmax(&logits)
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn gather_loss(g: &mut Graph<'_>, states: &PhraseStates, head: &SentimentHead, picked: &[(usize, usize)]) -> Result<Var> {
    if picked.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let rows: Vec<Var> = picked.iter().map(|&(id, _)| states.nodes[id].p).collect();
    let targets: Vec<usize> = picked.iter().map(|&(_, c)| c).collect();
    let x = g.stack(&rows)?;
    let logits = head.logits(g, x)?;
    Ok(g.cross_entropy(logits, &targets)?)
}

/// Mean cross-entropy over the supervised, labelled phrase nodes; a
/// constant zero when there are none.
pub fn phrase_loss(
    g: &mut Graph<'_>,
    states: &PhraseStates,
    tree: &PhraseTree,
    head: &SentimentHead,
    mask: &SupervisionMask,
) -> Result<Var> {
    let picked: Vec<(usize, usize)> = tree
        .phrases()
        .filter(|n| mask.is_supervised(n.id))
        .filter_map(|n| n.label.map(|l| (n.id, l.class())))
        .collect();
    gather_loss(g, states, head, &picked)
}

/// Mean cross-entropy over labelled token nodes.
pub fn token_node_loss(g: &mut Graph<'_>, states: &PhraseStates, tree: &PhraseTree, head: &SentimentHead) -> Result<Var> {
    let picked: Vec<(usize, usize)> = tree.leaves().filter_map(|n| n.label.map(|l| (n.id, l.class()))).collect();
    if picked.is_empty() {
        return Err(ObjectiveError::Config(
            "token-node objective enabled but the tree has no token labels".into(),
        ));
    }
    gather_loss(g, states, head, &picked)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub granularity: Granularity,
    #[serde(default)]
    pub composer: Composer,
}

/// Encoder, composition and head parameters in one store.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub composition: Option<CompositionParams>,
    pub head: SentimentHead,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(config.encoder.clone(), &mut store, &mut rng)?;
        let d = config.encoder.model_dim;
        let composition = match config.composer {
            Composer::Attention => Some(CompositionParams::new(d, &mut store, &mut rng)),
            Composer::MeanPooling => None,
        };
        let head = SentimentHead::new(d, config.granularity.num_classes(), &mut store, &mut rng);
        Ok(Model {
            config,
            store,
            encoder,
            composition,
            head,
        })
    }

    /// The same network with a freshly initialised head for another label
    /// scale; every other parameter is copied.
    pub fn rehead(&self, granularity: Granularity, seed: u64) -> Result<Self> {
        let config = ModelConfig {
            granularity,
            ..self.config.clone()
        };
        let mut out = Model::new(config, seed)?;
        let ids: Vec<ParamId> = out.store.ids().collect();
        for id in ids {
            if id == out.head.weight || id == out.head.bias {
                continue;
            }
            let name = out.store.name(id).to_string();
            if let Some(src) = self.store.id(&name) {
                *out.store.get_mut(id) = self.store.get(src).clone();
            }
        }
        Ok(out)
    }

    /// Encoder output and phrase states for one sentence.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        tree: &PhraseTree,
        ids: &[usize],
        encoded: &Encoded,
        dropout: Option<&mut dyn RngCore>,
    ) -> Result<(Var, PhraseStates)> {
        let h = self.encoder.encode(g, ids, dropout)?;
        let states = match &self.composition {
            Some(p) => composition::forward_tree(g, tree, h, &encoded.alignment, p)?,
            None => composition::forward_mean_pooling(g, tree, h, &encoded.alignment)?,
        };
        Ok((h, states))
    }

    /// Predicted class, attention record and trace for every node.
    pub fn predict(&self, example: &Example) -> Result<TreePrediction> {
        let mut g = Graph::with_params(&self.store);
        let (_, states) = self.forward(&mut g, &example.tree, &example.encoded.ids, &example.encoded, None)?;
        let mut labels = Vec::with_capacity(states.nodes.len());
        let mut child_weights: Vec<Option<ChildWeights>> = Vec::with_capacity(states.nodes.len());
        let mut token_weights = Vec::with_capacity(states.nodes.len());
        for n in &states.nodes {
            labels.push(Some(self.head.classify(&self.store, g.value(n.p).data()) as u8));
            child_weights.push(n.child_weights);
            token_weights.push(n.token_weights.clone());
        }
        Ok(TreePrediction {
            labels,
            child_weights,
            token_weights,
        })
    }

    pub fn predict_all(&self, examples: &[Example]) -> Result<Vec<TreePrediction>> {
        examples.par_iter().map(|e| self.predict(e)).collect()
    }
}

/// A tokenized training sentence.
#[derive(Clone, Debug)]
pub struct Example {
    pub tree: PhraseTree,
    pub encoded: Encoded,
}

impl Example {
    pub fn new(tree: PhraseTree, vocab: &Vocabulary) -> Result<Self> {
        let encoded = vocab.tokenize(&tree.tokens)?;
        Ok(Example { tree, encoded })
    }

    pub fn prepare(trees: &[PhraseTree], vocab: &Vocabulary) -> Result<Vec<Self>> {
        trees.iter().map(|t| Example::new(t.clone(), vocab)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub mlm_weight: f64,
    pub phrase_weight: f64,
    pub token_node_objective: bool,
    pub label_fraction: f64,
    pub warmup_fraction: f64,
    pub clip_norm: f64,
    /// Keep the MLM term during sentence-level fine-tuning.
    pub finetune_mlm: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 3,
            seed: 0,
            mlm_weight: 1.0,
            phrase_weight: 1.0,
            token_node_objective: false,
            label_fraction: 1.0,
            warmup_fraction: 0.1,
            clip_norm: 1.0,
            finetune_mlm: false,
        }
    }
}

impl TrainConfig {
    /// The original large-scale learning rate and batch size.
    pub fn large_scale_preset() -> Self {
        TrainConfig {
            learning_rate: 2e-5,
            batch_size: 32,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ObjectiveError::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(self.mlm_weight >= 0.0 && self.phrase_weight >= 0.0) {
            return fail("loss weights must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.label_fraction) {
            return fail(format!("label_fraction {} outside [0, 1]", self.label_fraction));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return fail(format!("warmup_fraction {} outside [0, 1]", self.warmup_fraction));
        }
        if !(self.clip_norm > 0.0) {
            return fail(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        Ok(())
    }
}

/// One element of a batch: a sentence, its corrupted input and the phrase
/// nodes whose labels are used.
#[derive(Clone, Debug)]
pub struct BatchItem<'a> {
    pub example: &'a Example,
    pub masked: MaskedInput,
    pub mask: SupervisionMask,
}

/// Loss terms as graph values for one sentence.
#[derive(Clone, Debug)]
pub struct SentenceObjective {
    pub total: Var,
    pub mlm: Var,
    pub phrase: Var,
    pub token: Option<Var>,
    pub states: PhraseStates,
}

/// `mlm_weight * mlm + phrase_weight * phrase (+ token)` for one sentence.
/// Composition reads the corrupted ids through the original spans.
pub fn sentence_objective(
    g: &mut Graph<'_>,
    model: &Model,
    item: &BatchItem<'_>,
    cfg: &TrainConfig,
    dropout: Option<&mut dyn RngCore>,
) -> Result<SentenceObjective> {
    let ex = item.example;
    let (h, states) = model.forward(g, &ex.tree, &item.masked.ids, &ex.encoded, dropout)?;
    let mlm = model.encoder.mlm_loss(g, h, &item.masked.targets)?;
    let phrase = phrase_loss(g, &states, &ex.tree, &model.head, &item.mask)?;
    let token = if cfg.token_node_objective {
        Some(token_node_loss(g, &states, &ex.tree, &model.head)?)
    } else {
        None
    };
    let a = g.scale(mlm, cfg.mlm_weight);
    let b = g.scale(phrase, cfg.phrase_weight);
    let mut total = g.add(a, b)?;
    if let Some(t) = token {
        total = g.add(total, t)?;
    }
    Ok(SentenceObjective {
        total,
        mlm,
        phrase,
        token,
        states,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub mlm: f64,
    pub phrase: f64,
    pub token: f64,
}

/// Batch mean of each loss term, without dropout.
pub fn total_loss(model: &Model, batch: &[BatchItem<'_>], cfg: &TrainConfig) -> Result<LossBreakdown> {
    let mut out = LossBreakdown::default();
    for item in batch {
        let mut g = Graph::with_params(&model.store);
        let s = sentence_objective(&mut g, model, item, cfg, None)?;
        out.total += g.item(s.total);
        out.mlm += g.item(s.mlm);
        out.phrase += g.item(s.phrase);
        out.token += s.token.map_or(0.0, |t| g.item(t));
    }
    let n = batch.len().max(1) as f64;
    out.total /= n;
    out.mlm /= n;
    out.phrase /= n;
    out.token /= n;
    Ok(out)
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let g = grads.get(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let w = store.get_mut(id).data_mut();
            for j in 0..w.len() {
                let gj = g.map_or(0.0, |g| g[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let update = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                w[j] -= update;
            }
        }
    }
}

/// Learning-rate multiplier: linear ramp over the first `warmup` steps.
pub fn warmup_scale(step: usize, warmup: usize) -> f64 {
    if step < warmup {
        (step + 1) as f64 / warmup as f64
    } else {
        1.0
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mlm_loss: f64,
    pub phrase_loss: f64,
    pub phrase_acc: f64,
    pub root_acc: f64,
}

struct SentenceResult {
    grads: Gradients,
    loss: f64,
    mlm: f64,
    phrase: f64,
    correct: usize,
    labelled: usize,
    root_correct: Option<bool>,
}

fn sentence_step(model: &Model, item: &BatchItem<'_>, cfg: &TrainConfig, seed: u64) -> Result<SentenceResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::with_params(&model.store);
    let s = sentence_objective(&mut g, model, item, cfg, Some(&mut rng))?;
    let tree = &item.example.tree;
    let mut correct = 0;
    let mut labelled = 0;
    let mut root_correct = None;
    for n in tree.phrases() {
        if let Some(l) = n.label {
            let hit = model.head.classify(&model.store, g.value(s.states.nodes[n.id].p).data()) == l.class();
            labelled += 1;
            correct += hit as usize;
        }
    }
    if let Some(l) = tree.root().label {
        root_correct = Some(model.head.classify(&model.store, g.value(s.states.nodes[0].p).data()) == l.class());
    }
    let loss = g.item(s.total);
    let mlm = g.item(s.mlm);
    let phrase = g.item(s.phrase);
    let grads = g.backward(s.total)?;
    Ok(SentenceResult {
        grads,
        loss,
        mlm,
        phrase,
        correct,
        labelled,
        root_correct,
    })
}

fn check_corpus(model: &Model, corpus: &[Example], cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    for (i, ex) in corpus.iter().enumerate() {
        let found = ex.tree.nodes.iter().find_map(|n| n.label).map(|l| l.granularity());
        if let Some(gr) = found {
            if gr != model.config.granularity {
                return Err(ObjectiveError::Config(format!(
                    "sentence {i} carries {gr:?} labels but the model predicts {:?}",
                    model.config.granularity
                )));
            }
        }
    }
    if cfg.token_node_objective && !corpus.iter().any(|e| e.tree.leaves().any(|n| n.label.is_some())) {
        return Err(ObjectiveError::Config(
            "token_node_objective is enabled but the corpus has no token labels".into(),
        ));
    }
    Ok(())
}

/// Optimise `model` in place on `corpus` with the given phrase supervision
/// (one mask per sentence). Calls `on_epoch` after every epoch.
pub fn train_with_masks(
    model: &mut Model,
    corpus: &[Example],
    masks: &[SupervisionMask],
    cfg: &TrainConfig,
    policy: &MaskingPolicy,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    check_corpus(model, corpus, cfg)?;
    policy.validate()?;
    assert_eq!(masks.len(), corpus.len(), "one supervision mask per sentence");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&model.store);
    let batches_per_epoch = corpus.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let warmup = (cfg.warmup_fraction * total_steps as f64).ceil() as usize;
    let vocab_size = model.config.encoder.vocab_size;
    let mlm_on = cfg.mlm_weight > 0.0;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let (mut mlm_sum, mut phrase_sum) = (0.0, 0.0);
        let (mut correct, mut labelled, mut roots_hit, mut roots) = (0, 0, 0, 0);

        for chunk in order.chunks(cfg.batch_size) {
            let items: Vec<(BatchItem<'_>, u64)> = chunk
                .iter()
                .map(|&i| {
                    let ex = &corpus[i];
                    let masked = if mlm_on {
                        apply_masking(&ex.encoded.ids, &ex.encoded.alignment, &ex.tree.tokens, vocab_size, policy, &mut rng)
                    } else {
                        MaskedInput {
                            ids: ex.encoded.ids.clone(),
                            targets: Vec::new(),
                            selected: Vec::new(),
                        }
                    };
                    let item = BatchItem {
                        example: ex,
                        masked,
                        mask: masks[i].clone(),
                    };
                    (item, rng.gen())
                })
                .collect();
            let shared: &Model = model;
            let results: Vec<SentenceResult> = items
                .par_iter()
                .map(|(item, seed)| sentence_step(shared, item, cfg, *seed))
                .collect::<Result<_>>()?;

            let mut grads = Gradients::for_store(&model.store);
            let scale = 1.0 / results.len() as f64;
            let mut loss = 0.0;
            for r in &results {
                grads.add_scaled(&r.grads, scale);
                loss += r.loss * scale;
                mlm_sum += r.mlm;
                phrase_sum += r.phrase;
                correct += r.correct;
                labelled += r.labelled;
                if let Some(hit) = r.root_correct {
                    roots += 1;
                    roots_hit += hit as usize;
                }
            }
            if !loss.is_finite() || grads.first_non_finite().is_some() {
                let param = grads
                    .first_non_finite()
                    .map_or_else(|| "none (loss itself)".to_string(), |id| model.store.name(id).to_string());
                return Err(ObjectiveError::NonFinite { epoch, step, param });
            }
            let norm = grads.global_norm();
            if norm > cfg.clip_norm {
                grads.scale(cfg.clip_norm / norm);
            }
            adam.step(&mut model.store, &grads, cfg.learning_rate * warmup_scale(step, warmup));
            step += 1;
        }

        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let n = corpus.len().max(1) as f64;
        let record = EpochRecord {
            epoch,
            mlm_loss: mlm_sum / n,
            phrase_loss: phrase_sum / n,
            phrase_acc: ratio(correct, labelled),
            root_acc: ratio(roots_hit, roots),
        };
        on_epoch(&record);
        log.push(record);
    }
    Ok(log)
}

/// Joint MLM and phrase training, keeping a `label_fraction` share of the
/// corpus's phrase labels.
pub fn train(
    model: &mut Model,
    corpus: &[Example],
    cfg: &TrainConfig,
    policy: &MaskingPolicy,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    let masks = label_masks(corpus, cfg.label_fraction, cfg.seed)?;
    train_with_masks(model, corpus, &masks, cfg, policy, on_epoch)
}

/// The phrase nodes kept by a label-fraction setting.
pub fn label_masks(corpus: &[Example], fraction: f64, seed: u64) -> Result<Vec<SupervisionMask>> {
    let trees: Vec<PhraseTree> = corpus.iter().map(|e| e.tree.clone()).collect();
    if fraction >= 1.0 {
        return Ok(trees.iter().map(SupervisionMask::all_phrases).collect());
    }
    Ok(subsample_phrase_labels(&trees, fraction, seed)?)
}

/// Continue training with root supervision, plus any phrase supervision in
/// `phrase_masks`. MLM stays off unless `cfg.finetune_mlm` is set.
pub fn finetune_sentence(
    model: &mut Model,
    corpus: &[Example],
    phrase_masks: Option<&[SupervisionMask]>,
    cfg: &TrainConfig,
    policy: &MaskingPolicy,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    if let Some(i) = corpus.iter().position(|e| e.tree.root().label.is_none()) {
        if model.config.granularity != Granularity::Two {
            return Err(ObjectiveError::Config(format!("sentence {i} has no root label")));
        }
    }
    let masks: Vec<SupervisionMask> = corpus
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let root = SupervisionMask::root_only(&e.tree);
            match phrase_masks {
                Some(m) => root.union(&m[i]),
                None => root,
            }
        })
        .collect();
    let cfg = TrainConfig {
        mlm_weight: if cfg.finetune_mlm { cfg.mlm_weight } else { 0.0 },
        ..cfg.clone()
    };
    train_with_masks(model, corpus, &masks, &cfg, policy, on_epoch)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_model(granularity: Granularity, vocab: usize) -> Model {
        let encoder = EncoderConfig {
            layers: 1,
            heads: 2,
            model_dim: 8,
            ffn_dim: 16,
            max_len: 32,
            vocab_size: vocab,
            dropout: 0.0,
        };
        Model::new(
            ModelConfig {
                encoder,
                granularity,
                composer: Composer::Attention,
            },
            7,
        )
        .unwrap()
    }

    fn corpus() -> (Vocabulary, Vec<Example>) {
        let trees = crate::treebank::parse_corpus(
            "(3 (2 Good) (3 (2 fun) (2 movie)))\n(1 (1 (2 not) (3 good)) (2 .))",
        )
        .unwrap();
        let vocab = Vocabulary::build(&trees, 1);
        let ex = Example::prepare(&trees, &vocab).unwrap();
        (vocab, ex)
    }

    #[test]
    fn masked_out_nodes_give_zero_loss() {
        let (vocab, ex) = corpus();
        let model = toy_model(Granularity::Five, vocab.len());
        let mut g = Graph::with_params(&model.store);
        let (_, states) = model.forward(&mut g, &ex[0].tree, &ex[0].encoded.ids, &ex[0].encoded, None).unwrap();
        let l = phrase_loss(&mut g, &states, &ex[0].tree, &model.head, &SupervisionMask::none(&ex[0].tree)).unwrap();
        assert_eq!(g.item(l), 0.0);
    }

    #[test]
    fn token_loss_without_token_labels_is_a_config_error() {
        let (vocab, mut ex) = corpus();
        let model = toy_model(Granularity::Five, vocab.len());
        for n in ex[0].tree.nodes.iter_mut().filter(|n| n.is_leaf()) {
            n.label = None;
        }
        let mut g = Graph::with_params(&model.store);
        let (_, states) = model.forward(&mut g, &ex[0].tree, &ex[0].encoded.ids, &ex[0].encoded, None).unwrap();
        assert!(matches!(
            token_node_loss(&mut g, &states, &ex[0].tree, &model.head),
            Err(ObjectiveError::Config(_))
        ));
    }

    #[test]
    fn zero_gradient_step_keeps_parameters() {
        let (vocab, _) = corpus();
        let mut model = toy_model(Granularity::Five, vocab.len());
        let before = model.store.clone();
        let mut adam = Adam::new(&model.store);
        let zeros = Gradients::for_store(&model.store);
        adam.step(&mut model.store, &zeros, 1e-3);
        for id in before.ids() {
            for (a, b) in before.get(id).data().iter().zip(model.store.get(id).data()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn warmup_ramps_linearly() {
        assert_eq!(warmup_scale(0, 4), 0.25);
        assert_eq!(warmup_scale(3, 4), 1.0);
        assert_eq!(warmup_scale(10, 4), 1.0);
        assert_eq!(warmup_scale(0, 0), 1.0);
    }

    #[test]
    fn granularity_mismatch_is_rejected() {
        let (vocab, ex) = corpus();
        let mut model = toy_model(Granularity::Three, vocab.len());
        let err = train(&mut model, &ex, &TrainConfig::default(), &MaskingPolicy::default(), &mut |_| {});
        assert!(matches!(err, Err(ObjectiveError::Config(_))));
    }

    #[test]
    fn rehead_keeps_the_encoder() {
        let (vocab, _) = corpus();
        let model = toy_model(Granularity::Five, vocab.len());
        let three = model.rehead(Granularity::Three, 99).unwrap();
        assert_eq!(three.head.classes, 3);
        let id = model.encoder.token_embedding();
        assert_eq!(model.store.get(id), three.store.get(three.encoder.token_embedding()));
    }
}
