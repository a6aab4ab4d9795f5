use ndtensor::{Graph, Gradients, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use senticomp::composition::Composer;
use senticomp::encoder::{apply_masking, EncoderConfig, MaskingPolicy, Vocabulary};
use senticomp::evalsuite::phrase_accuracy;
use senticomp::objective::*;
use senticomp::synth::{opinion_words, SentimentGrammar};
use senticomp::treebank::{Granularity, PhraseTree, SupervisionMask};

fn small_encoder(vocab: usize, d: usize) -> EncoderConfig {
    EncoderConfig {
        layers: 1,
        heads: 2,
        model_dim: d,
        ffn_dim: 2 * d,
        max_len: 64,
        vocab_size: vocab,
        dropout: 0.0,
    }
}

fn model(granularity: Granularity, encoder: EncoderConfig, seed: u64) -> Model {
    Model::new(
        ModelConfig {
            encoder,
            granularity,
            composer: Composer::Attention,
        },
        seed,
    )
    .unwrap()
}

fn grammar(seed: u64, n: usize, granularity: Granularity) -> Vec<PhraseTree> {
    let trees = SentimentGrammar::default().corpus(&mut ChaCha8Rng::seed_from_u64(seed), n);
    trees.iter().map(|t| t.coarsen(granularity).unwrap()).collect()
}

fn batch<'a>(corpus: &'a [Example], vocab: usize, seed: u64) -> Vec<BatchItem<'a>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let policy = MaskingPolicy::with_lexicon(opinion_words());
    corpus
        .iter()
        .map(|ex| BatchItem {
            example: ex,
            masked: apply_masking(&ex.encoded.ids, &ex.encoded.alignment, &ex.tree.tokens, vocab, &policy, &mut rng),
            mask: SupervisionMask::all_phrases(&ex.tree),
        })
        .collect()
}

fn weights(mlm: f64, phrase: f64) -> TrainConfig {
    TrainConfig {
        mlm_weight: mlm,
        phrase_weight: phrase,
        ..TrainConfig::default()
    }
}

fn snapshot(store: &ParamStore) -> Vec<Vec<f64>> {
    store.ids().map(|id| store.get(id).data().to_vec()).collect()
}

#[test]
fn loss_weights_select_and_sum_terms() {
    let trees = grammar(1, 12, Granularity::Five);
    let vocab = Vocabulary::build(&trees, 1);
    let corpus = Example::prepare(&trees, &vocab).unwrap();
    let m = model(Granularity::Five, small_encoder(vocab.len(), 16), 2);
    let items = batch(&corpus, vocab.len(), 3);
    let parts = total_loss(&m, &items, &weights(1.0, 1.0)).unwrap();
    assert!(parts.mlm > 0.0 && parts.phrase > 0.0);
    assert!((parts.total - (parts.mlm + parts.phrase)).abs() < 1e-12);

    let only_phrase = total_loss(&m, &items, &weights(0.0, 1.0)).unwrap();
    assert!((only_phrase.total - parts.phrase).abs() < 1e-12);
    let only_mlm = total_loss(&m, &items, &weights(1.0, 0.0)).unwrap();
    assert!((only_mlm.total - parts.mlm).abs() < 1e-12);
    let mixed = total_loss(&m, &items, &weights(0.3, 2.5)).unwrap();
    assert!((mixed.total - (0.3 * parts.mlm + 2.5 * parts.phrase)).abs() < 1e-12);
}

#[test]
fn untrained_five_class_loss_is_near_log_five() {
    let trees = grammar(4, 40, Granularity::Five);
    let vocab = Vocabulary::build(&trees, 1);
    let corpus = Example::prepare(&trees, &vocab).unwrap();
    let m = model(Granularity::Five, EncoderConfig::desk(vocab.len()), 5);
    let items = batch(&corpus, vocab.len(), 6);
    let loss = total_loss(&m, &items, &weights(0.0, 1.0)).unwrap().phrase;
    assert!((loss - 5f64.ln()).abs() < 0.1 * 5f64.ln(), "{loss}");
}

#[test]
fn saturated_logits_give_vanishing_loss() {
    let tree = PhraseTree::parse("(3 (2 fun) (4 film))").unwrap();
    let vocab = Vocabulary::build(std::slice::from_ref(&tree), 1);
    let ex = Example::new(tree, &vocab).unwrap();
    let mut m = model(Granularity::Five, small_encoder(vocab.len(), 8), 1);
    let mut one_hot = vec![0.0; 5];
    one_hot[3] = 10.0;
    *m.store.get_mut(m.head.weight) = Tensor::zeros(&[8, 5]);
    *m.store.get_mut(m.head.bias) = Tensor::vector(one_hot);
    let mut g = Graph::with_params(&m.store);
    let (_, states) = m.forward(&mut g, &ex.tree, &ex.encoded.ids, &ex.encoded, None).unwrap();
    let l = phrase_loss(&mut g, &states, &ex.tree, &m.head, &SupervisionMask::root_only(&ex.tree)).unwrap();
    assert!(g.item(l) < 1e-3);

    // Leaves are labelled 2 and 4; move the bias to class 4 and check only
    // the matching token contributes a small loss.
    let mut g = Graph::with_params(&m.store);
    let (_, states) = m.forward(&mut g, &ex.tree, &ex.encoded.ids, &ex.encoded, None).unwrap();
    let t = token_node_loss(&mut g, &states, &ex.tree, &m.head).unwrap();
    assert!(g.item(t) > 1.0);

    let tree = PhraseTree::parse("(3 (3 fun) (3 film))").unwrap();
    let ex = Example::new(tree, &vocab).unwrap();
    let mut g = Graph::with_params(&m.store);
    let (_, states) = m.forward(&mut g, &ex.tree, &ex.encoded.ids, &ex.encoded, None).unwrap();
    let t = token_node_loss(&mut g, &states, &ex.tree, &m.head).unwrap();
    assert!(g.item(t) < 1e-3);
}

#[test]
fn token_objective_adds_a_positive_term() {
    let trees = grammar(7, 10, Granularity::Three);
    let vocab = Vocabulary::build(&trees, 1);
    let corpus = Example::prepare(&trees, &vocab).unwrap();
    let m = model(Granularity::Three, small_encoder(vocab.len(), 16), 8);
    let items = batch(&corpus, vocab.len(), 9);
    let plain = total_loss(&m, &items, &TrainConfig::default()).unwrap();
    let with_tokens = total_loss(
        &m,
        &items,
        &TrainConfig {
            token_node_objective: true,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    assert_eq!(plain.token, 0.0);
    assert!(with_tokens.token > 0.0);
    assert!(with_tokens.total > plain.total);
    assert!((with_tokens.total - plain.total - with_tokens.token).abs() < 1e-12);
}

fn phrase_grads(m: &Model, ex: &Example, mask: &SupervisionMask) -> Gradients {
    let item = BatchItem {
        example: ex,
        masked: apply_masking(&ex.encoded.ids, &ex.encoded.alignment, &ex.tree.tokens, 2, &MaskingPolicy {
            opinion_word_prob: 0.0,
            other_word_prob: 0.0,
            ..MaskingPolicy::default()
        }, &mut ChaCha8Rng::seed_from_u64(0)),
        mask: mask.clone(),
    };
    let mut g = Graph::with_params(&m.store);
    let s = sentence_objective(&mut g, m, &item, &weights(0.0, 1.0), None).unwrap();
    g.backward(s.total).unwrap()
}

#[test]
fn masked_nodes_contribute_no_gradient() {
    let trees = grammar(10, 30, Granularity::Five);
    let tree = trees.iter().max_by_key(|t| t.nodes.len()).unwrap().clone();
    let vocab = Vocabulary::build(&trees, 1);
    let ex = Example::new(tree.clone(), &vocab).unwrap();
    let m = model(Granularity::Five, small_encoder(vocab.len(), 8), 11);
    let k = tree.phrases().nth(2).unwrap().id;

    let all = SupervisionMask::all_phrases(&tree);
    let mut without = all.clone();
    without.set(k, false);
    let mut only = SupervisionMask::none(&tree);
    only.set(k, true);
    let (ga, gw, go) = (phrase_grads(&m, &ex, &all), phrase_grads(&m, &ex, &without), phrase_grads(&m, &ex, &only));
    let (na, nw) = (all.count() as f64, without.count() as f64);
    for id in m.store.ids() {
        let (a, w, o) = (ga.get(id), gw.get(id), go.get(id));
        let (Some(a), Some(w), Some(o)) = (a, w, o) else { continue };
        for j in 0..a.len() {
            let recombined = (nw * w[j] + o[j]) / na;
            assert!((a[j] - recombined).abs() < 1e-12 * (1.0 + a[j].abs()));
        }
    }

    // Changing the gold label of a masked node leaves the gradient alone.
    let mut relabelled = ex.clone();
    let old = relabelled.tree.nodes[k].label.unwrap().value();
    relabelled.tree.nodes[k].label = senticomp::treebank::SentimentLabel::new((old + 2) % 5, Granularity::Five);
    let gr = phrase_grads(&m, &relabelled, &without);
    for id in m.store.ids() {
        assert_eq!(gw.get(id), gr.get(id));
    }
    let changed = phrase_grads(&m, &relabelled, &all);
    assert!(m.store.ids().any(|id| changed.get(id) != ga.get(id)));
}

#[test]
fn zero_epochs_leave_the_initialisation() {
    let trees = grammar(12, 8, Granularity::Three);
    let vocab = Vocabulary::build(&trees, 1);
    let corpus = Example::prepare(&trees, &vocab).unwrap();
    let mut m = model(Granularity::Three, small_encoder(vocab.len(), 8), 13);
    let before = snapshot(&m.store);
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let log = train(&mut m, &corpus, &cfg, &MaskingPolicy::default(), &mut |_| {}).unwrap();
    assert!(log.is_empty());
    assert_eq!(snapshot(&m.store), before);
}

#[test]
fn training_is_bitwise_reproducible_across_thread_counts() {
    let trees = grammar(14, 24, Granularity::Three);
    let vocab = Vocabulary::build(&trees, 1);
    let corpus = Example::prepare(&trees, &vocab).unwrap();
    let mut encoder = small_encoder(vocab.len(), 16);
    encoder.dropout = 0.1;
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 8,
        seed: 15,
        label_fraction: 0.5,
        ..TrainConfig::default()
    };
    let policy = MaskingPolicy::with_lexicon(opinion_words());
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let mut m = model(Granularity::Three, encoder.clone(), 16);
            let log = train(&mut m, &corpus, &cfg, &policy, &mut |_| {}).unwrap();
            let json: Vec<String> = log.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
            (json, snapshot(&m.store))
        })
    };
    let (log1, p1) = run(1);
    let (log2, p2) = run(3);
    assert_eq!(log1, log2);
    assert_eq!(p1, p2);
    let (log3, _) = run(1);
    assert_eq!(log1, log3);
}

#[test]
fn non_finite_parameters_abort_with_their_name() {
    let trees = grammar(17, 4, Granularity::Three);
    let vocab = Vocabulary::build(&trees, 1);
    let corpus = Example::prepare(&trees, &vocab).unwrap();
    let mut m = model(Granularity::Three, small_encoder(vocab.len(), 8), 18);
    m.store.get_mut(m.head.bias).data_mut()[0] = f64::NAN;
    let err = train(&mut m, &corpus, &TrainConfig::default(), &MaskingPolicy::default(), &mut |_| {}).unwrap_err();
    match err {
        ObjectiveError::NonFinite { epoch, step, param } => {
            assert_eq!((epoch, step), (1, 0));
            assert!(!param.is_empty());
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn root_finetuning_reports_only_root_loss() {
    let trees = grammar(19, 1, Granularity::Three);
    let vocab = Vocabulary::build(&trees, 1);
    let corpus = Example::prepare(&trees, &vocab).unwrap();
    let mut m = model(Granularity::Three, small_encoder(vocab.len(), 8), 20);
    let ex = &corpus[0];
    let gold = ex.tree.root().label.unwrap().class();
    let mut g = Graph::with_params(&m.store);
    let (_, states) = m.forward(&mut g, &ex.tree, &ex.encoded.ids, &ex.encoded, None).unwrap();
    let logits = m.head.logits(&mut g, states.nodes[0].p).unwrap();
    let z = g.value(logits).data().to_vec();
    let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
    let root_ce = lse - z[gold];

    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let log = finetune_sentence(&mut m, &corpus, None, &cfg, &MaskingPolicy::default(), &mut |_| {}).unwrap();
    assert!((log[0].phrase_loss - root_ce).abs() < 1e-12);
    assert_eq!(log[0].mlm_loss, 0.0);
}

#[test]
fn root_finetuning_matches_root_masks() {
    let trees = grammar(21, 10, Granularity::Three);
    let vocab = Vocabulary::build(&trees, 1);
    let corpus = Example::prepare(&trees, &vocab).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let policy = MaskingPolicy::default();
    let mut a = model(Granularity::Three, small_encoder(vocab.len(), 8), 22);
    let mut b = model(Granularity::Three, small_encoder(vocab.len(), 8), 22);
    finetune_sentence(&mut a, &corpus, None, &cfg, &policy, &mut |_| {}).unwrap();
    let roots: Vec<SupervisionMask> = corpus.iter().map(|e| SupervisionMask::root_only(&e.tree)).collect();
    let root_cfg = TrainConfig {
        mlm_weight: 0.0,
        ..cfg.clone()
    };
    train_with_masks(&mut b, &corpus, &roots, &root_cfg, &policy, &mut |_| {}).unwrap();
    assert_eq!(snapshot(&a.store), snapshot(&b.store));
}

/// Phrase-level pre-training followed by root-only fine-tuning against the
/// same root-only budget from scratch.
#[test]
fn phrase_pretraining_helps_root_finetuning() {
    let five = grammar(23, 260, Granularity::Five);
    let vocab = Vocabulary::build(&five, 1);
    let phrase_corpus = Example::prepare(&five[..160], &vocab).unwrap();
    let three: Vec<PhraseTree> = five[160..].iter().map(|t| t.coarsen(Granularity::Three).unwrap()).collect();
    let root_train = Example::prepare(&three[..50], &vocab).unwrap();
    let test = Example::prepare(&three[50..], &vocab).unwrap();
    let enc = small_encoder(vocab.len(), 32);
    let policy = MaskingPolicy::with_lexicon(opinion_words());

    let mut pre = model(Granularity::Five, enc.clone(), 24);
    let pre_cfg = TrainConfig {
        epochs: 40,
        batch_size: 8,
        seed: 1,
        ..TrainConfig::default()
    };
    train(&mut pre, &phrase_corpus, &pre_cfg, &policy, &mut |_| {}).unwrap();
    let mut tuned = pre.rehead(Granularity::Three, 25).unwrap();
    let mut scratch = model(Granularity::Three, enc, 24);

    let ft = TrainConfig {
        epochs: 10,
        batch_size: 8,
        seed: 2,
        ..TrainConfig::default()
    };
    finetune_sentence(&mut tuned, &root_train, None, &ft, &policy, &mut |_| {}).unwrap();
    finetune_sentence(&mut scratch, &root_train, None, &ft, &policy, &mut |_| {}).unwrap();

    let root_acc = |m: &Model| {
        let preds = m.predict_all(&test).unwrap();
        let hits = preds.iter().zip(&test).filter(|(p, e)| p.labels[0] == e.tree.root().label.map(|l| l.value())).count();
        hits as f64 / test.len() as f64
    };
    let (a, b) = (root_acc(&tuned), root_acc(&scratch));
    assert!(a >= b, "fine-tuned {a} < scratch {b}");
    let trees: Vec<PhraseTree> = test.iter().map(|e| e.tree.clone()).collect();
    assert!(phrase_accuracy(&tuned.predict_all(&test).unwrap(), &trees).unwrap() > 0.0);
}
