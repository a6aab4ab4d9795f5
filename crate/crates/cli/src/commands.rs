use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use senticomp::encoder::{load_lexicon, MaskingPolicy, Vocabulary};
use senticomp::evalsuite::{compare_reports, evaluate, export_traces, three_class_view, EvalReport};
use senticomp::objective::{finetune_sentence, train, EpochRecord, Example, Model};
use senticomp::synth::{opinion_words, SentimentGrammar};
use senticomp::treebank::{coarsen_corpus, compute_stats, read_corpus, DifficultyOptions, PhraseTree};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const PARAMS_FILE: &str = "params.ckpt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const CONFIG_FILE: &str = "run.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Dev,
    Test,
}

fn split_path(cfg: &RunConfig, split: Split) -> Result<&Path> {
    let (field, path) = match split {
        Split::Train => ("paths.train", &cfg.paths.train),
        Split::Dev => ("paths.dev", &cfg.paths.dev),
        Split::Test => ("paths.test", &cfg.paths.test),
    };
    path.as_deref()
        .ok_or_else(|| CliError::config(format!("{field}: not set")))
}

fn load_treebank(cfg: &RunConfig, path: &Path) -> Result<Vec<PhraseTree>> {
    let trees = read_corpus(path).map_err(|e| CliError::from(e).context(path.display()))?;
    Ok(coarsen_corpus(&trees, cfg.granularity()?)?)
}

fn masking_policy(cfg: &RunConfig) -> Result<MaskingPolicy> {
    match &cfg.paths.lexicon {
        Some(p) => {
            let words = load_lexicon(p).map_err(|e| CliError::config(format!("paths.lexicon: {e}")))?;
            Ok(MaskingPolicy::with_lexicon(words))
        }
        None => Ok(MaskingPolicy::default()),
    }
}

fn examples(trees: &[PhraseTree], vocab: &Vocabulary) -> Result<Vec<Example>> {
    trees
        .iter()
        .enumerate()
        .map(|(i, t)| Example::new(t.clone(), vocab).map_err(|e| CliError::from(e).context(format!("sentence {i}"))))
        .collect()
}

/// Model shaped by `cfg` with the parameters and vocabulary stored in `dir`.
fn load_model(cfg: &RunConfig, dir: &Path) -> Result<(Model, Vocabulary)> {
    if !dir.is_dir() {
        return Err(CliError::config(format!("checkpoint: {} is not a directory", dir.display())));
    }
    let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))
        .map_err(|e| CliError::checkpoint(format!("{}: {e}", dir.join(VOCAB_FILE).display())))?;
    let mut model = Model::new(cfg.model_config(vocab.len())?, cfg.train.seed)?;
    model
        .store
        .load(&dir.join(PARAMS_FILE))
        .map_err(|e| CliError::from(e).context(dir.join(PARAMS_FILE).display()))?;
    Ok((model, vocab))
}

fn save_checkpoint(cfg: &RunConfig, model: &Model, vocab: &Vocabulary, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    model.store.save(&dir.join(PARAMS_FILE))?;
    vocab.save(&dir.join(VOCAB_FILE))?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_toml())?;
    Ok(())
}

struct LogWriter {
    out: BufWriter<File>,
    error: Option<std::io::Error>,
}

impl LogWriter {
    fn create(path: &Path) -> Result<Self> {
        Ok(LogWriter {
            out: BufWriter::new(File::create(path)?),
            error: None,
        })
    }

    fn record(&mut self, r: &EpochRecord) {
        eprintln!(
            "epoch {:>3}  mlm {:.4}  phrase {:.4}  phrase_acc {:.4}  root_acc {:.4}",
            r.epoch, r.mlm_loss, r.phrase_loss, r.phrase_acc, r.root_acc
        );
        let line = serde_json::to_string(r).expect("records serialize");
        if let Err(e) = writeln!(self.out, "{line}").and_then(|_| self.out.flush()) {
            self.error.get_or_insert(e);
        }
    }

    fn finish(self) -> Result<()> {
        match self.error {
            Some(e) => Err(e.into()),
            None => Ok(()),
        }
    }
}

pub fn train_cmd(cfg: &RunConfig) -> Result<()> {
    let train_path = cfg.require_training()?;
    let trees = load_treebank(cfg, train_path)?;
    let vocab = match &cfg.paths.vocab {
        Some(p) => Vocabulary::load(p).map_err(|e| CliError::config(format!("paths.vocab: {e}")))?,
        None => Vocabulary::build(&trees, cfg.min_count),
    };
    let policy = masking_policy(cfg)?;
    let corpus = examples(&trees, &vocab)?;
    let mut model = Model::new(cfg.model_config(vocab.len())?, cfg.train.seed)?;

    let dir = &cfg.paths.checkpoint_dir;
    fs::create_dir_all(dir)?;
    let mut log = LogWriter::create(&dir.join(LOG_FILE))?;
    train(&mut model, &corpus, &cfg.train, &policy, &mut |r| log.record(r))?;
    log.finish()?;
    save_checkpoint(cfg, &model, &vocab, dir)?;
    println!("checkpoint written to {}", dir.display());
    Ok(())
}

/// Sentence-level training starting from an earlier checkpoint. The head is
/// replaced when the configured granularity differs from the checkpoint's.
pub fn finetune_cmd(cfg: &RunConfig, from: &Path) -> Result<()> {
    let train_path = cfg.require_training()?;
    let source = RunConfig::read_saved(&from.join(CONFIG_FILE))?;
    let (base, vocab) = load_model(&source, from)?;
    let mut model = if source.granularity != cfg.granularity {
        base.rehead(cfg.granularity()?, cfg.train.seed)?
    } else {
        base
    };
    let trees = load_treebank(cfg, train_path)?;
    let corpus = examples(&trees, &vocab)?;
    let policy = masking_policy(cfg)?;

    let dir = &cfg.paths.checkpoint_dir;
    fs::create_dir_all(dir)?;
    let mut log = LogWriter::create(&dir.join(LOG_FILE))?;
    finetune_sentence(&mut model, &corpus, None, &cfg.train, &policy, &mut |r| log.record(r))?;
    log.finish()?;
    save_checkpoint(cfg, &model, &vocab, dir)?;
    println!("checkpoint written to {}", dir.display());
    Ok(())
}

fn predict(cfg: &RunConfig, checkpoint: &Path, split: Split) -> Result<(Vec<PhraseTree>, Vec<senticomp::evalsuite::TreePrediction>)> {
    let (model, vocab) = load_model(cfg, checkpoint)?;
    let trees = load_treebank(cfg, split_path(cfg, split)?)?;
    let corpus = examples(&trees, &vocab)?;
    let predictions = model.predict_all(&corpus)?;
    Ok((trees, predictions))
}

pub fn report_path(dir: &Path, split: Split) -> PathBuf {
    let name = match split {
        Split::Train => "train",
        Split::Dev => "dev",
        Split::Test => "test",
    };
    dir.join(format!("eval_{name}.json"))
}

pub fn eval_cmd(cfg: &RunConfig, checkpoint: &Path, split: Split, opts: DifficultyOptions) -> Result<()> {
    let (trees, predictions) = predict(cfg, checkpoint, split)?;
    let report = evaluate(&predictions, &trees, opts)?;
    let out = report_path(&cfg.paths.checkpoint_dir, split);
    fs::create_dir_all(&cfg.paths.checkpoint_dir)?;
    fs::write(&out, serde_json::to_string_pretty(&report)? + "\n")?;
    println!("phrase_accuracy {:.4}", report.phrase_accuracy);
    println!("root_accuracy {:.4}", report.root_accuracy);
    eprintln!("report written to {}", out.display());
    Ok(())
}

pub fn trace_cmd(cfg: &RunConfig, checkpoint: &Path, split: Split, sentence: usize, count: usize) -> Result<()> {
    let (trees, predictions) = predict(cfg, checkpoint, split)?;
    let end = sentence.checked_add(count).filter(|&e| count > 0 && e <= trees.len());
    let Some(end) = end else {
        return Err(CliError::config(format!(
            "--sentence {sentence} --count {count}: the {} split has {} sentences",
            format!("{split:?}").to_lowercase(),
            trees.len()
        )));
    };
    let dir = cfg.paths.checkpoint_dir.join("traces");
    for i in sentence..end {
        let (json, dot) = export_traces(i, &trees[i], &predictions[i], &dir, &format!("sentence_{i}"))?;
        println!("{}\n{}", json.display(), dot.display());
    }
    Ok(())
}

pub fn analyze_cmd(path: &Path, opts: DifficultyOptions, out: Option<&Path>) -> Result<()> {
    let trees = read_corpus(path).map_err(|e| CliError::from(e).context(path.display()))?;
    let coarse = trees
        .iter()
        .map(three_class_view)
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let stats = compute_stats(&coarse, opts)?;
    let json = serde_json::to_string_pretty(&stats)? + "\n";
    match out {
        Some(p) => fs::write(p, json)?,
        None => print!("{json}"),
    }
    Ok(())
}

pub fn compare_cmd(a: &Path, b: &Path) -> Result<()> {
    let read = |p: &Path| -> Result<EvalReport> {
        let text = fs::read_to_string(p).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", p.display())))
    };
    for (k, d) in compare_reports(&read(a)?, &read(b)?) {
        println!("{k} {d:+.4}");
    }
    Ok(())
}

pub fn synth_cmd(count: usize, seed: u64, out: &Path, lexicon: Option<&Path>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trees = SentimentGrammar::default().corpus(&mut rng, count);
    let mut text = String::new();
    for t in &trees {
        text.push_str(&t.to_string());
        text.push('\n');
    }
    fs::write(out, text)?;
    if let Some(p) = lexicon {
        fs::write(p, opinion_words().join("\n") + "\n")?;
    }
    Ok(())
}
