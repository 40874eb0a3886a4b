//! `paragen` command-line interface.

use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use paragen::checkpoint::{checkpoint_id, fnv1a, load_checkpoint, save_checkpoint, Checkpoint};
use paragen::config::TrainConfig;
use paragen::corpus::{
    load_caption_groups, load_encoded, load_pair_corpus, pair_captions, read_pair_sentences, tokenize, Label,
    PairCorpus, SentencePair, Vocabulary,
};
use paragen::embeddings::load_pretrained;
use paragen::metrics::{evaluate_set, SynonymTable};
use paragen::rng::seeded;
use paragen::trainer::{checkpoint_meta, pretrain, train, Model, ModelState, TrainOutputs};

#[derive(Parser, Debug)]
#[command(name = "paragen", version, about = "Paraphrase generation with a multi-class Wasserstein GAN")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the vocabulary and encoded corpus from the raw data.
    Preprocess(Common),
    /// Maximum-likelihood pretraining of the autoencoder and transcoder.
    Pretrain(Common),
    /// Adversarial training from a pretrained checkpoint.
    Train(WithCheckpoint),
    /// Paraphrase sentences read from standard input, one per line.
    Generate(Sampling),
    /// Score sampled paraphrases of the test pairs.
    Evaluate(Sampling),
}

#[derive(Args, Debug)]
struct Common {
    /// Configuration file (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct WithCheckpoint {
    #[command(flatten)]
    common: Common,
    /// Checkpoint to start from.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Sampling {
    #[command(flatten)]
    inner: WithCheckpoint,
    /// Paraphrases per input.
    #[arg(long)]
    samples: Option<usize>,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<paragen::Error> for Failure {
    fn from(e: paragen::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Outcome {
    match command {
        Command::Preprocess(c) => preprocess(&load_config(&c)?),
        Command::Pretrain(c) => run_pretrain(&load_config(&c)?),
        Command::Train(c) => run_train(&load_config(&c.common)?, c.common.seed, c.checkpoint.as_deref()),
        Command::Generate(s) => generate(&s),
        Command::Evaluate(s) => evaluate(&s),
    }
}

fn load_config(c: &Common) -> Result<TrainConfig, Failure> {
    if !c.config.is_file() {
        return Err(Failure::Usage(format!("config file not found: {}", c.config.display())));
    }
    let mut cfg = TrainConfig::load(&c.config).map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn config_hash(cfg: &TrainConfig) -> String {
    format!("{:016x}", fnv1a(cfg.to_text().as_bytes()))
}

fn provenance(cfg: &TrainConfig, checkpoint: Option<&Path>) -> Result<Vec<String>, Failure> {
    let mut lines = vec![format!("config_hash={}", config_hash(cfg)), format!("seed={}", cfg.seed)];
    if let Some(path) = checkpoint {
        lines.push(format!("checkpoint={} ({})", checkpoint_id(path)?, path.display()));
    }
    Ok(lines)
}

fn print_header(out: &mut impl Write, lines: &[String]) -> io::Result<()> {
    for line in lines {
        writeln!(out, "# {line}")?;
    }
    Ok(())
}

fn preprocess(cfg: &TrainConfig) -> Outcome {
    let (vocab, corpus) = match (&cfg.raw_pairs, &cfg.raw_captions) {
        (Some(pairs), None) => {
            let vocab = Vocabulary::build(&read_pair_sentences(pairs)?, cfg.min_freq, cfg.max_vocab)?;
            let corpus = load_pair_corpus(pairs, &vocab, cfg.max_len)?;
            (vocab, corpus)
        }
        (None, Some(captions)) => {
            let groups = load_caption_groups(captions)?;
            let sentences: Vec<Vec<String>> = groups.iter().flatten().cloned().collect();
            let vocab = Vocabulary::build(&sentences, cfg.min_freq, cfg.max_vocab)?;
            let encoded: Vec<Vec<_>> = groups
                .iter()
                .map(|g| {
                    g.iter()
                        .filter(|c| c.len() <= cfg.max_len)
                        .map(|c| vocab.encode(c, cfg.max_len))
                        .collect()
                })
                .collect();
            let corpus = pair_captions(&encoded, cfg.caption_positives, cfg.caption_negatives, cfg.seed)?;
            (vocab, corpus)
        }
        _ => {
            return Err(Failure::Usage(
                "preprocess needs exactly one of raw_pairs or raw_captions in the config".into(),
            ))
        }
    };
    std::fs::create_dir_all(&cfg.work_dir).map_err(|e| Failure::Runtime(format!("{}: {e}", cfg.work_dir.display())))?;
    vocab.save(&cfg.vocab_path())?;
    corpus.save_encoded(&cfg.corpus_path())?;

    let mut out = io::stdout().lock();
    print_header(&mut out, &provenance(cfg, None)?)?;
    let stats = corpus.stats();
    writeln!(out, "vocabulary\t{}\t{}", vocab.len(), cfg.vocab_path().display())?;
    writeln!(out, "pairs\t{}\t{}", corpus.len(), cfg.corpus_path().display())?;
    writeln!(out, "positive\t{}", corpus.count(Label::Positive))?;
    writeln!(out, "negative\t{}", corpus.count(Label::Negative))?;
    writeln!(out, "dropped\t{}", stats.dropped)?;
    Ok(())
}

fn load_training_data(cfg: &TrainConfig) -> Result<(Vocabulary, PairCorpus), Failure> {
    let vocab = Vocabulary::load(&cfg.vocab_path())?;
    let corpus = load_encoded(&cfg.corpus_path(), vocab.len())?;
    Ok((vocab, corpus))
}

fn run_pretrain(cfg: &TrainConfig) -> Outcome {
    let (vocab, corpus) = load_training_data(cfg)?;
    let model = Model::new(cfg, vocab.len());
    let embeddings = match &cfg.pretrained_embeddings {
        Some(path) => {
            let (matrix, coverage) = load_pretrained(path, &vocab, cfg.embed_dim, &mut seeded(cfg.seed))?;
            eprintln!(
                "pretrained embeddings cover {}/{} tokens ({:.1}%)",
                coverage.found,
                coverage.total,
                100.0 * coverage.ratio()
            );
            Some(matrix)
        }
        None => None,
    };
    let mut state = ModelState::init(&model, cfg, embeddings)?;
    let report = pretrain(&model, &mut state, &corpus, cfg)?;
    let path = cfg.pretrained_path();
    save_checkpoint(&state, &checkpoint_meta(cfg, &model), &path)?;

    let mut out = io::stdout().lock();
    print_header(&mut out, &provenance(cfg, Some(&path))?)?;
    writeln!(out, "phase\tsteps\tfirst\tlast")?;
    for (name, trace) in [("autoencoder", &report.autoencoder), ("transcoder", &report.transcoder)] {
        let fmt = |v: Option<&f64>| v.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into());
        writeln!(out, "{name}\t{}\t{}\t{}", trace.len(), fmt(trace.first()), fmt(trace.last()))?;
    }
    Ok(())
}

/// Load a checkpoint and rebuild the model it was trained with.
fn restore(path: &Path) -> Result<(Model, Checkpoint, TrainConfig), Failure> {
    if !path.is_file() {
        return Err(Failure::Usage(format!("checkpoint not found: {}", path.display())));
    }
    let ckpt = load_checkpoint(path)?;
    let saved = ckpt
        .meta
        .get("config")
        .ok_or_else(|| Failure::Runtime(format!("{}: checkpoint has no config", path.display())))?;
    let saved = TrainConfig::parse_str(saved)?;
    let vocab_size: usize = ckpt
        .meta
        .get("vocab_size")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Failure::Runtime(format!("{}: checkpoint has no vocabulary size", path.display())))?;
    Ok((Model::new(&saved, vocab_size), ckpt, saved))
}

fn run_train(cfg: &TrainConfig, seed: Option<u64>, checkpoint: Option<&Path>) -> Outcome {
    let start = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| cfg.pretrained_path());
    let (model, ckpt, saved) = restore(&start)?;
    let vocab_size = model.generator.cfg.vocab_size;
    if saved.seq(vocab_size) != cfg.seq(vocab_size) || saved.critic() != cfg.critic() {
        return Err(Failure::Usage(format!(
            "model dimensions in the config differ from those in {}",
            start.display()
        )));
    }
    let mut state = ckpt.state;
    if let Some(seed) = seed {
        state.rng = seeded(seed);
    }
    let (vocab, corpus) = load_training_data(cfg)?;
    if vocab.len() != model.generator.cfg.vocab_size {
        return Err(Failure::Runtime(format!(
            "vocabulary has {} tokens but the checkpoint expects {}",
            vocab.len(),
            model.generator.cfg.vocab_size
        )));
    }
    let outputs = TrainOutputs::in_dir(&cfg.work_dir);
    let trace = train(&model, &mut state, &corpus, cfg, Some(&outputs))?;

    let mut out = io::stdout().lock();
    print_header(&mut out, &provenance(cfg, Some(&start))?)?;
    writeln!(out, "steps\t{}", trace.len())?;
    if let Some(last) = trace.last() {
        writeln!(out, "W_pos\t{:.6}", last.w_pos)?;
        writeln!(out, "W_neg\t{:.6}", last.w_neg)?;
    }
    writeln!(out, "metrics\t{}", outputs.metrics.display())?;
    writeln!(out, "checkpoint\t{}", outputs.final_checkpoint.display())?;
    Ok(())
}

struct Sampler {
    cfg: TrainConfig,
    model: Model,
    ckpt: Checkpoint,
    vocab: Vocabulary,
    path: PathBuf,
    k: usize,
}

fn sampler(s: &Sampling) -> Result<Sampler, Failure> {
    let cfg = load_config(&s.inner.common)?;
    let path = s.inner.checkpoint.clone().unwrap_or_else(|| cfg.final_path());
    let (model, ckpt, _) = restore(&path)?;
    let vocab = Vocabulary::load(&cfg.vocab_path())?;
    if vocab.len() != model.generator.cfg.vocab_size {
        return Err(Failure::Runtime(format!(
            "vocabulary has {} tokens but the checkpoint expects {}",
            vocab.len(),
            model.generator.cfg.vocab_size
        )));
    }
    let k = s.samples.unwrap_or(cfg.eval_samples);
    if k == 0 {
        return Err(Failure::Usage("--samples must be at least 1".into()));
    }
    Ok(Sampler {
        cfg,
        model,
        ckpt,
        vocab,
        path,
        k,
    })
}

fn generate(s: &Sampling) -> Outcome {
    let sm = sampler(s)?;
    let max_len = sm.model.generator.cfg.max_len;
    let mut inputs = Vec::new();
    for line in io::stdin().lock().lines() {
        inputs.push(sm.vocab.encode(&tokenize(&line?), max_len));
    }
    let vars = sm.ckpt.state.params.bind(|_| false);
    let mut rng = seeded(sm.cfg.seed);
    let samples = if inputs.is_empty() {
        Vec::new()
    } else {
        sm.model.generator.paraphrase(&vars, &inputs, sm.k, &mut rng)?
    };

    let mut out = io::stdout().lock();
    let mut header = provenance(&sm.cfg, Some(&sm.path))?;
    header.push(format!("samples={}", sm.k));
    print_header(&mut out, &header)?;
    for (i, outs) in samples.iter().enumerate() {
        for (j, ids) in outs.iter().enumerate() {
            writeln!(out, "{i}\t{j}\t{}", sm.vocab.decode(ids).join(" "))?;
        }
    }
    Ok(())
}

fn evaluate(s: &Sampling) -> Outcome {
    let sm = sampler(s)?;
    let test_path = sm
        .cfg
        .test_pairs
        .clone()
        .ok_or_else(|| Failure::Usage("evaluate needs test_pairs in the config".into()))?;
    let max_len = sm.model.generator.cfg.max_len;
    let test = load_pair_corpus(&test_path, &sm.vocab, max_len)?;
    let pairs: Vec<SentencePair> = test.with_label(Label::Positive).cloned().collect();
    if pairs.is_empty() {
        return Err(Failure::Runtime(format!("{}: no positive test pairs", test_path.display())));
    }
    let synonyms = sm.cfg.synonyms.as_deref().map(SynonymTable::load).transpose()?;
    let vars = sm.ckpt.state.params.bind(|_| false);
    let mut rng = seeded(sm.cfg.seed);
    let generator = &sm.model.generator;
    let report = evaluate_set(
        |x, k| Ok(generator.paraphrase(&vars, &[x.to_vec()], k, &mut rng)?.remove(0)),
        &pairs,
        sm.k,
        &sm.vocab,
        synonyms.as_ref(),
    )?;
    if report.empty_samples > 0 {
        eprintln!("warning: {} samples decoded to empty sentences and score 0", report.empty_samples);
    }
    let mut header = provenance(&sm.cfg, Some(&sm.path))?;
    header.push(format!("test_pairs={} ({} dropped as too long)", test_path.display(), test.stats().dropped));
    io::stdout().lock().write_all(report.to_tsv(&header).as_bytes())?;
    Ok(())
}
