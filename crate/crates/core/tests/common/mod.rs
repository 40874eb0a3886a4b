//! Templated toy corpora shared by the integration tests.
#![allow(dead_code)]

use paragen::config::TrainConfig;
use paragen::corpus::{tokenize, Label, PairCorpus, SentencePair, Vocabulary};
use paragen::rng::seeded;
use rand::seq::SliceRandom;
use rand::Rng as _;

pub const TOPICS: [&str; 10] = [
    "python", "math", "chess", "guitar", "cooking", "french", "drawing", "physics", "history", "swimming",
];

pub const TEMPLATES: [&str; 4] = [
    "how do i learn {} ?",
    "what is the best way to learn {} ?",
    "how can i get better at {} ?",
    "how should i start learning {} ?",
];

pub const TOY_MAX_LEN: usize = 10;

fn fill(template: usize, topic: usize) -> Vec<String> {
    tokenize(&TEMPLATES[template].replace("{}", TOPICS[topic]))
}

/// Every templated sentence, for building the vocabulary.
pub fn all_sentences() -> Vec<Vec<String>> {
    (0..TEMPLATES.len())
        .flat_map(|a| (0..TOPICS.len()).map(move |t| fill(a, t)))
        .collect()
}

pub fn toy_vocab() -> Vocabulary {
    Vocabulary::build(&all_sentences(), 1, 1000).unwrap()
}

/// Positives rephrase one topic with a different template; negatives pair
/// sentences about different topics.
pub fn toy_corpus(positives: usize, negatives: usize, seed: u64) -> (Vocabulary, PairCorpus) {
    let vocab = toy_vocab();
    let mut rng = seeded(seed);
    let enc = |s: Vec<String>| vocab.encode(&s, TOY_MAX_LEN);
    let mut combos: Vec<(usize, usize, usize)> = Vec::new();
    for t in 0..TOPICS.len() {
        for a in 0..TEMPLATES.len() {
            for b in 0..TEMPLATES.len() {
                if a != b {
                    combos.push((t, a, b));
                }
            }
        }
    }
    combos.shuffle(&mut rng);
    let mut pairs: Vec<SentencePair> = combos
        .iter()
        .cycle()
        .take(positives)
        .map(|&(t, a, b)| SentencePair {
            x: enc(fill(a, t)),
            y: enc(fill(b, t)),
            label: Label::Positive,
        })
        .collect();
    for _ in 0..negatives {
        let t1 = rng.random_range(0..TOPICS.len());
        let t2 = (t1 + rng.random_range(1..TOPICS.len())) % TOPICS.len();
        let a = rng.random_range(0..TEMPLATES.len());
        let b = rng.random_range(0..TEMPLATES.len());
        pairs.push(SentencePair {
            x: enc(fill(a, t1)),
            y: enc(fill(b, t2)),
            label: Label::Negative,
        });
    }
    (vocab, PairCorpus::new(pairs, 0))
}

/// Dimensions for full adversarial runs on one CPU.
pub fn toy_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        batch_size: 8,
        max_len: TOY_MAX_LEN,
        embed_dim: 16,
        hidden: 32,
        pattern_dim: 8,
        critic_blocks: 2,
        critic_layers: 2,
        critic_growth: 4,
        critic_mlp_hidden: 64,
        lr_pretrain: 3e-3,
        pretrain_steps_ae: 500,
        pretrain_steps_trs: 500,
        adv_steps: 0,
        checkpoint_every: 100,
        ..TrainConfig::default()
    }
}

/// Wider autoencoder for memorisation runs.
pub fn overfit_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        embed_dim: 32,
        hidden: 64,
        plateau_patience: 0,
        ..toy_config(seed)
    }
}

/// Smallest shapes, for tests that only exercise plumbing.
pub fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        embed_dim: 8,
        hidden: 8,
        pattern_dim: 4,
        critic_growth: 2,
        critic_mlp_hidden: 8,
        pretrain_steps_ae: 5,
        pretrain_steps_trs: 5,
        ..toy_config(seed)
    }
}
