//! Flat `key = value` training configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::critic::CriticConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::seqnets::SeqConfig;

/// Every knob of a run. Unknown keys in a config file are rejected.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,

    pub max_len: usize,
    pub min_freq: usize,
    pub max_vocab: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub pattern_dim: usize,

    pub critic_blocks: usize,
    pub critic_layers: usize,
    pub critic_growth: usize,
    pub critic_mlp_hidden: usize,
    pub leaky_slope: f64,

    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,

    pub lr_gen: f64,
    pub lr_critic: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub grad_clip: f64,

    pub lr_pretrain: f64,
    pub pretrain_beta1: f64,
    pub pretrain_beta2: f64,
    pub pretrain_steps_ae: usize,
    pub pretrain_steps_trs: usize,
    pub plateau_patience: usize,

    pub adv_steps: usize,
    pub critic_updates_per_gen: usize,
    pub update_embeddings: bool,
    pub per_example_pattern: bool,
    pub mask_after_eos: bool,
    pub checkpoint_every: usize,

    /// Raw tab-separated pairs consumed by `preprocess`.
    pub raw_pairs: Option<PathBuf>,
    /// Raw `image_id<TAB>caption` lines consumed by `preprocess`.
    pub raw_captions: Option<PathBuf>,
    pub caption_positives: usize,
    pub caption_negatives: usize,
    pub pretrained_embeddings: Option<PathBuf>,
    pub synonyms: Option<PathBuf>,
    pub test_pairs: Option<PathBuf>,
    pub eval_samples: usize,
    /// Directory for vocabulary, encoded corpus, checkpoints and logs.
    pub work_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 1,
            batch_size: 32,
            max_len: crate::corpus::DEFAULT_MAX_LEN,
            min_freq: 1,
            max_vocab: 20_000,
            embed_dim: crate::embeddings::DEFAULT_EMBED_DIM,
            hidden: crate::seqnets::DEFAULT_HIDDEN,
            pattern_dim: crate::seqnets::DEFAULT_PATTERN_DIM,
            critic_blocks: 2,
            critic_layers: 3,
            critic_growth: 12,
            critic_mlp_hidden: 128,
            leaky_slope: 0.2,
            tau: crate::seqnets::DEFAULT_TAU,
            alpha: crate::losses::DEFAULT_ALPHA,
            beta: crate::losses::DEFAULT_BETA,
            lambda: crate::critic::DEFAULT_LAMBDA,
            lr_gen: 1e-4,
            lr_critic: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.9,
            grad_clip: 5.0,
            lr_pretrain: 1e-3,
            pretrain_beta1: 0.9,
            pretrain_beta2: 0.999,
            pretrain_steps_ae: 10_000,
            pretrain_steps_trs: 10_000,
            plateau_patience: 200,
            adv_steps: 10_000,
            critic_updates_per_gen: 1,
            update_embeddings: true,
            per_example_pattern: true,
            mask_after_eos: false,
            checkpoint_every: 1000,
            raw_pairs: None,
            raw_captions: None,
            caption_positives: 0,
            caption_negatives: 0,
            pretrained_embeddings: None,
            synonyms: None,
            test_pairs: None,
            eval_samples: 3,
            work_dir: PathBuf::from("run"),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value}: {e}")))
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "max_len" => self.max_len = parse(key, value)?,
            "min_freq" => self.min_freq = parse(key, value)?,
            "max_vocab" => self.max_vocab = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "hidden" => self.hidden = parse(key, value)?,
            "pattern_dim" => self.pattern_dim = parse(key, value)?,
            "critic_blocks" => self.critic_blocks = parse(key, value)?,
            "critic_layers" => self.critic_layers = parse(key, value)?,
            "critic_growth" => self.critic_growth = parse(key, value)?,
            "critic_mlp_hidden" => self.critic_mlp_hidden = parse(key, value)?,
            "leaky_slope" => self.leaky_slope = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "lr_gen" => self.lr_gen = parse(key, value)?,
            "lr_critic" => self.lr_critic = parse(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "lr_pretrain" => self.lr_pretrain = parse(key, value)?,
            "pretrain_beta1" => self.pretrain_beta1 = parse(key, value)?,
            "pretrain_beta2" => self.pretrain_beta2 = parse(key, value)?,
            "pretrain_steps_ae" => self.pretrain_steps_ae = parse(key, value)?,
            "pretrain_steps_trs" => self.pretrain_steps_trs = parse(key, value)?,
            "plateau_patience" => self.plateau_patience = parse(key, value)?,
            "adv_steps" => self.adv_steps = parse(key, value)?,
            "critic_updates_per_gen" => self.critic_updates_per_gen = parse(key, value)?,
            "update_embeddings" => self.update_embeddings = parse(key, value)?,
            "per_example_pattern" => self.per_example_pattern = parse(key, value)?,
            "mask_after_eos" => self.mask_after_eos = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "raw_pairs" => self.raw_pairs = opt_path(value),
            "raw_captions" => self.raw_captions = opt_path(value),
            "caption_positives" => self.caption_positives = parse(key, value)?,
            "caption_negatives" => self.caption_negatives = parse(key, value)?,
            "pretrained_embeddings" => self.pretrained_embeddings = opt_path(value),
            "synonyms" => self.synonyms = opt_path(value),
            "test_pairs" => self.test_pairs = opt_path(value),
            "eval_samples" => self.eval_samples = parse(key, value)?,
            "work_dir" => self.work_dir = PathBuf::from(value),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a config file; relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse_str(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.raw_pairs,
            &mut self.raw_captions,
            &mut self.pretrained_embeddings,
            &mut self.synonyms,
            &mut self.test_pairs,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut self.work_dir);
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("max_len", self.max_len),
            ("min_freq", self.min_freq),
            ("embed_dim", self.embed_dim),
            ("hidden", self.hidden),
            ("pattern_dim", self.pattern_dim),
            ("critic_blocks", self.critic_blocks),
            ("critic_layers", self.critic_layers),
            ("critic_growth", self.critic_growth),
            ("critic_mlp_hidden", self.critic_mlp_hidden),
            ("critic_updates_per_gen", self.critic_updates_per_gen),
            ("checkpoint_every", self.checkpoint_every),
            ("eval_samples", self.eval_samples),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if self.hidden % 2 != 0 {
            return Err(Error::Config("hidden must be even".into()));
        }
        if self.max_vocab <= crate::corpus::NUM_RESERVED {
            return Err(Error::Config("max_vocab must exceed the 4 reserved tokens".into()));
        }
        if self.critic_updates_per_gen > 5 {
            return Err(Error::Config("critic_updates_per_gen must be at most 5".into()));
        }
        for (k, v) in [
            ("tau", self.tau),
            ("lr_gen", self.lr_gen),
            ("lr_critic", self.lr_critic),
            ("lr_pretrain", self.lr_pretrain),
            ("grad_clip", self.grad_clip),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be positive, got {v}")));
            }
        }
        for (k, v) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
            ("pretrain_beta1", self.pretrain_beta1),
            ("pretrain_beta2", self.pretrain_beta2),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{k} must lie in [0, 1), got {v}")));
            }
        }
        self.losses().validate()
    }

    pub fn losses(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            beta: self.beta,
            lambda: self.lambda,
        }
    }

    pub fn seq(&self, vocab_size: usize) -> SeqConfig {
        SeqConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            hidden: self.hidden,
            pattern_dim: self.pattern_dim,
            max_len: self.max_len,
        }
    }

    pub fn critic(&self) -> CriticConfig {
        CriticConfig {
            hidden: self.hidden,
            blocks: self.critic_blocks,
            layers_per_block: self.critic_layers,
            growth: self.critic_growth,
            mlp_hidden: self.critic_mlp_hidden,
            classes: crate::critic::NUM_CLASSES,
            slope: self.leaky_slope,
        }
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("max_len", self.max_len.to_string());
        kv("min_freq", self.min_freq.to_string());
        kv("max_vocab", self.max_vocab.to_string());
        kv("embed_dim", self.embed_dim.to_string());
        kv("hidden", self.hidden.to_string());
        kv("pattern_dim", self.pattern_dim.to_string());
        kv("critic_blocks", self.critic_blocks.to_string());
        kv("critic_layers", self.critic_layers.to_string());
        kv("critic_growth", self.critic_growth.to_string());
        kv("critic_mlp_hidden", self.critic_mlp_hidden.to_string());
        kv("leaky_slope", self.leaky_slope.to_string());
        kv("tau", self.tau.to_string());
        kv("alpha", self.alpha.to_string());
        kv("beta", self.beta.to_string());
        kv("lambda", self.lambda.to_string());
        kv("lr_gen", self.lr_gen.to_string());
        kv("lr_critic", self.lr_critic.to_string());
        kv("adam_beta1", self.adam_beta1.to_string());
        kv("adam_beta2", self.adam_beta2.to_string());
        kv("grad_clip", self.grad_clip.to_string());
        kv("lr_pretrain", self.lr_pretrain.to_string());
        kv("pretrain_beta1", self.pretrain_beta1.to_string());
        kv("pretrain_beta2", self.pretrain_beta2.to_string());
        kv("pretrain_steps_ae", self.pretrain_steps_ae.to_string());
        kv("pretrain_steps_trs", self.pretrain_steps_trs.to_string());
        kv("plateau_patience", self.plateau_patience.to_string());
        kv("adv_steps", self.adv_steps.to_string());
        kv("critic_updates_per_gen", self.critic_updates_per_gen.to_string());
        kv("update_embeddings", self.update_embeddings.to_string());
        kv("per_example_pattern", self.per_example_pattern.to_string());
        kv("mask_after_eos", self.mask_after_eos.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("raw_pairs", show_path(&self.raw_pairs));
        kv("raw_captions", show_path(&self.raw_captions));
        kv("caption_positives", self.caption_positives.to_string());
        kv("caption_negatives", self.caption_negatives.to_string());
        kv("pretrained_embeddings", show_path(&self.pretrained_embeddings));
        kv("synonyms", show_path(&self.synonyms));
        kv("test_pairs", show_path(&self.test_pairs));
        kv("eval_samples", self.eval_samples.to_string());
        kv("work_dir", self.work_dir.display().to_string());
        s
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.work_dir.join("vocab.txt")
    }

    pub fn corpus_path(&self) -> PathBuf {
        self.work_dir.join("corpus.tsv")
    }

    pub fn pretrained_path(&self) -> PathBuf {
        self.work_dir.join("pretrained.ckpt")
    }

    pub fn final_path(&self) -> PathBuf {
        self.work_dir.join("final.ckpt")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.work_dir.join("metrics.tsv")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.beta = 0.25;
        cfg.mask_after_eos = true;
        cfg.synonyms = Some("syn.txt".into());
        assert_eq!(TrainConfig::parse_str(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn comments_and_errors() {
        let cfg = TrainConfig::parse_str("# run\nhidden = 16 # small\n\nseed=9\n").unwrap();
        assert_eq!((cfg.hidden, cfg.seed), (16, 9));
        let err = TrainConfig::parse_str("hiden = 16").unwrap_err().to_string();
        assert!(err.contains("hiden"), "{err}");
        assert!(TrainConfig::parse_str("tau = 0").is_err());
        assert!(TrainConfig::parse_str("beta = 1.5").is_err());
        assert!(TrainConfig::parse_str("hidden").is_err());
        assert!(TrainConfig::parse_str("critic_updates_per_gen = 6").is_err());
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "raw_pairs = data/pairs.tsv\nwork_dir = out\n").unwrap();
        let cfg = TrainConfig::load(&path).unwrap();
        assert_eq!(cfg.raw_pairs.unwrap(), dir.path().join("data/pairs.tsv"));
        assert_eq!(cfg.work_dir, dir.path().join("out"));
    }
}
