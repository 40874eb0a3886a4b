//! Maximum-likelihood pretraining and the adversarial training loop.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use paragen_autodiff::{grad, Tensor};

use crate::checkpoint::save_checkpoint;
use crate::config::TrainConfig;
use crate::corpus::{Label, PairCorpus, SentencePair, TokenId, PAD};
use crate::critic::{build_feature_map, gradient_penalties, BoundCritic, CriticNet};
use crate::embeddings::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::losses::{
    combined_generator_objective_tensor, generator_loss_tensor, sequence_nll, token_count, token_nll,
};
use crate::optim::{clip_global_norm, Adam};
use crate::params::{group_of, ParamStore, Vars};
use crate::rng::{seeded, Rng};
use crate::seqnets::{sample_pattern, Generator, HiddenStates};

/// Architecture derived from a config and a vocabulary size.
#[derive(Clone, Debug)]
pub struct Model {
    pub generator: Generator,
    pub critic: CriticNet,
}

impl Model {
    pub fn new(cfg: &TrainConfig, vocab_size: usize) -> Self {
        Model {
            generator: Generator::new(cfg.seq(vocab_size)),
            critic: CriticNet::new(cfg.critic()),
        }
    }
}

/// Parameters, optimizer moments, progress counter and random stream.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub params: ParamStore,
    pub pretrain_opt: Adam,
    pub gen_opt: Adam,
    pub critic_opt: Adam,
    /// Adversarial steps completed.
    pub step: u64,
    pub rng: Rng,
}

impl ModelState {
    /// Fresh parameters; random embeddings unless a table is supplied.
    pub fn init(model: &Model, cfg: &TrainConfig, embeddings: Option<EmbeddingMatrix>) -> Result<Self> {
        let mut rng = seeded(cfg.seed);
        let mut params = ParamStore::new();
        let seq = &model.generator.cfg;
        let emb = match embeddings {
            Some(e) => {
                if e.matrix.dim() != (seq.vocab_size, seq.embed_dim) {
                    return Err(Error::Shape(format!(
                        "embedding table {:?}, model expects ({}, {})",
                        e.matrix.dim(),
                        seq.vocab_size,
                        seq.embed_dim
                    )));
                }
                e
            }
            None => EmbeddingMatrix::random(seq.vocab_size, seq.embed_dim, &mut rng),
        };
        params.insert("emb", emb.matrix);
        model.generator.init(&mut params, &mut rng);
        model.critic.init(&mut params, &mut rng);
        Ok(ModelState {
            params,
            pretrain_opt: Adam::new(cfg.lr_pretrain, cfg.pretrain_beta1, cfg.pretrain_beta2),
            gen_opt: Adam::new(cfg.lr_gen, cfg.adam_beta1, cfg.adam_beta2),
            critic_opt: Adam::new(cfg.lr_critic, cfg.adam_beta1, cfg.adam_beta2),
            step: 0,
            rng,
        })
    }
}

/// Parameter groups updated by the generator player.
pub fn generator_groups(cfg: &TrainConfig) -> Vec<&'static str> {
    let mut g = vec!["enc", "dec", "trs"];
    if cfg.update_embeddings {
        g.push("emb");
    }
    g
}

pub const CRITIC_GROUPS: [&str; 1] = ["critic"];

fn bind_groups(params: &ParamStore, groups: &[&str]) -> (Vars, Vec<String>) {
    let names = params.group_names(groups);
    let set: HashSet<&str> = groups.iter().copied().collect();
    (params.bind(|n| set.contains(group_of(n))), names)
}

/// Gradients of `loss` as plain arrays; the PAD embedding row gets none.
fn gradients(loss: &Tensor, vars: &Vars, names: &[String]) -> Vec<Array2<f64>> {
    grad(loss, &vars.tensors(names), false)
        .into_iter()
        .zip(names)
        .map(|(g, n)| {
            let mut g = g.value().clone();
            if n == "emb" {
                g.row_mut(PAD as usize).fill(0.0);
            }
            g
        })
        .collect()
}

fn check_finite(what: &str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite(format!("{what} is {value}")))
    }
}

fn pattern_batch(cfg: &TrainConfig, batch: usize, rng: &mut Rng) -> Array2<f64> {
    if cfg.per_example_pattern {
        sample_pattern(batch, cfg.pattern_dim, rng)
    } else {
        let z = sample_pattern(1, cfg.pattern_dim, rng);
        Array2::from_shape_fn((batch, cfg.pattern_dim), |(_, j)| z[[0, j]])
    }
}

/// Stops a loop once the loss has not improved on its best value for `patience` steps.
struct Plateau {
    best: f64,
    since: usize,
    patience: usize,
}

impl Plateau {
    fn new(patience: usize) -> Self {
        Plateau {
            best: f64::INFINITY,
            since: 0,
            patience,
        }
    }

    fn stalled(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.since = 0;
        } else {
            self.since += 1;
        }
        self.patience > 0 && self.since >= self.patience
    }
}

/// Teacher-forced reconstruction of both sides of sampled pairs; updates the
/// encoder, decoder and embeddings. Returns the per-token cross-entropy of
/// each step. Stops early once the loss plateaus.
pub fn pretrain_autoencoder(
    model: &Model,
    state: &mut ModelState,
    corpus: &PairCorpus,
    steps: usize,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let groups = ["enc", "dec", "emb"];
    let mut trace = Vec::with_capacity(steps);
    let mut plateau = Plateau::new(cfg.plateau_patience);
    for step in 0..steps {
        let batch = corpus.sample_any(cfg.batch_size, &mut state.rng)?;
        let seqs: Vec<Vec<TokenId>> = batch
            .iter()
            .map(|p| p.x.clone())
            .chain(batch.iter().map(|p| p.y.clone()))
            .collect();
        let (vars, names) = bind_groups(&state.params, &groups);
        let code = model.generator.encode(&vars, &seqs)?;
        let tf = model.generator.decode_teacher_forced(&vars, &code, &seqs)?;
        let loss = sequence_nll(&tf).sum().scale(1.0 / token_count(&tf) as f64);
        let value = check_finite(&format!("autoencoder loss at pretraining step {step}"), loss.item())?;
        let mut grads = gradients(&loss, &vars, &names);
        clip_global_norm(&mut grads, cfg.grad_clip);
        state.pretrain_opt.update(&mut state.params, &names, &grads)?;
        trace.push(value);
        if plateau.stalled(value) {
            break;
        }
    }
    Ok(trace)
}

/// Free-run Gumbel-softmax decoding of `trs(x | z)` scored by cross-entropy
/// against the paraphrase `y`; updates the transcoder and decoder.
pub fn pretrain_transcoder(
    model: &Model,
    state: &mut ModelState,
    corpus: &PairCorpus,
    steps: usize,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    if corpus.count(Label::Positive) == 0 {
        return Err(Error::InvalidArgument("transcoder pretraining needs positive pairs".into()));
    }
    let groups = ["trs", "dec"];
    let gen = &model.generator;
    let max_steps = gen.cfg.max_steps();
    let mut trace = Vec::with_capacity(steps);
    let mut plateau = Plateau::new(cfg.plateau_patience);
    for step in 0..steps {
        let batch = corpus.sample_batch(Label::Positive, cfg.batch_size, &mut state.rng)?;
        let n = batch.len();
        let xs: Vec<Vec<TokenId>> = batch.iter().map(|p| p.x.clone()).collect();
        let z = pattern_batch(cfg, n, &mut state.rng);
        let (vars, names) = bind_groups(&state.params, &groups);
        let code = gen.transcode(&vars, &xs, &z)?;
        let run = gen.decode_free_run(&vars, &code, cfg.tau, cfg.mask_after_eos, &mut state.rng)?;
        let targets = free_run_targets(&batch, n, max_steps);
        let count = targets.iter().filter(|&&t| t != PAD).count();
        let loss = token_nll(&run.logits, &targets, n)
            .sum()
            .scale(1.0 / count.max(1) as f64);
        let value = check_finite(&format!("transcoder loss at pretraining step {step}"), loss.item())?;
        let mut grads = gradients(&loss, &vars, &names);
        clip_global_norm(&mut grads, cfg.grad_clip);
        state.pretrain_opt.update(&mut state.params, &names, &grads)?;
        trace.push(value);
        if plateau.stalled(value) {
            break;
        }
    }
    Ok(trace)
}

/// Time-major paraphrase targets over a fixed rollout; steps past EOS are PAD.
fn free_run_targets(batch: &[SentencePair], n: usize, steps: usize) -> Vec<TokenId> {
    (0..steps * n)
        .map(|r| {
            let (t, b) = (r / n, r % n);
            let y = &batch[b].y;
            let len = crate::corpus::content_len(y) + 1;
            if t < len { y.get(t).copied().unwrap_or(PAD) } else { PAD }
        })
        .collect()
}

/// Per-step training diagnostics, in log column order.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepMetrics {
    pub w_pos: f64,
    pub w_neg: f64,
    pub l_g: f64,
    pub l_ae_p: f64,
    pub l_ae_n: f64,
    pub l_c: f64,
    pub penalty_p: f64,
    pub penalty_n: f64,
}

impl StepMetrics {
    pub const COLUMNS: [&'static str; 8] =
        ["W_pos", "W_neg", "L_g", "L_AE_p", "L_AE_n", "L_c", "penalty_p", "penalty_n"];

    pub fn values(&self) -> [f64; 8] {
        [
            self.w_pos,
            self.w_neg,
            self.l_g,
            self.l_ae_p,
            self.l_ae_n,
            self.l_c,
            self.penalty_p,
            self.penalty_n,
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }

    fn check(&self, step: u64) -> Result<()> {
        for (name, v) in Self::COLUMNS.iter().zip(self.values()) {
            check_finite(&format!("{name} at step {step}"), v)?;
        }
        Ok(())
    }
}

/// The graph of one adversarial iteration.
pub struct StepGraph {
    pub vars: Vars,
    pub w_pos: Tensor,
    pub w_neg: Tensor,
    pub l_g: Tensor,
    pub l_ae_p: Tensor,
    pub l_ae_n: Tensor,
    /// `L_g + ½(L_AE_p + L_AE_n)`.
    pub generator_objective: Tensor,
    pub penalty_p: Tensor,
    pub penalty_n: Tensor,
    /// Sum of both classes' critic losses.
    pub l_c: Tensor,
}

impl StepGraph {
    pub fn metrics(&self) -> StepMetrics {
        StepMetrics {
            w_pos: self.w_pos.item(),
            w_neg: self.w_neg.item(),
            l_g: self.l_g.item(),
            l_ae_p: self.l_ae_p.item(),
            l_ae_n: self.l_ae_n.item(),
            l_c: self.l_c.item(),
            penalty_p: self.penalty_p.item(),
            penalty_n: self.penalty_n.item(),
        }
    }
}

/// Forward pass of one iteration: transcode and free-run the positive
/// sources, reconstruct all four sentence sets, score generated and real
/// paraphrases against each class's source states, and add the gradient
/// penalties. Arrays whose group is in `track` are differentiable.
pub fn step_graph(
    model: &Model,
    params: &ParamStore,
    rng: &mut Rng,
    pos: &[SentencePair],
    neg: &[SentencePair],
    cfg: &TrainConfig,
    track: &[&str],
) -> Result<StepGraph> {
    let b = pos.len();
    if b == 0 || neg.len() != b {
        return Err(Error::Shape(format!(
            "positive and negative batches must be equal and nonempty ({b} vs {})",
            neg.len()
        )));
    }
    let gen = &model.generator;
    let (vars, _) = bind_groups(params, track);

    let xs_p: Vec<Vec<TokenId>> = pos.iter().map(|p| p.x.clone()).collect();
    let z = pattern_batch(cfg, b, rng);
    let code_t = gen.transcode(&vars, &xs_p, &z)?;
    let h_t = gen
        .decode_free_run(&vars, &code_t, cfg.tau, cfg.mask_after_eos, rng)?
        .hidden;

    let all: Vec<Vec<TokenId>> = [pos, neg]
        .iter()
        .flat_map(|set| {
            let xs = set.iter().map(|p| p.x.clone());
            let ys = set.iter().map(|p| p.y.clone());
            xs.collect::<Vec<_>>().into_iter().chain(ys.collect::<Vec<_>>())
        })
        .collect();
    let codes = gen.encode(&vars, &all)?;
    let tf = gen.decode_teacher_forced(&vars, &codes, &all)?;
    let nll = sequence_nll(&tf);
    let scale = 1.0 / b as f64;
    let l_ae_p = nll.slice_rows(0..2 * b).sum().scale(scale);
    let l_ae_n = nll.slice_rows(2 * b..4 * b).sum().scale(scale);

    let steps = h_t.steps.max(tf.hidden.steps);
    let h_t = h_t.pad_steps(steps);
    let h_x_p = tf.hidden.select(0..b);
    let h_y_p = tf.hidden.select(b..2 * b).pad_steps(steps);
    let h_x_n = tf.hidden.select(2 * b..3 * b);
    let h_y_n = tf.hidden.select(3 * b..4 * b).pad_steps(steps);

    let candidates = HiddenStates::concat_batch(&[&h_t, &h_y_p, &h_t, &h_y_n])?;
    let conditions = HiddenStates::concat_batch(&[&h_x_p, &h_x_p, &h_x_n, &h_x_n])?;
    let scores = model
        .critic
        .forward(&vars, &build_feature_map(&conditions, &candidates)?)?;
    let pos_col = scores.slice_cols(0..1);
    let neg_col = scores.slice_cols(1..2);
    let w_pos = pos_col
        .slice_rows(b..2 * b)
        .mean()
        .sub(&pos_col.slice_rows(0..b).mean());
    let w_neg = neg_col
        .slice_rows(3 * b..4 * b)
        .mean()
        .sub(&neg_col.slice_rows(2 * b..3 * b).mean());

    let l_g = generator_loss_tensor(&w_pos, &w_neg, cfg.alpha, cfg.beta);
    let generator_objective = combined_generator_objective_tensor(&l_g, &l_ae_p, &l_ae_n);

    let real = HiddenStates::concat_batch(&[&h_y_p, &h_y_n])?;
    let fake = HiddenStates::concat_batch(&[&h_t, &h_t])?;
    let cond = HiddenStates::concat_batch(&[&h_x_p, &h_x_n])?;
    let classes: Vec<usize> = (0..2 * b)
        .map(|k| if k < b { Label::Positive.index() } else { Label::Negative.index() })
        .collect();
    let critic = BoundCritic {
        net: &model.critic,
        vars: &vars,
    };
    let penalties = gradient_penalties(&critic, &real, &fake, &cond, &classes, rng)?;
    let penalty_p = penalties.slice_rows(0..b).mean();
    let penalty_n = penalties.slice_rows(b..2 * b).mean();
    let l_c = w_pos
        .neg()
        .add(&penalty_p.scale(cfg.lambda))
        .add(&w_neg.neg().add(&penalty_n.scale(cfg.lambda)));

    Ok(StepGraph {
        vars,
        w_pos,
        w_neg,
        l_g,
        l_ae_p,
        l_ae_n,
        generator_objective,
        penalty_p,
        penalty_n,
        l_c,
    })
}

fn critic_update(state: &mut ModelState, graph: &StepGraph) -> Result<()> {
    let names = state.params.group_names(&CRITIC_GROUPS);
    let grads = gradients(&graph.l_c, &graph.vars, &names);
    state.critic_opt.update(&mut state.params, &names, &grads)
}

/// One adversarial iteration. Extra critic-only updates (when
/// `critic_updates_per_gen > 1`) come first; the final pass updates the
/// generator on its combined objective and the critic on its loss, both
/// from the same forward pass. Returns the metrics of that pass.
pub fn train_step(
    model: &Model,
    state: &mut ModelState,
    pos: &[SentencePair],
    neg: &[SentencePair],
    cfg: &TrainConfig,
) -> Result<StepMetrics> {
    for _ in 1..cfg.critic_updates_per_gen {
        let graph = step_graph(model, &state.params, &mut state.rng, pos, neg, cfg, &CRITIC_GROUPS)?;
        graph.metrics().check(state.step)?;
        critic_update(state, &graph)?;
    }

    let gen_groups = generator_groups(cfg);
    let mut track = gen_groups.clone();
    track.extend(CRITIC_GROUPS);
    let graph = step_graph(model, &state.params, &mut state.rng, pos, neg, cfg, &track)?;
    let metrics = graph.metrics();
    metrics.check(state.step)?;

    let gen_names = state.params.group_names(&gen_groups);
    let mut gen_grads = gradients(&graph.generator_objective, &graph.vars, &gen_names);
    clip_global_norm(&mut gen_grads, cfg.grad_clip);
    let critic_names = state.params.group_names(&CRITIC_GROUPS);
    let critic_grads = gradients(&graph.l_c, &graph.vars, &critic_names);

    state.gen_opt.update(&mut state.params, &gen_names, &gen_grads)?;
    state.critic_opt.update(&mut state.params, &critic_names, &critic_grads)?;
    if let Some(emb) = state.params.get_mut("emb") {
        emb.row_mut(PAD as usize).fill(0.0);
    }
    state.step += 1;
    Ok(metrics)
}

/// Tab-separated metrics log with a header line.
pub struct MetricsLog {
    out: BufWriter<File>,
}

impl MetricsLog {
    pub const HEADER: &'static str = "step\tW_pos\tW_neg\tL_g\tL_AE_p\tL_AE_n\tL_c\tpenalty_p\tpenalty_n";

    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        writeln!(out, "{}", Self::HEADER).map_err(|e| Error::io(path, e))?;
        Ok(MetricsLog { out })
    }

    pub fn append(&mut self, step: u64, m: &StepMetrics) -> std::io::Result<()> {
        let cols: Vec<String> = m.values().iter().map(|v| format!("{v:.9e}")).collect();
        writeln!(self.out, "{step}\t{}", cols.join("\t"))?;
        self.out.flush()
    }
}

/// Read back a metrics log as `(step, metrics)` rows.
pub fn read_metrics_log(path: &Path) -> Result<Vec<(u64, StepMetrics)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 9 {
            return Err(Error::parse(path, n + 1, format!("expected 9 columns, got {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| Error::parse(path, n + 1, e.to_string()));
        let step = f[0].parse::<u64>().map_err(|e| Error::parse(path, n + 1, e.to_string()))?;
        rows.push((
            step,
            StepMetrics {
                w_pos: num(f[1])?,
                w_neg: num(f[2])?,
                l_g: num(f[3])?,
                l_ae_p: num(f[4])?,
                l_ae_n: num(f[5])?,
                l_c: num(f[6])?,
                penalty_p: num(f[7])?,
                penalty_n: num(f[8])?,
            },
        ));
    }
    Ok(rows)
}

/// Where [`train`] writes its side outputs.
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub dir: PathBuf,
    pub metrics: PathBuf,
    pub final_checkpoint: PathBuf,
}

impl TrainOutputs {
    pub fn in_dir(dir: &Path) -> Self {
        TrainOutputs {
            dir: dir.to_path_buf(),
            metrics: dir.join("metrics.tsv"),
            final_checkpoint: dir.join("final.ckpt"),
        }
    }

    pub fn checkpoint(&self, step: u64) -> PathBuf {
        self.dir.join(format!("checkpoint-{step:06}.ckpt"))
    }
}

/// `adv_steps` adversarial iterations on class-balanced batches. With
/// `outputs`, logs every step, checkpoints every `checkpoint_every` steps
/// and writes a final checkpoint.
pub fn train(
    model: &Model,
    state: &mut ModelState,
    corpus: &PairCorpus,
    cfg: &TrainConfig,
    outputs: Option<&TrainOutputs>,
) -> Result<Vec<StepMetrics>> {
    if cfg.adv_steps > 0 && (corpus.count(Label::Positive) == 0 || corpus.count(Label::Negative) == 0) {
        return Err(Error::InvalidArgument("adversarial training needs both pair classes".into()));
    }
    let mut log = match outputs {
        Some(o) => {
            std::fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
            Some(MetricsLog::create(&o.metrics)?)
        }
        None => None,
    };
    let meta = checkpoint_meta(cfg, model);
    let mut trace = Vec::with_capacity(cfg.adv_steps);
    for _ in 0..cfg.adv_steps {
        let pos = corpus.sample_batch(Label::Positive, cfg.batch_size, &mut state.rng)?;
        let neg = corpus.sample_batch(Label::Negative, cfg.batch_size, &mut state.rng)?;
        let m = train_step(model, state, &pos, &neg, cfg)?;
        if let (Some(log), Some(o)) = (log.as_mut(), outputs) {
            log.append(state.step, &m).map_err(|e| Error::io(&o.metrics, e))?;
            if state.step % cfg.checkpoint_every as u64 == 0 {
                save_checkpoint(state, &meta, &o.checkpoint(state.step))?;
            }
        }
        trace.push(m);
    }
    if let Some(o) = outputs {
        save_checkpoint(state, &meta, &o.final_checkpoint)?;
    }
    Ok(trace)
}

/// Metadata written into every checkpoint so it can be reloaded without
/// the original config.
pub fn checkpoint_meta(cfg: &TrainConfig, model: &Model) -> Vec<(String, String)> {
    vec![
        ("config".into(), cfg.to_text()),
        ("vocab_size".into(), model.generator.cfg.vocab_size.to_string()),
    ]
}

/// Per-token losses of both pretraining phases.
#[derive(Clone, Debug, Default)]
pub struct PretrainReport {
    pub autoencoder: Vec<f64>,
    pub transcoder: Vec<f64>,
}

/// Both pretraining phases with the configured step caps.
pub fn pretrain(
    model: &Model,
    state: &mut ModelState,
    corpus: &PairCorpus,
    cfg: &TrainConfig,
) -> Result<PretrainReport> {
    Ok(PretrainReport {
        autoencoder: pretrain_autoencoder(model, state, corpus, cfg.pretrain_steps_ae, cfg)?,
        transcoder: pretrain_transcoder(model, state, corpus, cfg.pretrain_steps_trs, cfg)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EOS;

    #[test]
    fn plateau_stops_after_patience() {
        let mut p = Plateau::new(2);
        assert!(!p.stalled(3.0));
        assert!(!p.stalled(2.0));
        assert!(!p.stalled(2.5));
        assert!(p.stalled(2.0));
        let mut off = Plateau::new(0);
        assert!((0..50).all(|_| !off.stalled(1.0)));
    }

    #[test]
    fn rollout_targets_cover_every_step() {
        let pair = |y: Vec<TokenId>| SentencePair {
            x: vec![EOS],
            y,
            label: Label::Positive,
        };
        let batch = vec![pair(vec![5, 6, EOS, PAD]), pair(vec![7, EOS, PAD, PAD])];
        let max_len = 20;
        let t = free_run_targets(&batch, 2, max_len + 1);
        assert_eq!(t.len(), 21 * 2);
        assert_eq!(&t[..6], &[5, 7, 6, EOS, EOS, PAD]);
        assert!(t[6..].iter().all(|&x| x == PAD));
    }
}
