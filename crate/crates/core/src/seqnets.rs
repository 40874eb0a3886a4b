//! Generator networks: sentence encoder, pattern-conditioned transcoder,
//! the shared GRU decoder, and the Gumbel-softmax relaxation.
//!
//! Batched sequences are stored time-major: row `t * batch + b` holds step
//! `t` of example `b`.

use std::ops::Range;
use std::rc::Rc;

use ndarray::Array2;
use paragen_autodiff::Tensor;
use rand_distr::{Distribution, Gumbel, StandardNormal};

use crate::corpus::{TokenId, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::params::{glorot, ParamStore, Vars};
use crate::rng::Rng;

pub const DEFAULT_HIDDEN: usize = 512;
pub const DEFAULT_PATTERN_DIM: usize = 128;
pub const DEFAULT_TAU: f64 = 0.5;

const MASKED_SCORE: f64 = -1e30;

/// Dimensions of the generator networks.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub pattern_dim: usize,
    pub max_len: usize,
}

impl SeqConfig {
    /// Free-run rollout length: `max_len` tokens plus EOS.
    pub fn max_steps(&self) -> usize {
        self.max_len + 1
    }
}

/// Decoder hidden states for a batch, zero rows past each example's length.
#[derive(Clone, Debug)]
pub struct HiddenStates {
    /// `(steps * batch) × width`, time-major.
    pub data: Tensor,
    pub steps: usize,
    pub batch: usize,
}

impl HiddenStates {
    pub fn new(data: Tensor, steps: usize, batch: usize) -> Result<Self> {
        if data.rows() != steps * batch {
            return Err(Error::Shape(format!(
                "{} rows cannot hold {steps} steps x {batch} examples",
                data.rows()
            )));
        }
        Ok(HiddenStates { data, steps, batch })
    }

    pub fn width(&self) -> usize {
        self.data.cols()
    }

    pub fn row(&self, step: usize, example: usize) -> usize {
        step * self.batch + example
    }

    /// Append zero steps up to `steps`.
    pub fn pad_steps(&self, steps: usize) -> HiddenStates {
        assert!(steps >= self.steps, "cannot pad {} steps down to {steps}", self.steps);
        if steps == self.steps {
            return self.clone();
        }
        let data = self.data.pad((steps * self.batch, self.width()), (0, 0));
        HiddenStates { data, steps, batch: self.batch }
    }

    /// Keep only the examples in `range`.
    pub fn select(&self, range: Range<usize>) -> HiddenStates {
        let n = range.len();
        let index: Rc<[usize]> = (0..self.steps)
            .flat_map(|t| range.clone().map(move |b| (t, b)))
            .map(|(t, b)| self.row(t, b))
            .collect();
        HiddenStates {
            data: self.data.gather_rows(index),
            steps: self.steps,
            batch: n,
        }
    }

    /// Stack along the batch axis; all parts must share the step count.
    pub fn concat_batch(parts: &[&HiddenStates]) -> Result<HiddenStates> {
        let steps = parts[0].steps;
        if parts.iter().any(|p| p.steps != steps || p.width() != parts[0].width()) {
            return Err(Error::Shape("hidden state batches differ in steps or width".into()));
        }
        let stacked = Tensor::concat_rows(&parts.iter().map(|p| p.data.clone()).collect::<Vec<_>>());
        let batch: usize = parts.iter().map(|p| p.batch).sum();
        let mut offsets = Vec::with_capacity(parts.len());
        let mut at = 0;
        for p in parts {
            offsets.push(at);
            at += p.data.rows();
        }
        let mut index = Vec::with_capacity(steps * batch);
        for t in 0..steps {
            for (p, off) in parts.iter().zip(&offsets) {
                index.extend((0..p.batch).map(|b| off + p.row(t, b)));
            }
        }
        Ok(HiddenStates {
            data: stacked.gather_rows(index.into()),
            steps,
            batch,
        })
    }

    /// One example's states as a `steps × width` array.
    pub fn example(&self, b: usize) -> Array2<f64> {
        let v = self.data.value();
        Array2::from_shape_fn((self.steps, self.width()), |(t, j)| v[[self.row(t, b), j]])
    }

    pub fn detach(&self) -> HiddenStates {
        HiddenStates {
            data: self.data.detach(),
            steps: self.steps,
            batch: self.batch,
        }
    }
}

struct Gru {
    w_ih: Tensor,
    w_hh: Tensor,
    b_ih: Tensor,
    b_hh: Tensor,
    hidden: usize,
}

impl Gru {
    fn init(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut Rng) {
        store.insert(format!("{prefix}.w_ih"), glorot(input, 3 * hidden, rng));
        store.insert(format!("{prefix}.w_hh"), glorot(hidden, 3 * hidden, rng));
        store.insert(format!("{prefix}.b_ih"), Array2::zeros((1, 3 * hidden)));
        store.insert(format!("{prefix}.b_hh"), Array2::zeros((1, 3 * hidden)));
    }

    fn bind(vars: &Vars, prefix: &str) -> Self {
        let w_hh = vars.get(&format!("{prefix}.w_hh")).clone();
        let hidden = w_hh.rows();
        Gru {
            w_ih: vars.get(&format!("{prefix}.w_ih")).clone(),
            w_hh,
            b_ih: vars.get(&format!("{prefix}.b_ih")).clone(),
            b_hh: vars.get(&format!("{prefix}.b_hh")).clone(),
            hidden,
        }
    }

    /// Input-side gate pre-activations for all rows at once.
    fn project(&self, x: &Tensor) -> Tensor {
        x.matmul(&self.w_ih).add(&self.b_ih)
    }

    fn step(&self, gx: &Tensor, h: &Tensor) -> Tensor {
        let hd = self.hidden;
        let gh = h.matmul(&self.w_hh).add(&self.b_hh);
        let rz = gx
            .slice_cols(0..2 * hd)
            .add(&gh.slice_cols(0..2 * hd))
            .sigmoid();
        let r = rz.slice_cols(0..hd);
        let z = rz.slice_cols(hd..2 * hd);
        let n = gx
            .slice_cols(2 * hd..3 * hd)
            .add(&r.mul(&gh.slice_cols(2 * hd..3 * hd)))
            .tanh();
        n.add(&z.mul(&h.sub(&n)))
    }
}

/// Steps through EOS, or the whole sequence when it has no EOS.
fn effective_len(ids: &[TokenId]) -> usize {
    ids.iter().position(|&i| i == EOS).map_or(ids.len(), |p| p + 1)
}

fn token_at(ids: &[TokenId], t: usize) -> TokenId {
    ids.get(t).copied().unwrap_or(PAD)
}

/// Two-layer bidirectional GRU with additive self-attention pooling.
///
/// Used both as the auto-encoder's encoder and, with the pattern embedding
/// appended to every input step, as the transcoder.
#[derive(Clone, Debug)]
pub struct SentenceEncoder {
    pub prefix: String,
    pub embed_dim: usize,
    pub pattern_dim: usize,
    pub hidden: usize,
    pub layers: usize,
}

impl SentenceEncoder {
    pub fn encoder(cfg: &SeqConfig) -> Self {
        SentenceEncoder {
            prefix: "enc".into(),
            embed_dim: cfg.embed_dim,
            pattern_dim: 0,
            hidden: cfg.hidden,
            layers: 2,
        }
    }

    pub fn transcoder(cfg: &SeqConfig) -> Self {
        SentenceEncoder {
            prefix: "trs".into(),
            embed_dim: cfg.embed_dim,
            pattern_dim: cfg.pattern_dim,
            hidden: cfg.hidden,
            layers: 2,
        }
    }

    /// Width of one input step: token embedding plus pattern embedding.
    pub fn input_dim(&self) -> usize {
        self.embed_dim + self.pattern_dim
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        assert!(self.hidden % 2 == 0, "hidden width must be even (two directions)");
        let half = self.hidden / 2;
        let p = &self.prefix;
        for layer in 0..self.layers {
            let input = if layer == 0 { self.input_dim() } else { self.hidden };
            for dir in ["fwd", "bwd"] {
                Gru::init(store, &format!("{p}.l{layer}.{dir}"), input, half, rng);
            }
        }
        store.insert(format!("{p}.att.w"), glorot(self.hidden, self.hidden, rng));
        store.insert(format!("{p}.att.b"), Array2::zeros((1, self.hidden)));
        store.insert(format!("{p}.att.v"), glorot(self.hidden, 1, rng));
        store.insert(format!("{p}.proj.w"), glorot(self.hidden, self.hidden, rng));
        store.insert(format!("{p}.proj.b"), Array2::zeros((1, self.hidden)));
    }

    /// Latent codes (`batch × hidden`) for a batch of token sequences.
    /// `pattern` must be given (`batch × pattern_dim`) exactly when this is a transcoder.
    pub fn forward(
        &self,
        vars: &Vars,
        emb: &Tensor,
        ids: &[Vec<TokenId>],
        pattern: Option<&Array2<f64>>,
    ) -> Result<Tensor> {
        let batch = ids.len();
        if batch == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if ids.iter().any(|s| s.is_empty()) {
            return Err(Error::InvalidArgument("cannot encode a length-0 sequence".into()));
        }
        let lens: Vec<usize> = ids.iter().map(|s| effective_len(s)).collect();
        let steps = *lens.iter().max().unwrap();

        let index: Rc<[usize]> = (0..steps)
            .flat_map(|t| ids.iter().map(move |s| token_at(s, t) as usize))
            .collect();
        let mut x = emb.gather_rows(index);
        match (pattern, self.pattern_dim) {
            (None, 0) => {}
            (Some(z), d) if d > 0 => {
                if z.dim() != (batch, d) {
                    return Err(Error::Shape(format!(
                        "pattern embedding {:?}, expected ({batch}, {d})",
                        z.dim()
                    )));
                }
                let rows: Rc<[usize]> = (0..steps).flat_map(|_| 0..batch).collect();
                let z = Tensor::constant(z.clone()).gather_rows(rows);
                x = Tensor::concat_cols(&[x, z]);
            }
            (Some(_), _) => {
                return Err(Error::InvalidArgument(format!("{} takes no pattern embedding", self.prefix)))
            }
            (None, _) => {
                return Err(Error::InvalidArgument(format!("{} needs a pattern embedding", self.prefix)))
            }
        }

        let masks: Vec<Tensor> = (0..steps)
            .map(|t| {
                Tensor::constant(Array2::from_shape_fn((batch, 1), |(b, _)| {
                    if t < lens[b] { 1.0 } else { 0.0 }
                }))
            })
            .collect();

        let p = &self.prefix;
        for layer in 0..self.layers {
            let mut dirs = Vec::with_capacity(2);
            for (dir, reverse) in [("fwd", false), ("bwd", true)] {
                let gru = Gru::bind(vars, &format!("{p}.l{layer}.{dir}"));
                let gx = gru.project(&x);
                let mut h = Tensor::zeros((batch, gru.hidden));
                let mut outs: Vec<Option<Tensor>> = vec![None; steps];
                let order: Box<dyn Iterator<Item = usize>> =
                    if reverse { Box::new((0..steps).rev()) } else { Box::new(0..steps) };
                for t in order {
                    let next = gru.step(&gx.slice_rows(t * batch..(t + 1) * batch), &h);
                    h = next.blend(&h, &masks[t]);
                    outs[t] = Some(h.clone());
                }
                let outs: Vec<Tensor> = outs.into_iter().map(Option::unwrap).collect();
                dirs.push(Tensor::concat_rows(&outs));
            }
            x = Tensor::concat_cols(&dirs);
        }

        // Additive self-attention over the top layer, zero weight at PAD.
        let scores = x
            .matmul(vars.get(&format!("{p}.att.w")))
            .add(vars.get(&format!("{p}.att.b")))
            .tanh()
            .matmul(vars.get(&format!("{p}.att.v")))
            .reshape((steps, batch))
            .t();
        let bias = Tensor::constant(Array2::from_shape_fn((batch, steps), |(b, t)| {
            if t < lens[b] { 0.0 } else { MASKED_SCORE }
        }));
        let weights = scores.add(&bias).softmax_rows();
        let weighted = x.mul(&weights.t().reshape((steps * batch, 1)));
        let pool = Tensor::constant(Array2::from_shape_fn((batch, steps * batch), |(b, r)| {
            if r % batch == b { 1.0 } else { 0.0 }
        }));
        Ok(pool
            .matmul(&weighted)
            .matmul(vars.get(&format!("{p}.proj.w")))
            .add(vars.get(&format!("{p}.proj.b"))))
    }
}

/// Teacher-forced decoding output.
pub struct TeacherForced {
    /// `(steps * batch) × V` unnormalised scores.
    pub logits: Tensor,
    pub hidden: HiddenStates,
    /// Target id for each logit row (PAD where nothing is predicted).
    pub targets: Vec<TokenId>,
}

/// Free-run decoding output.
pub struct FreeRun {
    /// One `batch × V` Gumbel-softmax row block per step.
    pub simplex: Vec<Tensor>,
    /// `(steps * batch) × V` scores before the Gumbel perturbation.
    pub logits: Tensor,
    pub hidden: HiddenStates,
}

/// Single-layer GRU decoder shared by the auto-encoder and the paraphrase path.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub embed_dim: usize,
    pub hidden: usize,
    pub vocab_size: usize,
}

impl Decoder {
    pub fn new(cfg: &SeqConfig) -> Self {
        Decoder {
            embed_dim: cfg.embed_dim,
            hidden: cfg.hidden,
            vocab_size: cfg.vocab_size,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        Gru::init(store, "dec.gru", self.embed_dim, self.hidden, rng);
        store.insert("dec.out.w", glorot(self.hidden, self.vocab_size, rng));
        store.insert("dec.out.b", Array2::zeros((1, self.vocab_size)));
    }

    fn check_code(&self, code: &Tensor) -> Result<()> {
        if code.cols() != self.hidden {
            return Err(Error::Shape(format!(
                "latent code width {} != decoder hidden {}",
                code.cols(),
                self.hidden
            )));
        }
        Ok(())
    }

    fn readout(&self, vars: &Vars, h: &Tensor) -> Tensor {
        h.matmul(vars.get("dec.out.w")).add(vars.get("dec.out.b"))
    }

    /// Ground-truth previous tokens as inputs; the code is the initial state.
    pub fn teacher_forced(
        &self,
        vars: &Vars,
        emb: &Tensor,
        code: &Tensor,
        targets: &[Vec<TokenId>],
    ) -> Result<TeacherForced> {
        self.check_code(code)?;
        let batch = targets.len();
        if code.rows() != batch {
            return Err(Error::Shape(format!("{} codes for {batch} targets", code.rows())));
        }
        let lens: Vec<usize> = targets.iter().map(|s| effective_len(s)).collect();
        let steps = lens.iter().copied().max().unwrap_or(0);
        if steps == 0 {
            return Err(Error::InvalidArgument("empty target".into()));
        }
        let index: Rc<[usize]> = (0..steps)
            .flat_map(|t| {
                targets
                    .iter()
                    .map(move |s| if t == 0 { BOS } else { token_at(s, t - 1) } as usize)
            })
            .collect();
        let gru = Gru::bind(vars, "dec.gru");
        let gx = gru.project(&emb.gather_rows(index));
        let mut h = code.clone();
        let mut hs = Vec::with_capacity(steps);
        for t in 0..steps {
            h = gru.step(&gx.slice_rows(t * batch..(t + 1) * batch), &h);
            hs.push(h.clone());
        }
        let all = Tensor::concat_rows(&hs);
        let logits = self.readout(vars, &all);
        let valid = Array2::from_shape_fn((steps * batch, 1), |(r, _)| {
            if r / batch < lens[r % batch] { 1.0 } else { 0.0 }
        });
        let targets_tm = (0..steps * batch)
            .map(|r| {
                let (t, b) = (r / batch, r % batch);
                if t < lens[b] { token_at(&targets[b], t) } else { PAD }
            })
            .collect();
        Ok(TeacherForced {
            logits,
            hidden: HiddenStates::new(all.mul(&Tensor::constant(valid)), steps, batch)?,
            targets: targets_tm,
        })
    }

    /// Feed each step's Gumbel-softmax output (as a soft embedding) into the
    /// next step for exactly `max_steps` steps.
    ///
    /// With `mask_after_eos`, recorded hidden states are scaled by the
    /// probability that no EOS has been emitted at an earlier step, which
    /// mirrors the zero rows of teacher-forced sequences.
    #[allow(clippy::too_many_arguments)]
    pub fn free_run(
        &self,
        vars: &Vars,
        emb: &Tensor,
        code: &Tensor,
        tau: f64,
        max_steps: usize,
        mask_after_eos: bool,
        rng: &mut Rng,
    ) -> Result<FreeRun> {
        self.check_code(code)?;
        check_tau(tau)?;
        let batch = code.rows();
        let gru = Gru::bind(vars, "dec.gru");
        let mut x = emb.gather_rows(vec![BOS as usize; batch].into());
        let mut h = code.clone();
        let mut alive: Option<Tensor> = None;
        let (mut simplex, mut logits, mut hs) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..max_steps {
            h = gru.step(&gru.project(&x), &h);
            let l = self.readout(vars, &h);
            let noise = sample_gumbel((batch, self.vocab_size), rng);
            let y = gumbel_softmax_rows(&l, &noise, tau);
            x = y.matmul(emb);
            hs.push(match &alive {
                Some(a) if mask_after_eos => h.mul(a),
                _ => h.clone(),
            });
            if mask_after_eos {
                let keep = y.slice_cols(EOS as usize..EOS as usize + 1).neg().offset(1.0);
                alive = Some(match alive {
                    Some(a) => a.mul(&keep),
                    None => keep,
                });
            }
            logits.push(l);
            simplex.push(y);
        }
        Ok(FreeRun {
            simplex,
            logits: Tensor::concat_rows(&logits),
            hidden: HiddenStates::new(Tensor::concat_rows(&hs), max_steps, batch)?,
        })
    }

    /// Argmax decoding (lowest id wins ties); each output stops after its first EOS.
    pub fn greedy(
        &self,
        vars: &Vars,
        emb: &Tensor,
        code: &Tensor,
        max_steps: usize,
    ) -> Result<Vec<Vec<TokenId>>> {
        self.check_code(code)?;
        let batch = code.rows();
        let gru = Gru::bind(vars, "dec.gru");
        let mut prev = vec![BOS; batch];
        let mut h = code.detach();
        let mut out: Vec<Vec<TokenId>> = vec![Vec::new(); batch];
        let mut done = vec![false; batch];
        for _ in 0..max_steps {
            let x = emb.gather_rows(prev.iter().map(|&i| i as usize).collect());
            h = gru.step(&gru.project(&x), &h).detach();
            let l = self.readout(vars, &h);
            for (b, row) in l.value().rows().into_iter().enumerate() {
                let id = argmax(row.iter().copied()) as TokenId;
                prev[b] = id;
                if !done[b] {
                    out[b].push(id);
                    done[b] = id == EOS;
                }
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(out)
    }
}

/// Index of the largest value; the first one on ties.
pub fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")))
    }
}

/// `softmax((logits + noise) / tau)` for a single vector of logits.
///
/// Logits stand in for log-probabilities; softmax is shift invariant so the
/// normalising constant does not matter.
pub fn gumbel_softmax(logits: &[f64], tau: f64, noise: &[f64]) -> Result<Vec<f64>> {
    check_tau(tau)?;
    if logits.len() != noise.len() || logits.is_empty() {
        return Err(Error::Shape(format!(
            "{} logits vs {} noise values",
            logits.len(),
            noise.len()
        )));
    }
    let scaled: Vec<f64> = logits.iter().zip(noise).map(|(l, g)| (l + g) / tau).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Differentiable row-wise Gumbel-softmax with fixed noise.
pub fn gumbel_softmax_rows(logits: &Tensor, noise: &Array2<f64>, tau: f64) -> Tensor {
    logits
        .add(&Tensor::constant(noise.clone()))
        .scale(1.0 / tau)
        .softmax_rows()
}

pub fn sample_gumbel(shape: (usize, usize), rng: &mut Rng) -> Array2<f64> {
    let g = Gumbel::new(0.0, 1.0).expect("valid Gumbel");
    Array2::from_shape_fn(shape, |_| g.sample(rng))
}

/// I.i.d. standard normal pattern embeddings, one row per example.
pub fn sample_pattern(batch: usize, dim: usize, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_fn((batch, dim), |_| StandardNormal.sample(rng))
}

/// Encoder, transcoder and decoder with a shared configuration.
#[derive(Clone, Debug)]
pub struct Generator {
    pub cfg: SeqConfig,
    pub encoder: SentenceEncoder,
    pub transcoder: SentenceEncoder,
    pub decoder: Decoder,
}

impl Generator {
    pub fn new(cfg: SeqConfig) -> Self {
        Generator {
            encoder: SentenceEncoder::encoder(&cfg),
            transcoder: SentenceEncoder::transcoder(&cfg),
            decoder: Decoder::new(&cfg),
            cfg,
        }
    }

    /// Initialise every generator array except the embedding table.
    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        self.encoder.init(store, rng);
        self.transcoder.init(store, rng);
        self.decoder.init(store, rng);
    }

    pub fn encode(&self, vars: &Vars, ids: &[Vec<TokenId>]) -> Result<Tensor> {
        self.encoder.forward(vars, vars.get("emb"), ids, None)
    }

    pub fn transcode(&self, vars: &Vars, ids: &[Vec<TokenId>], z: &Array2<f64>) -> Result<Tensor> {
        self.transcoder.forward(vars, vars.get("emb"), ids, Some(z))
    }

    pub fn decode_teacher_forced(
        &self,
        vars: &Vars,
        code: &Tensor,
        targets: &[Vec<TokenId>],
    ) -> Result<TeacherForced> {
        self.decoder.teacher_forced(vars, vars.get("emb"), code, targets)
    }

    pub fn decode_free_run(
        &self,
        vars: &Vars,
        code: &Tensor,
        tau: f64,
        mask_after_eos: bool,
        rng: &mut Rng,
    ) -> Result<FreeRun> {
        self.decoder.free_run(
            vars,
            vars.get("emb"),
            code,
            tau,
            self.cfg.max_steps(),
            mask_after_eos,
            rng,
        )
    }

    pub fn greedy_decode(&self, vars: &Vars, code: &Tensor) -> Result<Vec<Vec<TokenId>>> {
        self.decoder.greedy(vars, vars.get("emb"), code, self.cfg.max_steps())
    }

    /// `k` paraphrases of every input, one fresh pattern embedding per sample.
    pub fn paraphrase(
        &self,
        vars: &Vars,
        inputs: &[Vec<TokenId>],
        k: usize,
        rng: &mut Rng,
    ) -> Result<Vec<Vec<Vec<TokenId>>>> {
        let mut out = vec![Vec::with_capacity(k); inputs.len()];
        for _ in 0..k {
            let z = sample_pattern(inputs.len(), self.cfg.pattern_dim, rng);
            let code = self.transcode(vars, inputs, &z)?;
            for (slot, ids) in out.iter_mut().zip(self.greedy_decode(vars, &code)?) {
                slot.push(ids);
            }
        }
        Ok(out)
    }
}
