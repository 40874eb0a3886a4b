//! Sentence-level BLEU-4, ROUGE-N and METEOR-lite, plus average/best
//! reporting over several sampled paraphrases per input.
//!
//! All scores are on a 0–100 scale and are computed on content tokens only.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::corpus::{SentencePair, TokenId, Vocabulary};
use crate::error::{Error, Result};

pub const METRIC_NAMES: [&str; 4] = ["BLEU-4", "ROUGE-1", "ROUGE-2", "METEOR-lite"];

/// METEOR recall weight in `F_mean = 10PR / (R + 9P)`.
const METEOR_RECALL_WEIGHT: f64 = 9.0;
const METEOR_PENALTY: f64 = 0.5;
const METEOR_EXPONENT: i32 = 3;

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(|t| t.as_ref()).collect()).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and the number of hypothesis n-grams.
fn clipped_matches<S: AsRef<str>, R: AsRef<str>>(hyp: &[S], reference: &[R], n: usize) -> (usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matched = h
        .iter()
        .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, hyp.len().saturating_sub(n - 1))
}

/// Sentence BLEU-4 against one or more references. Clipping uses the
/// per-n-gram maximum over references; the brevity penalty uses the
/// reference length closest to the hypothesis (shorter wins ties). When any
/// match count for n ≥ 2 is zero, every n ≥ 2 precision is smoothed by
/// adding one to numerator and denominator. An empty hypothesis, or one
/// with no unigram match, scores 0.
pub fn bleu4<S: AsRef<str>, R: AsRef<str>>(hypothesis: &[S], references: &[Vec<R>]) -> f64 {
    if hypothesis.is_empty() || references.is_empty() {
        return 0.0;
    }
    let mut matched = [0usize; 4];
    let mut totals = [0usize; 4];
    for n in 1..=4 {
        let h = ngram_counts(hypothesis, n);
        let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
        for r in references {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        matched[n - 1] = h
            .iter()
            .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        totals[n - 1] = hypothesis.len().saturating_sub(n - 1);
    }
    if matched[0] == 0 {
        return 0.0;
    }
    let smooth = matched[1..].iter().any(|&m| m == 0);
    let mut log_sum = (matched[0] as f64 / totals[0] as f64).ln();
    for n in 1..4 {
        let (m, t) = if smooth {
            (matched[n] + 1, totals[n] + 1)
        } else {
            (matched[n], totals[n])
        };
        log_sum += (m as f64 / t as f64).ln();
    }
    let c = hypothesis.len();
    let r = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap_or(c);
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    (100.0 * bp * (log_sum / 4.0).exp()).clamp(0.0, 100.0)
}

/// ROUGE-N F1 (n ∈ {1, 2}) with clipped counts.
pub fn rouge_n<S: AsRef<str>, R: AsRef<str>>(hypothesis: &[S], reference: &[R], n: usize) -> Result<f64> {
    if !(1..=2).contains(&n) {
        return Err(Error::InvalidArgument(format!("ROUGE-{n} is not supported (n must be 1 or 2)")));
    }
    let (matched, hyp_total) = clipped_matches(hypothesis, reference, n);
    let ref_total = reference.len().saturating_sub(n - 1);
    if matched == 0 {
        return Ok(0.0);
    }
    let p = matched as f64 / hyp_total as f64;
    let r = matched as f64 / ref_total as f64;
    Ok((100.0 * 2.0 * p * r / (p + r)).clamp(0.0, 100.0))
}

/// Symmetric token → synonyms lookup.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SynonymTable {
    map: HashMap<String, HashSet<String>>,
}

impl SynonymTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, a: &str, b: &str) {
        if a == b {
            return;
        }
        self.map.entry(a.to_owned()).or_default().insert(b.to_owned());
        self.map.entry(b.to_owned()).or_default().insert(a.to_owned());
    }

    pub fn are_synonyms(&self, a: &str, b: &str) -> bool {
        self.map.get(a).is_some_and(|s| s.contains(b))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Parse lines of `token<TAB>syn1,syn2,…`. Blank lines and lines starting
    /// with `#` are skipped.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut table = SynonymTable::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (head, rest) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(path, n + 1, "expected token<TAB>synonyms"))?;
            let head = head.trim();
            if head.is_empty() {
                return Err(Error::parse(path, n + 1, "empty token"));
            }
            for syn in rest.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                table.add(head, syn);
            }
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

/// Suffix-stripping stemmer used by METEOR-lite.
pub fn stem(token: &str) -> String {
    let lower = token.to_lowercase();
    for suffix in ["ingly", "edly", "ing", "ies", "ed", "ly", "es", "s"] {
        if let Some(base) = lower.strip_suffix(suffix) {
            if base.chars().count() >= 3 {
                return if suffix == "ies" { format!("{base}y") } else { base.to_owned() };
            }
        }
    }
    lower
}

/// Unigram alignment as `(hypothesis index, reference index)` pairs, built in
/// three passes: exact, stem, synonym. Within a pass each hypothesis token
/// takes the reference position right after its predecessor's match when
/// possible, otherwise the earliest free one.
fn align<S: AsRef<str>, R: AsRef<str>>(
    hyp: &[S],
    reference: &[R],
    synonyms: Option<&SynonymTable>,
) -> Vec<(usize, usize)> {
    let hyp_stems: Vec<String> = hyp.iter().map(|t| stem(t.as_ref())).collect();
    let ref_stems: Vec<String> = reference.iter().map(|t| stem(t.as_ref())).collect();
    let mut hyp_to_ref: Vec<Option<usize>> = vec![None; hyp.len()];
    let mut ref_used = vec![false; reference.len()];
    for stage in 0..3 {
        for i in 0..hyp.len() {
            if hyp_to_ref[i].is_some() {
                continue;
            }
            let matches = |j: usize| -> bool {
                let (h, r) = (hyp[i].as_ref(), reference[j].as_ref());
                match stage {
                    0 => h == r,
                    1 => hyp_stems[i] == ref_stems[j],
                    _ => synonyms.is_some_and(|s| s.are_synonyms(h, r)),
                }
            };
            let preferred = i
                .checked_sub(1)
                .and_then(|p| hyp_to_ref[p])
                .map(|j| j + 1)
                .filter(|&j| j < reference.len() && !ref_used[j] && matches(j));
            let pick = preferred.or_else(|| (0..reference.len()).find(|&j| !ref_used[j] && matches(j)));
            if let Some(j) = pick {
                hyp_to_ref[i] = Some(j);
                ref_used[j] = true;
            }
        }
    }
    hyp_to_ref
        .iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| (i, j)))
        .collect()
}

/// METEOR with exact, stem and synonym-table matching and the classic
/// parameters: `F_mean · (1 − 0.5·(chunks/matches)³)`.
pub fn meteor_lite<S: AsRef<str>, R: AsRef<str>>(
    hypothesis: &[S],
    reference: &[R],
    synonyms: Option<&SynonymTable>,
) -> f64 {
    let alignment = align(hypothesis, reference, synonyms);
    let m = alignment.len();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / hypothesis.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f_mean = (1.0 + METEOR_RECALL_WEIGHT) * p * r / (r + METEOR_RECALL_WEIGHT * p);
    let chunks = 1 + alignment
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count();
    let penalty = METEOR_PENALTY * (chunks as f64 / m as f64).powi(METEOR_EXPONENT);
    (100.0 * f_mean * (1.0 - penalty)).clamp(0.0, 100.0)
}

/// All four scores of one hypothesis against one reference, in
/// [`METRIC_NAMES`] order.
pub fn score_all<S: AsRef<str>, R: AsRef<str>>(
    hypothesis: &[S],
    reference: &[R],
    synonyms: Option<&SynonymTable>,
) -> [f64; 4] {
    let reference_owned: Vec<&str> = reference.iter().map(|t| t.as_ref()).collect();
    [
        bleu4(hypothesis, std::slice::from_ref(&reference_owned)),
        rouge_n(hypothesis, reference, 1).unwrap_or(0.0),
        rouge_n(hypothesis, reference, 2).unwrap_or(0.0),
        meteor_lite(hypothesis, reference, synonyms),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricScore {
    pub name: &'static str,
    pub average: f64,
    pub best: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InputSamples {
    pub input: Vec<String>,
    pub reference: Vec<String>,
    pub samples: Vec<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub k: usize,
    pub metrics: Vec<MetricScore>,
    pub inputs: Vec<InputSamples>,
    /// Fraction of inputs with at least two distinct samples.
    pub distinct_ratio: f64,
    /// Samples that decoded to no content tokens (scored 0).
    pub empty_samples: usize,
}

impl EvalReport {
    pub fn metric(&self, name: &str) -> Option<&MetricScore> {
        self.metrics.iter().find(|m| m.name == name)
    }

    /// TSV with `#` header lines describing the run and scoring choices.
    pub fn to_tsv(&self, header: &[String]) -> String {
        let mut out = String::new();
        for line in header {
            let _ = writeln!(out, "# {line}");
        }
        let _ = writeln!(out, "# K={} inputs={}", self.k, self.inputs.len());
        let _ = writeln!(out, "# distinct_ratio={:.6}", self.distinct_ratio);
        if self.empty_samples > 0 {
            let _ = writeln!(out, "# warning: {} empty samples scored 0", self.empty_samples);
        }
        let _ = writeln!(out, "# BLEU-4: sentence level, single reference, add-1 smoothing for n>=2 when any count is zero");
        let _ = writeln!(
            out,
            "# METEOR-lite: exact, suffix-stripping stem and synonym-table matches (no WordNet); alpha=0.9 beta=3 gamma=0.5"
        );
        let _ = writeln!(out, "# average: mean over all samples; best: mean over inputs of the per-input maximum");
        out.push_str("metric\taverage\tbest\n");
        for m in &self.metrics {
            let _ = writeln!(out, "{}\t{:.4}\t{:.4}", m.name, m.average, m.best);
        }
        out
    }
}

/// Score `k` samples per test input. `readout(input, k)` returns the
/// sampled paraphrases as token ids; decoding stops at EOS and drops PAD.
pub fn evaluate_set<F>(
    mut readout: F,
    pairs: &[SentencePair],
    k: usize,
    vocab: &Vocabulary,
    synonyms: Option<&SynonymTable>,
) -> Result<EvalReport>
where
    F: FnMut(&[TokenId], usize) -> Result<Vec<Vec<TokenId>>>,
{
    if k == 0 {
        return Err(Error::InvalidArgument("need at least one sample per input".into()));
    }
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no test pairs to evaluate".into()));
    }
    let mut sum_avg = [0.0; 4];
    let mut sum_best = [0.0; 4];
    let mut inputs = Vec::with_capacity(pairs.len());
    let mut distinct = 0usize;
    let mut empty = 0usize;
    for pair in pairs {
        let outputs = readout(&pair.x, k)?;
        if outputs.len() != k {
            return Err(Error::Shape(format!("readout returned {} samples, expected {k}", outputs.len())));
        }
        let reference = vocab.decode(&pair.y);
        let samples: Vec<Vec<String>> = outputs.iter().map(|o| vocab.decode(o)).collect();
        let mut total = [0.0; 4];
        let mut best = [0.0f64; 4];
        for s in &samples {
            if s.is_empty() {
                empty += 1;
            }
            let scores = score_all(s, &reference, synonyms);
            for i in 0..4 {
                total[i] += scores[i];
                best[i] = best[i].max(scores[i]);
            }
        }
        for i in 0..4 {
            sum_avg[i] += (total[i] / k as f64).min(best[i]);
            sum_best[i] += best[i];
        }
        if samples.iter().collect::<HashSet<_>>().len() >= 2 {
            distinct += 1;
        }
        inputs.push(InputSamples {
            input: vocab.decode(&pair.x),
            reference,
            samples,
        });
    }
    let n = pairs.len() as f64;
    let metrics = METRIC_NAMES
        .iter()
        .enumerate()
        .map(|(i, &name)| MetricScore {
            name,
            average: sum_avg[i] / n,
            best: sum_best[i] / n,
        })
        .collect();
    Ok(EvalReport {
        k,
        metrics,
        inputs,
        distinct_ratio: distinct as f64 / n,
        empty_samples: empty,
    })
}
