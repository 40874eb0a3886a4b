//! Paraphrase pair corpora: tokenization, vocabulary, loading and batching.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{seeded, Rng};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const NUM_RESERVED: usize = 4;
pub const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Longest sentence (in content tokens) kept by default.
pub const DEFAULT_MAX_LEN: usize = 20;

/// Lowercase, split punctuation into its own tokens, split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut spaced = String::with_capacity(text.len() + 8);
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_ascii_punctuation() {
            spaced.push(' ');
            spaced.push(c);
            spaced.push(' ');
        } else {
            spaced.push(c);
        }
    }
    spaced.split_whitespace().map(str::to_owned).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, TokenId>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Only the reserved tokens.
    pub fn reserved() -> Self {
        Self::from_content_tokens(Vec::<String>::new())
    }

    fn from_content_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let id_to_token: Vec<String> = RESERVED_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(tokens)
            .collect();
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Vocabulary {
            token_to_id,
            id_to_token,
        }
    }

    /// Count tokens, keep those seen at least `min_freq` times, most frequent
    /// first (ties lexicographic), capped so the total size is `max_size`.
    pub fn build<S: AsRef<str>>(
        sentences: &[Vec<S>],
        min_freq: usize,
        max_size: usize,
    ) -> Result<Self> {
        if sentences.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if min_freq == 0 {
            return Err(Error::InvalidArgument("min_freq must be at least 1".into()));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in sentences {
            for t in s {
                let t = t.as_ref();
                if RESERVED_TOKENS.contains(&t) {
                    continue;
                }
                *counts.entry(t).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_freq).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        kept.truncate(max_size.saturating_sub(NUM_RESERVED));
        Ok(Self::from_content_tokens(kept.into_iter().map(|(t, _)| t.to_owned())))
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.id_to_token[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Map to ids, truncate to `max_len` content tokens, append EOS and pad
    /// with PAD to width `max_len + 1`.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S], max_len: usize) -> Vec<TokenId> {
        let mut ids: Vec<TokenId> = tokens
            .iter()
            .take(max_len)
            .map(|t| self.id(t.as_ref()))
            .collect();
        ids.push(EOS);
        ids.resize(max_len + 1, PAD);
        ids
    }

    /// Content tokens up to the first EOS; BOS and PAD are skipped.
    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.token(i).to_owned())
            .collect()
    }

    /// One token per line, in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.id_to_token {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<&str> = text.lines().collect();
        if tokens.len() < NUM_RESERVED || tokens[..NUM_RESERVED] != RESERVED_TOKENS {
            return Err(Error::parse(path, 1, "vocabulary must start with the reserved tokens"));
        }
        let mut seen = HashSet::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || !seen.insert(*t) {
                return Err(Error::parse(path, i + 1, format!("empty or duplicate token {t:?}")));
            }
        }
        Ok(Self::from_content_tokens(
            tokens[NUM_RESERVED..].iter().map(|t| t.to_string()),
        ))
    }
}

/// Number of content tokens (before EOS) in an encoded sentence.
pub fn content_len(ids: &[TokenId]) -> usize {
    ids.iter().position(|&i| i == EOS).unwrap_or(ids.len())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Positive, Label::Negative];

    /// Critic output column for this class.
    pub fn index(self) -> usize {
        match self {
            Label::Positive => 0,
            Label::Negative => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentencePair {
    pub x: Vec<TokenId>,
    pub y: Vec<TokenId>,
    pub label: Label,
}

impl SentencePair {
    /// EOS present, PAD only after it, all ids below `vocab_size`.
    pub fn is_well_formed(&self, vocab_size: usize) -> bool {
        [&self.x, &self.y].iter().all(|s| well_formed(s, vocab_size))
    }
}

pub fn well_formed(ids: &[TokenId], vocab_size: usize) -> bool {
    let Some(eos) = ids.iter().position(|&i| i == EOS) else {
        return false;
    };
    ids.iter().all(|&i| (i as usize) < vocab_size)
        && ids[..eos].iter().all(|&i| i != PAD && i != BOS)
        && ids[eos + 1..].iter().all(|&i| i == PAD)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CorpusStats {
    pub positive: usize,
    pub negative: usize,
    pub dropped: usize,
}

#[derive(Clone, Debug, Default)]
pub struct PairCorpus {
    pairs: Vec<SentencePair>,
    by_label: [Vec<usize>; 2],
    stats: CorpusStats,
}

impl PairCorpus {
    pub fn new(pairs: Vec<SentencePair>, dropped: usize) -> Self {
        let mut by_label = [Vec::new(), Vec::new()];
        for (i, p) in pairs.iter().enumerate() {
            by_label[p.label.index()].push(i);
        }
        let stats = CorpusStats {
            positive: by_label[0].len(),
            negative: by_label[1].len(),
            dropped,
        };
        PairCorpus {
            pairs,
            by_label,
            stats,
        }
    }

    pub fn pairs(&self) -> &[SentencePair] {
        &self.pairs
    }

    pub fn stats(&self) -> &CorpusStats {
        &self.stats
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn with_label(&self, label: Label) -> impl Iterator<Item = &SentencePair> {
        self.by_label[label.index()].iter().map(|&i| &self.pairs[i])
    }

    pub fn count(&self, label: Label) -> usize {
        self.by_label[label.index()].len()
    }

    /// Uniform draw with replacement from one class.
    pub fn sample_batch(&self, label: Label, batch_size: usize, rng: &mut Rng) -> Result<Vec<SentencePair>> {
        let idx = &self.by_label[label.index()];
        if idx.is_empty() {
            return Err(Error::InvalidArgument(format!("no {label:?} pairs to sample from")));
        }
        Ok((0..batch_size)
            .map(|_| self.pairs[idx[rng.random_range(0..idx.len())]].clone())
            .collect())
    }

    /// Uniform draw with replacement over every pair regardless of class.
    pub fn sample_any(&self, batch_size: usize, rng: &mut Rng) -> Result<Vec<SentencePair>> {
        if self.pairs.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok((0..batch_size)
            .map(|_| self.pairs[rng.random_range(0..self.pairs.len())].clone())
            .collect())
    }

    /// Tab-separated id lists plus a 0/1 label, one pair per line.
    pub fn save_encoded(&self, path: &Path) -> Result<()> {
        let join = |s: &[TokenId]| s.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ");
        let mut out = Vec::new();
        for p in &self.pairs {
            let label = if p.label == Label::Positive { 1 } else { 0 };
            writeln!(out, "{}\t{}\t{}", join(&p.x), join(&p.y), label).expect("write to Vec");
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Read a file written by [`PairCorpus::save_encoded`].
pub fn load_encoded(path: &Path, vocab_size: usize) -> Result<PairCorpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = |msg: &str| Error::parse(path, n + 1, msg);
        if fields.len() != 3 {
            return Err(bad("expected `ids<TAB>ids<TAB>0|1`"));
        }
        let ids = |s: &str| -> Result<Vec<TokenId>> {
            s.split_whitespace()
                .map(|t| t.parse::<TokenId>().map_err(|e| bad(&e.to_string())))
                .collect()
        };
        let pair = SentencePair {
            x: ids(fields[0])?,
            y: ids(fields[1])?,
            label: parse_label(fields[2]).ok_or_else(|| bad("label must be 0 or 1"))?,
        };
        if !pair.is_well_formed(vocab_size) {
            return Err(bad("malformed token sequence"));
        }
        pairs.push(pair);
    }
    Ok(PairCorpus::new(pairs, 0))
}

fn parse_label(s: &str) -> Option<Label> {
    match s.trim() {
        "1" => Some(Label::Positive),
        "0" => Some(Label::Negative),
        _ => None,
    }
}

/// Read a `sentence1 \t sentence2 \t label` file. Pairs where either side has
/// more than `max_len` tokens are dropped and counted.
pub fn load_pair_corpus(path: &Path, vocab: &Vocabulary, max_len: usize) -> Result<PairCorpus> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    let mut dropped = 0;
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let label = match fields.as_slice() {
            [_, _, l] => parse_label(l),
            _ => None,
        };
        let Some(label) = label else {
            return Err(Error::parse(
                path,
                n + 1,
                "expected `sentence1<TAB>sentence2<TAB>0|1`",
            ));
        };
        let (x, y) = (tokenize(fields[0]), tokenize(fields[1]));
        if x.len() > max_len || y.len() > max_len {
            dropped += 1;
            continue;
        }
        pairs.push(SentencePair {
            x: vocab.encode(&x, max_len),
            y: vocab.encode(&y, max_len),
            label,
        });
    }
    Ok(PairCorpus::new(pairs, dropped))
}

/// Tokenized sentences of a pair file, for vocabulary building.
pub fn read_pair_sentences(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::parse(path, n + 1, "expected three tab-separated fields"));
        }
        out.push(tokenize(fields[0]));
        out.push(tokenize(fields[1]));
    }
    Ok(out)
}

/// Read `image_id \t caption` lines into groups, in order of first appearance.
pub fn load_caption_groups(path: &Path) -> Result<Vec<Vec<Vec<String>>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut order: Vec<Vec<Vec<String>>> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let Some((id, caption)) = line.split_once('\t') else {
            return Err(Error::parse(path, n + 1, "expected `image_id<TAB>caption`"));
        };
        let slot = *index.entry(id.trim().to_owned()).or_insert_with(|| {
            order.push(Vec::new());
            order.len() - 1
        });
        order[slot].push(tokenize(caption));
    }
    Ok(order)
}

/// Exhaustive enumeration below this many candidates, rejection sampling above.
const ENUMERATE_LIMIT: usize = 200_000;

/// Build positive pairs (two captions of one image) and negative pairs
/// (captions of two different images) from encoded caption groups.
pub fn pair_captions(
    groups: &[Vec<Vec<TokenId>>],
    n_pos: usize,
    n_neg: usize,
    seed: u64,
) -> Result<PairCorpus> {
    let mut rng = seeded(seed);
    let mut pairs = Vec::with_capacity(n_pos + n_neg);

    let within: usize = groups.iter().map(|g| g.len() * g.len().saturating_sub(1) / 2).sum();
    if n_pos > 0 {
        if within < n_pos {
            return Err(Error::InvalidArgument(format!(
                "{n_pos} positive pairs requested but only {within} same-image caption pairs exist"
            )));
        }
        let picks = sample_index_pairs(&mut rng, n_pos, within, |rng| {
            let g = rng.random_range(0..groups.len());
            if groups[g].len() < 2 {
                return None;
            }
            let a = rng.random_range(0..groups[g].len());
            let b = rng.random_range(0..groups[g].len());
            (a != b).then(|| ((g, a.min(b)), (g, a.max(b))))
        }, || {
            let mut all = Vec::with_capacity(within);
            for (g, caps) in groups.iter().enumerate() {
                for a in 0..caps.len() {
                    for b in a + 1..caps.len() {
                        all.push(((g, a), (g, b)));
                    }
                }
            }
            all
        }, |&((g, a), (_, b))| groups[g][a] != groups[g][b]);
        let picks = picks.ok_or_else(|| {
            Error::InvalidArgument("not enough distinct same-image caption pairs".into())
        })?;
        for ((g, a), (_, b)) in picks {
            pairs.push(SentencePair {
                x: groups[g][a].clone(),
                y: groups[g][b].clone(),
                label: Label::Positive,
            });
        }
    }

    if n_neg > 0 {
        if groups.len() < 2 {
            return Err(Error::InvalidArgument(
                "negative pairs need captions from at least two images".into(),
            ));
        }
        let total: usize = groups.iter().map(|g| g.len()).sum();
        let cross = (total * total.saturating_sub(1) / 2).saturating_sub(within);
        if cross < n_neg {
            return Err(Error::InvalidArgument(format!(
                "{n_neg} negative pairs requested but only {cross} cross-image caption pairs exist"
            )));
        }
        let picks = sample_index_pairs(&mut rng, n_neg, cross, |rng| {
            let g1 = rng.random_range(0..groups.len());
            let g2 = rng.random_range(0..groups.len());
            if g1 == g2 || groups[g1].is_empty() || groups[g2].is_empty() {
                return None;
            }
            let a = (g1, rng.random_range(0..groups[g1].len()));
            let b = (g2, rng.random_range(0..groups[g2].len()));
            Some(if a < b { (a, b) } else { (b, a) })
        }, || {
            let mut all = Vec::with_capacity(cross);
            for g1 in 0..groups.len() {
                for g2 in g1 + 1..groups.len() {
                    for a in 0..groups[g1].len() {
                        for b in 0..groups[g2].len() {
                            all.push(((g1, a), (g2, b)));
                        }
                    }
                }
            }
            all
        }, |_| true);
        let picks = picks.ok_or_else(|| {
            Error::InvalidArgument("not enough distinct cross-image caption pairs".into())
        })?;
        for ((g1, a), (g2, b)) in picks {
            pairs.push(SentencePair {
                x: groups[g1][a].clone(),
                y: groups[g2][b].clone(),
                label: Label::Negative,
            });
        }
    }
    Ok(PairCorpus::new(pairs, 0))
}

type CaptionRef = (usize, usize);

/// `n` distinct pairs out of `total` candidates: enumerate and shuffle when
/// small, otherwise draw with `draw` and reject repeats. Returns `None` when
/// fewer than `n` candidates pass `keep`.
fn sample_index_pairs(
    rng: &mut Rng,
    n: usize,
    total: usize,
    mut draw: impl FnMut(&mut Rng) -> Option<(CaptionRef, CaptionRef)>,
    enumerate: impl FnOnce() -> Vec<(CaptionRef, CaptionRef)>,
    keep: impl Fn(&(CaptionRef, CaptionRef)) -> bool,
) -> Option<Vec<(CaptionRef, CaptionRef)>> {
    if total <= ENUMERATE_LIMIT || n * 2 > total {
        let mut all: Vec<_> = enumerate().into_iter().filter(|p| keep(p)).collect();
        if all.len() < n {
            return None;
        }
        all.shuffle(rng);
        all.truncate(n);
        return Some(all);
    }
    let mut seen = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    let mut misses = 0usize;
    while out.len() < n {
        match draw(rng) {
            Some(p) if keep(&p) && seen.insert(p) => out.push(p),
            _ => {
                misses += 1;
                if misses > 100 * n + 10_000 {
                    return None;
                }
            }
        }
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    #[test]
    fn encoded_corpus_round_trip() {
        let v = Vocabulary::build(&[toks("a b c")], 1, 10).unwrap();
        let corpus = PairCorpus::new(
            vec![
                SentencePair { x: v.encode(&toks("a b"), 4), y: v.encode(&toks("c"), 4), label: Label::Positive },
                SentencePair { x: v.encode(&toks("c a"), 4), y: v.encode(&toks("b"), 4), label: Label::Negative },
            ],
            0,
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.tsv");
        corpus.save_encoded(&path).unwrap();
        assert_eq!(load_encoded(&path, v.len()).unwrap().pairs(), corpus.pairs());
        assert!(load_encoded(&path, 5).is_err());
        fs::write(&path, "4 2\t5 2\t7\n").unwrap();
        let err = load_encoded(&path, v.len()).unwrap_err();
        assert!(err.to_string().contains("corpus.tsv"));
    }

    #[test]
    fn vocabulary_orders_by_frequency() {
        let v = Vocabulary::build(&[toks("a b"), toks("a")], 1, 10).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), 5);
        assert_eq!(v.id("zzz"), UNK);
    }

    #[test]
    fn vocabulary_min_freq_leaves_only_reserved() {
        let v = Vocabulary::build(&[toks("a")], 2, 10).unwrap();
        assert_eq!(v.len(), NUM_RESERVED);
    }

    #[test]
    fn vocabulary_rejects_empty() {
        let empty: Vec<Vec<String>> = vec![];
        assert!(matches!(Vocabulary::build(&empty, 1, 10), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn vocabulary_truncates_to_max_size() {
        let v = Vocabulary::build(&[toks("c c c b b a")], 1, 6).unwrap();
        assert_eq!(v.tokens()[4..], ["c", "b"]);
    }

    #[test]
    fn encode_layout() {
        let v = Vocabulary::build(&[toks("a b"), toks("a")], 1, 10).unwrap();
        let ids = v.encode(&toks("a b"), 20);
        assert_eq!(ids.len(), 21);
        assert_eq!(&ids[..3], &[4, 5, EOS]);
        assert!(ids[3..].iter().all(|&i| i == PAD));

        let empty = v.encode::<String>(&[], 20);
        assert_eq!(empty[0], EOS);

        let long: Vec<String> = (0..25).map(|_| "a".to_owned()).collect();
        let ids = v.encode(&long, 20);
        assert_eq!(ids.len(), 21);
        assert_eq!(ids[20], EOS);
        assert_eq!(content_len(&ids), 20);
    }

    #[test]
    fn tokenizer_separates_punctuation() {
        assert_eq!(
            tokenize("How do you start making money?"),
            toks("how do you start making money ?")
        );
        assert_eq!(tokenize("<pad>"), toks("< pad >"));
    }

    #[test]
    fn load_filters_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.tsv");
        let long = vec!["word"; 21].join(" ");
        fs::write(
            &path,
            format!(
                "how do you start making money ?\twhat should i do to earn some more money ?\t1\n\
                 {long}\tshort one\t0\n\
                 a b\tc d\t0\n"
            ),
        )
        .unwrap();
        let sents = read_pair_sentences(&path).unwrap();
        let v = Vocabulary::build(&sents, 1, 1000).unwrap();
        let c = load_pair_corpus(&path, &v, 20).unwrap();
        assert_eq!(c.stats(), &CorpusStats { positive: 1, negative: 1, dropped: 1 });
        let p = &c.pairs()[0];
        assert_eq!(p.label, Label::Positive);
        assert_eq!(v.decode(&p.x), toks("how do you start making money ?"));
    }

    #[test]
    fn malformed_record_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.tsv");
        fs::write(&path, "a\tb\t1\nc\td\t0\ne\tf\t1\nbroken line\n").unwrap();
        let err = load_pair_corpus(&path, &Vocabulary::reserved(), 20).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 4, .. }), "{err}");
    }

    #[test]
    fn missing_file_is_error() {
        let err = load_pair_corpus(Path::new("/nonexistent/x.tsv"), &Vocabulary::reserved(), 20);
        assert!(matches!(err, Err(Error::Io { .. })));
    }

    #[test]
    fn caption_pairing_small_case() {
        let groups = vec![
            vec![vec![4, EOS], vec![5, EOS]],
            vec![vec![6, EOS], vec![7, EOS]],
        ];
        let c = pair_captions(&groups, 2, 2, 1).unwrap();
        assert_eq!(c.count(Label::Positive), 2);
        assert_eq!(c.count(Label::Negative), 2);
        let group_of = |s: &Vec<TokenId>| if s[0] < 6 { 0 } else { 1 };
        let pos_groups: HashSet<_> = c.with_label(Label::Positive).map(|p| group_of(&p.x)).collect();
        assert_eq!(pos_groups.len(), 2);
        for p in c.with_label(Label::Negative) {
            assert_ne!(group_of(&p.x), group_of(&p.y));
        }
        let again = pair_captions(&groups, 2, 2, 1).unwrap();
        assert_eq!(c.pairs(), again.pairs());
    }

    #[test]
    fn caption_pairing_needs_two_groups_for_negatives() {
        let groups = vec![vec![vec![4, EOS], vec![5, EOS]]];
        assert!(pair_captions(&groups, 0, 1, 0).is_err());
        assert!(pair_captions(&groups, 2, 0, 0).is_err());
    }

    #[test]
    fn batch_sampling() {
        let pair = SentencePair { x: vec![4, EOS], y: vec![5, EOS], label: Label::Positive };
        let c = PairCorpus::new(vec![pair.clone()], 0);
        let mut rng = seeded(3);
        let b = c.sample_batch(Label::Positive, 4, &mut rng).unwrap();
        assert!(b.iter().all(|p| *p == pair));
        assert!(c.sample_batch(Label::Negative, 1, &mut rng).is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(words in proptest::collection::vec("[a-e]{1,2}", 0..30)) {
            let v = Vocabulary::build(&[toks("a b c d e aa bb")], 1, 100).unwrap();
            let ids = v.encode(&words, 20);
            prop_assert!(well_formed(&ids, v.len()));
            let back = v.decode(&ids);
            let expect: Vec<String> = words.iter().take(20)
                .map(|w| if v.get(w).is_some() { w.clone() } else { "<unk>".to_owned() })
                .collect();
            prop_assert_eq!(back, expect);
        }

        #[test]
        fn caption_pairs_respect_groups(sizes in proptest::collection::vec(2usize..5, 2..6), seed in 0u64..1000) {
            let mut next = 4;
            let groups: Vec<Vec<Vec<TokenId>>> = sizes.iter().map(|&n| {
                (0..n).map(|_| { next += 1; vec![next, EOS] }).collect()
            }).collect();
            let owner: HashMap<Vec<TokenId>, usize> = groups.iter().enumerate()
                .flat_map(|(g, caps)| caps.iter().map(move |c| (c.clone(), g)))
                .collect();
            let c = pair_captions(&groups, 2, 3, seed).unwrap();
            for p in c.pairs() {
                prop_assert!(p.is_well_formed(1000));
                match p.label {
                    Label::Positive => {
                        prop_assert_ne!(&p.x, &p.y);
                        prop_assert_eq!(owner[&p.x], owner[&p.y]);
                    }
                    Label::Negative => prop_assert_ne!(owner[&p.x], owner[&p.y]),
                }
            }
        }
    }
}
