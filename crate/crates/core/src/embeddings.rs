//! Word-vector table shared by the encoder, transcoder and decoder inputs.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand_distr::{Distribution, Normal};

use crate::corpus::{TokenId, Vocabulary, PAD};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const DEFAULT_EMBED_DIM: usize = 300;
const OOV_STD: f64 = 0.1;
const SIMPLEX_TOL: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct EmbeddingMatrix {
    pub matrix: Array2<f64>,
    /// `false` only for the PAD row, which stays zero.
    pub trainable: Vec<bool>,
}

impl EmbeddingMatrix {
    /// N(0, 0.1²) rows, PAD row zero.
    pub fn random(vocab_size: usize, dim: usize, rng: &mut Rng) -> Self {
        let normal = Normal::new(0.0, OOV_STD).expect("valid std");
        let mut matrix = Array2::from_shape_fn((vocab_size, dim), |_| normal.sample(rng));
        matrix.row_mut(PAD as usize).fill(0.0);
        let mut trainable = vec![true; vocab_size];
        trainable[PAD as usize] = false;
        EmbeddingMatrix { matrix, trainable }
    }

    pub fn vocab_size(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    /// Row lookup for hard token ids.
    pub fn embed_ids(&self, ids: &[TokenId]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((ids.len(), self.dim()));
        for (k, &id) in ids.iter().enumerate() {
            let id = id as usize;
            if id >= self.vocab_size() {
                return Err(Error::InvalidArgument(format!(
                    "token id {id} outside vocabulary of {}",
                    self.vocab_size()
                )));
            }
            out.row_mut(k).assign(&self.matrix.row(id));
        }
        Ok(out)
    }

    /// Convex combination of rows, one per simplex row of `weights` (steps × V).
    pub fn embed_simplex(&self, weights: &Array2<f64>) -> Result<Array2<f64>> {
        if weights.ncols() != self.vocab_size() {
            return Err(Error::Shape(format!(
                "simplex width {} != vocabulary size {}",
                weights.ncols(),
                self.vocab_size()
            )));
        }
        for (k, row) in weights.rows().into_iter().enumerate() {
            let sum: f64 = row.sum();
            if row.iter().any(|&w| w < 0.0) || (sum - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::InvalidArgument(format!(
                    "row {k} is not a probability vector (sum {sum})"
                )));
            }
        }
        Ok(weights.dot(&self.matrix))
    }
}

/// Fraction of the vocabulary (excluding reserved tokens) found in a pretrained file.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coverage {
    pub found: usize,
    pub total: usize,
}

impl Coverage {
    pub fn ratio(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.found as f64 / self.total as f64
        }
    }
}

/// Load GloVe-style `token v1 … vD` lines. Vocabulary rows absent from the
/// file are drawn from N(0, 0.1²).
pub fn load_pretrained(
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
    rng: &mut Rng,
) -> Result<(EmbeddingMatrix, Coverage)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut vectors: HashMap<TokenId, Array1<f64>> = HashMap::new();
    let mut file_dim: Option<usize> = None;
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut parts = line.split(' ');
        let Some(token) = parts.next().filter(|t| !t.is_empty()) else {
            continue;
        };
        let values: Vec<f64> = parts
            .filter(|p| !p.is_empty())
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse(path, n + 1, e.to_string()))?;
        match file_dim {
            None => {
                if values.len() != dim {
                    return Err(Error::parse(
                        path,
                        n + 1,
                        format!("vectors have dimension {}, configured {dim}", values.len()),
                    ));
                }
                file_dim = Some(values.len());
            }
            Some(d) if d != values.len() => {
                return Err(Error::parse(
                    path,
                    n + 1,
                    format!("dimension {} differs from earlier lines ({d})", values.len()),
                ));
            }
            Some(_) => {}
        }
        if let Some(id) = vocab.get(token) {
            vectors.insert(id, Array1::from(values));
        }
    }

    let mut emb = EmbeddingMatrix::random(vocab.len(), dim, rng);
    for (&id, v) in &vectors {
        if id != PAD {
            emb.matrix.row_mut(id as usize).assign(v);
        }
    }
    let total = vocab.len().saturating_sub(crate::corpus::NUM_RESERVED);
    let found = vectors
        .keys()
        .filter(|&&id| id as usize >= crate::corpus::NUM_RESERVED)
        .count();
    Ok((emb, Coverage { found, total }))
}
