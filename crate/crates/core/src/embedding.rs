//! Word-vector tables in the whitespace-separated GloVe text format.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
    duplicates: usize,
}

/// Averaged answer vector; `oov` is set when no token was found.
#[derive(Clone, Debug, PartialEq)]
pub struct AnswerEmbedding {
    pub vector: Vec<f64>,
    pub oov: bool,
}

impl EmbeddingTable {
    pub fn from_entries(entries: impl IntoIterator<Item = (String, Vec<f64>)>) -> Result<Self> {
        let mut table = EmbeddingTable::default();
        for (i, (token, v)) in entries.into_iter().enumerate() {
            table.insert(token, v).map_err(|m| Error::Embedding(format!("entry {}: {m}", i + 1)))?;
        }
        Ok(table)
    }

    fn insert(&mut self, token: String, v: Vec<f64>) -> std::result::Result<(), String> {
        if self.vectors.is_empty() && self.dim == 0 {
            self.dim = v.len();
        }
        if v.len() != self.dim {
            return Err(format!("dimension {} differs from {}", v.len(), self.dim));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(format!("non-finite component for `{token}`"));
        }
        if self.vectors.insert(token.clone(), v).is_some() {
            self.duplicates += 1;
            log::warn!("duplicate embedding token `{token}`; keeping the last occurrence");
        }
        Ok(())
    }

    /// Loads `token v1 ... vd` lines. Duplicate tokens: the last occurrence wins.
    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut table = EmbeddingTable::default();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let mut fields = line.split_whitespace();
            let Some(token) = fields.next() else { continue };
            let format_err = |message: String| Error::Format {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let v = fields
                .map(|f| f.parse::<f64>().map_err(|e| format_err(format!("`{f}`: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            if v.is_empty() {
                return Err(format_err(format!("token `{token}` has no components")));
            }
            table.insert(token.to_string(), v).map_err(format_err)?;
        }
        Ok(table)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Number of overwritten duplicate tokens seen while loading.
    pub fn duplicates(&self) -> usize {
        self.duplicates
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.vectors
            .get(token)
            .or_else(|| self.vectors.get(&token.to_lowercase()))
            .map(Vec::as_slice)
    }

    /// Scales every vector by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut t = self.clone();
        t.vectors
            .values_mut()
            .for_each(|v| v.iter_mut().for_each(|x| *x *= factor));
        t
    }
}

/// Mean of the vectors of the answer's whitespace-separated tokens.
/// Unknown tokens are skipped; if none is known the zero vector is returned
/// with `oov` set.
pub fn answer_embedding(answer: &str, table: &EmbeddingTable) -> AnswerEmbedding {
    let mut sum = vec![0.0; table.dim()];
    let mut found = 0usize;
    for token in answer.split_whitespace() {
        if let Some(v) = table.get(token) {
            sum.iter_mut().zip(v).for_each(|(s, x)| *s += x);
            found += 1;
        }
    }
    if found == 0 {
        return AnswerEmbedding {
            vector: sum,
            oov: true,
        };
    }
    let n = found as f64;
    sum.iter_mut().for_each(|s| *s /= n);
    AnswerEmbedding {
        vector: sum,
        oov: false,
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some(dot / (na * nb))
    }
}
