//! Semantic class representations.
//!
//! Text format: a header line `N d`, then `N` lines `token v1 ... vd`.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::datamodel::ClassVocab;
use crate::error::{Error, Result};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `a·b / (‖a‖‖b‖)`. Errors on a zero-norm argument.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("cosine", a.len(), b.len()));
    }
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm("cosine"));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Vec<Vec<f64>>,
    normalized: Vec<Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            tokens: Vec::new(),
            index: HashMap::new(),
            vectors: Vec::new(),
            normalized: Vec::new(),
        }
    }

    pub fn insert(&mut self, token: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        let token = token.into();
        if vector.len() != self.dim {
            return Err(Error::dim(format!("embedding `{token}`"), self.dim, vector.len()));
        }
        let n = norm(&vector);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::ZeroNorm("embedding vector"));
        }
        if self.index.contains_key(&token) {
            return Err(Error::InvalidArgument(format!("duplicate token `{token}`")));
        }
        self.index.insert(token.clone(), self.tokens.len());
        self.tokens.push(token);
        self.normalized.push(vector.iter().map(|v| v / n).collect());
        self.vectors.push(vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.index.get(token).map(|&i| self.vectors[i].as_slice())
    }

    pub fn get_normalized(&self, token: &str) -> Option<&[f64]> {
        self.index.get(token).map(|&i| self.normalized[i].as_slice())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Dense per-class matrix in vocabulary order. Every label must be present.
    pub fn align(&self, vocab: &ClassVocab) -> Result<ClassEmbeddings> {
        let vectors = vocab
            .labels()
            .iter()
            .map(|label| {
                self.get(label)
                    .map(<[f64]>::to_vec)
                    .ok_or_else(|| Error::MissingEmbedding(label.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ClassEmbeddings {
            dim: self.dim,
            vectors,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse(path, 1, "missing header `N d`"))?;
        let mut parts = header.split_whitespace();
        let parse_usize = |s: Option<&str>| -> Result<usize> {
            s.and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::parse(path, 1, "header must be `N d`"))
        };
        let count = parse_usize(parts.next())?;
        let dim = parse_usize(parts.next())?;
        if parts.next().is_some() || dim == 0 {
            return Err(Error::parse(path, 1, "header must be `N d` with d > 0"));
        }
        let mut table = EmbeddingTable::new(dim);
        for (lineno, line) in lines {
            let lineno = lineno + 1;
            let mut fields = line.split_whitespace();
            let token = fields.next().unwrap_or_default();
            let vector = fields
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|_| Error::parse(path, lineno, format!("bad float `{f}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            if vector.len() != dim {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("expected {dim} values for `{token}`, got {}", vector.len()),
                ));
            }
            table
                .insert(token, vector)
                .map_err(|e| Error::parse(path, lineno, e.to_string()))?;
        }
        if table.len() != count {
            return Err(Error::parse(
                path,
                1,
                format!("header declares {count} entries, body has {}", table.len()),
            ));
        }
        Ok(table)
    }

    /// Writes the text format with 9 significant digits.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        out.push_str(&format!("{} {}\n", self.len(), self.dim));
        for (token, vector) in self.tokens.iter().zip(&self.vectors) {
            out.push_str(token);
            for v in vector {
                out.push(' ');
                out.push_str(&format_sig9(*v));
            }
            out.push('\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

fn format_sig9(v: f64) -> String {
    // `{:.8e}` gives 9 significant digits; reparse to drop the exponent form.
    let s = format!("{v:.8e}");
    let parsed: f64 = s.parse().unwrap_or(v);
    format!("{parsed}")
}

/// Class embeddings in vocabulary order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbeddings {
    dim: usize,
    vectors: Vec<Vec<f64>>,
}

impl ClassEmbeddings {
    pub fn from_vectors(vectors: Vec<Vec<f64>>) -> Result<Self> {
        let dim = vectors.first().map(Vec::len).ok_or(Error::Empty("class embeddings"))?;
        for v in &vectors {
            if v.len() != dim {
                return Err(Error::dim("class embeddings", dim, v.len()));
            }
        }
        Ok(ClassEmbeddings { dim, vectors })
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

    pub fn get(&self, class: usize) -> &[f64] {
        &self.vectors[class]
    }
}
