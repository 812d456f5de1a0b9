use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};

use super::{tokenize, Lexicon, Split};
use crate::error::{Error, Result};
use crate::seeded_rng;

/// Hash buckets of the trainable scratch encoder.
pub const SCRATCH_BUCKETS: usize = 4096;

/// Maps a token sequence to a fixed-width sentence embedding.
pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;

    fn encode(&self, tokens: &[String]) -> Vec<f32>;
}

pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0) as f32
}

/// Cosine similarity between a command embedding and each label embedding.
pub fn similarity_vector(command_embedding: &[f32], labels: &[&str], encoder: &dyn TextEncoder) -> Vec<f32> {
    labels
        .iter()
        .map(|l| cosine(command_embedding, &encoder.encode(&tokenize(l))))
        .collect()
}

fn mean_rows<'a>(rows: impl Iterator<Item = Option<&'a [f32]>>, dim: usize) -> Vec<f32> {
    let mut acc = vec![0.0f32; dim];
    let mut count = 0usize;
    for row in rows {
        count += 1;
        if let Some(row) = row {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
    }
    if count > 0 {
        let inv = 1.0 / count as f32;
        acc.iter_mut().for_each(|a| *a *= inv);
    }
    acc
}

/// Bag-of-words encoder over hashed token buckets; its table is trained
/// with the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ScratchEncoder {
    pub dim: usize,
    /// `SCRATCH_BUCKETS × dim`, row-major.
    pub table: Vec<f32>,
}

impl ScratchEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let table = (0..SCRATCH_BUCKETS * dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        ScratchEncoder { dim, table }
    }

    /// FNV-1a of the token bytes, reduced to a bucket.
    pub fn bucket(token: &str) -> usize {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in token.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        (h % SCRATCH_BUCKETS as u64) as usize
    }

    pub fn buckets(tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| ScratchEncoder::bucket(t)).collect()
    }
}

impl TextEncoder for ScratchEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, tokens: &[String]) -> Vec<f32> {
        let d = self.dim;
        mean_rows(
            tokens.iter().map(|t| {
                let b = ScratchEncoder::bucket(t);
                Some(&self.table[b * d..(b + 1) * d])
            }),
            d,
        )
    }
}

/// Frozen per-token vectors loaded from an embedding file.
#[derive(Clone, Debug, PartialEq)]
pub struct TableEncoder {
    dim: usize,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Vec<f32>,
}

impl TableEncoder {
    pub fn from_parts(dim: usize, tokens: Vec<String>, vectors: Vec<f32>) -> Result<Self> {
        if dim == 0 || vectors.len() != tokens.len() * dim {
            return Err(Error::Load(format!(
                "embedding table has {} values for {} tokens of width {dim}",
                vectors.len(),
                tokens.len()
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Load(format!("duplicate embedding token {t:?}")));
            }
        }
        Ok(TableEncoder {
            dim,
            tokens,
            index,
            vectors,
        })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    pub fn vector(&self, token: &str) -> Option<&[f32]> {
        self.index
            .get(token)
            .map(|&i| &self.vectors[i * self.dim..(i + 1) * self.dim])
    }

    /// Parses the `#dim D` / `token<TAB>v1 … vD` text format.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let dim = match lines.next() {
            Some((_, header)) => header
                .strip_prefix("#dim ")
                .and_then(|d| d.trim().parse::<usize>().ok())
                .filter(|&d| d > 0)
                .ok_or_else(|| Error::Load(format!("line 1: expected `#dim D`, got {header:?}")))?,
            None => return Err(Error::Load("empty embedding file".into())),
        };
        let mut tokens = Vec::new();
        let mut vectors = Vec::new();
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let (token, values) = line
                .split_once('\t')
                .ok_or_else(|| Error::Load(format!("line {}: missing tab separator", i + 1)))?;
            let before = vectors.len();
            for v in values.split_ascii_whitespace() {
                let x: f32 = v
                    .parse()
                    .map_err(|_| Error::Load(format!("line {}: bad value {v:?}", i + 1)))?;
                if !x.is_finite() {
                    return Err(Error::Load(format!("line {}: non-finite value", i + 1)));
                }
                vectors.push(x);
            }
            if vectors.len() - before != dim {
                return Err(Error::Load(format!(
                    "line {}: expected {dim} values, got {}",
                    i + 1,
                    vectors.len() - before
                )));
            }
            tokens.push(token.to_owned());
        }
        TableEncoder::from_parts(dim, tokens, vectors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        TableEncoder::parse(&text).map_err(|e| match e {
            Error::Load(msg) => Error::Load(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("#dim {}\n", self.dim);
        for (i, t) in self.tokens.iter().enumerate() {
            out.push_str(t);
            out.push('\t');
            for (j, v) in self.vectors[i * self.dim..(i + 1) * self.dim].iter().enumerate() {
                if j > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

impl TextEncoder for TableEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, tokens: &[String]) -> Vec<f32> {
        mean_rows(tokens.iter().map(|t| self.vector(t)), self.dim)
    }
}

/// Builds an embedding table in which synonyms share structure: every
/// lexicon token is the normalized sum of the meaning vectors of the
/// directions and intensities whose phrases use it (plus a little noise),
/// so that holdout synonyms land near their train counterparts. Other
/// tokens and labels get independent random vectors.
pub fn synthesize_synonym_embeddings(
    lexicon: &Lexicon,
    labels: &[String],
    dim: usize,
    seed: u64,
) -> TableEncoder {
    let mut rng = seeded_rng(seed);
    let mut unit = |scale: f32| -> Vec<f32> {
        let v: Vec<f32> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(f32::MIN_POSITIVE);
        v.into_iter().map(|x| scale * x / n).collect()
    };

    let mut concepts: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for (d, phrase) in lexicon.direction_phrases() {
        for t in phrase {
            concepts.entry(t).or_default().insert(format!("dir:{}", d.name()));
        }
    }
    for (i, phrase) in lexicon.intensity_phrases() {
        for t in phrase {
            concepts.entry(t).or_default().insert(format!("int:{}", i.name()));
        }
    }
    let concept_names: BTreeSet<String> = concepts.values().flatten().cloned().collect();
    let concept_vectors: BTreeMap<String, Vec<f32>> =
        concept_names.into_iter().map(|c| (c, unit(1.0))).collect();

    let mut vocab: BTreeSet<String> = lexicon.tokens(Split::Train);
    vocab.extend(lexicon.tokens(Split::Holdout));
    for l in labels {
        vocab.extend(tokenize(l));
    }

    let mut tokens = Vec::with_capacity(vocab.len());
    let mut vectors = Vec::with_capacity(vocab.len() * dim);
    for token in vocab {
        let v = match concepts.get(&token) {
            Some(cs) => {
                let mut acc = unit(0.25);
                for c in cs {
                    for (a, x) in acc.iter_mut().zip(&concept_vectors[c]) {
                        *a += x / cs.len() as f32;
                    }
                }
                acc
            }
            None => unit(1.0),
        };
        vectors.extend(v);
        tokens.push(token);
    }
    TableEncoder::from_parts(dim, tokens, vectors).expect("consistent synthesized table")
}
