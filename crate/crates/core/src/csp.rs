//! Contrastive snippet prediction: a center snippet must pick one of its
//! window neighbours out of a pool of same-language negatives.
//!
//! Negatives come from a bounded FIFO queue per language holding detached
//! embeddings of earlier batches. Until a queue is warm, same-language
//! snippets of other programs in the current batch stand in. Entries remember
//! which snippet they embed so a trainer can re-embed them with the current
//! encoder before drawing.

use std::collections::VecDeque;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::encoder::Embedding;
use crate::error::{Error, Result};

pub const DEFAULT_QUEUE_SIZE: usize = 128;
pub const DEFAULT_TEMPERATURE: f64 = 0.05;
/// Queue fill below which in-batch negatives are used instead.
pub const DEFAULT_WARMUP_MIN: usize = 16;

/// A detached snippet embedding, the program it came from and the snippet's
/// index within that program.
#[derive(Clone, Debug, PartialEq)]
pub struct QueueEntry {
    pub embedding: Embedding,
    pub source: String,
    pub snippet: usize,
}

/// Bounded FIFO of detached embeddings of one language, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageQueue {
    language: String,
    capacity: usize,
    entries: VecDeque<QueueEntry>,
}

/// Result of [`LanguageQueue::sample_negatives`].
#[derive(Debug)]
pub struct Negatives<'a> {
    pub entries: Vec<&'a QueueEntry>,
    /// Fewer than `k` eligible entries existed.
    pub shortfall: bool,
    /// The queue was empty.
    pub warmup: bool,
}

impl LanguageQueue {
    pub fn new(language: impl Into<String>, capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("queue capacity must be >= 1".into()));
        }
        Ok(Self {
            language: language.into(),
            capacity,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    pub fn language(&self) -> &str {
        &self.language
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl ExactSizeIterator<Item = &QueueEntry> {
        self.entries.iter()
    }

    /// Append a batch, evicting the oldest entries beyond capacity.
    pub fn push(&mut self, batch: Vec<QueueEntry>) -> Result<()> {
        let dim = self
            .entries
            .front()
            .or(batch.first())
            .map(|e| e.embedding.dim());
        if let Some(dim) = dim {
            if let Some(bad) = batch.iter().find(|e| e.embedding.dim() != dim) {
                return Err(Error::Contract(format!(
                    "queue `{}` holds dimension {dim}, got {}",
                    self.language,
                    bad.embedding.dim()
                )));
            }
        }
        for e in batch {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(e);
        }
        Ok(())
    }

    /// Replace every embedding with `embed(entry)`, keeping order and
    /// sources.
    pub fn refresh(&mut self, mut embed: impl FnMut(&QueueEntry) -> Result<Embedding>) -> Result<()> {
        let fresh = self.entries.iter().map(&mut embed).collect::<Result<Vec<_>>>()?;
        if let Some(old) = self.entries.front() {
            let dim = old.embedding.dim();
            if let Some(bad) = fresh.iter().find(|e| e.dim() != dim) {
                return Err(Error::Contract(format!(
                    "queue `{}` holds dimension {dim}, refresh produced {}",
                    self.language,
                    bad.dim()
                )));
            }
        }
        for (e, v) in self.entries.iter_mut().zip(fresh) {
            e.embedding = v;
        }
        Ok(())
    }

    /// Draw up to `k` distinct entries uniformly, skipping entries whose
    /// source is `exclude`.
    pub fn sample_negatives(
        &self,
        query_language: &str,
        k: usize,
        exclude: &str,
        rng: &mut impl Rng,
    ) -> Result<Negatives<'_>> {
        if query_language != self.language {
            return Err(Error::Contract(format!(
                "negatives for a `{query_language}` query requested from the `{}` queue",
                self.language
            )));
        }
        if self.entries.is_empty() {
            return Ok(Negatives {
                entries: Vec::new(),
                shortfall: k > 0,
                warmup: true,
            });
        }
        let eligible: Vec<&QueueEntry> =
            self.entries.iter().filter(|e| e.source != exclude).collect();
        let take = k.min(eligible.len());
        let mut picked: Vec<usize> = sample(rng, eligible.len(), take).into_vec();
        picked.sort_unstable();
        Ok(Negatives {
            entries: picked.into_iter().map(|i| eligible[i]).collect(),
            shortfall: take < k,
            warmup: false,
        })
    }
}

/// Contrastive loss over a batch of (center, positive) rows.
///
/// `centers` and `positives` are live `n x d` nodes; `negatives[i]` holds the
/// detached negatives of center `i` as rows. Returns the mean over centers of
/// `-log(exp(s(c,f)/τ) / Σ_{n ∈ {f} ∪ N} exp(s(c,n)/τ))` with cosine `s`.
pub fn csp_loss(
    g: &mut Graph,
    centers: Var,
    positives: Var,
    negatives: &[Array2<f64>],
    tau: f64,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
    }
    let n = g.value(centers).nrows();
    if n == 0 || g.value(positives).dim() != g.value(centers).dim() || negatives.len() != n {
        return Err(Error::Contract(format!(
            "csp batch: {n} centers, {} positives, {} negative sets",
            g.value(positives).nrows(),
            negatives.len()
        )));
    }
    let d = g.value(centers).ncols();
    let cn = g.normalize_rows(centers)?;
    let pn = g.normalize_rows(positives)?;
    let mut terms = Vec::with_capacity(n);
    for (i, neg) in negatives.iter().enumerate() {
        if neg.nrows() == 0 {
            return Err(Error::Contract(format!("center {i} has no negatives")));
        }
        if neg.ncols() != d {
            return Err(Error::Contract(format!(
                "center {i}: negatives have dimension {}, expected {d}",
                neg.ncols()
            )));
        }
        let c = g.slice_rows(cn, i, 1);
        let p = g.slice_rows(pn, i, 1);
        let nv = g.constant(neg.clone());
        let nn = g.normalize_rows(nv)?;
        let pos = g.matmul_t(c, p);
        let negs = g.matmul_t(c, nn);
        let logits = g.concat_cols(&[pos, negs]);
        let logits = g.scale(logits, 1.0 / tau);
        terms.push(g.softmax_cross_entropy(logits, &[0]));
    }
    let all = g.concat_rows(&terms);
    Ok(g.mean(all))
}

/// Value-only form of [`csp_loss`].
pub fn csp_loss_value(
    centers: &[Embedding],
    positives: &[Embedding],
    negatives: &[Vec<Embedding>],
    tau: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let c = g.constant(rows(centers)?);
    let p = g.constant(rows(positives)?);
    let negs = negatives
        .iter()
        .map(|n| {
            if n.is_empty() {
                Ok(Array2::zeros((0, centers.first().map_or(0, Embedding::dim))))
            } else {
                rows(n)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let loss = csp_loss(&mut g, c, p, &negs, tau)?;
    Ok(g.scalar(loss))
}

/// Stack embeddings as matrix rows.
pub fn rows(embs: &[Embedding]) -> Result<Array2<f64>> {
    let d = embs.first().map_or(0, Embedding::dim);
    if embs.iter().any(|e| e.dim() != d) {
        return Err(Error::Contract("embeddings of mixed dimension".into()));
    }
    let flat: Vec<f64> = embs.iter().flat_map(|e| e.values().iter().copied()).collect();
    Ok(Array2::from_shape_vec((embs.len(), d), flat).expect("shape checked"))
}
