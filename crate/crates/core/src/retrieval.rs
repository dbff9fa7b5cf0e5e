//! Cosine ranking, average precision and retrieval evaluation.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Program;
use crate::encoder::{Embedding, Encoder};
use crate::error::{Error, Result};

/// Anything that maps a program to a fixed-size vector.
pub trait Embedder {
    fn embed(&self, program: &Program) -> Result<Embedding>;
}

impl Embedder for Encoder {
    fn embed(&self, program: &Program) -> Result<Embedding> {
        self.embed_text(&program.code)
    }
}

/// One-hot vector of the program's problem id. Clones map to the same
/// vector, so it retrieves perfectly.
#[derive(Clone, Debug)]
pub struct OracleEncoder {
    slots: BTreeMap<String, usize>,
}

impl OracleEncoder {
    pub fn new(programs: &[Program]) -> Self {
        let mut slots = BTreeMap::new();
        for p in programs {
            let next = slots.len();
            slots.entry(p.problem_id.clone()).or_insert(next);
        }
        Self { slots }
    }
}

impl Embedder for OracleEncoder {
    fn embed(&self, program: &Program) -> Result<Embedding> {
        let slot = *self.slots.get(&program.problem_id).ok_or_else(|| {
            Error::Contract(format!("problem `{}` unknown to the oracle", program.problem_id))
        })?;
        let mut v = vec![0.0; self.slots.len()];
        v[slot] = 1.0;
        Ok(Embedding(v))
    }
}

pub fn embed_all(programs: &[Program], embedder: &dyn Embedder) -> Result<Vec<Embedding>> {
    programs.iter().map(|p| embedder.embed(p)).collect()
}

fn unit(e: &Embedding) -> Result<Vec<f64>> {
    let n = e.norm();
    if !(n > crate::autograd::NORM_EPS) {
        return Err(Error::DegenerateVector(format!("embedding norm {n}")));
    }
    Ok(e.values().iter().map(|v| v / n).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Pool positions ordered by descending cosine to `query`, ties broken by
/// ascending candidate id.
pub fn rank(query: &Embedding, pool: &[(&str, &Embedding)]) -> Result<Vec<usize>> {
    if pool.is_empty() {
        return Err(Error::Contract("ranking against an empty pool".into()));
    }
    let q = unit(query)?;
    let mut scored = Vec::with_capacity(pool.len());
    for (i, (id, e)) in pool.iter().enumerate() {
        if e.dim() != q.len() {
            return Err(Error::Contract(format!(
                "candidate `{id}` has dimension {}, query {}",
                e.dim(),
                q.len()
            )));
        }
        scored.push((dot(&q, &unit(e)?), *id, i));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    Ok(scored.into_iter().map(|(_, _, i)| i).collect())
}

/// Average precision of a ranked relevance list, `None` when nothing is
/// relevant.
pub fn average_precision(relevance: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Mean of the defined average precisions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapSummary {
    pub map: f64,
    pub included: usize,
    /// Queries without any relevant candidate.
    pub excluded: usize,
}

pub fn map_score(aps: &[Option<f64>]) -> Result<MapSummary> {
    let defined: Vec<f64> = aps.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::Evaluation(format!(
            "none of {} queries has a relevant candidate",
            aps.len()
        )));
    }
    Ok(MapSummary {
        map: defined.iter().sum::<f64>() / defined.len() as f64,
        included: defined.len(),
        excluded: aps.len() - defined.len(),
    })
}

/// Which queries are asked against which pool.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum EvalMode {
    /// Queries in one language, candidates in another. With `mixed_pool`
    /// every other program is a candidate but only clones in the candidate
    /// language count as relevant.
    Cross {
        query_language: String,
        candidate_language: String,
        mixed_pool: bool,
    },
    /// Queries against the other programs of their own language.
    Mono { language: String },
}

impl EvalMode {
    pub fn cross(query: &str, candidate: &str) -> Self {
        Self::Cross {
            query_language: query.into(),
            candidate_language: candidate.into(),
            mixed_pool: false,
        }
    }

    fn languages(&self) -> (&str, &str) {
        match self {
            Self::Cross {
                query_language,
                candidate_language,
                ..
            } => (query_language, candidate_language),
            Self::Mono { language } => (language, language),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub query_id: String,
    pub relevant: usize,
    pub average_precision: Option<f64>,
    /// 1-based rank of the first relevant candidate.
    pub first_hit: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRun {
    #[serde(flatten)]
    pub mode: EvalMode,
    /// Candidates each query is ranked against; a query never sees itself.
    pub pool_size: usize,
    #[serde(flatten)]
    pub summary: MapSummary,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub queries: Vec<QueryOutcome>,
}

/// Rank every query of `mode` against its pool. `embeddings[i]` belongs to
/// `programs[i]`.
pub fn evaluate(programs: &[Program], embeddings: &[Embedding], mode: &EvalMode) -> Result<RetrievalRun> {
    if programs.len() != embeddings.len() {
        return Err(Error::Contract(format!(
            "{} programs but {} embeddings",
            programs.len(),
            embeddings.len()
        )));
    }
    let (q_lang, c_lang) = mode.languages();
    let mixed = matches!(mode, EvalMode::Cross { mixed_pool: true, .. });
    let pool_members: Vec<usize> = (0..programs.len())
        .filter(|&i| mixed || programs[i].language == c_lang)
        .collect();
    let mut outcomes = Vec::new();
    let mut pool_size = 0;
    for (qi, q) in programs.iter().enumerate().filter(|(_, p)| p.language == q_lang) {
        let members: Vec<usize> = pool_members.iter().copied().filter(|&i| i != qi).collect();
        pool_size = pool_size.max(members.len());
        let pool: Vec<(&str, &Embedding)> = members
            .iter()
            .map(|&i| (programs[i].id.as_str(), &embeddings[i]))
            .collect();
        let order = rank(&embeddings[qi], &pool)?;
        let relevance: Vec<bool> = order
            .iter()
            .map(|&k| {
                let c = &programs[members[k]];
                c.problem_id == q.problem_id && c.language == c_lang
            })
            .collect();
        outcomes.push(QueryOutcome {
            query_id: q.id.clone(),
            relevant: relevance.iter().filter(|&&r| r).count(),
            average_precision: average_precision(&relevance),
            first_hit: relevance.iter().position(|&r| r).map(|k| k + 1),
        });
    }
    if outcomes.is_empty() {
        return Err(Error::Evaluation(format!("no queries in language `{q_lang}`")));
    }
    let aps: Vec<Option<f64>> = outcomes.iter().map(|o| o.average_precision).collect();
    Ok(RetrievalRun {
        mode: mode.clone(),
        pool_size,
        summary: map_score(&aps)?,
        queries: outcomes,
    })
}

/// Evaluation of one model over several modes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub programs: usize,
    pub runs: Vec<RetrievalRun>,
}

impl EvalReport {
    pub fn build(programs: &[Program], embedder: &dyn Embedder, modes: &[EvalMode]) -> Result<Self> {
        let embeddings = embed_all(programs, embedder)?;
        let runs = modes
            .iter()
            .map(|m| evaluate(programs, &embeddings, m))
            .collect::<Result<_>>()?;
        Ok(Self {
            programs: programs.len(),
            runs,
        })
    }

    /// Drop per-query detail.
    pub fn summary_only(mut self) -> Self {
        for r in &mut self.runs {
            r.queries.clear();
        }
        self
    }
}

/// A labelled embedding as stored in exported files.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub id: String,
    pub language: String,
    pub problem_id: String,
    pub embedding: Embedding,
}

pub fn embedding_rows(programs: &[Program], embeddings: Vec<Embedding>) -> Vec<EmbeddingRow> {
    programs
        .iter()
        .zip(embeddings)
        .map(|(p, embedding)| EmbeddingRow {
            id: p.id.clone(),
            language: p.language.clone(),
            problem_id: p.problem_id.clone(),
            embedding,
        })
        .collect()
}

/// Tab-separated rows: id, language, problem id, then the components with
/// 17 significant digits, enough for every `f64` to read back exactly.
pub fn write_embeddings(path: impl AsRef<Path>, rows: &[EmbeddingRow]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in rows {
        for field in [&r.id, &r.language, &r.problem_id] {
            if field.contains(['\t', '\n']) {
                return Err(Error::Validation(format!("field `{field}` contains a tab or newline")));
            }
        }
        let mut line = format!("{}\t{}\t{}", r.id, r.language, r.problem_id);
        for v in r.embedding.values() {
            line.push('\t');
            line.push_str(&format!("{v:.16e}"));
        }
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<Vec<EmbeddingRow>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<EmbeddingRow> = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let mut next = |name: &str| {
            fields.next().map(str::to_string).ok_or_else(|| Error::Schema {
                line: n + 1,
                field: name.into(),
            })
        };
        let id = next("id")?;
        let language = next("language")?;
        let problem_id = next("problem_id")?;
        let values = fields
            .map(|f| {
                f.parse::<f64>().map_err(|e| Error::Parse {
                    line: n + 1,
                    message: format!("`{f}`: {e}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.embedding.dim() != values.len() {
                return Err(Error::Parse {
                    line: n + 1,
                    message: format!("{} components, expected {}", values.len(), first.embedding.dim()),
                });
            }
        }
        rows.push(EmbeddingRow {
            id,
            language,
            problem_id,
            embedding: Embedding(values),
        });
    }
    Ok(rows)
}
