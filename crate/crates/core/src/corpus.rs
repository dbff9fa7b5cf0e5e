//! Program corpora: the line-delimited JSON format, snippet segmentation,
//! CSP windows, the synthetic dialect generator and clone-batch sampling.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Default number of logical lines per snippet for unsegmented code.
pub const DEFAULT_LINES_PER_SNIPPET: usize = 3;

/// One positioned snippet of a program.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SnippetText {
    pub index: usize,
    pub text: String,
}

/// One source-code solution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Program {
    pub id: String,
    pub language: String,
    pub problem_id: String,
    pub code: String,
    pub snippets: Vec<SnippetText>,
}

impl Program {
    /// Build a program from already split snippet texts.
    pub fn new(
        id: impl Into<String>,
        language: impl Into<String>,
        problem_id: impl Into<String>,
        code: impl Into<String>,
        snippets: Vec<String>,
    ) -> Self {
        Self {
            id: id.into(),
            language: language.into(),
            problem_id: problem_id.into(),
            code: code.into(),
            snippets: snippets
                .into_iter()
                .enumerate()
                .map(|(index, text)| SnippetText { index, text })
                .collect(),
        }
    }

    /// Check the record-level invariants.
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Validation("program id is empty".into()));
        }
        if self.problem_id.trim().is_empty() {
            return Err(Error::Validation(format!("program {}: empty problem_id", self.id)));
        }
        if self.language.trim().is_empty() {
            return Err(Error::Validation(format!("program {}: empty language", self.id)));
        }
        for (pos, s) in self.snippets.iter().enumerate() {
            if s.index != pos {
                return Err(Error::Validation(format!(
                    "program {}: snippet index {} at position {pos}",
                    self.id, s.index
                )));
            }
            if s.text.trim().is_empty() {
                return Err(Error::Validation(format!(
                    "program {}: snippet {pos} is blank",
                    self.id
                )));
            }
        }
        if !self.snippets.is_empty() {
            let joined = self
                .snippets
                .iter()
                .map(|s| s.text.as_str())
                .collect::<Vec<_>>()
                .join("\n");
            if content_lines(&joined) != content_lines(&self.code) {
                return Err(Error::Validation(format!(
                    "program {}: snippets do not reconstruct the code",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

fn content_lines(text: &str) -> Vec<&str> {
    text.lines()
        .map(str::trim_end)
        .filter(|l| !l.is_empty())
        .collect()
}

/// On-disk record. Field order is the serialized key order.
#[derive(Serialize, Deserialize)]
struct Record<'a> {
    id: &'a str,
    language: &'a str,
    problem_id: &'a str,
    code: &'a str,
    snippets: Vec<&'a str>,
}

/// Parse one corpus line into a program.
fn parse_line(line: &str, lineno: usize) -> Result<Program> {
    let value: Value = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: lineno,
        message: e.to_string(),
    })?;
    let obj = value.as_object().ok_or_else(|| Error::Parse {
        line: lineno,
        message: "expected a JSON object".into(),
    })?;
    let field = |name: &str| -> Result<String> {
        obj.get(name)
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| Error::Schema {
                line: lineno,
                field: name.into(),
            })
    };
    let snippets = obj
        .get("snippets")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Schema {
            line: lineno,
            field: "snippets".into(),
        })?
        .iter()
        .map(|s| {
            s.as_str().map(str::to_owned).ok_or_else(|| Error::Schema {
                line: lineno,
                field: "snippets".into(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let program = Program::new(
        field("id")?,
        field("language")?,
        field("problem_id")?,
        field("code")?,
        snippets,
    );
    program.validate().map_err(|e| match e {
        Error::Validation(m) => Error::Validation(format!("line {lineno}: {m}")),
        other => other,
    })?;
    Ok(program)
}

/// Read a corpus from any buffered reader. Blank lines are skipped.
pub fn read_corpus(reader: impl BufRead) -> Result<Vec<Program>> {
    let mut programs = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let program = parse_line(&line, lineno)?;
        if let Some(first) = seen.insert(program.id.clone(), lineno) {
            return Err(Error::Validation(format!(
                "duplicate id `{}` on lines {first} and {lineno}",
                program.id
            )));
        }
        programs.push(program);
    }
    Ok(programs)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Program>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_corpus(BufReader::new(file))
}

/// Serialize one program as a corpus line (no trailing newline).
pub fn to_line(program: &Program) -> String {
    let record = Record {
        id: &program.id,
        language: &program.language,
        problem_id: &program.problem_id,
        code: &program.code,
        snippets: program.snippets.iter().map(|s| s.text.as_str()).collect(),
    };
    serde_json::to_string(&record).expect("record serialization is infallible")
}

pub fn write_corpus(path: impl AsRef<Path>, programs: &[Program]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for p in programs {
        writeln!(out, "{}", to_line(p)).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Split code into consecutive snippets of at most `lines_per_snippet`
/// non-blank lines. Blank lines are dropped.
pub fn segment(code: &str, lines_per_snippet: usize) -> Result<Vec<SnippetText>> {
    if lines_per_snippet == 0 {
        return Err(Error::Config("lines_per_snippet must be >= 1".into()));
    }
    let lines: Vec<&str> = code.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(lines
        .chunks(lines_per_snippet)
        .enumerate()
        .map(|(index, chunk)| SnippetText {
            index,
            text: chunk.join("\n"),
        })
        .collect())
}

/// A center snippet and its functional neighbours.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SnippetWindow {
    pub program_id: String,
    pub center_index: usize,
    pub functional_indices: Vec<usize>,
    pub radius: usize,
}

/// All windows of `program` with radius `radius`. Centers without any
/// neighbour produce no window.
pub fn make_windows(program: &Program, radius: usize) -> Result<Vec<SnippetWindow>> {
    if radius == 0 {
        return Err(Error::Config("window radius must be >= 1".into()));
    }
    let n = program.snippets.len();
    let mut windows = Vec::new();
    for c in 0..n {
        let lo = c.saturating_sub(radius);
        let hi = (c + radius).min(n.saturating_sub(1));
        let functional: Vec<usize> = (lo..=hi).filter(|&f| f != c).collect();
        if functional.is_empty() {
            continue;
        }
        windows.push(SnippetWindow {
            program_id: program.id.clone(),
            center_index: c,
            functional_indices: functional,
            radius,
        });
    }
    Ok(windows)
}

/// Radius implied by a window size (window 5 covers distance 2).
pub fn radius_for_window_size(window_size: usize) -> Result<usize> {
    if window_size < 3 || window_size.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "window_size must be odd and >= 3, got {window_size}"
        )));
    }
    Ok(window_size / 2)
}

/// A labelled (query, candidate) pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CloneExample {
    pub query_program_id: String,
    pub candidate_program_id: String,
    pub label: u8,
}

/// A program in the domain batch with its language label.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DomainSample {
    pub program: usize,
    pub label: usize,
}

/// One adversarial-stage batch, as indices into the program slice it was
/// sampled from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CloneBatch {
    /// Source-language queries, one per distinct problem.
    pub queries: Vec<usize>,
    /// `positives[i]` solves the same problem as `queries[i]`.
    pub positives: Vec<usize>,
    /// Every (query, in-batch candidate) pair with its label.
    pub examples: Vec<CloneExample>,
    /// Source programs (label 0) followed by target programs (label 1).
    pub domain: Vec<DomainSample>,
}

impl CloneBatch {
    pub fn source_count(&self) -> usize {
        self.domain.iter().filter(|d| d.label == 0).count()
    }

    pub fn target_count(&self) -> usize {
        self.domain.iter().filter(|d| d.label == 1).count()
    }
}

/// Index of clone groups used for repeated batch sampling.
#[derive(Clone, Debug)]
pub struct CloneIndex {
    /// source problems with at least two source-language solutions
    groups: Vec<Vec<usize>>,
    targets: Vec<usize>,
    source: String,
    target: String,
}

impl CloneIndex {
    pub fn new(programs: &[Program], source: &str, target: &str) -> Result<Self> {
        let mut by_problem: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        let mut targets = Vec::new();
        for (i, p) in programs.iter().enumerate() {
            if p.language == source {
                by_problem.entry(&p.problem_id).or_default().push(i);
            } else if p.language == target {
                targets.push(i);
            }
        }
        let groups: Vec<Vec<usize>> = by_problem.into_values().filter(|g| g.len() >= 2).collect();
        if groups.is_empty() {
            return Err(Error::Config(format!(
                "no labelled clone pairs in source language `{source}`"
            )));
        }
        Ok(Self {
            groups,
            targets,
            source: source.into(),
            target: target.into(),
        })
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn target_count(&self) -> usize {
        self.targets.len()
    }

    /// Draw one batch: `batch_size * a / (a + b)` source queries from
    /// distinct problems, each with a positive clone, plus
    /// `batch_size * b / (a + b)` target programs for the domain batch.
    pub fn sample(
        &self,
        programs: &[Program],
        batch_size: usize,
        ratio: (usize, usize),
        rng: &mut impl Rng,
    ) -> Result<CloneBatch> {
        let (a, b) = ratio;
        if a == 0 || b == 0 || batch_size == 0 || !batch_size.is_multiple_of(a + b) {
            return Err(Error::Config(format!(
                "batch_size {batch_size} is not divisible into ratio {a}:{b}"
            )));
        }
        let n_source = batch_size / (a + b) * a;
        let n_target = batch_size / (a + b) * b;
        if self.groups.len() < n_source {
            return Err(Error::Sampling(format!(
                "need {n_source} source problems with clones in `{}`, have {}",
                self.source,
                self.groups.len()
            )));
        }
        if self.targets.len() < n_target {
            return Err(Error::Sampling(format!(
                "need {n_target} programs in `{}`, have {}",
                self.target,
                self.targets.len()
            )));
        }
        let mut queries = Vec::with_capacity(n_source);
        let mut positives = Vec::with_capacity(n_source);
        for group in self.groups.choose_multiple(rng, n_source) {
            let pair: Vec<&usize> = group.choose_multiple(rng, 2).collect();
            queries.push(*pair[0]);
            positives.push(*pair[1]);
        }
        let mut examples = Vec::with_capacity(n_source * n_source);
        for &q in &queries {
            for &c in &positives {
                let same = programs[q].problem_id == programs[c].problem_id;
                examples.push(CloneExample {
                    query_program_id: programs[q].id.clone(),
                    candidate_program_id: programs[c].id.clone(),
                    label: u8::from(same),
                });
            }
        }
        let mut domain: Vec<DomainSample> = queries
            .iter()
            .map(|&program| DomainSample { program, label: 0 })
            .collect();
        domain.extend(
            self.targets
                .choose_multiple(rng, n_target)
                .map(|&program| DomainSample { program, label: 1 }),
        );
        Ok(CloneBatch {
            queries,
            positives,
            examples,
            domain,
        })
    }
}

/// Sample one clone/domain batch from `programs` (see [`CloneIndex::sample`]).
pub fn sample_clone_batch(
    programs: &[Program],
    batch_size: usize,
    source_lang: &str,
    target_lang: &str,
    ratio: (usize, usize),
    rng: &mut impl Rng,
) -> Result<CloneBatch> {
    CloneIndex::new(programs, source_lang, target_lang)?.sample(programs, batch_size, ratio, rng)
}

/// Sorted distinct language tags.
pub fn languages(programs: &[Program]) -> Vec<String> {
    programs
        .iter()
        .map(|p| p.language.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Deterministically split problem ids into (train, held-out).
pub fn split_problems(
    programs: &[Program],
    holdout_fraction: f64,
    seed: u64,
) -> Result<(BTreeSet<String>, BTreeSet<String>)> {
    if !(0.0..1.0).contains(&holdout_fraction) {
        return Err(Error::Config(format!(
            "holdout fraction must be in [0, 1), got {holdout_fraction}"
        )));
    }
    let mut problems: Vec<String> = programs
        .iter()
        .map(|p| p.problem_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5b1e);
    problems.shuffle(&mut rng);
    let n_hold = (problems.len() as f64 * holdout_fraction).round() as usize;
    let held = problems[..n_hold].iter().cloned().collect();
    let train = problems[n_hold..].iter().cloned().collect();
    Ok((train, held))
}

// ---------------------------------------------------------------------------
// Synthetic dialect corpus

/// Abstract keywords shared by every dialect before renaming.
const KEYWORDS: &[&str] = &[
    "let", "if", "then", "while", "do", "for", "in", "range", "print", "return", "read", "max",
    "min", "abs", "len", "sum",
];
const N_IDENTS: usize = 12;
const FUNCTIONS: &[usize] = &[11, 12, 13, 14, 15];
const ARITH: &[&str] = &["+", "-", "*", "/", "%"];
const CMP: &[&str] = &["<", ">", "==", "<=", ">=", "!="];
const MAX_NUMBER: u32 = 20;
const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "nu", "pe", "ra", "si", "to", "vu", "xe", "zo", "ba", "de", "fi", "go", "hu",
    "ja", "qe", "wi", "yo",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Tok {
    Kw(usize),
    Ident(usize),
    Num(u32),
    Op(&'static str),
    Term,
}

#[cfg(test)]
impl Tok {
    fn is_renamed(self) -> bool {
        matches!(self, Tok::Kw(_) | Tok::Ident(_) | Tok::Term)
    }
}

/// Surface vocabulary of one dialect.
#[derive(Clone, Debug)]
pub struct Dialect {
    pub name: String,
    keywords: Vec<String>,
    idents: Vec<String>,
    terminator: String,
}

impl Dialect {
    fn render(&self, tok: Tok) -> String {
        match tok {
            Tok::Kw(k) => self.keywords[k].clone(),
            Tok::Ident(i) => self.idents[i].clone(),
            Tok::Num(n) => n.to_string(),
            Tok::Op(o) => o.to_string(),
            Tok::Term => self.terminator.clone(),
        }
    }

    /// Every surface word that stands for a renamed abstract token.
    pub fn renamed_vocabulary(&self) -> BTreeSet<String> {
        self.keywords
            .iter()
            .chain(&self.idents)
            .chain(std::iter::once(&self.terminator))
            .cloned()
            .collect()
    }
}

fn fresh_word(rng: &mut ChaCha8Rng, used: &mut HashSet<String>) -> String {
    loop {
        let n = rng.random_range(2..=3);
        let word: String = (0..n)
            .map(|_| *SYLLABLES.choose(rng).expect("non-empty"))
            .collect();
        if used.insert(word.clone()) {
            return word;
        }
    }
}

/// Build the seeded surface vocabularies. Surface words are disjoint across
/// dialects.
pub fn make_dialects(names: &[String], seed: u64) -> Result<Vec<Dialect>> {
    if names.len() < 2 {
        return Err(Error::Config(format!(
            "at least 2 dialects are required, got {}",
            names.len()
        )));
    }
    let distinct: BTreeSet<&String> = names.iter().collect();
    if distinct.len() != names.len() {
        return Err(Error::Config("dialect names must be distinct".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0xd1a1);
    let mut used = HashSet::new();
    Ok(names
        .iter()
        .map(|name| {
            let keywords = (0..KEYWORDS.len())
                .map(|_| fresh_word(&mut rng, &mut used))
                .collect();
            let idents = (0..N_IDENTS).map(|_| fresh_word(&mut rng, &mut used)).collect();
            let terminator = fresh_word(&mut rng, &mut used);
            Dialect {
                name: name.clone(),
                keywords,
                idents,
                terminator,
            }
        })
        .collect())
}

/// Parameters of the synthetic generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_problems: usize,
    pub dialects: Vec<String>,
    pub seed: u64,
    /// Equivalent solutions per problem in each dialect.
    pub solutions_per_problem: usize,
    pub lines_per_snippet: usize,
}

impl SyntheticSpec {
    pub fn new(n_problems: usize, dialects: &[&str], seed: u64) -> Self {
        Self {
            n_problems,
            dialects: dialects.iter().map(|d| d.to_string()).collect(),
            seed,
            solutions_per_problem: 1,
            lines_per_snippet: DEFAULT_LINES_PER_SNIPPET,
        }
    }

    pub fn with_solutions(mut self, n: usize) -> Self {
        self.solutions_per_problem = n;
        self
    }
}

type Line = Vec<Tok>;

/// Constants a problem keeps coming back to.
struct Signature(Vec<u32>);

impl Signature {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        Self((0..3).map(|_| rng.random_range(1..=MAX_NUMBER)).collect())
    }

    fn number(&self, rng: &mut ChaCha8Rng) -> Tok {
        if rng.random_bool(0.75) {
            Tok::Num(*self.0.choose(rng).expect("non-empty"))
        } else {
            Tok::Num(rng.random_range(1..=MAX_NUMBER))
        }
    }
}

fn atom(rng: &mut ChaCha8Rng, sig: &Signature, live: usize) -> Tok {
    if rng.random_bool(0.5) {
        Tok::Ident(rng.random_range(0..live))
    } else {
        sig.number(rng)
    }
}

fn expr(rng: &mut ChaCha8Rng, sig: &Signature, live: usize, out: &mut Line) {
    out.push(atom(rng, sig, live));
    for _ in 0..rng.random_range(0..=2) {
        out.push(Tok::Op(ARITH.choose(rng).expect("non-empty")));
        out.push(atom(rng, sig, live));
    }
}

/// Abstract skeleton of one problem: a list of statements over abstract
/// variable slots, drawing constants mostly from a per-problem signature.
fn problem_skeleton(rng: &mut ChaCha8Rng) -> Vec<Line> {
    let sig = Signature::draw(rng);
    let kw = |name: &str| Tok::Kw(KEYWORDS.iter().position(|k| *k == name).expect("keyword"));
    let n_stmts = rng.random_range(7..=10);
    let mut lines = vec![vec![kw("read"), Tok::Ident(0), Tok::Term]];
    let mut live = 1usize;
    for _ in 0..n_stmts {
        let mut line = Vec::new();
        match rng.random_range(0..6) {
            0 | 1 => {
                let target = if live < N_IDENTS && rng.random_bool(0.6) {
                    live += 1;
                    live - 1
                } else {
                    rng.random_range(0..live)
                };
                line.extend([kw("let"), Tok::Ident(target), Tok::Op("=")]);
                expr(rng, &sig, live.max(1), &mut line);
            }
            2 => {
                line.extend([kw("if"), Tok::Op("("), Tok::Ident(rng.random_range(0..live))]);
                line.push(Tok::Op(CMP.choose(rng).expect("non-empty")));
                expr(rng, &sig, live, &mut line);
                line.extend([Tok::Op(")"), kw("then")]);
            }
            3 => {
                let v = if live < N_IDENTS {
                    live += 1;
                    live - 1
                } else {
                    rng.random_range(0..live)
                };
                line.extend([
                    kw("for"),
                    Tok::Ident(v),
                    kw("in"),
                    kw("range"),
                    Tok::Op("("),
                    sig.number(rng),
                    Tok::Op(")"),
                    kw("do"),
                ]);
            }
            4 => {
                line.extend([kw("while"), Tok::Op("("), Tok::Ident(rng.random_range(0..live))]);
                line.push(Tok::Op(CMP.choose(rng).expect("non-empty")));
                line.extend([sig.number(rng), Tok::Op(")"), kw("do")]);
            }
            _ => {
                if rng.random_bool(0.5) {
                    let f = *FUNCTIONS.choose(rng).expect("non-empty");
                    let target = rng.random_range(0..live);
                    line.extend([
                        kw("let"),
                        Tok::Ident(target),
                        Tok::Op("="),
                        Tok::Kw(f),
                        Tok::Op("("),
                        Tok::Ident(rng.random_range(0..live)),
                        Tok::Op(","),
                        sig.number(rng),
                        Tok::Op(")"),
                    ]);
                } else {
                    line.extend([kw("print"), Tok::Op("(")]);
                    expr(rng, &sig, live, &mut line);
                    line.push(Tok::Op(")"));
                }
            }
        }
        line.push(Tok::Term);
        lines.push(line);
    }
    lines.push(vec![kw("return"), Tok::Ident(rng.random_range(0..live)), Tok::Term]);
    lines
}

/// One solution of a skeleton: variable slots get a fresh assignment of
/// identifiers and commutative operands may swap.
fn solution_variant(skeleton: &[Line], rng: &mut ChaCha8Rng) -> Vec<Line> {
    let mut perm: Vec<usize> = (0..N_IDENTS).collect();
    perm.shuffle(rng);
    skeleton
        .iter()
        .map(|line| {
            let mut out: Line = line
                .iter()
                .map(|t| match *t {
                    Tok::Ident(i) => Tok::Ident(perm[i]),
                    other => other,
                })
                .collect();
            // swap operands of a standalone `a + b` / `a * b`
            for i in 2..out.len().saturating_sub(2) {
                if matches!(out[i], Tok::Op("+" | "*"))
                    && matches!(out[i - 2], Tok::Op("=" | "("))
                    && matches!(out[i + 2], Tok::Term | Tok::Op(")"))
                    && rng.random_bool(0.5)
                {
                    out.swap(i - 1, i + 1);
                }
            }
            out
        })
        .collect()
}

fn render(lines: &[Line], dialect: &Dialect) -> String {
    lines
        .iter()
        .map(|line| {
            line.iter()
                .map(|t| dialect.render(*t))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Synthetic multi-dialect corpus with one solution per problem per dialect.
pub fn gen_synthetic(n_problems: usize, dialects: &[&str], seed: u64) -> Result<Vec<Program>> {
    gen_synthetic_with(&SyntheticSpec::new(n_problems, dialects, seed))
}

/// Synthetic multi-dialect corpus. Every dialect renders the same abstract
/// token stream for a given (problem, solution) through its own renaming of
/// keywords, identifiers and the statement terminator.
pub fn gen_synthetic_with(spec: &SyntheticSpec) -> Result<Vec<Program>> {
    if spec.n_problems == 0 {
        return Err(Error::Config("n_problems must be >= 1".into()));
    }
    if spec.solutions_per_problem == 0 {
        return Err(Error::Config("solutions_per_problem must be >= 1".into()));
    }
    let dialects = make_dialects(&spec.dialects, spec.seed)?;
    let width = spec.n_problems.to_string().len().max(4);
    let mut programs = Vec::new();
    for p in 0..spec.n_problems {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(p as u64 + 1);
        let skeleton = problem_skeleton(&mut rng);
        let problem_id = format!("p{p:0width$}");
        for s in 0..spec.solutions_per_problem {
            let variant = solution_variant(&skeleton, &mut rng);
            for d in &dialects {
                let code = render(&variant, d);
                let snippets = segment(&code, spec.lines_per_snippet)?
                    .into_iter()
                    .map(|s| s.text)
                    .collect();
                programs.push(Program::new(
                    format!("{problem_id}-{}-s{s}", d.name),
                    d.name.clone(),
                    problem_id.clone(),
                    code,
                    snippets,
                ));
            }
        }
    }
    Ok(programs)
}

/// Surface vocabularies used by [`gen_synthetic_with`] for `spec`.
pub fn synthetic_dialects(spec: &SyntheticSpec) -> Result<Vec<Dialect>> {
    make_dialects(&spec.dialects, spec.seed)
}
