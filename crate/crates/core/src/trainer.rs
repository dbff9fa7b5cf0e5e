//! Two-stage schedule: contrastive snippet prediction, then adversarial
//! clone fine-tuning with the domain head and cycle mappers.
//!
//! Each step draws its randomness from a stream derived from the run seed,
//! the stage and the step index, so a run resumed from a checkpoint sees the
//! same batches as an uninterrupted one.

use std::collections::{BTreeMap, HashMap};

use ndarray::Array2;
use rand::seq::index::sample;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{self, grl_lambda, DomainHead, GrlConfig};
use crate::autograd::{Graph, Param, Var};
use crate::cloneloss::{clone_loss, combine, LossWeights};
use crate::corpus::{self, make_windows, radius_for_window_size, CloneIndex, Program, SnippetWindow};
use crate::csp::{self, csp_loss, LanguageQueue, QueueEntry};
use crate::cycle::{cycle_loss, CycleMapper};
use crate::encoder::{Embedding, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::tokenizer::{TokenSequence, Vocabulary};

/// Learning rate of the desk-scale schedule. The toy encoder starts from
/// random weights, so it needs a far larger step than a pre-trained one.
pub const DESK_LR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Csp,
    Adversarial,
}

impl Stage {
    fn stream(self) -> u64 {
        match self {
            Stage::Csp => 1,
            Stage::Adversarial => 2,
        }
    }
}

/// Which parts of the objective are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub enable_csp: bool,
    pub enable_dal: bool,
    pub enable_cycle: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::FULL
    }
}

impl AblationFlags {
    /// Clone loss only.
    pub const MCC: Self = Self {
        enable_csp: false,
        enable_dal: false,
        enable_cycle: false,
    };
    pub const CSP: Self = Self {
        enable_csp: true,
        enable_dal: false,
        enable_cycle: false,
    };
    pub const DAL: Self = Self {
        enable_csp: true,
        enable_dal: true,
        enable_cycle: false,
    };
    pub const FULL: Self = Self {
        enable_csp: true,
        enable_dal: true,
        enable_cycle: true,
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CspConfig {
    pub window_size: usize,
    pub queue_size: usize,
    pub tau: f64,
    /// Negatives drawn per center once its queue is warm.
    pub negatives: usize,
    /// Queue fill at which queue negatives replace in-batch ones.
    pub warmup_min: usize,
    /// Re-embed queue entries with the current encoder before drawing.
    /// Stale entries lag the moving embedding cloud and the loss then
    /// rewards drift, which collapses the space at desk learning rates.
    #[serde(default = "yes")]
    pub refresh_queue: bool,
    /// Treat the positive as a fixed target. With a live positive the pull
    /// acts on both ends while detached negatives push only the center, and
    /// the embeddings collapse.
    #[serde(default = "yes")]
    pub detach_positive: bool,
}

fn yes() -> bool {
    true
}

impl Default for CspConfig {
    fn default() -> Self {
        Self {
            window_size: 5,
            queue_size: csp::DEFAULT_QUEUE_SIZE,
            tau: csp::DEFAULT_TEMPERATURE,
            negatives: csp::DEFAULT_QUEUE_SIZE,
            warmup_min: csp::DEFAULT_WARMUP_MIN,
            refresh_queue: true,
            detach_positive: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub csp_steps: u64,
    pub adversarial_steps: u64,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub weights: LossWeights,
    pub flags: AblationFlags,
    pub csp: CspConfig,
    pub mu: f64,
    pub source_language: String,
    pub target_language: String,
    /// Source to target programs in the domain batch.
    pub ratio: (usize, usize),
    /// Emit metrics every this many steps (and on the last step).
    pub log_every: u64,
    /// Hand the state to the observer every this many steps, 0 for never.
    pub checkpoint_every: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            csp_steps: 300,
            adversarial_steps: 300,
            batch_size: 24,
            optimizer: AdamWConfig {
                lr: DESK_LR,
                ..Default::default()
            },
            weights: LossWeights::default(),
            flags: AblationFlags::default(),
            csp: CspConfig::default(),
            mu: adversarial::DEFAULT_MU,
            source_language: "dA".into(),
            target_language: "dB".into(),
            ratio: (1, 2),
            log_every: 1,
            checkpoint_every: 0,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.weights.validate()?;
        radius_for_window_size(self.csp.window_size)?;
        let (a, b) = self.ratio;
        if a == 0 || b == 0 {
            return Err(Error::Config(format!("ratio {a}:{b} must be positive")));
        }
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(a + b) {
            return Err(Error::Config(format!(
                "batch_size {} must be a positive multiple of {}",
                self.batch_size,
                a + b
            )));
        }
        if self.csp.queue_size == 0 || self.csp.negatives == 0 {
            return Err(Error::Config("queue_size and negatives must be >= 1".into()));
        }
        if !(self.csp.tau > 0.0) {
            return Err(Error::Config(format!("csp tau must be > 0, got {}", self.csp.tau)));
        }
        if !(self.mu.is_finite() && self.mu > 0.0) {
            return Err(Error::Config(format!("mu must be > 0, got {}", self.mu)));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be >= 1".into()));
        }
        if self.source_language == self.target_language {
            return Err(Error::Config("source and target language must differ".into()));
        }
        Ok(())
    }

    /// Loss weights with disabled components zeroed.
    pub fn effective_weights(&self) -> LossWeights {
        LossWeights {
            alpha: if self.flags.enable_dal { self.weights.alpha } else { 0.0 },
            beta: if self.flags.enable_cycle { self.weights.beta } else { 0.0 },
            tau_cl: self.weights.tau_cl,
        }
    }
}

/// Everything training mutates.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub encoder: Encoder,
    pub domain_head: DomainHead,
    pub mapper_h: CycleMapper,
    pub mapper_p: CycleMapper,
    pub optimizer: AdamW,
    pub stage: Stage,
    pub step: u64,
    pub seed: u64,
    pub queues: BTreeMap<String, LanguageQueue>,
}

const HEAD_STREAM: u64 = 7;

impl TrainState {
    /// Fresh state around `encoder`. Heads and mappers are seeded from
    /// `seed` on their own stream.
    pub fn new(encoder: Encoder, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(HEAD_STREAM);
        let d = encoder.dim();
        Ok(Self {
            domain_head: DomainHead::new(d, 2, &mut rng)?,
            mapper_h: CycleMapper::new("h", d, &mut rng)?,
            mapper_p: CycleMapper::new("p", d, &mut rng)?,
            encoder,
            optimizer: AdamW::default(),
            stage: Stage::Csp,
            step: 0,
            seed,
            queues: BTreeMap::new(),
        })
    }

    /// Build the vocabulary from `programs` and a seeded encoder.
    pub fn init(
        programs: &[Program],
        mut config: EncoderConfig,
        max_vocab: Option<usize>,
        seed: u64,
    ) -> Result<Self> {
        if programs.is_empty() {
            return Err(Error::EmptyInput);
        }
        let vocab = Vocabulary::build(programs.iter().map(|p| p.code.as_str()), max_vocab);
        config.seed = seed;
        Self::new(Encoder::new(config, vocab)?, seed)
    }

    /// Every trainable parameter, encoder first.
    pub fn params(&self) -> Vec<&Param> {
        let mut out = self.encoder.params();
        out.extend(self.domain_head.params());
        out.extend(self.mapper_h.params());
        out.extend(self.mapper_p.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.encoder.params_mut();
        out.extend(self.domain_head.params_mut());
        out.extend(self.mapper_h.params_mut());
        out.extend(self.mapper_p.params_mut());
        out
    }

    fn step_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((self.stage.stream() << 48) | self.step);
        rng
    }
}

/// One line of the metrics stream. Components of disabled objectives are
/// absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub stage: Stage,
    pub step: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub csp_loss: Option<f64>,
    /// Mean negatives per center.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub negatives: Option<f64>,
    /// Centers that used in-batch negatives.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub warmup_centers: Option<usize>,
    /// Entries per language queue after the step.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub queue_fill: Option<BTreeMap<String, usize>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub clone_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub domain_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub domain_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cycle_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub total: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub grad_norm: Option<f64>,
}

impl StepMetrics {
    fn new(stage: Stage, step: u64) -> Self {
        Self {
            stage,
            step,
            csp_loss: None,
            negatives: None,
            warmup_centers: None,
            queue_fill: None,
            lambda: None,
            clone_loss: None,
            domain_loss: None,
            domain_accuracy: None,
            cycle_loss: None,
            total: None,
            grad_norm: None,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

/// Receives metrics and periodic checkpoints during a stage.
pub trait Observer {
    fn metrics(&mut self, m: &StepMetrics) -> Result<()>;

    fn checkpoint(&mut self, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

impl Observer for Vec<StepMetrics> {
    fn metrics(&mut self, m: &StepMetrics) -> Result<()> {
        self.push(m.clone());
        Ok(())
    }
}

/// Discards everything.
pub struct Discard;

impl Observer for Discard {
    fn metrics(&mut self, _m: &StepMetrics) -> Result<()> {
        Ok(())
    }
}

fn report(
    cfg: &ScheduleConfig,
    total: u64,
    state: &TrainState,
    m: &StepMetrics,
    obs: &mut dyn Observer,
) -> Result<()> {
    let done = state.step;
    if done.is_multiple_of(cfg.log_every) || done == total {
        obs.metrics(m)?;
    }
    if cfg.checkpoint_every > 0 && done.is_multiple_of(cfg.checkpoint_every) {
        obs.checkpoint(state)?;
    }
    Ok(())
}

fn encode_rows(g: &mut Graph, encoder: &Encoder, seqs: &[&TokenSequence]) -> Result<Var> {
    let rows = seqs
        .iter()
        .map(|s| encoder.forward(g, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(g.concat_rows(&rows))
}

/// Windows and tokenized snippets of a corpus.
struct CspData {
    windows: Vec<(usize, SnippetWindow)>,
    snippets: Vec<Vec<TokenSequence>>,
    index: HashMap<String, usize>,
}

/// One sampled window: program index plus (snippet index, live embedding)
/// of its center and positive.
struct CspItem {
    program: usize,
    center: (usize, Var),
    positive: (usize, Var),
}

impl CspData {
    fn new(corpus: &[Program], encoder: &Encoder, radius: usize) -> Result<Self> {
        let mut windows = Vec::new();
        let mut snippets = Vec::with_capacity(corpus.len());
        for (i, p) in corpus.iter().enumerate() {
            windows.extend(make_windows(p, radius)?.into_iter().map(|w| (i, w)));
            snippets.push(p.snippets.iter().map(|s| encoder.tokenize(&s.text)).collect());
        }
        if windows.is_empty() {
            return Err(Error::Config(
                "no snippet windows: every program has fewer than two snippets".into(),
            ));
        }
        let index = corpus.iter().enumerate().map(|(i, p)| (p.id.clone(), i)).collect();
        Ok(Self {
            windows,
            snippets,
            index,
        })
    }

    fn snippet(&self, program: &str, snippet: usize) -> Option<&TokenSequence> {
        self.snippets.get(*self.index.get(program)?)?.get(snippet)
    }
}

fn row(g: &Graph, v: Var) -> Vec<f64> {
    g.value(v).row(0).to_vec()
}

fn stack(rows: &[&[f64]]) -> Array2<f64> {
    let d = rows.first().map_or(0, |r| r.len());
    Array2::from_shape_fn((rows.len(), d), |(i, j)| rows[i][j])
}

fn csp_step(
    corpus: &[Program],
    data: &CspData,
    cfg: &ScheduleConfig,
    state: &mut TrainState,
) -> Result<StepMetrics> {
    let mut rng = state.step_rng();
    if cfg.csp.refresh_queue {
        let encoder = &state.encoder;
        for q in state.queues.values_mut().filter(|q| q.len() >= cfg.csp.warmup_min) {
            q.refresh(|e| {
                let seq = data.snippet(&e.source, e.snippet).ok_or_else(|| {
                    Error::Validation(format!(
                        "queue entry refers to snippet {} of unknown program `{}`",
                        e.snippet, e.source
                    ))
                })?;
                encoder.encode(seq)
            })?;
        }
    }

    let n = cfg.batch_size.min(data.windows.len());
    let picks = sample(&mut rng, data.windows.len(), n).into_vec();
    let mut g = Graph::new();
    let mut items = Vec::with_capacity(n);
    for w in picks {
        let (pi, win) = &data.windows[w];
        let f = *win.functional_indices.choose(&mut rng).expect("windows have neighbours");
        let c = state.encoder.forward(&mut g, &data.snippets[*pi][win.center_index])?;
        let p = state.encoder.forward(&mut g, &data.snippets[*pi][f])?;
        items.push(CspItem {
            program: *pi,
            center: (win.center_index, c),
            positive: (f, p),
        });
    }
    let values: Vec<(Vec<f64>, Vec<f64>)> = items
        .iter()
        .map(|it| (row(&g, it.center.1), row(&g, it.positive.1)))
        .collect();

    let mut kept = Vec::new();
    let mut negatives = Vec::new();
    let mut warmup = 0;
    for (i, it) in items.iter().enumerate() {
        let program = &corpus[it.program];
        let queue = &state.queues[&program.language];
        let neg = if queue.len() >= cfg.csp.warmup_min {
            let drawn = queue.sample_negatives(&program.language, cfg.csp.negatives, &program.id, &mut rng)?;
            stack(&drawn.entries.iter().map(|e| e.embedding.values()).collect::<Vec<_>>())
        } else {
            warmup += 1;
            let mut rows: Vec<&[f64]> = Vec::new();
            for (other, (c, p)) in items.iter().zip(&values) {
                let o = &corpus[other.program];
                if o.language == program.language && o.id != program.id {
                    rows.push(c);
                    rows.push(p);
                }
            }
            stack(&rows)
        };
        if neg.nrows() > 0 {
            kept.push(i);
            negatives.push(neg);
        }
    }

    let mut m = StepMetrics::new(Stage::Csp, state.step);
    m.warmup_centers = Some(warmup);
    if !kept.is_empty() {
        m.negatives = Some(negatives.iter().map(|n| n.nrows()).sum::<usize>() as f64 / kept.len() as f64);
        let centers: Vec<Var> = kept.iter().map(|&i| items[i].center.1).collect();
        let positives: Vec<Var> = kept
            .iter()
            .map(|&i| {
                let p = items[i].positive.1;
                if cfg.csp.detach_positive {
                    g.detach(p)
                } else {
                    p
                }
            })
            .collect();
        let c = g.concat_rows(&centers);
        let p = g.concat_rows(&positives);
        let loss = csp_loss(&mut g, c, p, &negatives, cfg.csp.tau)?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite {
                component: "csp".into(),
                value,
            });
        }
        let grads = g.backward(loss);
        let norm = state.optimizer.step(&cfg.optimizer, state.encoder.params_mut(), &grads)?;
        m.csp_loss = Some(value);
        m.grad_norm = Some(norm);
    }

    let mut pushes: BTreeMap<&str, Vec<QueueEntry>> = BTreeMap::new();
    for (it, (c, p)) in items.iter().zip(values) {
        let program = &corpus[it.program];
        let entries = pushes.entry(program.language.as_str()).or_default();
        for (snippet, v) in [(it.center.0, c), (it.positive.0, p)] {
            entries.push(QueueEntry {
                embedding: Embedding(v),
                source: program.id.clone(),
                snippet,
            });
        }
    }
    for (lang, entries) in pushes {
        state.queues.get_mut(lang).expect("queue exists").push(entries)?;
    }
    m.queue_fill = Some(state.queues.iter().map(|(k, q)| (k.clone(), q.len())).collect());
    Ok(m)
}

/// Contrastive snippet prediction until `state.step == cfg.csp_steps`.
/// A disabled or zero-step stage leaves the state untouched.
pub fn run_csp_stage(
    corpus: &[Program],
    cfg: &ScheduleConfig,
    state: &mut TrainState,
    obs: &mut dyn Observer,
) -> Result<()> {
    cfg.validate()?;
    if !cfg.flags.enable_csp || cfg.csp_steps == 0 {
        return Ok(());
    }
    if state.stage != Stage::Csp {
        return Err(Error::Config("the snippet stage is already finished".into()));
    }
    let radius = radius_for_window_size(cfg.csp.window_size)?;
    let data = CspData::new(corpus, &state.encoder, radius)?;
    for lang in corpus::languages(corpus) {
        match state.queues.get(&lang) {
            Some(q) if q.capacity() != cfg.csp.queue_size => {
                return Err(Error::Config(format!(
                    "queue `{lang}` has capacity {}, config asks for {}",
                    q.capacity(),
                    cfg.csp.queue_size
                )));
            }
            Some(_) => {}
            None => {
                let q = LanguageQueue::new(lang.clone(), cfg.csp.queue_size)?;
                state.queues.insert(lang, q);
            }
        }
    }
    while state.step < cfg.csp_steps {
        let m = csp_step(corpus, &data, cfg, state)?;
        state.step += 1;
        report(cfg, cfg.csp_steps, state, &m, obs)?;
    }
    Ok(())
}

fn adversarial_step(
    corpus: &[Program],
    tokens: &[TokenSequence],
    index: &CloneIndex,
    cfg: &ScheduleConfig,
    state: &mut TrainState,
) -> Result<StepMetrics> {
    let flags = cfg.flags;
    let mut rng = state.step_rng();
    let batch = index.sample(corpus, cfg.batch_size, cfg.ratio, &mut rng)?;
    let mut g = Graph::new();
    let seqs = |ids: &mut dyn Iterator<Item = usize>| ids.map(|i| &tokens[i]).collect::<Vec<_>>();
    let q = encode_rows(&mut g, &state.encoder, &seqs(&mut batch.queries.iter().copied()))?;
    let c = encode_rows(&mut g, &state.encoder, &seqs(&mut batch.positives.iter().copied()))?;
    let positive: Vec<usize> = (0..batch.queries.len()).collect();
    let l_cl = clone_loss(&mut g, q, c, &positive, cfg.weights.tau_cl)?;

    let mut m = StepMetrics::new(Stage::Adversarial, state.step);
    m.clone_loss = Some(g.scalar(l_cl));
    let targets = if flags.enable_dal || flags.enable_cycle {
        let ids = batch.domain.iter().filter(|d| d.label == 1).map(|d| d.program);
        Some(encode_rows(&mut g, &state.encoder, &seqs(&mut ids.into_iter()))?)
    } else {
        None
    };
    let l_dc = match targets {
        Some(t) if flags.enable_dal => {
            let lambda = grl_lambda(&GrlConfig {
                mu: cfg.mu,
                total_steps: cfg.adversarial_steps,
                step: state.step,
            })?;
            // the domain batch's source half is the query set
            let x = g.concat_rows(&[q, t]);
            let labels: Vec<usize> = batch.domain.iter().map(|d| d.label).collect();
            let probs = state.domain_head.probabilities(&mut g, x, lambda);
            let loss = adversarial::domain_loss(&mut g, probs, &labels)?;
            m.lambda = Some(lambda);
            m.domain_loss = Some(g.scalar(loss));
            m.domain_accuracy = Some(adversarial::accuracy(g.value(probs), &labels));
            Some(loss)
        }
        _ => None,
    };
    let l_cyc = match targets {
        Some(t) if flags.enable_cycle => {
            let loss = cycle_loss(&mut g, &state.mapper_h, &state.mapper_p, q, t)?;
            m.cycle_loss = Some(g.scalar(loss));
            Some(loss)
        }
        _ => None,
    };
    let total = combine(&mut g, l_cl, l_dc, l_cyc, &cfg.effective_weights())?;
    m.total = Some(g.scalar(total));

    let grads = g.backward(total);
    let mut params = state.encoder.params_mut();
    if flags.enable_dal {
        params.extend(state.domain_head.params_mut());
    }
    if flags.enable_cycle {
        params.extend(state.mapper_h.params_mut());
        params.extend(state.mapper_p.params_mut());
    }
    m.grad_norm = Some(state.optimizer.step(&cfg.optimizer, params, &grads)?);
    Ok(m)
}

/// Clone fine-tuning until `state.step == cfg.adversarial_steps`. Entering
/// from the snippet stage resets the step counter.
pub fn run_adversarial_stage(
    corpus: &[Program],
    cfg: &ScheduleConfig,
    state: &mut TrainState,
    obs: &mut dyn Observer,
) -> Result<()> {
    cfg.validate()?;
    if cfg.adversarial_steps == 0 {
        return Ok(());
    }
    let index = CloneIndex::new(corpus, &cfg.source_language, &cfg.target_language)?;
    if (cfg.flags.enable_dal || cfg.flags.enable_cycle) && index.target_count() == 0 {
        return Err(Error::Config(format!(
            "no programs in target language `{}`",
            cfg.target_language
        )));
    }
    let tokens: Vec<TokenSequence> = corpus.iter().map(|p| state.encoder.tokenize(&p.code)).collect();
    if state.stage == Stage::Csp {
        state.stage = Stage::Adversarial;
        state.step = 0;
    }
    while state.step < cfg.adversarial_steps {
        let m = adversarial_step(corpus, &tokens, &index, cfg, state)?;
        state.step += 1;
        report(cfg, cfg.adversarial_steps, state, &m, obs)?;
    }
    Ok(())
}

/// Both stages in order.
pub fn train(
    corpus: &[Program],
    cfg: &ScheduleConfig,
    state: &mut TrainState,
    obs: &mut dyn Observer,
) -> Result<()> {
    if state.stage == Stage::Csp {
        run_csp_stage(corpus, cfg, state, obs)?;
    }
    run_adversarial_stage(corpus, cfg, state, obs)
}
