//! Corpus, training, evaluation and export commands.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use clonealign::checkpoint;
use clonealign::config::RunConfig;
use clonealign::corpus::{self, gen_synthetic_with, load_corpus, split_problems, write_corpus, Program, SyntheticSpec};
use clonealign::retrieval::{embed_all, embedding_rows, write_embeddings, Embedder, EvalMode, EvalReport, OracleEncoder};
use clonealign::trainer::{run_adversarial_stage, run_csp_stage, Observer, Stage, StepMetrics, TrainState};

use crate::manifest::{unix_now, InputDigest, RunManifest};
use crate::{EmbedArgs, EncoderSource, EvalArgs, GenArgs, ModeArg, SplitArgs, StageArg, TrainArgs, UsageError, CONFIG_ENV};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub fn gen(a: &GenArgs) -> Result<()> {
    if a.dialects.len() < 2 {
        bail!(UsageError(format!(
            "--dialects needs at least two tags, got {}",
            a.dialects.len()
        )));
    }
    let dialects: Vec<&str> = a.dialects.iter().map(String::as_str).collect();
    let spec = SyntheticSpec::new(a.problems, &dialects, a.seed).with_solutions(a.solutions);
    let programs = gen_synthetic_with(&spec)?;
    write_corpus(&a.out, &programs)?;
    println!("wrote {} programs to {}", programs.len(), a.out.display());
    Ok(())
}

pub fn split(a: &SplitArgs) -> Result<()> {
    let programs = load_corpus(&a.corpus)?;
    let (train, test) = split_problems(&programs, a.holdout, a.seed)?;
    let pick = |keep: &std::collections::BTreeSet<String>| -> Vec<Program> {
        programs.iter().filter(|p| keep.contains(&p.problem_id)).cloned().collect()
    };
    let (tr, te) = (pick(&train), pick(&test));
    write_corpus(&a.train_out, &tr)?;
    write_corpus(&a.test_out, &te)?;
    println!(
        "train: {} problems, {} programs; held out: {} problems, {} programs",
        train.len(),
        tr.len(),
        test.len(),
        te.len()
    );
    Ok(())
}

/// Explicit `--config`, then `$CLONEALIGN_CONFIG`, then defaults.
fn resolve_config(explicit: Option<&Path>) -> Result<(RunConfig, Option<PathBuf>)> {
    let path = match explicit {
        Some(p) => Some(p.to_path_buf()),
        None => std::env::var_os(CONFIG_ENV).filter(|v| !v.is_empty()).map(PathBuf::from),
    };
    match path {
        Some(p) => Ok((RunConfig::load(&p)?, Some(p))),
        None => Ok((RunConfig::default(), None)),
    }
}

/// Streams metrics to `metrics.jsonl` and periodic checkpoints to
/// `checkpoints/`.
struct RunWriter {
    metrics: BufWriter<File>,
    metrics_path: PathBuf,
    checkpoint_dir: PathBuf,
    written: Vec<String>,
}

impl Observer for RunWriter {
    fn metrics(&mut self, m: &StepMetrics) -> clonealign::Result<()> {
        writeln!(self.metrics, "{}", m.to_json_line()).map_err(|e| io_err(&self.metrics_path, e))
    }

    fn checkpoint(&mut self, state: &TrainState) -> clonealign::Result<()> {
        std::fs::create_dir_all(&self.checkpoint_dir).map_err(|e| io_err(&self.checkpoint_dir, e))?;
        let stage = match state.stage {
            Stage::Csp => "csp",
            Stage::Adversarial => "adversarial",
        };
        let name = format!("{stage}-{:06}.ckpt", state.step);
        checkpoint::save(state, self.checkpoint_dir.join(&name))?;
        self.written.push(format!("{CHECKPOINT_DIR}/{name}"));
        Ok(())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> clonealign::Error {
    clonealign::Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let started = unix_now();
    let (mut cfg, config_path) = resolve_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.ablation.enable_csp &= !a.no_csp;
    cfg.ablation.enable_dal &= !a.no_dal;
    cfg.ablation.enable_cycle &= !a.no_cycle;
    cfg.validate()?;
    let schedule = cfg.schedule();

    let programs = load_corpus(&a.corpus)?;
    let mut inputs = vec![InputDigest::of_file("corpus", &a.corpus)?];
    if let Some(p) = &config_path {
        inputs.push(InputDigest::of_file("config", p)?);
    }
    let mut state = match &a.resume {
        Some(p) => {
            inputs.push(InputDigest::of_file("resume", p)?);
            let s = checkpoint::load(p)?;
            if a.seed.is_some_and(|seed| seed != s.seed) {
                bail!(UsageError(format!(
                    "--seed {} conflicts with the checkpoint's seed {}",
                    cfg.seed, s.seed
                )));
            }
            cfg.seed = s.seed;
            s
        }
        None => TrainState::init(&programs, cfg.encoder(), cfg.model.max_vocab, cfg.seed)?,
    };
    if a.stage == StageArg::Csp && state.stage == Stage::Adversarial {
        bail!(UsageError("--stage csp on a checkpoint that already finished the snippet stage".into()));
    }

    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let metrics_path = a.out_dir.join(METRICS_FILE);
    let file = File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?;
    let mut writer = RunWriter {
        metrics: BufWriter::new(file),
        metrics_path,
        checkpoint_dir: a.out_dir.join(CHECKPOINT_DIR),
        written: Vec::new(),
    };
    if matches!(a.stage, StageArg::Csp | StageArg::All) && state.stage == Stage::Csp {
        run_csp_stage(&programs, &schedule, &mut state, &mut writer)?;
    }
    if matches!(a.stage, StageArg::Adversarial | StageArg::All) {
        run_adversarial_stage(&programs, &schedule, &mut state, &mut writer)?;
    }
    writer.metrics.flush().context("flushing metrics")?;
    checkpoint::save(&state, a.out_dir.join(CHECKPOINT_FILE))?;

    let mut outputs = vec![CHECKPOINT_FILE.to_string(), METRICS_FILE.to_string()];
    outputs.extend(writer.written);
    let stage = format!("{:?}", a.stage).to_lowercase();
    let manifest = RunManifest::new("train", &stage, cfg.seed, cfg, inputs, outputs, started);
    manifest.write(&a.out_dir)?;
    println!(
        "trained to {:?} step {}; run directory {}",
        state.stage,
        state.step,
        a.out_dir.display()
    );
    Ok(())
}

fn embedder(src: &EncoderSource, programs: &[Program]) -> Result<Box<dyn Embedder>> {
    if src.oracle {
        return Ok(Box::new(OracleEncoder::new(programs)));
    }
    let path = src.checkpoint.as_ref().expect("clap requires a checkpoint without --oracle");
    Ok(Box::new(checkpoint::load(path)?.encoder))
}

fn check_language(programs: &[Program], lang: &str) -> Result<()> {
    let known = corpus::languages(programs);
    if !known.iter().any(|l| l == lang) {
        bail!(UsageError(format!(
            "unknown language `{lang}`; available: {}",
            known.join(", ")
        )));
    }
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let programs = load_corpus(&a.corpus)?;
    check_language(&programs, &a.query_lang)?;
    let mode = match a.mode {
        ModeArg::Cross => {
            let Some(cand) = &a.cand_lang else {
                bail!(UsageError("--mode cross needs --cand-lang".into()));
            };
            check_language(&programs, cand)?;
            EvalMode::Cross {
                query_language: a.query_lang.clone(),
                candidate_language: cand.clone(),
                mixed_pool: a.mixed_pool,
            }
        }
        ModeArg::Mono => {
            if a.mixed_pool || a.cand_lang.as_ref().is_some_and(|c| c != &a.query_lang) {
                bail!(UsageError("--mode mono takes only --query-lang".into()));
            }
            EvalMode::Mono {
                language: a.query_lang.clone(),
            }
        }
    };
    let emb = embedder(&a.encoder, &programs)?;
    let report = EvalReport::build(&programs, emb.as_ref(), &[mode])?;
    for run in &report.runs {
        println!(
            "map {:.6} queries {} excluded {} pool {}",
            run.summary.map, run.summary.included, run.summary.excluded, run.pool_size
        );
    }
    if let Some(out) = &a.out {
        let text = serde_json::to_string_pretty(&report)?;
        std::fs::write(out, text + "\n").with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

pub fn embed(a: &EmbedArgs) -> Result<()> {
    let programs = load_corpus(&a.corpus)?;
    let emb = embedder(&a.encoder, &programs)?;
    let embeddings = embed_all(&programs, emb.as_ref())?;
    write_embeddings(&a.out, &embedding_rows(&programs, embeddings))?;
    println!("wrote {} embeddings to {}", programs.len(), a.out.display());
    Ok(())
}
