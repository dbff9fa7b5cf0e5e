//! Training-loop behaviour on small synthetic corpora: replay determinism,
//! ablation degeneracy, the reversal schedule, snippet separation and
//! checkpoint files.

use std::path::Path;

use clonealign::adversarial::{grl_lambda, GrlConfig};
use clonealign::checkpoint;
use clonealign::corpus::{gen_synthetic_with, make_windows, Program, SyntheticSpec};
use clonealign::encoder::{cosine, EncoderConfig};
use clonealign::trainer::{
    run_adversarial_stage, run_csp_stage, AblationFlags, CspConfig, Observer, ScheduleConfig, Stage, StepMetrics,
    TrainState,
};
use clonealign::Error;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn corpus() -> Vec<Program> {
    gen_synthetic_with(&SyntheticSpec::new(20, &["dA", "dB"], 4).with_solutions(2)).unwrap()
}

fn encoder() -> EncoderConfig {
    EncoderConfig {
        d_model: 32,
        n_layers: 1,
        n_heads: 2,
        d_ff: 64,
        max_len: 256,
        ..Default::default()
    }
}

fn schedule(steps: u64) -> ScheduleConfig {
    ScheduleConfig {
        csp_steps: steps,
        adversarial_steps: steps,
        batch_size: 12,
        csp: CspConfig {
            queue_size: 32,
            negatives: 16,
            warmup_min: 8,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn csp_run(corpus: &[Program], steps: u64) -> (TrainState, Vec<StepMetrics>) {
    let mut state = TrainState::init(corpus, encoder(), None, 4).unwrap();
    let mut log = Vec::new();
    run_csp_stage(corpus, &schedule(steps), &mut state, &mut log).unwrap();
    (state, log)
}

#[test]
fn snippet_stage_replays_and_separates_neighbours() {
    let corpus = corpus();
    let (a, log_a) = csp_run(&corpus, 50);
    let (b, log_b) = csp_run(&corpus, 50);
    assert_eq!(log_a.last().unwrap().csp_loss, log_b.last().unwrap().csp_loss);
    assert_eq!(a, b);

    // neighbours within the window end up closer than random snippets of the
    // same language
    let radius = ScheduleConfig::default().csp.window_size / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut near, mut far) = (Vec::new(), Vec::new());
    for p in corpus.iter().filter(|p| p.language == "dA") {
        let emb: Vec<_> = p.snippets.iter().map(|s| a.encoder.embed_text(&s.text).unwrap()).collect();
        let others: Vec<&Program> = corpus.iter().filter(|o| o.language == p.language && o.id != p.id).collect();
        for w in make_windows(p, radius).unwrap() {
            for &f in &w.functional_indices {
                near.push(cosine(&emb[w.center_index], &emb[f]).unwrap());
            }
            let other = others.choose(&mut rng).unwrap();
            let snippet = other.snippets.choose(&mut rng).unwrap();
            let e = a.encoder.embed_text(&snippet.text).unwrap();
            far.push(cosine(&emb[w.center_index], &e).unwrap());
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&near) > mean(&far), "near {} far {}", mean(&near), mean(&far));
}

#[test]
fn clone_only_objective_logs_the_clone_loss_and_no_other_terms() {
    let corpus = corpus();
    let mut state = TrainState::init(&corpus, encoder(), None, 4).unwrap();
    let cfg = ScheduleConfig {
        flags: AblationFlags::MCC,
        ..schedule(10)
    };
    let mut log = Vec::new();
    run_adversarial_stage(&corpus, &cfg, &mut state, &mut log).unwrap();
    assert_eq!(log.len(), 10);
    for m in &log {
        assert!((m.total.unwrap() - m.clone_loss.unwrap()).abs() < 1e-9);
        assert!(m.domain_loss.is_none() && m.cycle_loss.is_none() && m.lambda.is_none() && m.csp_loss.is_none());
    }
}

#[test]
fn adversarial_steps_follow_the_reversal_schedule() {
    let corpus = corpus();
    let mut state = TrainState::init(&corpus, encoder(), None, 4).unwrap();
    let cfg = ScheduleConfig {
        mu: 5.0,
        ..schedule(12)
    };
    let mut log = Vec::new();
    run_adversarial_stage(&corpus, &cfg, &mut state, &mut log).unwrap();
    for (t, m) in log.iter().enumerate() {
        assert_eq!(m.step, t as u64);
        let expected = grl_lambda(&GrlConfig {
            mu: 5.0,
            total_steps: 12,
            step: t as u64,
        })
        .unwrap();
        assert_eq!(m.lambda, Some(expected));
        assert!(m.cycle_loss.is_some() && m.domain_loss.is_some());
    }
}

#[test]
fn adversarial_replay_is_byte_identical() {
    let corpus = corpus();
    let lines = || {
        let (mut state, _) = csp_run(&corpus, 5);
        let mut log = Vec::new();
        run_adversarial_stage(&corpus, &schedule(8), &mut state, &mut log).unwrap();
        log.iter().map(StepMetrics::to_json_line).collect::<Vec<_>>()
    };
    assert_eq!(lines(), lines());
}

/// Saves the state handed to the checkpoint hook at `step` to `path`.
struct SaveAt<'a> {
    step: u64,
    path: &'a Path,
    log: Vec<StepMetrics>,
}

impl Observer for SaveAt<'_> {
    fn metrics(&mut self, m: &StepMetrics) -> clonealign::Result<()> {
        self.log.push(m.clone());
        Ok(())
    }

    fn checkpoint(&mut self, state: &TrainState) -> clonealign::Result<()> {
        if state.step == self.step {
            checkpoint::save(state, self.path)?;
        }
        Ok(())
    }
}

#[test]
fn checkpoint_files_resume_to_the_same_next_step() {
    let corpus = corpus();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("step25.ckpt");
    let cfg = ScheduleConfig {
        checkpoint_every: 5,
        ..schedule(50)
    };
    let (mut full, _) = csp_run(&corpus, 5);
    let mut obs = SaveAt {
        step: 25,
        path: &path,
        log: Vec::new(),
    };
    run_adversarial_stage(&corpus, &cfg, &mut full, &mut obs).unwrap();

    let mut resumed = checkpoint::load(&path).unwrap();
    assert_eq!((resumed.stage, resumed.step), (Stage::Adversarial, 25));
    let again = dir.path().join("again.ckpt");
    checkpoint::save(&resumed, &again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());

    let mut rest = Vec::new();
    run_adversarial_stage(&corpus, &cfg, &mut resumed, &mut rest).unwrap();
    assert_eq!(rest.len(), 25);
    assert_eq!(rest[0].step, 25);
    for (a, b) in obs.log[25..].iter().zip(&rest) {
        assert!((a.total.unwrap() - b.total.unwrap()).abs() < 1e-9, "step {}", a.step);
    }
    assert_eq!(resumed, full);

    let bytes = std::fs::read(&path).unwrap();
    let truncated = dir.path().join("truncated.ckpt");
    std::fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(checkpoint::load(&truncated), Err(Error::Checksum { .. })));
}
