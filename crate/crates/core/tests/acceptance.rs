//! Acceptance checks, one report line per criterion.
//!
//! Runs without the libtest harness so the report is always printed.
//! Criteria 8 and 9 are soft: they are reported but do not fail the target.

use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use clonealign::adversarial::{self, grl_apply, grl_lambda, GrlConfig};
use clonealign::autograd::{Graph, Param, Var};
use clonealign::checkpoint;
use clonealign::cloneloss::{clone_loss, combine, LossWeights};
use clonealign::corpus::{gen_synthetic_with, Program, SyntheticSpec};
use clonealign::csp::{csp_loss, LanguageQueue, QueueEntry};
use clonealign::cycle::{cycle_loss, map_value, CycleMapper};
use clonealign::encoder::{Embedding, EncoderConfig};
use clonealign::retrieval::{
    average_precision, embed_all, embedding_rows, map_score, read_embeddings, write_embeddings, EvalMode,
    EvalReport, OracleEncoder,
};
use clonealign::trainer::{
    run_adversarial_stage, run_csp_stage, AblationFlags, CspConfig, Observer, ScheduleConfig, Stage, StepMetrics,
    TrainState,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Relative error with the denominator floored at 1e-6, far above the
/// rounding noise of a central difference (about 1e-11 here). Coordinates
/// whose true gradient is exactly zero, such as key-projection biases under
/// the shift-invariant softmax, otherwise divide noise by noise.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

// 1

fn grl_contract() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x0 = random_matrix(&mut rng, 3, 4);
    let w = random_matrix(&mut rng, 4, 5);
    let v = random_matrix(&mut rng, 5, 2);
    // smooth composite f(x) = sum(gelu(gelu(x W) V)), optionally behind the reversal
    let run = |x: &Array2<f64>, lambda: Option<f64>| {
        let mut g = Graph::new();
        let p = Param::new("x", x.clone());
        let xv = g.param(&p);
        let y = match lambda {
            Some(l) => grl_apply(&mut g, xv, l),
            None => xv,
        };
        let identity = g.value(y) == x;
        let (wv, vv) = (g.constant(w.clone()), g.constant(v.clone()));
        let h = g.matmul(y, wv);
        let h = g.gelu(h);
        let h = g.matmul(h, vv);
        let h = g.gelu(h);
        let s = g.sum(h);
        let grads = g.backward(s);
        (identity, g.scalar(s), grads["x"].clone())
    };
    let (_, f_plain, grad_plain) = run(&x0, None);
    let mut worst_analytic = 0.0f64;
    let mut worst_fd = 0.0f64;
    let mut identity = true;
    let h = 1e-4;
    for lambda in [1.0, 0.5, 1.7] {
        let (same, f_rev, grad_rev) = run(&x0, Some(lambda));
        identity &= same && f_rev == f_plain;
        for ((i, j), &g) in grad_rev.indexed_iter() {
            worst_analytic = worst_analytic.max(rel_err(g, -lambda * grad_plain[[i, j]]));
            let mut xp = x0.clone();
            xp[[i, j]] += h;
            let mut xm = x0.clone();
            xm[[i, j]] -= h;
            let fd = (run(&xp, None).1 - run(&xm, None).1) / (2.0 * h);
            worst_fd = worst_fd.max(rel_err(g, -lambda * fd));
        }
    }
    let elapsed = t0.elapsed();
    outcome(
        identity && worst_analytic <= 1e-12 && worst_fd <= 1e-3 && elapsed < Duration::from_secs(1),
        format!(
            "forward identity {identity}, analytic rel err {worst_analytic:.1e}, finite-difference rel err {worst_fd:.1e}, {:.3}s",
            elapsed.as_secs_f64()
        ),
    )
}

// 2

fn lambda_schedule() -> Outcome {
    let at = |mu: f64, step: u64, total: u64| grl_lambda(&GrlConfig { mu, total_steps: total, step }).unwrap();
    let mut ok = true;
    let mut worst = 0.0f64;
    for mu in [0.01, 1.0, 10.0] {
        ok &= at(mu, 0, 300) == 1.0;
        let expected = 2.0 / (1.0 + (-mu).exp());
        worst = worst.max((at(mu, 300, 300) - expected).abs());
        let replay: Vec<f64> = (0..=1000).map(|t| at(mu, t, 1000)).collect();
        ok &= replay.windows(2).all(|w| w[1] >= w[0]);
    }
    outcome(
        ok && worst <= 1e-12,
        format!("λ(0) exact and monotone: {ok}; worst |λ(T) - 2/(1+e^-μ)| {worst:.1e}"),
    )
}

// 3

fn log_softmax_at(logits: &[f64], k: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    logits[k] - m - z.ln()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn row(m: &Array2<f64>, i: usize) -> Vec<f64> {
    m.row(i).to_vec()
}

fn loss_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut csp_worst, mut clone_worst, mut dom_worst, mut cyc_worst) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = rng.random_range(1..6);
        let d = rng.random_range(2..9);
        let tau = rng.random_range(0.05..1.0);
        let c = random_matrix(&mut rng, n, d);
        let p = random_matrix(&mut rng, n, d);
        let negs: Vec<Array2<f64>> = (0..n)
            .map(|_| {
                let k = rng.random_range(1..8);
                random_matrix(&mut rng, k, d)
            })
            .collect();
        let mut g = Graph::new();
        let (cv, pv) = (g.constant(c.clone()), g.constant(p.clone()));
        let got = csp_loss(&mut g, cv, pv, &negs, tau).unwrap();
        let got = g.scalar(got);
        let want = (0..n)
            .map(|i| {
                let mut logits = vec![cos(&row(&c, i), &row(&p, i)) / tau];
                logits.extend((0..negs[i].nrows()).map(|k| cos(&row(&c, i), &row(&negs[i], k)) / tau));
                -log_softmax_at(&logits, 0)
            })
            .sum::<f64>()
            / n as f64;
        csp_worst = csp_worst.max((got - want).abs());

        let m = rng.random_range(n..n + 4);
        let cands = random_matrix(&mut rng, m, d);
        let positive: Vec<usize> = (0..n).map(|_| rng.random_range(0..m)).collect();
        let mut g = Graph::new();
        let (qv, kv) = (g.constant(c.clone()), g.constant(cands.clone()));
        let got = clone_loss(&mut g, qv, kv, &positive, tau).unwrap();
        let got = g.scalar(got);
        let want = (0..n)
            .map(|i| {
                let logits: Vec<f64> = (0..m).map(|j| cos(&row(&c, i), &row(&cands, j)) / tau).collect();
                -log_softmax_at(&logits, positive[i])
            })
            .sum::<f64>()
            / n as f64;
        clone_worst = clone_worst.max((got - want).abs());

        let k = rng.random_range(2..4);
        let probs = Array2::from_shape_fn((n, k), |_| rng.random_range(0.01..1.0));
        let probs = &probs / &probs.sum_axis(ndarray::Axis(1)).insert_axis(ndarray::Axis(1));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let got = adversarial::domain_loss_value(&probs, &labels).unwrap();
        let want = (0..n).map(|i| -probs[[i, labels[i]]].ln()).sum::<f64>() / n as f64;
        dom_worst = dom_worst.max((got - want).abs());

        let h = CycleMapper::new("h", d, &mut rng).unwrap();
        let pm = CycleMapper::new("p", d, &mut rng).unwrap();
        let rows = rng.random_range(1..5);
        let t = random_matrix(&mut rng, rows, d);
        let mut g = Graph::new();
        let (sv, tv) = (g.constant(c.clone()), g.constant(t.clone()));
        let got = cycle_loss(&mut g, &h, &pm, sv, tv).unwrap();
        let got = g.scalar(got);
        let l1 = |x: &Array2<f64>, first: &CycleMapper, second: &CycleMapper| {
            let back = map_value(second, &map_value(first, x));
            let mut total = 0.0;
            for i in 0..x.nrows() {
                for j in 0..x.ncols() {
                    total += (back[[i, j]] - x[[i, j]]).abs();
                }
            }
            total / x.nrows() as f64
        };
        let want = l1(&c, &h, &pm) + l1(&t, &pm, &h);
        cyc_worst = cyc_worst.max((got - want).abs());
    }

    // two-way ties: one positive and one negative at equal similarity
    let ln2 = 2f64.ln();
    let e = Array2::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap();
    let mut g = Graph::new();
    let (cv, pv) = (g.constant(e.clone()), g.constant(e.clone()));
    let tie_csp = csp_loss(&mut g, cv, pv, std::slice::from_ref(&e), 0.05).unwrap();
        let tie_csp = g.scalar(tie_csp);
    let two = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 1.0, 0.0]).unwrap();
    let mut g = Graph::new();
    let (qv, kv) = (g.constant(e.clone()), g.constant(two));
    let tie_clone = clone_loss(&mut g, qv, kv, &[0], 0.05).unwrap();
        let tie_clone = g.scalar(tie_clone);
    let half = Array2::from_elem((3, 2), 0.5);
    let tie_dom = adversarial::domain_loss_value(&half, &[0, 1, 1]).unwrap();
    let tie_worst = [tie_csp, tie_clone, tie_dom]
        .iter()
        .map(|v| (v - ln2).abs())
        .fold(0.0, f64::max);

    outcome(
        csp_worst <= 1e-6 && clone_worst <= 1e-6 && dom_worst <= 1e-9 && cyc_worst <= 1e-9 && tie_worst <= 1e-9,
        format!(
            "max abs err: csp {csp_worst:.1e}, clone {clone_worst:.1e}, domain {dom_worst:.1e}, cycle {cyc_worst:.1e}, ln 2 ties {tie_worst:.1e}"
        ),
    )
}

// 4

fn queue_semantics() -> Outcome {
    let entry = |tag: usize, source: &str| QueueEntry {
        embedding: Embedding(vec![tag as f64, 1.0]),
        source: source.into(),
        snippet: 0,
    };
    let mut q = LanguageQueue::new("dA", 128).unwrap();
    for tag in 1..=200 {
        q.push(vec![entry(tag, &format!("p{}", tag % 10))]).unwrap();
    }
    let tags: Vec<usize> = q.entries().map(|e| e.embedding.values()[0] as usize).collect();
    let fifo = tags == (73..=200).collect::<Vec<_>>();

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut own_window = 0;
    for draw in 0..500 {
        let exclude = format!("p{}", draw % 10);
        let negs = q.sample_negatives("dA", 64, &exclude, &mut rng).unwrap();
        own_window += negs.entries.iter().filter(|e| e.source == exclude).count();
    }
    let foreign = q.sample_negatives("dB", 8, "p0", &mut rng).is_err();
    outcome(
        fifo && own_window == 0 && foreign,
        format!(
            "contents are tags 73..200: {fifo}; own-program negatives in 500 draws: {own_window}; cross-language request rejected: {foreign}"
        ),
    )
}

// 5

fn brute_force_ap(relevance: &[bool]) -> Option<f64> {
    let total = relevance.iter().filter(|&&r| r).count();
    if total == 0 {
        return None;
    }
    let mut sum = 0.0;
    for k in 0..relevance.len() {
        if relevance[k] {
            let hits = relevance[..=k].iter().filter(|&&r| r).count();
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Some(sum / total as f64)
}

fn map_oracle() -> Outcome {
    let worked = (average_precision(&[true, false, true]).unwrap() - 5.0 / 6.0).abs();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let mut aps = Vec::new();
    let mut oracle_aps = Vec::new();
    for _ in 0..1000 {
        let len = rng.random_range(1..30);
        let mut rel: Vec<bool> = (0..len).map(|_| rng.random_bool(0.3)).collect();
        rel.shuffle(&mut rng);
        let (a, b) = (average_precision(&rel), brute_force_ap(&rel));
        match (a, b) {
            (Some(x), Some(y)) => worst = worst.max((x - y).abs()),
            (None, None) => {}
            _ => worst = f64::INFINITY,
        }
        aps.push(a);
        oracle_aps.push(b);
    }
    let defined: Vec<f64> = oracle_aps.iter().flatten().copied().collect();
    let map_err = (map_score(&aps).unwrap().map - defined.iter().sum::<f64>() / defined.len() as f64).abs();
    let corpus = gen_synthetic_with(&SyntheticSpec::new(100, &["dA", "dB"], 5)).unwrap();
    let report = EvalReport::build(&corpus, &OracleEncoder::new(&corpus), &[EvalMode::cross("dA", "dB")]).unwrap();
    let oracle_map = report.runs[0].summary.map;
    outcome(
        worked <= 1e-9 && worst <= 1e-9 && map_err <= 1e-9 && oracle_map == 1.0,
        format!(
            "AP[1,0,1] err {worked:.1e}; 1000 random rankings: AP err {worst:.1e}, MAP err {map_err:.1e}; oracle MAP {oracle_map}"
        ),
    )
}

// 6

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        max_len: 128,
        ..Default::default()
    }
}

/// Clone, domain and cycle losses of one fixed batch.
fn loss_parts(state: &TrainState, corpus: &[Program], batch: &Batch, lambda: f64) -> (Graph, Var, [f64; 3]) {
    let mut g = Graph::new();
    let encode = |g: &mut Graph, ids: &[usize]| {
        let rows: Vec<Var> = ids
            .iter()
            .map(|&i| state.encoder.forward(g, &state.encoder.tokenize(&corpus[i].code)).unwrap())
            .collect();
        g.concat_rows(&rows)
    };
    let q = encode(&mut g, &batch.queries);
    let c = encode(&mut g, &batch.positives);
    let t = encode(&mut g, &batch.targets);
    let positive: Vec<usize> = (0..batch.queries.len()).collect();
    let l_cl = clone_loss(&mut g, q, c, &positive, LossWeights::default().tau_cl).unwrap();
    let x = g.concat_rows(&[q, t]);
    let probs = state.domain_head.probabilities(&mut g, x, lambda);
    let mut labels = vec![0; batch.queries.len()];
    labels.extend(vec![1; batch.targets.len()]);
    let l_dc = adversarial::domain_loss(&mut g, probs, &labels).unwrap();
    let l_cyc = cycle_loss(&mut g, &state.mapper_h, &state.mapper_p, q, t).unwrap();
    let w = LossWeights {
        alpha: 1.0,
        beta: 1.0,
        ..Default::default()
    };
    let parts = [g.scalar(l_cl), g.scalar(l_dc), g.scalar(l_cyc)];
    let total = combine(&mut g, l_cl, Some(l_dc), Some(l_cyc), &w).unwrap();
    (g, total, parts)
}

struct Batch {
    queries: Vec<usize>,
    positives: Vec<usize>,
    targets: Vec<usize>,
}

fn gradient_integrity() -> Outcome {
    let corpus = gen_synthetic_with(&SyntheticSpec::new(6, &["dA", "dB"], 6).with_solutions(2)).unwrap();
    let state = TrainState::init(&corpus, tiny_encoder(), None, 6).unwrap();
    let of = |lang: &str, problem: &str| -> Vec<usize> {
        (0..corpus.len())
            .filter(|&i| corpus[i].language == lang && corpus[i].problem_id == problem)
            .collect()
    };
    let problems: Vec<String> = corpus.iter().map(|p| p.problem_id.clone()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let mut batch = Batch {
        queries: vec![],
        positives: vec![],
        targets: vec![],
    };
    for p in problems.iter().take(3) {
        let a = of("dA", p);
        batch.queries.push(a[0]);
        batch.positives.push(a[1]);
    }
    for p in problems.iter().skip(2).take(3) {
        batch.targets.push(of("dB", p)[0]);
    }
    let lambda = grl_lambda(&GrlConfig {
        mu: adversarial::DEFAULT_MU,
        total_steps: 300,
        step: 0,
    })
    .unwrap();
    let (g, total, _) = loss_parts(&state, &corpus, &batch, lambda);
    let grads = g.backward(total);

    // the reversal layer negates the domain term on the encoder side only
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (pi, param) in state.encoder.params().iter().enumerate() {
        let analytic = &grads[&param.name];
        let mut coords: Vec<(usize, usize)> = analytic.indexed_iter().map(|(ij, _)| ij).collect();
        coords.sort_by(|a, b| analytic[*b].abs().total_cmp(&analytic[*a].abs()));
        coords.truncate(4);
        let (r, c) = analytic.dim();
        coords.push(((pi * 7) % r, (pi * 5) % c));
        for (i, j) in coords {
            let eval_at = |delta: f64| {
                let mut s = state.clone();
                s.encoder.params_mut()[pi].value[[i, j]] += delta;
                loss_parts(&s, &corpus, &batch, lambda).2
            };
            let (plus, minus) = (eval_at(h), eval_at(-h));
            let fd: Vec<f64> = (0..3).map(|k| (plus[k] - minus[k]) / (2.0 * h)).collect();
            let expected = fd[0] - lambda * fd[1] + fd[2];
            worst = worst.max(rel_err(analytic[[i, j]], expected));
            checked += 1;
        }
    }
    outcome(
        worst <= 1e-3,
        format!("{checked} encoder coordinates, worst relative error {worst:.1e}"),
    )
}

// 7 to 9: the desk-scale experiment

const SEEDS: [u64; 3] = [1, 2, 3];
const ARMS: [(&str, AblationFlags); 4] = [
    ("MCC", AblationFlags::MCC),
    ("+CSP", AblationFlags::CSP),
    ("+DAL", AblationFlags::DAL),
    ("+cycle", AblationFlags::FULL),
];

struct SeedRun {
    untrained: f64,
    /// Final cross-dialect MAP per arm, in `ARMS` order.
    finals: [f64; 4],
    /// Wall time of the full schedule (shared snippet stage plus the full
    /// adversarial stage).
    full_time: Duration,
    untrained_state: TrainState,
    full_state: TrainState,
    corpus: Vec<Program>,
}

fn cross_map(corpus: &[Program], state: &TrainState) -> f64 {
    EvalReport::build(corpus, &state.encoder, &[EvalMode::cross("dA", "dB")]).unwrap().runs[0]
        .summary
        .map
}

fn run_seed(seed: u64) -> SeedRun {
    // two solutions per problem and dialect give the clone pairs in dA
    let corpus = gen_synthetic_with(&SyntheticSpec::new(100, &["dA", "dB"], seed).with_solutions(2)).unwrap();
    let init = TrainState::init(&corpus, EncoderConfig::default(), None, seed).unwrap();
    let untrained = cross_map(&corpus, &init);
    let base = ScheduleConfig::default();
    let mut finals = [0.0; 4];
    let mut full_state = None;
    let mut full_time = Duration::ZERO;

    // the snippet stage is the same in every arm that enables it
    let t0 = Instant::now();
    let mut after_csp = init.clone();
    run_csp_stage(&corpus, &base, &mut after_csp, &mut Vec::<StepMetrics>::new()).unwrap();
    let csp_time = t0.elapsed();

    for (k, (name, flags)) in ARMS.iter().enumerate() {
        let cfg = ScheduleConfig {
            flags: *flags,
            ..base.clone()
        };
        let t0 = Instant::now();
        let mut state = if flags.enable_csp { after_csp.clone() } else { init.clone() };
        run_adversarial_stage(&corpus, &cfg, &mut state, &mut Vec::<StepMetrics>::new()).unwrap();
        finals[k] = cross_map(&corpus, &state);
        eprintln!("  seed {seed} {name}: MAP {:.4} ({:.0}s)", finals[k], t0.elapsed().as_secs_f64());
        if *flags == AblationFlags::FULL {
            full_time = csp_time + t0.elapsed();
            full_state = Some(state);
        }
    }
    SeedRun {
        untrained,
        finals,
        full_time,
        untrained_state: init,
        full_state: full_state.expect("full arm ran"),
        corpus,
    }
}

fn end_to_end(runs: &[SeedRun]) -> Outcome {
    let good = runs
        .iter()
        .filter(|r| r.finals[3] >= r.untrained + 0.30 && r.finals[3] >= 0.80)
        .count();
    let total: Duration = runs.iter().map(|r| r.full_time).sum();
    let per_seed: Vec<String> = runs
        .iter()
        .zip(SEEDS)
        .map(|(r, s)| format!("seed {s} {:.3}->{:.3}", r.untrained, r.finals[3]))
        .collect();
    outcome(
        good >= 2 && total < Duration::from_secs(15 * 60),
        format!(
            "{}; {good}/3 seeds pass; full runs took {:.1} min",
            per_seed.join(", "),
            total.as_secs_f64() / 60.0
        ),
    )
}

fn ablation_ordering(runs: &[SeedRun]) -> Outcome {
    let means: Vec<f64> = (0..4)
        .map(|k| runs.iter().map(|r| r.finals[k]).sum::<f64>() / runs.len() as f64)
        .collect();
    let worst_drop = means.windows(2).map(|w| w[0] - w[1]).fold(f64::NEG_INFINITY, f64::max);
    let gain = means[3] - means[0];
    let listing: Vec<String> = ARMS.iter().zip(&means).map(|((n, _), m)| format!("{n} {m:.3}")).collect();
    outcome(
        gain >= 0.05 && worst_drop <= 0.02,
        format!(
            "mean MAP {}; full - MCC {gain:+.3}; largest step regression {:.3}",
            listing.join(", "),
            worst_drop.max(0.0)
        ),
    )
}

/// Held-out accuracy of a logistic-regression language probe. Programs of
/// even-numbered problems train the probe, the rest test it.
fn probe_accuracy(corpus: &[Program], embeddings: &[Embedding]) -> f64 {
    let d = embeddings[0].dim();
    let problems: Vec<&str> = corpus
        .iter()
        .map(|p| p.problem_id.as_str())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let train_side = |i: usize| problems.iter().position(|p| *p == corpus[i].problem_id).unwrap() % 2 == 0;
    let (train, test): (Vec<usize>, Vec<usize>) = (0..corpus.len()).partition(|&i| train_side(i));
    let label = |i: usize| if corpus[i].language == "dA" { 0.0 } else { 1.0 };

    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for &i in &train {
        for (j, v) in embeddings[i].values().iter().enumerate() {
            mean[j] += v / train.len() as f64;
        }
    }
    for &i in &train {
        for (j, v) in embeddings[i].values().iter().enumerate() {
            sd[j] += (v - mean[j]).powi(2) / train.len() as f64;
        }
    }
    let feats = |i: usize| -> Vec<f64> {
        embeddings[i]
            .values()
            .iter()
            .enumerate()
            .map(|(j, v)| (v - mean[j]) / sd[j].sqrt().max(1e-12))
            .collect()
    };
    let sigmoid = |z: f64| 1.0 / (1.0 + (-z).exp());
    let (mut w, mut b) = (vec![0.0; d], 0.0);
    let (lr, l2) = (0.5, 1e-3);
    for _ in 0..500 {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for &i in &train {
            let x = feats(i);
            let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
            let err = sigmoid(z) - label(i);
            for j in 0..d {
                gw[j] += err * x[j] / train.len() as f64;
            }
            gb += err / train.len() as f64;
        }
        for j in 0..d {
            w[j] -= lr * (gw[j] + l2 * w[j]);
        }
        b -= lr * gb;
    }
    let hits = test
        .iter()
        .filter(|&&i| {
            let z: f64 = feats(i).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
            (z >= 0.0) == (label(i) == 1.0)
        })
        .count();
    hits as f64 / test.len() as f64
}

fn adversarial_effect(runs: &[SeedRun]) -> Outcome {
    let r = &runs[0];
    let before = probe_accuracy(&r.corpus, &embed_all(&r.corpus, &r.untrained_state.encoder).unwrap());
    let after = probe_accuracy(&r.corpus, &embed_all(&r.corpus, &r.full_state.encoder).unwrap());
    outcome(
        after <= before - 0.10,
        format!("held-out probe accuracy: untrained {before:.3}, trained {after:.3} (seed {})", SEEDS[0]),
    )
}

// 10

fn small_schedule() -> ScheduleConfig {
    ScheduleConfig {
        csp_steps: 50,
        adversarial_steps: 50,
        batch_size: 12,
        csp: CspConfig {
            queue_size: 32,
            negatives: 16,
            warmup_min: 8,
            ..Default::default()
        },
        checkpoint_every: 25,
        ..Default::default()
    }
}

fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        d_model: 32,
        n_layers: 1,
        n_heads: 2,
        d_ff: 64,
        max_len: 256,
        ..Default::default()
    }
}

/// Records metrics and the mid-stage checkpoints handed out by the trainer.
#[derive(Default)]
struct Recorder {
    log: Vec<StepMetrics>,
    checkpoints: Vec<Vec<u8>>,
}

impl Observer for Recorder {
    fn metrics(&mut self, m: &StepMetrics) -> clonealign::Result<()> {
        self.log.push(m.clone());
        Ok(())
    }

    fn checkpoint(&mut self, state: &TrainState) -> clonealign::Result<()> {
        // midpoint of each 50-step stage
        if state.step == 25 {
            self.checkpoints.push(checkpoint::to_bytes(state));
        }
        Ok(())
    }
}

/// Both stages from `state`, skipping the snippet stage once it is done.
fn continue_run(corpus: &[Program], mut state: TrainState) -> (Recorder, TrainState) {
    let cfg = small_schedule();
    let mut rec = Recorder::default();
    if state.stage == Stage::Csp {
        run_csp_stage(corpus, &cfg, &mut state, &mut rec).unwrap();
    }
    run_adversarial_stage(corpus, &cfg, &mut state, &mut rec).unwrap();
    (rec, state)
}

fn losses(m: &StepMetrics) -> [Option<f64>; 4] {
    [m.csp_loss, m.clone_loss, m.domain_loss, m.cycle_loss]
}

fn determinism_and_persistence() -> Outcome {
    let corpus = gen_synthetic_with(&SyntheticSpec::new(20, &["dA", "dB"], 10).with_solutions(2)).unwrap();
    let init = TrainState::init(&corpus, small_encoder(), None, 10).unwrap();
    let (a, state) = continue_run(&corpus, init.clone());
    let (b, _) = continue_run(&corpus, init);
    let lines = |log: &[StepMetrics]| log.iter().map(StepMetrics::to_json_line).collect::<Vec<_>>().join("\n");
    let identical = lines(&a.log) == lines(&b.log);

    // resume from the step-25 checkpoint of each stage
    let mut resume_err = 0.0f64;
    for (k, bytes) in a.checkpoints.iter().enumerate() {
        let saved = checkpoint::from_bytes(bytes, std::path::Path::new("memory")).unwrap();
        let (rest, _) = continue_run(&corpus, saved);
        let offset = 25 + 50 * k;
        if rest.log.len() != a.log.len() - offset {
            resume_err = f64::INFINITY;
        }
        for (x, y) in a.log[offset..].iter().zip(&rest.log) {
            for (u, v) in losses(x).iter().zip(losses(y)) {
                match (u, v) {
                    (Some(u), Some(v)) => resume_err = resume_err.max((u - v).abs()),
                    (None, None) => {}
                    _ => resume_err = f64::INFINITY,
                }
            }
        }
    }
    let resumed_both = a.checkpoints.len() == 2;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.tsv");
    let again = dir.path().join("again.tsv");
    let embeddings = embed_all(&corpus, &state.encoder).unwrap();
    write_embeddings(&path, &embedding_rows(&corpus, embeddings.clone())).unwrap();
    let back = read_embeddings(&path).unwrap();
    let bit_exact = back.len() == embeddings.len()
        && back.iter().zip(&embeddings).all(|(r, e)| {
            r.embedding.values().iter().map(|v| v.to_bits()).eq(e.values().iter().map(|v| v.to_bits()))
        });
    write_embeddings(&again, &back).unwrap();
    let stable = std::fs::read(&path).unwrap() == std::fs::read(&again).unwrap();

    outcome(
        identical && resumed_both && resume_err <= 1e-9 && bit_exact && stable,
        format!(
            "rerun metrics byte-identical: {identical}; resume at step 25 of 50 in both stages: max loss diff {resume_err:.1e}; export bit-exact: {bit_exact}, re-export identical: {stable}"
        ),
    )
}

fn main() {
    let mut failed_hard = 0;
    let mut report = |id: u32, title: &str, soft: bool, o: Outcome| {
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        let kind = if soft { " (soft)" } else { "" };
        println!("criterion {id:>2} {verdict}{kind} {title}: {}", o.detail);
        if !o.pass && !soft {
            failed_hard += 1;
        }
    };
    report(1, "gradient reversal contract", false, grl_contract());
    report(2, "reversal schedule", false, lambda_schedule());
    report(3, "loss oracles", false, loss_oracles());
    report(4, "queue semantics", false, queue_semantics());
    report(5, "MAP oracle", false, map_oracle());
    report(6, "gradient integrity", false, gradient_integrity());

    eprintln!("desk-scale experiment: 3 seeds x 4 ablation arms");
    let runs: Vec<SeedRun> = SEEDS.iter().map(|&s| run_seed(s)).collect();
    report(7, "end-to-end zero-shot retrieval", false, end_to_end(&runs));
    report(8, "ablation ordering", true, ablation_ordering(&runs));
    report(9, "adversarial effect on a language probe", true, adversarial_effect(&runs));
    report(10, "determinism and persistence", false, determinism_and_persistence());

    if failed_hard > 0 {
        eprintln!("{failed_hard} hard criteria failed");
        std::process::exit(1);
    }
}
