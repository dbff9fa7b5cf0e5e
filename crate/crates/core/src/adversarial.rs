//! Language discriminator behind a gradient reversal layer.
//!
//! The head learns to tell languages apart while the reversed gradient
//! pushes the encoder towards language-indistinguishable embeddings.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{self, Graph, Param, Var};
use crate::error::{Error, Result};

pub const DEFAULT_MU: f64 = 0.01;
/// Probability floor used inside the log of the domain loss.
pub const PROB_EPS: f64 = 1e-12;

/// Inputs of the reversal-strength schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GrlConfig {
    pub mu: f64,
    pub total_steps: u64,
    pub step: u64,
}

/// `λ = 2 / (1 + exp(-μ t / T))`, rising from 1 at `t = 0`.
pub fn grl_lambda(cfg: &GrlConfig) -> Result<f64> {
    if cfg.total_steps == 0 {
        return Err(Error::Config("reversal schedule needs total_steps >= 1".into()));
    }
    if !cfg.mu.is_finite() {
        return Err(Error::Config(format!("mu must be finite, got {}", cfg.mu)));
    }
    let x = cfg.mu * cfg.step as f64 / cfg.total_steps as f64;
    Ok(2.0 / (1.0 + (-x).exp()))
}

/// Identity forward, `-λ` times the incoming gradient backward.
pub fn grl_apply(g: &mut Graph, x: Var, lambda: f64) -> Var {
    g.reverse_grad(x, lambda)
}

/// Linear softmax classifier over languages.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainHead {
    /// `d x n_domains`
    pub w: Param,
    /// `1 x n_domains`
    pub b: Param,
}

impl DomainHead {
    pub fn new(dim: usize, n_domains: usize, rng: &mut impl Rng) -> Result<Self> {
        if dim == 0 || n_domains < 2 {
            return Err(Error::Config(format!(
                "domain head needs dim >= 1 and >= 2 domains, got {dim} and {n_domains}"
            )));
        }
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        Ok(Self {
            w: Param::new(
                "domain.w",
                Array2::from_shape_simple_fn((dim, n_domains), || normal.sample(rng)),
            ),
            b: Param::new("domain.b", Array2::zeros((1, n_domains))),
        })
    }

    pub fn n_domains(&self) -> usize {
        self.w.value.ncols()
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }

    /// Class probabilities of each row of `x`, seen through the reversal layer.
    pub fn probabilities(&self, g: &mut Graph, x: Var, lambda: f64) -> Var {
        let r = grl_apply(g, x, lambda);
        let w = g.param(&self.w);
        let b = g.param(&self.b);
        let logits = g.linear(r, w, b);
        g.softmax_rows(logits)
    }

    /// Probabilities without building a graph.
    pub fn predict(&self, x: &Array2<f64>) -> Array2<f64> {
        autograd::softmax_rows(&(x.dot(&self.w.value) + &self.b.value))
    }
}

/// Mean negative log-likelihood of `labels` under row probabilities.
pub fn domain_loss(g: &mut Graph, probs: Var, labels: &[usize]) -> Result<Var> {
    let (n, k) = g.value(probs).dim();
    if n == 0 || labels.len() != n {
        return Err(Error::Contract(format!(
            "{n} probability rows for {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Contract(format!("label {bad} out of range for {k} domains")));
    }
    Ok(g.nll_probs(probs, labels, PROB_EPS))
}

/// Value-only form of [`domain_loss`].
pub fn domain_loss_value(probs: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(probs.clone());
    let l = domain_loss(&mut g, p, labels)?;
    Ok(g.scalar(l))
}

/// Fraction of rows whose argmax matches the label.
pub fn accuracy(probs: &Array2<f64>, labels: &[usize]) -> f64 {
    let hits = probs
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            best.0 == l
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}
