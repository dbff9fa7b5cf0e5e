//! In-batch clone loss and the weighted fine-tuning objective.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};

/// Weights of the fine-tuning objective `L_cl + α L_dc + β L_cyc`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    /// Temperature of the clone-loss softmax.
    pub tau_cl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            tau_cl: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        if !(self.tau_cl > 0.0 && self.tau_cl.is_finite()) {
            return Err(Error::Config(format!("tau_cl must be > 0, got {}", self.tau_cl)));
        }
        Ok(())
    }
}

/// Softmax cross-entropy of each query against all candidates, where
/// candidate `positive[i]` is the clone of query `i`. Similarity is cosine
/// divided by `tau`.
pub fn clone_loss(
    g: &mut Graph,
    queries: Var,
    candidates: Var,
    positive: &[usize],
    tau: f64,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
    }
    let n = g.value(queries).nrows();
    let m = g.value(candidates).nrows();
    if n == 0 || positive.len() != n || positive.iter().any(|&p| p >= m) {
        return Err(Error::Contract(format!(
            "clone batch: {n} queries, {m} candidates, {} positives",
            positive.len()
        )));
    }
    let q = g.normalize_rows(queries)?;
    let c = g.normalize_rows(candidates)?;
    let sims = g.matmul_t(q, c);
    let logits = g.scale(sims, 1.0 / tau);
    Ok(g.softmax_cross_entropy(logits, positive))
}

fn check_finite(component: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            component: component.into(),
            value,
        })
    }
}

/// `L_cl + α L_dc + β L_cyc` on plain values.
pub fn total_loss(l_cl: f64, l_dc: f64, l_cyc: f64, w: &LossWeights) -> Result<f64> {
    check_finite("clone", l_cl)?;
    check_finite("domain", l_dc)?;
    check_finite("cycle", l_cyc)?;
    let total = l_cl + w.alpha * l_dc + w.beta * l_cyc;
    check_finite("total", total)?;
    Ok(total)
}

/// Graph form of [`total_loss`]. Absent components contribute nothing.
pub fn combine(
    g: &mut Graph,
    l_cl: Var,
    l_dc: Option<Var>,
    l_cyc: Option<Var>,
    w: &LossWeights,
) -> Result<Var> {
    check_finite("clone", g.scalar(l_cl))?;
    let mut total = l_cl;
    for (name, part, weight) in [("domain", l_dc, w.alpha), ("cycle", l_cyc, w.beta)] {
        if let Some(v) = part {
            check_finite(name, g.scalar(v))?;
            let scaled = g.scale(v, weight);
            total = g.add(total, scaled);
        }
    }
    check_finite("total", g.scalar(total))?;
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn weighted_sum() {
        let w = LossWeights { alpha: 1.0, beta: 1.0, tau_cl: 0.05 };
        assert_eq!(total_loss(1.0, 2.0, 3.0, &w).unwrap(), 6.0);
        let zero = LossWeights { alpha: 0.0, beta: 0.0, tau_cl: 0.05 };
        assert_eq!(total_loss(0.8123, 5.0, 7.0, &zero).unwrap(), 0.8123);
        let w = LossWeights { alpha: 2.0, beta: 4.0, tau_cl: 0.05 };
        assert_eq!(total_loss(0.5, 0.25, 0.125, &w).unwrap(), 1.5);
    }

    #[test]
    fn non_finite_names_component() {
        let w = LossWeights::default();
        match total_loss(1.0, f64::NAN, 0.0, &w) {
            Err(Error::NonFinite { component, .. }) => assert_eq!(component, "domain"),
            other => panic!("{other:?}"),
        }
        match total_loss(1.0, 0.0, f64::INFINITY, &w) {
            Err(Error::NonFinite { component, .. }) => assert_eq!(component, "cycle"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn graph_combination_matches_values() {
        let w = LossWeights { alpha: 2.0, beta: 4.0, tau_cl: 0.05 };
        let mut g = Graph::new();
        let a = g.constant(array![[0.5]]);
        let b = g.constant(array![[0.25]]);
        let c = g.constant(array![[0.125]]);
        let t = combine(&mut g, a, Some(b), Some(c), &w).unwrap();
        assert_eq!(g.scalar(t), 1.5);
        let only = combine(&mut g, a, None, None, &w).unwrap();
        assert_eq!(g.scalar(only), 0.5);
    }

    #[test]
    fn clone_loss_matches_softmax_oracle() {
        let q = array![[1.0, 0.0], [0.6, 0.8]];
        let c = array![[0.8, 0.6], [0.0, 2.0], [-1.0, 0.0]];
        let tau = 0.5;
        let mut g = Graph::new();
        let qv = g.constant(q.clone());
        let cv = g.constant(c.clone());
        let l = clone_loss(&mut g, qv, cv, &[0, 1], tau).unwrap();
        let mut oracle = 0.0;
        for (i, pos) in [(0usize, 0usize), (1, 1)] {
            let qi = q.row(i);
            let sims: Vec<f64> = c
                .rows()
                .into_iter()
                .map(|r| qi.dot(&r) / (qi.dot(&qi).sqrt() * r.dot(&r).sqrt()) / tau)
                .collect();
            let lse = sims.iter().map(|s| s.exp()).sum::<f64>().ln();
            oracle += lse - sims[pos];
        }
        assert!((g.scalar(l) - oracle / 2.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_clone_batches() {
        let mut g = Graph::new();
        let q = g.constant(array![[1.0, 0.0]]);
        let c = g.constant(array![[1.0, 0.0]]);
        assert!(matches!(clone_loss(&mut g, q, c, &[1], 0.1), Err(Error::Contract(_))));
        assert!(matches!(clone_loss(&mut g, q, c, &[0], 0.0), Err(Error::Config(_))));
        let z = g.constant(array![[0.0, 0.0]]);
        assert!(matches!(
            clone_loss(&mut g, z, c, &[0], 0.1),
            Err(Error::DegenerateVector(_))
        ));
    }

    #[test]
    fn weights_validate() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { alpha: -1.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights { tau_cl: 0.0, ..Default::default() }.validate().is_err());
    }
}
