//! Two-layer linear mappers between the source and target embedding spaces,
//! tied together by a cycle-consistency loss.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Param, Var};
use crate::error::{Error, Result};

/// `x ↦ w2 (w1 x + b1) + b2`, applied to each row of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct CycleMapper {
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
}

impl CycleMapper {
    /// Identity plus small Gaussian noise, zero biases. Parameter names are
    /// prefixed `cycle.<name>.`.
    pub fn new(name: &str, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("mapper dimension must be >= 1".into()));
        }
        let normal = Normal::new(0.0, 0.01).expect("valid std");
        let mut near_identity = || {
            let mut w = Array2::from_shape_simple_fn((dim, dim), || normal.sample(rng));
            w.diag_mut().mapv_inplace(|v| v + 1.0);
            w
        };
        let w1 = near_identity();
        let w2 = near_identity();
        Ok(Self::from_weights(name, w1, Array2::zeros((1, dim)), w2, Array2::zeros((1, dim))))
    }

    pub fn from_weights(
        name: &str,
        w1: Array2<f64>,
        b1: Array2<f64>,
        w2: Array2<f64>,
        b2: Array2<f64>,
    ) -> Self {
        Self {
            w1: Param::new(format!("cycle.{name}.w1"), w1),
            b1: Param::new(format!("cycle.{name}.b1"), b1),
            w2: Param::new(format!("cycle.{name}.w2"), w2),
            b2: Param::new(format!("cycle.{name}.b2"), b2),
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.value.nrows()
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

/// Apply `mapper` to every row of `x`.
pub fn map_apply(g: &mut Graph, mapper: &CycleMapper, x: Var) -> Var {
    let w1 = g.param(&mapper.w1);
    let b1 = g.param(&mapper.b1);
    let w2 = g.param(&mapper.w2);
    let b2 = g.param(&mapper.b2);
    let h = g.matmul_t(x, w1);
    let h = g.add_row(h, b1);
    let y = g.matmul_t(h, w2);
    g.add_row(y, b2)
}

/// Value-only form of [`map_apply`].
pub fn map_value(mapper: &CycleMapper, x: &Array2<f64>) -> Array2<f64> {
    let h = x.dot(&mapper.w1.value.t()) + &mapper.b1.value;
    h.dot(&mapper.w2.value.t()) + &mapper.b2.value
}

/// Mean over rows of `‖second(first(x)) − x‖₁`.
pub fn cycle_term(g: &mut Graph, first: &CycleMapper, second: &CycleMapper, x: Var) -> Result<Var> {
    let (n, d) = g.value(x).dim();
    if n == 0 {
        return Err(Error::Contract("cycle term over an empty batch".into()));
    }
    if d != first.dim() || d != second.dim() {
        return Err(Error::Contract(format!(
            "embeddings of dimension {d} for mappers of dimension {}",
            first.dim()
        )));
    }
    let there = map_apply(g, first, x);
    let back = map_apply(g, second, there);
    let diff = g.sub(back, x);
    let abs = g.abs(diff);
    let total = g.sum(abs);
    Ok(g.scale(total, 1.0 / n as f64))
}

/// Source-side round trip through `h` then `p`, plus target-side round trip
/// through `p` then `h`.
pub fn cycle_loss(
    g: &mut Graph,
    h: &CycleMapper,
    p: &CycleMapper,
    source: Var,
    target: Var,
) -> Result<Var> {
    let fwd = cycle_term(g, h, p, source)?;
    let bwd = cycle_term(g, p, h, target)?;
    Ok(g.add(fwd, bwd))
}

/// Value-only form of [`cycle_loss`].
pub fn cycle_loss_value(
    h: &CycleMapper,
    p: &CycleMapper,
    source: &Array2<f64>,
    target: &Array2<f64>,
) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.constant(source.clone());
    let t = g.constant(target.clone());
    let l = cycle_loss(&mut g, h, p, s, t)?;
    Ok(g.scalar(l))
}
