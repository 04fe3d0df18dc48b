//! Reference measures and behavior policies over states and actions.
//!
//! A finite space is encoded as a one-dimensional vector holding the index,
//! so [`Measure::Categorical`] densities are probability masses.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// A probability measure with a density (or mass function).
#[derive(Debug, Clone, PartialEq)]
pub enum Measure {
    Categorical(Vec<f64>),
    /// Uniform on the cube `[lo, hi]^dim`.
    UniformBox {
        lo: f64,
        hi: f64,
        dim: usize,
    },
    StandardNormal {
        dim: usize,
    },
}

impl Measure {
    pub fn uniform_categorical(n: usize) -> Self {
        Measure::Categorical(vec![1.0 / n as f64; n])
    }

    pub fn dim(&self) -> usize {
        match self {
            Measure::Categorical(_) => 1,
            Measure::UniformBox { dim, .. } | Measure::StandardNormal { dim } => *dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Measure::Categorical(p) => {
                if p.is_empty() || p.iter().any(|&x| !(x >= 0.0)) {
                    return Err(Error::InvalidInput("categorical weights must be nonnegative".into()));
                }
                let total: f64 = p.iter().sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidInput(format!("categorical weights sum to {total}")));
                }
            }
            Measure::UniformBox { lo, hi, dim } => {
                if !(hi > lo) || *dim == 0 {
                    return Err(Error::InvalidInput(format!("empty box [{lo}, {hi}]^{dim}")));
                }
            }
            Measure::StandardNormal { dim } => {
                if *dim == 0 {
                    return Err(Error::InvalidInput("normal measure needs a positive dimension".into()));
                }
            }
        }
        Ok(())
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        match self {
            Measure::Categorical(p) => match categorical_index(x, p.len()) {
                Some(i) => p[i],
                None => 0.0,
            },
            Measure::UniformBox { lo, hi, dim } => {
                if x.len() == *dim && x.iter().all(|v| v >= lo && v <= hi) {
                    (hi - lo).powi(*dim as i32).recip()
                } else {
                    0.0
                }
            }
            Measure::StandardNormal { dim } => {
                let sq: f64 = x.iter().map(|v| v * v).sum();
                (-0.5 * sq).exp() / (2.0 * PI).powf(*dim as f64 / 2.0)
            }
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            Measure::Categorical(p) => vec![sample_categorical(p, rng) as f64],
            Measure::UniformBox { lo, hi, dim } => (0..*dim).map(|_| rng.random_range(*lo..*hi)).collect(),
            Measure::StandardNormal { dim } => (0..*dim).map(|_| StandardNormal.sample(rng)).collect(),
        }
    }
}

fn categorical_index(x: &[f64], n: usize) -> Option<usize> {
    if x.len() != 1 || !(x[0] >= 0.0) || x[0].fract() != 0.0 || x[0] as usize >= n {
        return None;
    }
    Some(x[0] as usize)
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_categorical(p: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &w) in p.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    // rounding left a sliver above the last cumulative sum
    p.iter().rposition(|&w| w > 0.0).unwrap_or(p.len() - 1)
}

/// The data-collecting policy `π̄(a|s)`.
#[derive(Debug, Clone, PartialEq)]
pub enum BehaviorPolicy {
    /// Actions drawn independently of the state.
    Fixed(Measure),
    /// Row `s` of an `n_states × n_actions` matrix is `π̄(·|s)`.
    Tabular(Matrix),
}

impl BehaviorPolicy {
    pub fn action_dim(&self) -> usize {
        match self {
            BehaviorPolicy::Fixed(m) => m.dim(),
            BehaviorPolicy::Tabular(_) => 1,
        }
    }

    pub fn sample(&self, state: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            BehaviorPolicy::Fixed(m) => m.sample(rng),
            BehaviorPolicy::Tabular(p) => {
                let s = categorical_index(state, p.rows()).expect("tabular policy needs an index state");
                vec![sample_categorical(&p.row(s), rng) as f64]
            }
        }
    }

    pub fn density(&self, state: &[f64], action: &[f64]) -> f64 {
        match self {
            BehaviorPolicy::Fixed(m) => m.density(action),
            BehaviorPolicy::Tabular(p) => {
                match (categorical_index(state, p.rows()), categorical_index(action, p.cols())) {
                    (Some(s), Some(a)) => p.get(s, a),
                    _ => 0.0,
                }
            }
        }
    }
}
