//! Ground-truth environments, trajectory sampling and transition datasets.

mod sde;
mod tabular;

use std::io::{BufRead, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::measure::BehaviorPolicy;

pub use sde::{frozen_drift_table, sde_step, SdeEnv};
pub use tabular::{
    exact_ground_truth, example3_mdp, example3_tensor, make_block_mdp, make_latent_mdp, GroundTruth, TabularMDP,
};

/// A simulator with a Markov transition kernel.
pub trait Environment {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn initial_state(&self, rng: &mut ChaCha8Rng) -> Vec<f64>;
    /// Next state, and whether it had to be clamped into the domain.
    fn step(&self, state: &[f64], action: &[f64], rng: &mut ChaCha8Rng) -> (Vec<f64>, bool);
    /// Steps discarded before recording starts.
    fn burn_in(&self) -> usize {
        0
    }
}

/// Rows `(s, a, s′, π̄(a|s))` from one sample path.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionDataset {
    state_dim: usize,
    action_dim: usize,
    states: Vec<f64>,
    actions: Vec<f64>,
    next_states: Vec<f64>,
    densities: Vec<f64>,
    clamped: usize,
}

impl TransitionDataset {
    pub fn new(state_dim: usize, action_dim: usize) -> Self {
        Self {
            state_dim,
            action_dim,
            states: Vec::new(),
            actions: Vec::new(),
            next_states: Vec::new(),
            densities: Vec::new(),
            clamped: 0,
        }
    }

    pub fn push(&mut self, s: &[f64], a: &[f64], s_next: &[f64], density: f64) -> Result<()> {
        if s.len() != self.state_dim || s_next.len() != self.state_dim || a.len() != self.action_dim {
            return Err(Error::DimensionMismatch(format!(
                "row has dims ({}, {}, {}), dataset expects ({sd}, {}, {sd})",
                s.len(),
                a.len(),
                s_next.len(),
                self.action_dim,
                sd = self.state_dim
            )));
        }
        if !(density > 0.0) || !density.is_finite() {
            return Err(Error::NonPositiveDensity { row: self.len(), what: "behavior", value: density });
        }
        self.states.extend_from_slice(s);
        self.actions.extend_from_slice(a);
        self.next_states.extend_from_slice(s_next);
        self.densities.push(density);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.densities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.densities.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn action(&self, i: usize) -> &[f64] {
        &self.actions[i * self.action_dim..(i + 1) * self.action_dim]
    }

    pub fn next_state(&self, i: usize) -> &[f64] {
        &self.next_states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn density(&self, i: usize) -> f64 {
        self.densities[i]
    }

    /// Row-major `n × state_dim`.
    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn actions(&self) -> &[f64] {
        &self.actions
    }

    pub fn next_states(&self) -> &[f64] {
        &self.next_states
    }

    pub fn densities(&self) -> &[f64] {
        &self.densities
    }

    /// Number of steps whose next state had to be clamped.
    pub fn clamped(&self) -> usize {
        self.clamped
    }

    /// The first `n` rows.
    pub fn prefix(&self, n: usize) -> TransitionDataset {
        let n = n.min(self.len());
        TransitionDataset {
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            states: self.states[..n * self.state_dim].to_vec(),
            actions: self.actions[..n * self.action_dim].to_vec(),
            next_states: self.next_states[..n * self.state_dim].to_vec(),
            densities: self.densities[..n].to_vec(),
            clamped: 0,
        }
    }

    /// Headered CSV: `state_dim,action_dim`, then `s…,a…,s′…,density` per
    /// row with 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{},{}", self.state_dim, self.action_dim)?;
        let mut line = String::new();
        for i in 0..self.len() {
            line.clear();
            let values = self.state(i).iter().chain(self.action(i)).chain(self.next_state(i));
            for v in values.chain(std::iter::once(&self.densities[i])) {
                if !line.is_empty() {
                    line.push(',');
                }
                line.push_str(&format!("{v:.16e}"));
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or(Error::Parse { line: 1, msg: "empty file".into() })??;
        let dims: Vec<usize> = header
            .split(',')
            .map(|x| x.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse { line: 1, msg: format!("bad header {header:?}: {e}") })?;
        let [sd, ad] = dims[..] else {
            return Err(Error::Parse {
                line: 1,
                msg: format!("header must be `state_dim,action_dim`, got {header:?}"),
            });
        };
        let mut out = TransitionDataset::new(sd, ad);
        let width = 2 * sd + ad + 1;
        let mut row = Vec::with_capacity(width);
        for (idx, line) in lines.enumerate() {
            let line = line?;
            let lineno = idx + 2;
            if line.trim().is_empty() {
                continue;
            }
            row.clear();
            for field in line.split(',') {
                let v = field
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse { line: lineno, msg: format!("{field:?}: {e}") })?;
                row.push(v);
            }
            if row.len() != width {
                return Err(Error::Parse { line: lineno, msg: format!("expected {width} fields, got {}", row.len()) });
            }
            out.push(&row[..sd], &row[sd..sd + ad], &row[sd + ad..2 * sd + ad], row[width - 1])
                .map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_csv(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(f))
    }
}

/// Roll out one sample path of `n` transitions under `policy`, recording
/// `π̄(aₜ|sₜ)` on every row. Deterministic given `seed`.
pub fn sample_trajectory<E: Environment + ?Sized>(
    env: &E,
    policy: &BehaviorPolicy,
    n: usize,
    seed: u64,
) -> Result<TransitionDataset> {
    if n == 0 {
        return Err(Error::InvalidInput("trajectory length must be at least 1".into()));
    }
    if policy.action_dim() != env.action_dim() {
        return Err(Error::DimensionMismatch(format!(
            "policy draws {}-dimensional actions, environment takes {}",
            policy.action_dim(),
            env.action_dim()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = env.initial_state(&mut rng);
    for _ in 0..env.burn_in() {
        let a = policy.sample(&s, &mut rng);
        s = env.step(&s, &a, &mut rng).0;
    }
    let mut out = TransitionDataset::new(env.state_dim(), env.action_dim());
    out.states.reserve(n * env.state_dim());
    out.next_states.reserve(n * env.state_dim());
    out.actions.reserve(n * env.action_dim());
    out.densities.reserve(n);
    for _ in 0..n {
        let a = policy.sample(&s, &mut rng);
        let density = policy.density(&s, &a);
        let (next, clamped) = env.step(&s, &a, &mut rng);
        out.push(&s, &a, &next, density)?;
        if clamped {
            out.clamped += 1;
        }
        s = next;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::Measure;

    #[test]
    fn push_rejects_bad_rows() {
        let mut d = TransitionDataset::new(2, 1);
        assert!(d.push(&[0.0, 0.0], &[1.0], &[0.0, 0.0], 0.5).is_ok());
        assert!(matches!(d.push(&[0.0, 0.0], &[1.0], &[0.0, 0.0], 0.0), Err(Error::NonPositiveDensity { row: 1, .. })));
        assert!(d.push(&[0.0], &[1.0], &[0.0, 0.0], 1.0).is_err());
        assert_eq!(d.len(), 1);
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let mut d = TransitionDataset::new(2, 2);
        d.push(&[0.1, -1.0 / 3.0], &[1e-300, f64::MAX], &[AWKWARD, -0.0], 0.15915494309189535).unwrap();
        d.push(&[5e-324, 2.0], &[-7.25, 1e22], &[0.3, 0.7], 1.0).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let back = TransitionDataset::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in d
            .states()
            .iter()
            .chain(d.actions())
            .chain(d.next_states())
            .chain(d.densities())
            .zip(back.states().iter().chain(back.actions()).chain(back.next_states()).chain(back.densities()))
        {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(String::from_utf8(buf).unwrap().starts_with("2,2\n"));
    }

    const AWKWARD: f64 = 1.2345678901234567;

    #[test]
    fn csv_errors_carry_line_numbers() {
        let bad = "1,1\n0.0,1.0,2.0,0.5\n0.0,1.0,x,0.5\n";
        assert!(matches!(TransitionDataset::read_csv(bad.as_bytes()), Err(Error::Parse { line: 3, .. })));
        let short = "1,1\n0.0,1.0\n";
        assert!(matches!(TransitionDataset::read_csv(short.as_bytes()), Err(Error::Parse { line: 2, .. })));
        let zero = "1,1\n0.0,1.0,2.0,0.0\n";
        assert!(matches!(TransitionDataset::read_csv(zero.as_bytes()), Err(Error::Parse { line: 2, .. })));
        assert!(TransitionDataset::read_csv("1\n".as_bytes()).is_err());
    }

    #[test]
    fn trajectory_chains_states() {
        let mdp = make_block_mdp(6, 3, 2, 3, 0.5, 1).unwrap();
        let pol = BehaviorPolicy::Fixed(Measure::uniform_categorical(3));
        let d = sample_trajectory(&mdp, &pol, 500, 3).unwrap();
        assert_eq!(d.len(), 500);
        for i in 1..d.len() {
            assert_eq!(d.state(i), d.next_state(i - 1));
        }
        assert!(d.densities().iter().all(|&p| p == 1.0 / 3.0));
        assert_eq!(sample_trajectory(&mdp, &pol, 1, 3).unwrap().len(), 1);
        assert!(sample_trajectory(&mdp, &pol, 0, 3).is_err());
        assert_eq!(d, sample_trajectory(&mdp, &pol, 500, 3).unwrap());
    }

    #[test]
    fn policy_dimension_checked() {
        let mdp = make_block_mdp(4, 2, 2, 2, 0.5, 1).unwrap();
        let pol = BehaviorPolicy::Fixed(Measure::StandardNormal { dim: 2 });
        assert!(sample_trajectory(&mdp, &pol, 5, 0).is_err());
    }
}
