use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Environment;
use crate::error::{Error, Result};

const DRIFT_TABLE: &str = include_str!("../../data/drift_table.csv");

/// Controlled diffusion `dX = −[∇V(X) + F(a)] dt + √2 dB` observed every
/// `tau` time units, with the wavy potential
/// `V(x) = A (cos(ω x₁) + cos(ω x₂)) + (c/2) ‖x‖²`
/// and a drift `F` that is constant on each cell of a 4 × 4 grid over the
/// action box.
#[derive(Debug, Clone, PartialEq)]
pub struct SdeEnv {
    pub tau: f64,
    pub substeps: usize,
    pub well_amplitude: f64,
    pub well_frequency: f64,
    pub confinement: f64,
    /// `drift_table[row][col]` is the drift on the cell with `a₂` in grid
    /// row `row` and `a₁` in grid column `col`.
    pub drift_table: [[[f64; 2]; 4]; 4],
    pub action_bound: f64,
    /// States are clamped into `[−safety_bound, safety_bound]²`.
    pub safety_bound: f64,
    pub noise: bool,
    pub burn_in: usize,
}

impl Default for SdeEnv {
    fn default() -> Self {
        Self {
            tau: 0.1,
            substeps: 10,
            well_amplitude: 1.0,
            well_frequency: std::f64::consts::PI,
            confinement: 1.5,
            drift_table: frozen_drift_table(),
            action_bound: 2.0,
            safety_bound: 6.0,
            noise: true,
            burn_in: 100,
        }
    }
}

/// The drift table shipped in `data/drift_table.csv`.
pub fn frozen_drift_table() -> [[[f64; 2]; 4]; 4] {
    let mut table = [[[f64::NAN; 2]; 4]; 4];
    for line in DRIFT_TABLE.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let r: usize = f[0].parse().expect("drift table row");
        let c: usize = f[1].parse().expect("drift table col");
        table[r][c] = [f[2].parse().expect("drift x"), f[3].parse().expect("drift y")];
    }
    assert!(table.iter().flatten().flatten().all(|v| v.is_finite()), "drift table incomplete");
    table
}

impl SdeEnv {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || self.substeps == 0 {
            return Err(Error::InvalidInput(format!(
                "need tau > 0 and at least one substep, got tau = {} and {} substeps",
                self.tau, self.substeps
            )));
        }
        if !(self.action_bound > 0.0) || !(self.safety_bound > 0.0) {
            return Err(Error::InvalidInput("domain bounds must be positive".into()));
        }
        Ok(())
    }

    pub fn grad_potential(&self, x: [f64; 2]) -> [f64; 2] {
        let (a, w, c) = (self.well_amplitude, self.well_frequency, self.confinement);
        [-a * w * (w * x[0]).sin() + c * x[0], -a * w * (w * x[1]).sin() + c * x[1]]
    }

    pub fn potential(&self, x: [f64; 2]) -> f64 {
        let (a, w, c) = (self.well_amplitude, self.well_frequency, self.confinement);
        a * ((w * x[0]).cos() + (w * x[1]).cos()) + 0.5 * c * (x[0] * x[0] + x[1] * x[1])
    }

    /// Grid cell `(row, col)` of an action, after clamping into the box.
    pub fn action_cell(&self, a: &[f64]) -> (usize, usize) {
        let b = self.action_bound;
        let cell = |v: f64| {
            let t = ((v.clamp(-b, b) + b) / (2.0 * b) * 4.0).floor();
            (t as usize).min(3)
        };
        (cell(a[1]), cell(a[0]))
    }

    pub fn drift(&self, a: &[f64]) -> [f64; 2] {
        let (r, c) = self.action_cell(a);
        self.drift_table[r][c]
    }
}

/// One macro step of length `tau` by Euler–Maruyama with `substeps`
/// increments. Returns the new state and whether it left the safety box.
pub fn sde_step(env: &SdeEnv, s: &[f64], a: &[f64], rng: &mut ChaCha8Rng) -> (Vec<f64>, bool) {
    let h = env.tau / env.substeps as f64;
    let noise = (2.0 * h).sqrt();
    let f = env.drift(a);
    let mut x = [s[0], s[1]];
    let mut clamped = false;
    for _ in 0..env.substeps {
        let g = env.grad_potential(x);
        for d in 0..2 {
            x[d] -= (g[d] + f[d]) * h;
            if env.noise {
                let z: f64 = StandardNormal.sample(rng);
                x[d] += noise * z;
            }
            if x[d].abs() > env.safety_bound {
                x[d] = x[d].clamp(-env.safety_bound, env.safety_bound);
                clamped = true;
            }
        }
    }
    (x.to_vec(), clamped)
}

impl Environment for SdeEnv {
    fn state_dim(&self) -> usize {
        2
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn initial_state(&self, _rng: &mut ChaCha8Rng) -> Vec<f64> {
        vec![0.0, 0.0]
    }

    fn step(&self, state: &[f64], action: &[f64], rng: &mut ChaCha8Rng) -> (Vec<f64>, bool) {
        sde_step(self, state, action, rng)
    }

    fn burn_in(&self) -> usize {
        self.burn_in
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::sample_trajectory;
    use crate::measure::{BehaviorPolicy, Measure};
    use rand::SeedableRng;

    fn flat() -> SdeEnv {
        SdeEnv { well_amplitude: 0.0, confinement: 0.0, drift_table: [[[0.0; 2]; 4]; 4], ..SdeEnv::default() }
    }

    #[test]
    fn drift_table_is_unit_vectors() {
        let t = frozen_drift_table();
        for v in t.iter().flatten() {
            assert!(((v[0] * v[0] + v[1] * v[1]).sqrt() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn brownian_increments() {
        let env = flat();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 100_000;
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        for _ in 0..n {
            let (x, _) = sde_step(&env, &[0.0, 0.0], &[0.0, 0.0], &mut rng);
            for d in 0..2 {
                m[d] += x[d];
                v[d] += x[d] * x[d];
            }
        }
        let var = 2.0 * env.tau;
        for d in 0..2 {
            let mean = m[d] / n as f64;
            let second = v[d] / n as f64 - mean * mean;
            assert!(mean.abs() <= 3.0 * (var / n as f64).sqrt(), "mean {mean}");
            // the variance estimator has standard error var·√(2/n)
            assert!((second - var).abs() <= 3.0 * var * (2.0 / n as f64).sqrt(), "var {second}");
        }
    }

    #[test]
    fn deterministic_quadratic_decay() {
        let env = SdeEnv { confinement: 0.7, noise: false, ..flat() };
        let h = env.tau / env.substeps as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (x, _) = sde_step(&env, &[1.5, -2.0], &[0.0, 0.0], &mut rng);
        let factor = (1.0 - 0.7 * h).powi(env.substeps as i32);
        assert!((x[0] - 1.5 * factor).abs() < 1e-14);
        assert!((x[1] + 2.0 * factor).abs() < 1e-14);
    }

    #[test]
    fn constant_drift_moves_by_tau() {
        let mut env = SdeEnv { noise: false, ..flat() };
        env.drift_table = [[[0.3, -0.8]; 4]; 4];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (x, _) = sde_step(&env, &[0.5, 0.5], &[1.0, -1.0], &mut rng);
        assert!((x[0] - (0.5 - 0.3 * env.tau)).abs() < 1e-14);
        assert!((x[1] - (0.5 + 0.8 * env.tau)).abs() < 1e-14);
    }

    #[test]
    fn action_cells_clamp_to_the_box() {
        let env = SdeEnv::default();
        assert_eq!(env.action_cell(&[-1.9, 1.9]), (3, 0));
        assert_eq!(env.action_cell(&[10.0, -10.0]), (0, 3));
        assert_eq!(env.action_cell(&[0.0, 0.0]), (2, 2));
        assert_eq!(env.action_cell(&[-0.01, 0.99]), (2, 1));
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let env = SdeEnv::default();
        let x = [0.37, -1.21];
        let g = env.grad_potential(x);
        let e = 1e-6;
        for d in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[d] += e;
            xm[d] -= e;
            let fd = (env.potential(xp) - env.potential(xm)) / (2.0 * e);
            assert!((fd - g[d]).abs() < 1e-7);
        }
    }

    #[test]
    fn trajectory_stays_in_the_box() {
        let env = SdeEnv::default();
        let pol = BehaviorPolicy::Fixed(Measure::StandardNormal { dim: 2 });
        let d = sample_trajectory(&env, &pol, 20_000, 4).unwrap();
        assert!((d.clamped() as f64) < 1e-3 * d.len() as f64);
        assert!(d.states().iter().all(|v| v.abs() <= 6.0));
        let a = d.action(0);
        assert_eq!(d.density(0), Measure::StandardNormal { dim: 2 }.density(a));
    }

    #[test]
    fn validation() {
        assert!(SdeEnv { substeps: 0, ..SdeEnv::default() }.validate().is_err());
        assert!(SdeEnv { tau: 0.0, ..SdeEnv::default() }.validate().is_err());
        assert!(SdeEnv::default().validate().is_ok());
    }
}
