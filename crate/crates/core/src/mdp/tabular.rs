use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use super::Environment;
use crate::error::{Error, Result};
use crate::features::Features;
use crate::linalg;
use crate::measure::sample_categorical;
use crate::tensor::{Matrix, Mode, Tensor3};

/// Finite MDP with transition tensor `p(s′|s, a)` stored at `(s, a, s′)`
/// and a (possibly trivial) block structure on states and actions.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMDP {
    transition: Tensor3,
    /// `rows[(s + n_states·a)·n_states + s′]`.
    rows: Vec<f64>,
    state_block: Vec<usize>,
    action_block: Vec<usize>,
    n_s: usize,
    n_a: usize,
}

impl TabularMDP {
    pub fn new(transition: Tensor3, state_block: Vec<usize>, action_block: Vec<usize>) -> Result<Self> {
        let [ns, na, ns2] = transition.dims();
        if ns != ns2 || ns == 0 || na == 0 {
            return Err(Error::DimensionMismatch(format!("transition tensor has dims {:?}", transition.dims())));
        }
        if state_block.len() != ns || action_block.len() != na {
            return Err(Error::DimensionMismatch("block labels must cover every state and action".into()));
        }
        let mut rows = vec![0.0; ns * na * ns];
        for a in 0..na {
            for s in 0..ns {
                let row = &mut rows[(s + ns * a) * ns..(s + ns * a + 1) * ns];
                for (t, r) in row.iter_mut().enumerate() {
                    *r = transition.get(s, a, t);
                }
                if row.iter().any(|&p| !(p >= 0.0)) {
                    return Err(Error::InvalidInput(format!("negative transition probability at ({s}, {a})")));
                }
                let total: f64 = row.iter().sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidInput(format!("p(·|{s}, {a}) sums to {total}")));
                }
            }
        }
        let n_s = count_labels(&state_block)?;
        let n_a = count_labels(&action_block)?;
        Ok(Self { transition, rows, state_block, action_block, n_s, n_a })
    }

    /// Every state and action in its own block.
    pub fn unstructured(transition: Tensor3) -> Result<Self> {
        let [ns, na, _] = transition.dims();
        Self::new(transition, (0..ns).collect(), (0..na).collect())
    }

    pub fn n_states(&self) -> usize {
        self.state_block.len()
    }

    pub fn n_actions(&self) -> usize {
        self.action_block.len()
    }

    pub fn transition(&self) -> &Tensor3 {
        &self.transition
    }

    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let n = self.n_states();
        &self.rows[(s + n * a) * n..(s + n * a + 1) * n]
    }

    pub fn state_block(&self) -> &[usize] {
        &self.state_block
    }

    pub fn action_block(&self) -> &[usize] {
        &self.action_block
    }

    pub fn n_s(&self) -> usize {
        self.n_s
    }

    pub fn n_a(&self) -> usize {
        self.n_a
    }

    /// `q*_{ij}`, read from the first member of each block.
    pub fn block_kernel(&self, i: usize, j: usize) -> Option<&[f64]> {
        let s = self.state_block.iter().position(|&b| b == i)?;
        let a = self.action_block.iter().position(|&b| b == j)?;
        Some(self.row(s, a))
    }

    /// Whether `p(·|s,a)` depends on `(s, a)` only through the block labels.
    pub fn is_block_consistent(&self) -> bool {
        (0..self.n_states()).all(|s| {
            (0..self.n_actions())
                .all(|a| self.block_kernel(self.state_block[s], self.action_block[a]) == Some(self.row(s, a)))
        })
    }

    pub fn sample_next(&self, s: usize, a: usize, rng: &mut ChaCha8Rng) -> usize {
        sample_categorical(self.row(s, a), rng)
    }
}

fn count_labels(labels: &[usize]) -> Result<usize> {
    let n = labels.iter().max().map_or(0, |m| m + 1);
    let mut seen = vec![false; n];
    labels.iter().for_each(|&b| seen[b] = true);
    if seen.iter().any(|x| !x) {
        return Err(Error::InvalidInput("block labels must be contiguous from 0".into()));
    }
    Ok(n)
}

impl Environment for TabularMDP {
    fn state_dim(&self) -> usize {
        1
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn initial_state(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        use rand::Rng;
        vec![rng.random_range(0..self.n_states()) as f64]
    }

    fn step(&self, state: &[f64], action: &[f64], rng: &mut ChaCha8Rng) -> (Vec<f64>, bool) {
        let s = state[0] as usize;
        let a = action[0] as usize;
        (vec![self.sample_next(s, a, rng) as f64], false)
    }
}

fn dirichlet(n: usize, gamma: &Gamma<f64>, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let total: f64 = v.iter().sum();
        if total > 0.0 && total.is_finite() {
            v.iter_mut().for_each(|x| *x /= total);
            // renormalize once more so the row sums to 1 to the last bit as
            // closely as the division allows
            let t: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= t);
            return v;
        }
    }
}

/// Random block MDP (hard aggregation): states and actions are assigned to
/// blocks round-robin and each block pair gets a kernel drawn from a
/// symmetric Dirichlet with the given concentration. Kernel sets with two
/// coinciding kernels are redrawn.
pub fn make_block_mdp(
    n_states: usize,
    n_actions: usize,
    n_s: usize,
    n_a: usize,
    concentration: f64,
    seed: u64,
) -> Result<TabularMDP> {
    if n_s == 0 || n_a == 0 || n_s > n_states || n_a > n_actions {
        return Err(Error::InvalidInput(format!(
            "cannot split {n_states} states into {n_s} blocks and {n_actions} actions into {n_a} blocks"
        )));
    }
    if !(concentration > 0.0) {
        return Err(Error::InvalidInput(format!("concentration must be positive, got {concentration}")));
    }
    let gamma = Gamma::new(concentration, 1.0).expect("positive shape");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kernels = loop {
        let kernels: Vec<Vec<f64>> = (0..n_s * n_a).map(|_| dirichlet(n_states, &gamma, &mut rng)).collect();
        let distinct = (0..kernels.len()).all(|p| {
            (p + 1..kernels.len())
                .all(|q| kernels[p].iter().zip(&kernels[q]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() > 0.0)
        });
        if distinct {
            break kernels;
        }
    };
    let state_block: Vec<usize> = (0..n_states).map(|s| s % n_s).collect();
    let action_block: Vec<usize> = (0..n_actions).map(|a| a % n_a).collect();
    let t =
        Tensor3::from_fn([n_states, n_actions, n_states], |s, a, t| kernels[state_block[s] + n_s * action_block[a]][t]);
    TabularMDP::new(t, state_block, action_block)
}

/// Random latent-variable MDP (soft aggregation) with Tucker rank at most
/// `(r, l, m)`: `p(s′|s,a) = Σ u(s̃|s) v(ã|a) w(s̃′|s̃,ã) z(s′|s̃′)`.
pub fn make_latent_mdp(n_states: usize, n_actions: usize, ranks: [usize; 3], seed: u64) -> Result<TabularMDP> {
    let [r, l, m] = ranks;
    if r == 0 || l == 0 || m == 0 || n_states == 0 || n_actions == 0 {
        return Err(Error::InvalidInput("latent MDP sizes must be positive".into()));
    }
    let gamma = Gamma::new(1.0, 1.0).expect("positive shape");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u: Vec<Vec<f64>> = (0..n_states).map(|_| dirichlet(r, &gamma, &mut rng)).collect();
    let v: Vec<Vec<f64>> = (0..n_actions).map(|_| dirichlet(l, &gamma, &mut rng)).collect();
    let w: Vec<Vec<f64>> = (0..r * l).map(|_| dirichlet(m, &gamma, &mut rng)).collect();
    let z: Vec<Vec<f64>> = (0..m).map(|_| dirichlet(n_states, &gamma, &mut rng)).collect();
    let mut t = Tensor3::zeros([n_states, n_actions, n_states]);
    for s in 0..n_states {
        for a in 0..n_actions {
            let mut row = vec![0.0; n_states];
            for (i, ui) in u[s].iter().enumerate() {
                for (j, vj) in v[a].iter().enumerate() {
                    for (k, wk) in w[i + r * j].iter().enumerate() {
                        let c = ui * vj * wk;
                        row.iter_mut().zip(&z[k]).for_each(|(x, zk)| *x += c * zk);
                    }
                }
            }
            let total: f64 = row.iter().sum();
            for (sn, x) in row.iter().enumerate() {
                t.set(s, a, sn, x / total);
            }
        }
    }
    TabularMDP::unstructured(t)
}

/// The 4-state, 2-action tensor whose meta-states `{0, 1}` and `{2, 3}`
/// vanish under the uniform policy average.
pub fn example3_tensor() -> Tensor3 {
    let (lo, hi) = (1.0 / 6.0, 1.0 / 3.0);
    Tensor3::from_fn([4, 2, 4], |s, a, t| {
        let same_half = (s < 2) == (t < 2);
        match (a, same_half) {
            (0, true) | (1, false) => lo,
            _ => hi,
        }
    })
}

pub fn example3_mdp() -> TabularMDP {
    TabularMDP::new(example3_tensor(), vec![0, 0, 1, 1], vec![0, 1]).expect("rows are stochastic")
}

/// Exact population tensors of a finite MDP for given features.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// `E[φ(s′)|s,a] = P ×₁ φ(s)ᵀ ×₂ ψ(a)ᵀ`.
    pub p: Tensor3,
    /// `Σ ξ(s) η(a) p(s′|s,a) φ(s) ∘ ψ(a) ∘ φ(s′)`.
    pub f: Tensor3,
    /// `Σ ξ(s) φ(s) φ(s)ᵀ`.
    pub sigma: Matrix,
}

fn feature_matrix(features: &Features, n: usize) -> Result<Matrix> {
    if features.input_dim() != 1 {
        return Err(Error::DimensionMismatch("tabular features must take an index input".into()));
    }
    features.evaluate_columns(&(0..n).map(|i| i as f64).collect::<Vec<_>>())
}

/// Left inverse of `Xᵀ` for a `d × n` feature matrix `X`.
fn left_inverse(features: &Features, x: &Matrix) -> Result<Matrix> {
    match features {
        Features::OneHot(h) => Ok(Matrix::diagonal(&h.weights().iter().map(|w| 1.0 / w).collect::<Vec<_>>())),
        Features::Fourier(_) => linalg::pinv(&x.transpose(), 1e-12),
    }
}

fn check_measure(p: &[f64], n: usize, what: &str) -> Result<()> {
    if p.len() != n {
        return Err(Error::DimensionMismatch(format!("{what} has {} entries, expected {n}", p.len())));
    }
    if p.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::InvalidInput(format!("{what} must be strictly positive")));
    }
    Ok(())
}

/// Exact `(P, F, Σ)` for a finite MDP. `P` solves
/// `P ×₁ φ(s)ᵀ ×₂ ψ(a)ᵀ = E[φ(s′)|s,a]` by least squares over all `(s, a)`;
/// with one-hot features it is the transition tensor itself.
pub fn exact_ground_truth(
    mdp: &TabularMDP,
    phi: &Features,
    psi: &Features,
    xi: &[f64],
    eta: &[f64],
) -> Result<GroundTruth> {
    let ns = mdp.n_states();
    let na = mdp.n_actions();
    check_measure(xi, ns, "state distribution")?;
    check_measure(eta, na, "action distribution")?;
    let x = feature_matrix(phi, ns)?;
    let y = feature_matrix(psi, na)?;
    if let Features::OneHot(h) = phi {
        if h.len() != ns {
            return Err(Error::DimensionMismatch(format!(
                "one-hot state basis has {} entries for {ns} states",
                h.len()
            )));
        }
    }
    if let Features::OneHot(h) = psi {
        if h.len() != na {
            return Err(Error::DimensionMismatch(format!(
                "one-hot action basis has {} entries for {na} actions",
                h.len()
            )));
        }
    }
    // E[φ(s′)|s,a] for every (s, a)
    let next = mdp.transition().mode_product(&x, Mode::Three)?;
    let p = next.mode_product(&left_inverse(phi, &x)?, Mode::One)?.mode_product(&left_inverse(psi, &y)?, Mode::Two)?;

    let mut xw = x.clone();
    for (s, &w) in xi.iter().enumerate() {
        xw.column_mut(s).iter_mut().for_each(|v| *v *= w);
    }
    let mut yw = y.clone();
    for (a, &w) in eta.iter().enumerate() {
        yw.column_mut(a).iter_mut().for_each(|v| *v *= w);
    }
    let f = next.mode_product(&xw, Mode::One)?.mode_product(&yw, Mode::Two)?;
    let mut sigma = xw.matmul_transpose_right(&x);
    sigma.symmetrize();
    Ok(GroundTruth { p, f, sigma })
}
