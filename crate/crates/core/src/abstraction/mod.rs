//! Discrete abstraction of a learned model: decoupled state and action
//! clustering, the partition loss, the misclassification error, the fitted
//! block-level chain and its policy-evaluation gap.

mod assignment;
mod kmeans;

pub use assignment::min_cost_assignment;
pub use kmeans::{weighted_kmeans, ClusterModel, RESTARTS};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};

use crate::embedding::EmbeddingModel;
use crate::error::{Error, Result};
use crate::mdp::{TabularMDP, TransitionDataset};
use crate::tensor::Tensor3;

pub const MAX_PERMUTED_BLOCKS: usize = 8;
pub const DEFAULT_INSTANCES: usize = 64;

/// State and action clusters in embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct Abstraction {
    pub states: ClusterModel,
    pub actions: ClusterModel,
}

impl Abstraction {
    pub fn state_label(&self, model: &EmbeddingModel, s: &[f64]) -> Result<usize> {
        Ok(self.states.classify(&model.state_embedding(s)?))
    }

    pub fn action_label(&self, model: &EmbeddingModel, a: &[f64]) -> Result<usize> {
        Ok(self.actions.classify(&model.action_embedding(a)?))
    }

    pub fn n_s(&self) -> usize {
        self.states.k()
    }

    pub fn n_a(&self) -> usize {
        self.actions.k()
    }
}

/// Clusters `{f̂(s)}` over the state samples and `{ĝ(a)}` over the action
/// samples, each with uniform weights. The action run uses seed `seed + 1`.
pub fn cluster_state_action(
    model: &EmbeddingModel,
    state_samples: &[Vec<f64>],
    action_samples: &[Vec<f64>],
    n_s: usize,
    n_a: usize,
    seed: u64,
    max_iters: usize,
) -> Result<Abstraction> {
    if state_samples.is_empty() || action_samples.is_empty() {
        return Err(Error::InvalidInput("clustering needs state and action samples".into()));
    }
    let f: Vec<Vec<f64>> = state_samples.iter().map(|s| model.state_embedding(s)).collect::<Result<_>>()?;
    let g: Vec<Vec<f64>> = action_samples.iter().map(|a| model.action_embedding(a)).collect::<Result<_>>()?;
    let states = weighted_kmeans(&f, &vec![1.0; f.len()], n_s, seed, max_iters)?;
    let actions = weighted_kmeans(&g, &vec![1.0; g.len()], n_a, seed.wrapping_add(1), max_iters)?;
    Ok(Abstraction { states, actions })
}

fn normalized(weights: &[f64], n: usize, what: &str) -> Result<Vec<f64>> {
    if weights.len() != n {
        return Err(Error::DimensionMismatch(format!("{} {what} weights for {n} samples", weights.len())));
    }
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|&w| !(w >= 0.0)) || !(total > 0.0) {
        return Err(Error::InvalidInput(format!("{what} weights must be nonnegative and not all zero")));
    }
    Ok(weights.iter().map(|w| w / total).collect())
}

/// Empirical partition loss under the product of the weighted state and
/// action samples: `Σ ξ(s) η(a) ‖Φ̂(s, a) − ẑ_{ij}‖²` with
/// `ẑ_{ij} = Ĉ ×₁ f_iᵀ ×₂ g_jᵀ` taken from the cluster centers.
pub fn partition_loss(
    model: &EmbeddingModel,
    clusters: &Abstraction,
    states: &[Vec<f64>],
    state_weights: &[f64],
    actions: &[Vec<f64>],
    action_weights: &[f64],
) -> Result<f64> {
    let xi = normalized(state_weights, states.len(), "state")?;
    let eta = normalized(action_weights, actions.len(), "action")?;
    let core = &model.factors.core;
    let z: Vec<Vec<Vec<f64>>> = clusters
        .states
        .centers
        .iter()
        .map(|f| clusters.actions.centers.iter().map(|g| core.contract_first_two(f, g)).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    let g: Vec<Vec<f64>> = actions.iter().map(|a| model.action_embedding(a)).collect::<Result<_>>()?;
    let cols: Vec<usize> = g.iter().map(|g| clusters.actions.classify(g)).collect();
    let mut loss = 0.0;
    for (s, &ws) in states.iter().zip(&xi) {
        let f = model.state_embedding(s)?;
        let i = clusters.states.classify(&f);
        // Ĉ ×₁ fᵀ, an l × m matrix
        let cf = core.contract_first(&f)?;
        for ((g, &j), &wa) in g.iter().zip(&cols).zip(&eta) {
            let phi = cf.tr_matvec(g)?;
            let d: f64 = phi.iter().zip(&z[i][j]).map(|(x, y)| (x - y) * (x - y)).sum();
            loss += ws * wa * d;
        }
    }
    Ok(loss)
}

/// True and estimated block labels on a weighted sample.
#[derive(Debug, Clone, Copy)]
pub struct Labeling<'a> {
    pub truth: &'a [usize],
    pub estimate: &'a [usize],
    pub weights: &'a [f64],
    pub blocks: usize,
}

impl Labeling<'_> {
    /// `overlap[i][k] = mass(A_i ∩ Â_k) / mass(A_i)`.
    fn relative_overlap(&self, what: &str) -> Result<Vec<Vec<f64>>> {
        let n = self.truth.len();
        if self.estimate.len() != n || self.weights.len() != n {
            return Err(Error::DimensionMismatch(format!("{what} labels and weights differ in length")));
        }
        if self.truth.iter().chain(self.estimate).any(|&l| l >= self.blocks) {
            return Err(Error::InvalidInput(format!("{what} label out of range for {} blocks", self.blocks)));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::InvalidInput(format!("{what} weights must be nonnegative")));
        }
        let b = self.blocks;
        let mut m = vec![vec![0.0; b]; b];
        for ((&t, &e), &w) in self.truth.iter().zip(self.estimate).zip(self.weights) {
            m[t][e] += w;
        }
        for (i, row) in m.iter_mut().enumerate() {
            let total: f64 = row.iter().sum();
            if !(total > 0.0) {
                return Err(Error::InvalidInput(format!("true {what} block {i} has no mass")));
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        Ok(m)
    }
}

/// Misclassification error under the product of two weighted samples:
/// the minimum over block permutations `σ₁, σ₂` of
/// `Σ_{i,j} (ξ×η)((A_i × B_j) \ (Â_{σ₁(i)} × B̂_{σ₂(j)})) / (ξ×η)(A_i × B_j)`.
/// State permutations are enumerated, so at most eight state blocks are
/// accepted; the action permutation is an assignment problem per `σ₁`.
pub fn misclassification(states: &Labeling, actions: &Labeling) -> Result<f64> {
    if states.blocks > MAX_PERMUTED_BLOCKS {
        return Err(Error::InvalidInput(format!(
            "{} state blocks exceed the permutation-search limit of {MAX_PERMUTED_BLOCKS}",
            states.blocks
        )));
    }
    let x = states.relative_overlap("state")?;
    let y = actions.relative_overlap("action")?;
    let mut best = f64::INFINITY;
    for sigma1 in assignment::permutations(states.blocks) {
        let cost: Vec<Vec<f64>> = y
            .iter()
            .map(|yj| yj.iter().map(|&yjl| x.iter().zip(&sigma1).map(|(xi, &k)| 1.0 - xi[k] * yjl).sum()).collect())
            .collect();
        let sigma2 = min_cost_assignment(&cost)?;
        let total: f64 = sigma2.iter().enumerate().map(|(j, &l)| cost[j][l]).sum();
        best = best.min(total);
    }
    Ok(best.max(0.0))
}

/// Block-level transition model `q̂(k | i, j)` stored at `(i, j, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMDP {
    pub n_s: usize,
    pub n_a: usize,
    pub q_hat: Tensor3,
    /// Block pairs with no data, given the uniform row.
    pub fallback: Vec<(usize, usize)>,
}

impl DiscreteMDP {
    fn from_counts(n_s: usize, n_a: usize, counts: &Tensor3) -> Self {
        let mut q = Tensor3::zeros([n_s, n_a, n_s]);
        let mut fallback = Vec::new();
        for j in 0..n_a {
            for i in 0..n_s {
                let total: f64 = (0..n_s).map(|k| counts.get(i, j, k)).sum();
                if total > 0.0 {
                    for k in 0..n_s {
                        q.set(i, j, k, counts.get(i, j, k) / total);
                    }
                } else {
                    fallback.push((i, j));
                    for k in 0..n_s {
                        q.set(i, j, k, 1.0 / n_s as f64);
                    }
                }
            }
        }
        fallback.sort_unstable();
        Self { n_s, n_a, q_hat: q, fallback }
    }

    pub fn row(&self, i: usize, j: usize) -> Vec<f64> {
        (0..self.n_s).map(|k| self.q_hat.get(i, j, k)).collect()
    }
}

/// Empirical block transition frequencies; unobserved block pairs fall
/// back to the uniform row and are listed in `fallback`.
pub fn fit_discrete(
    data: &TransitionDataset,
    state_label: &dyn Fn(&[f64]) -> Result<usize>,
    action_label: &dyn Fn(&[f64]) -> Result<usize>,
    n_s: usize,
    n_a: usize,
) -> Result<DiscreteMDP> {
    if n_s == 0 || n_a == 0 {
        return Err(Error::InvalidInput("block counts must be positive".into()));
    }
    let mut counts = Tensor3::zeros([n_s, n_a, n_s]);
    for t in 0..data.len() {
        let i = state_label(data.state(t))?;
        let j = action_label(data.action(t))?;
        let k = state_label(data.next_state(t))?;
        if i >= n_s || k >= n_s || j >= n_a {
            return Err(Error::InvalidInput(format!("label ({i}, {j}, {k}) out of range")));
        }
        counts.set(i, j, k, counts.get(i, j, k) + 1.0);
    }
    Ok(DiscreteMDP::from_counts(n_s, n_a, &counts))
}

/// Discrete model fitted with learned clusters.
pub fn fit_discrete_clusters(
    data: &TransitionDataset,
    model: &EmbeddingModel,
    clusters: &Abstraction,
) -> Result<DiscreteMDP> {
    fit_discrete(
        data,
        &|s| clusters.state_label(model, s),
        &|a| clusters.action_label(model, a),
        clusters.n_s(),
        clusters.n_a(),
    )
}

fn check_distribution(p: &[f64], n: usize, what: &str) -> Result<()> {
    if p.len() != n || p.iter().any(|&v| !(v >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!("{what} must be a probability vector of length {n}")));
    }
    Ok(())
}

fn check_labels(labels: &[usize], n: usize, blocks: usize, what: &str) -> Result<()> {
    if labels.len() != n || labels.iter().any(|&l| l >= blocks) {
        return Err(Error::InvalidInput(format!(
            "{what} labels must give a block below {blocks} for each of {n} items"
        )));
    }
    Ok(())
}

/// Best-fit block model for given cluster labels of a finite MDP:
/// `q̂(k|i,j) = (ξ×η×p)(Â_i × B̂_j × Â_k) / (ξ×η)(Â_i × B̂_j)`.
pub fn exact_discrete(
    mdp: &TabularMDP,
    state_labels: &[usize],
    action_labels: &[usize],
    xi: &[f64],
    eta: &[f64],
    n_s: usize,
    n_a: usize,
) -> Result<DiscreteMDP> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    check_distribution(xi, ns, "ξ")?;
    check_distribution(eta, na, "η")?;
    check_labels(state_labels, ns, n_s, "state")?;
    check_labels(action_labels, na, n_a, "action")?;
    let mut mass = Tensor3::zeros([n_s, n_a, n_s]);
    for s in 0..ns {
        for a in 0..na {
            let w = xi[s] * eta[a];
            let (i, j) = (state_labels[s], action_labels[a]);
            for (t, &p) in mdp.row(s, a).iter().enumerate() {
                let k = state_labels[t];
                mass.set(i, j, k, mass.get(i, j, k) + w * p);
            }
        }
    }
    Ok(DiscreteMDP::from_counts(n_s, n_a, &mass))
}

/// `(c̲, c̄)`: the smallest and largest `ξ(A_i) η(B_j)` over true blocks.
pub fn block_mass_bounds(mdp: &TabularMDP, xi: &[f64], eta: &[f64]) -> Result<(f64, f64)> {
    check_distribution(xi, mdp.n_states(), "ξ")?;
    check_distribution(eta, mdp.n_actions(), "η")?;
    let mut xs = vec![0.0; mdp.n_s()];
    let mut ya = vec![0.0; mdp.n_a()];
    mdp.state_block().iter().zip(xi).for_each(|(&b, w)| xs[b] += w);
    mdp.action_block().iter().zip(eta).for_each(|(&b, w)| ya[b] += w);
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for x in &xs {
        for y in &ya {
            lo = lo.min(x * y);
            hi = hi.max(x * y);
        }
    }
    Ok((lo, hi))
}

/// Inputs of the policy-evaluation comparison on a finite block MDP.
#[derive(Debug, Clone, Copy)]
pub struct GapProblem<'a> {
    pub mdp: &'a TabularMDP,
    /// Estimated cluster of every state and action.
    pub state_labels: &'a [usize],
    pub action_labels: &'a [usize],
    pub q_hat: &'a DiscreteMDP,
    /// State measure; also the initial distribution of both chains.
    pub xi: &'a [f64],
    /// Action measure; the within-block action distribution of the policy.
    pub eta: &'a [f64],
}

/// Expected `H`-step return of a block-level reward and policy under the
/// true kernel (`q_hat = None`) or under the lifted block model
/// `p̂(s′|s,a) = q̂(k|î(s),ĵ(a)) ξ(s′)/ξ(Â_k)` for `s′ ∈ Â_k`.
fn expected_return(prob: &GapProblem, lifted: bool, reward: &[Vec<f64>], policy: &[Vec<f64>]) -> f64 {
    let mdp = prob.mdp;
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let (sb, ab) = (mdp.state_block(), mdp.action_block());
    let nb_s = mdp.n_s();
    let nb_a = mdp.n_a();
    let mut block_eta = vec![0.0; nb_a];
    ab.iter().zip(prob.eta).for_each(|(&b, w)| block_eta[b] += w);
    let n_hat = prob.q_hat.n_s;
    let mut cluster_xi = vec![0.0; n_hat];
    prob.state_labels.iter().zip(prob.xi).for_each(|(&k, w)| cluster_xi[k] += w);
    let horizon = reward.len();
    let mut v = vec![0.0; ns];
    for h in (0..horizon).rev() {
        let mut cluster_v = vec![0.0; n_hat];
        if lifted {
            for t in 0..ns {
                cluster_v[prob.state_labels[t]] += prob.xi[t] * v[t];
            }
            for (c, m) in cluster_v.iter_mut().zip(&cluster_xi) {
                *c = if *m > 0.0 { *c / m } else { 0.0 };
            }
        }
        let mut next = vec![0.0; ns];
        for s in 0..ns {
            let i = sb[s];
            let mut total = 0.0;
            for a in 0..na {
                let j = ab[a];
                if block_eta[j] <= 0.0 {
                    continue;
                }
                let pi = policy[h][i + nb_s * j] * prob.eta[a] / block_eta[j];
                if pi == 0.0 {
                    continue;
                }
                let future: f64 = if lifted {
                    let (ih, jh) = (prob.state_labels[s], prob.action_labels[a]);
                    (0..n_hat).map(|k| prob.q_hat.q_hat.get(ih, jh, k) * cluster_v[k]).sum()
                } else {
                    mdp.row(s, a).iter().zip(&v).map(|(p, x)| p * x).sum()
                };
                total += pi * (reward[h][i + nb_s * j] + future);
            }
            next[s] = total;
        }
        v = next;
    }
    prob.xi.iter().zip(&v).map(|(w, x)| w * x).sum()
}

/// Largest `|E^π_p Σ r_h − E^π_p̂ Σ r_h|` over `n_instances` random
/// block-level rewards `r_h(i, j) ~ U[0, 1]` and policies
/// `π_h(·|i) ~ Dirichlet(1)` over action blocks, both chains solved exactly
/// by backward induction. This is a sampled lower estimate of the worst
/// case.
pub fn policy_eval_gap(prob: &GapProblem, horizon: usize, n_instances: usize, seed: u64) -> Result<f64> {
    if horizon == 0 || n_instances == 0 {
        return Err(Error::InvalidInput("horizon and instance count must be positive".into()));
    }
    let mdp = prob.mdp;
    check_distribution(prob.xi, mdp.n_states(), "ξ")?;
    check_distribution(prob.eta, mdp.n_actions(), "η")?;
    check_labels(prob.state_labels, mdp.n_states(), prob.q_hat.n_s, "state")?;
    check_labels(prob.action_labels, mdp.n_actions(), prob.q_hat.n_a, "action")?;
    let (nb_s, nb_a) = (mdp.n_s(), mdp.n_a());
    let mut worst = 0.0f64;
    for instance in 0..n_instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(instance as u64);
        let reward: Vec<Vec<f64>> =
            (0..horizon).map(|_| (0..nb_s * nb_a).map(|_| rng.random::<f64>()).collect()).collect();
        let policy: Vec<Vec<f64>> = (0..horizon)
            .map(|_| {
                let mut p = vec![0.0; nb_s * nb_a];
                for i in 0..nb_s {
                    let e: Vec<f64> = (0..nb_a).map(|_| Exp1.sample(&mut rng)).collect();
                    let total: f64 = e.iter().sum();
                    for (j, x) in e.iter().enumerate() {
                        p[i + nb_s * j] = x / total;
                    }
                }
                p
            })
            .collect();
        let truth = expected_return(prob, false, &reward, &policy);
        let lifted = expected_return(prob, true, &reward, &policy);
        worst = worst.max((truth - lifted).abs());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{estimate_transition, EstimateOptions};
    use crate::features::{Features, OneHot};
    use crate::mdp::{exact_ground_truth, make_block_mdp, sample_trajectory};
    use crate::measure::{BehaviorPolicy, Measure};

    fn uniform(n: usize) -> Vec<f64> {
        vec![1.0 / n as f64; n]
    }

    fn exact_model(mdp: &TabularMDP) -> EmbeddingModel {
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let phi = Features::OneHot(OneHot::orthonormal_under(&uniform(ns)).unwrap());
        let psi = Features::OneHot(OneHot::orthonormal_under(&uniform(na)).unwrap());
        let gt = exact_ground_truth(mdp, &phi, &psi, &uniform(ns), &uniform(na)).unwrap();
        let ranks = [mdp.n_s(), mdp.n_a(), (mdp.n_s() * mdp.n_a()).min(ns)];
        let opts = EstimateOptions { ridge_scale: 0.0, ..EstimateOptions::default() };
        estimate_transition(&gt.f, &gt.sigma, &phi, &psi, ranks, opts).unwrap()
    }

    fn indices(n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|i| vec![i as f64]).collect()
    }

    #[test]
    fn exact_embeddings_recover_blocks() {
        let mdp = make_block_mdp(12, 6, 3, 2, 0.5, 21).unwrap();
        let model = exact_model(&mdp);
        let c = cluster_state_action(&model, &indices(12), &indices(6), 3, 2, 5, 100).unwrap();
        let s_est = c.states.assignment.clone();
        let a_est = c.actions.assignment.clone();
        let m = misclassification(
            &Labeling { truth: mdp.state_block(), estimate: &s_est, weights: &uniform(12), blocks: 3 },
            &Labeling { truth: mdp.action_block(), estimate: &a_est, weights: &uniform(6), blocks: 2 },
        )
        .unwrap();
        assert!(m.abs() < 1e-12);
        assert!(partition_loss(&model, &c, &indices(12), &uniform(12), &indices(6), &uniform(6)).unwrap() < 1e-20);
    }

    #[test]
    fn sample_order_does_not_change_partitions() {
        let mdp = make_block_mdp(12, 6, 3, 2, 0.5, 21).unwrap();
        let model = exact_model(&mdp);
        let fwd = cluster_state_action(&model, &indices(12), &indices(6), 3, 2, 5, 100).unwrap();
        let mut rev_states = indices(12);
        rev_states.reverse();
        let rev = cluster_state_action(&model, &rev_states, &indices(6), 3, 2, 5, 100).unwrap();
        for s in 0..12 {
            for t in 0..12 {
                let same_fwd = fwd.states.assignment[s] == fwd.states.assignment[t];
                let same_rev = rev.states.assignment[11 - s] == rev.states.assignment[11 - t];
                assert_eq!(same_fwd, same_rev);
            }
        }
    }

    #[test]
    fn single_clusters_give_total_variance() {
        let mdp = make_block_mdp(6, 4, 2, 2, 0.5, 3).unwrap();
        let model = exact_model(&mdp);
        let c = cluster_state_action(&model, &indices(6), &indices(4), 1, 1, 0, 100).unwrap();
        let loss = partition_loss(&model, &c, &indices(6), &uniform(6), &indices(4), &uniform(4)).unwrap();
        let all: Vec<Vec<f64>> = (0..6)
            .flat_map(|s| (0..4).map(move |a| (s, a)))
            .map(|(s, a)| model.joint_embedding(&[s as f64], &[a as f64]).unwrap())
            .collect();
        let dim = all[0].len();
        let mean: Vec<f64> = (0..dim).map(|d| all.iter().map(|v| v[d]).sum::<f64>() / 24.0).collect();
        let var: f64 =
            all.iter().map(|v| v.iter().zip(&mean).map(|(x, m)| (x - m) * (x - m)).sum::<f64>()).sum::<f64>() / 24.0;
        assert!((loss - var).abs() <= 1e-12 * var.max(1.0));
    }

    #[test]
    fn partition_loss_matches_double_sum() {
        let mdp = make_block_mdp(20, 4, 2, 2, 0.5, 8).unwrap();
        let model = exact_model(&mdp);
        let c = cluster_state_action(&model, &indices(20), &indices(4), 2, 2, 1, 100).unwrap();
        let xi: Vec<f64> = (1..=20).map(|v| v as f64).collect();
        let eta = [0.1, 0.4, 0.2, 0.3];
        let got = partition_loss(&model, &c, &indices(20), &xi, &indices(4), &eta).unwrap();
        let total: f64 = xi.iter().sum();
        let mut want = 0.0;
        for s in 0..20 {
            for (a, &wa) in eta.iter().enumerate() {
                let i = c.state_label(&model, &[s as f64]).unwrap();
                let j = c.action_label(&model, &[a as f64]).unwrap();
                let z = model.joint_from_embeddings(&c.states.centers[i], &c.actions.centers[j]).unwrap();
                let p = model.joint_embedding(&[s as f64], &[a as f64]).unwrap();
                want += xi[s] / total * wa * p.iter().zip(&z).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
            }
        }
        assert!((got - want).abs() <= 1e-12 * want.max(1e-12));
    }

    #[test]
    fn kmeans_beats_true_blocks_on_its_objective() {
        let mdp = make_block_mdp(10, 4, 2, 2, 0.5, 13).unwrap();
        let model = exact_model(&mdp);
        let est = cluster_state_action(&model, &indices(10), &indices(4), 2, 2, 3, 100).unwrap();
        let f: Vec<Vec<f64>> = (0..10).map(|s| model.state_embedding(&[s as f64]).unwrap()).collect();
        let g: Vec<Vec<f64>> = (0..4).map(|a| model.action_embedding(&[a as f64]).unwrap()).collect();
        let truth = Abstraction {
            states: ClusterModel::from_labels(&f, &[1.0; 10], mdp.state_block(), 2).unwrap(),
            actions: ClusterModel::from_labels(&g, &[1.0; 4], mdp.action_block(), 2).unwrap(),
        };
        let le = partition_loss(&model, &est, &indices(10), &uniform(10), &indices(4), &uniform(4)).unwrap();
        let lt = partition_loss(&model, &truth, &indices(10), &uniform(10), &indices(4), &uniform(4)).unwrap();
        assert!(le <= lt + 1e-9);
    }

    fn brute_misclassification(st: &Labeling, ac: &Labeling) -> f64 {
        let mass = |l: &Labeling, i: usize, k: Option<usize>| -> f64 {
            (0..l.truth.len())
                .filter(|&t| l.truth[t] == i && k.is_none_or(|k| l.estimate[t] == k))
                .map(|t| l.weights[t])
                .sum()
        };
        let mut best = f64::INFINITY;
        for s1 in assignment::permutations(st.blocks) {
            for s2 in assignment::permutations(ac.blocks) {
                let mut total = 0.0;
                for i in 0..st.blocks {
                    for j in 0..ac.blocks {
                        let cell = mass(st, i, None) * mass(ac, j, None);
                        let covered = mass(st, i, Some(s1[i])) * mass(ac, j, Some(s2[j]));
                        total += (cell - covered) / cell;
                    }
                }
                best = best.min(total);
            }
        }
        best
    }

    #[test]
    fn misclassification_examples() {
        let truth = [0, 0, 0, 1, 1, 1];
        let w = [0.1, 0.2, 0.2, 0.3, 0.1, 0.1];
        let at = [0, 1, 0, 1];
        let aw = [0.25; 4];
        let lab = |e: &'static [usize]| Labeling { truth: &truth, estimate: e, weights: &w, blocks: 2 };
        let act = |e: &'static [usize]| Labeling { truth: &at, estimate: e, weights: &aw, blocks: 2 };
        assert_eq!(misclassification(&lab(&[0, 0, 0, 1, 1, 1]), &act(&[0, 1, 0, 1])).unwrap(), 0.0);
        assert!(misclassification(&lab(&[1, 1, 1, 0, 0, 0]), &act(&[1, 0, 1, 0])).unwrap().abs() < 1e-15);
        // state 0 carries 0.1 of block 0's 0.5 mass
        let moved = misclassification(&lab(&[1, 0, 0, 1, 1, 1]), &act(&[0, 1, 0, 1])).unwrap();
        let brute = brute_misclassification(&lab(&[1, 0, 0, 1, 1, 1]), &act(&[0, 1, 0, 1]));
        assert!((moved - brute).abs() < 1e-14);
        assert!((moved - 2.0 * 0.2).abs() < 1e-14);
        let big = vec![0usize; 9];
        let many: Vec<usize> = (0..9).collect();
        let wide = Labeling { truth: &many, estimate: &big, weights: &[1.0; 9], blocks: 9 };
        assert!(misclassification(&wide, &act(&[0, 1, 0, 1])).is_err());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

        #[test]
        fn misclassification_matches_brute_force(
            st in proptest::collection::vec((0usize..3, 0usize..3, 0.05f64..1.0), 12),
            ac in proptest::collection::vec((0usize..2, 0usize..2, 0.05f64..1.0), 6),
        ) {
            let mut t: Vec<usize> = st.iter().map(|x| x.0).collect();
            t[..3].copy_from_slice(&[0, 1, 2]);
            let e: Vec<usize> = st.iter().map(|x| x.1).collect();
            let w: Vec<f64> = st.iter().map(|x| x.2).collect();
            let mut at: Vec<usize> = ac.iter().map(|x| x.0).collect();
            at[..2].copy_from_slice(&[0, 1]);
            let ae: Vec<usize> = ac.iter().map(|x| x.1).collect();
            let aw: Vec<f64> = ac.iter().map(|x| x.2).collect();
            let s = Labeling { truth: &t, estimate: &e, weights: &w, blocks: 3 };
            let a = Labeling { truth: &at, estimate: &ae, weights: &aw, blocks: 2 };
            let m = misclassification(&s, &a).unwrap();
            proptest::prop_assert!((m - brute_misclassification(&s, &a)).abs() <= 1e-12);
            proptest::prop_assert!((0.0..=6.0).contains(&m));
        }
    }

    fn one_hot_labels(v: &[f64]) -> Result<usize> {
        Ok(v[0] as usize)
    }

    #[test]
    fn deterministic_chain_gives_one_hot_rows() {
        let t = Tensor3::from_fn([3, 2, 3], |s, a, n| if n == (s + a + 1) % 3 { 1.0 } else { 0.0 });
        let mdp = TabularMDP::unstructured(t).unwrap();
        let data = sample_trajectory(&mdp, &BehaviorPolicy::Fixed(Measure::uniform_categorical(2)), 500, 3).unwrap();
        let q = fit_discrete(&data, &one_hot_labels, &one_hot_labels, 3, 2).unwrap();
        assert!(q.fallback.is_empty());
        for i in 0..3 {
            for j in 0..2 {
                assert_eq!(q.row(i, j).iter().filter(|&&v| v == 1.0).count(), 1);
            }
        }
        let single = fit_discrete(&data, &|_| Ok(0), &|_| Ok(0), 1, 1).unwrap();
        assert_eq!(single.q_hat.get(0, 0, 0), 1.0);
    }

    #[test]
    fn unobserved_pairs_fall_back_to_uniform() {
        let mdp = make_block_mdp(4, 2, 2, 2, 1.0, 0).unwrap();
        let data = sample_trajectory(&mdp, &BehaviorPolicy::Fixed(Measure::Categorical(vec![1.0, 0.0])), 200, 0);
        // a zero-probability action is never drawn, so block 1 stays empty
        let q = fit_discrete(&data.unwrap(), &|s| Ok(s[0] as usize % 2), &|a| Ok(a[0] as usize), 2, 2).unwrap();
        assert_eq!(q.fallback, vec![(0, 1), (1, 1)]);
        assert_eq!(q.row(0, 1), vec![0.5, 0.5]);
    }

    fn block_q_star(mdp: &TabularMDP) -> Tensor3 {
        let (n_s, n_a) = (mdp.n_s(), mdp.n_a());
        Tensor3::from_fn([n_s, n_a, n_s], |i, j, k| {
            let row = mdp.block_kernel(i, j).unwrap();
            row.iter().zip(mdp.state_block()).filter(|(_, &b)| b == k).map(|(p, _)| p).sum()
        })
    }

    #[test]
    fn fitted_kernel_is_consistent() {
        let mdp = make_block_mdp(10, 6, 3, 2, 1.0, 12).unwrap();
        let data =
            sample_trajectory(&mdp, &BehaviorPolicy::Fixed(Measure::uniform_categorical(6)), 100_000, 5).unwrap();
        let sb = mdp.state_block().to_vec();
        let ab = mdp.action_block().to_vec();
        let q = fit_discrete(&data, &|s| Ok(sb[s[0] as usize]), &|a| Ok(ab[a[0] as usize]), 3, 2).unwrap();
        let err = q.q_hat.sub(&block_q_star(&mdp)).unwrap().data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err <= 0.02, "max error {err}");
        for i in 0..3 {
            for j in 0..2 {
                assert!((q.row(i, j).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn exact_fit_with_true_blocks_closes_the_gap() {
        let mdp = make_block_mdp(9, 4, 3, 2, 0.7, 2).unwrap();
        let xi: Vec<f64> = (1..=9).map(|v| v as f64 / 45.0).collect();
        let eta = [0.1, 0.2, 0.3, 0.4];
        let q = exact_discrete(&mdp, mdp.state_block(), mdp.action_block(), &xi, &eta, 3, 2).unwrap();
        assert!(q.q_hat.sub(&block_q_star(&mdp)).unwrap().frobenius() <= 1e-12);
        let prob = GapProblem {
            mdp: &mdp,
            state_labels: mdp.state_block(),
            action_labels: mdp.action_block(),
            q_hat: &q,
            xi: &xi,
            eta: &eta,
        };
        assert!(policy_eval_gap(&prob, 6, 16, 0).unwrap() <= 1e-12);
    }

    #[test]
    fn estimated_kernel_gap_is_bounded_by_its_error() {
        let mdp = make_block_mdp(10, 6, 3, 2, 1.0, 12).unwrap();
        let data = sample_trajectory(&mdp, &BehaviorPolicy::Fixed(Measure::uniform_categorical(6)), 20_000, 6).unwrap();
        let sb = mdp.state_block().to_vec();
        let ab = mdp.action_block().to_vec();
        let q = fit_discrete(&data, &|s| Ok(sb[s[0] as usize]), &|a| Ok(ab[a[0] as usize]), 3, 2).unwrap();
        let qs = block_q_star(&mdp);
        let mut l1 = 0.0f64;
        for i in 0..3 {
            for j in 0..2 {
                l1 = l1.max((0..3).map(|k| (q.q_hat.get(i, j, k) - qs.get(i, j, k)).abs()).sum());
            }
        }
        let h = 5;
        let prob = GapProblem {
            mdp: &mdp,
            state_labels: &sb,
            action_labels: &ab,
            q_hat: &q,
            xi: &uniform(10),
            eta: &uniform(6),
        };
        let gap = policy_eval_gap(&prob, h, 32, 1).unwrap();
        assert!(gap > 0.0 && gap <= 2.0 * l1 * (h * h) as f64, "gap {gap}, l1 {l1}");
    }

    #[test]
    fn one_step_gap_vanishes() {
        let mdp = make_block_mdp(8, 4, 2, 2, 0.5, 1).unwrap();
        let wrong = [1, 1, 0, 1, 0, 0, 1, 0];
        let xi = uniform(8);
        let q = exact_discrete(&mdp, &wrong, mdp.action_block(), &xi, &uniform(4), 2, 2).unwrap();
        let prob = GapProblem {
            mdp: &mdp,
            state_labels: &wrong,
            action_labels: mdp.action_block(),
            q_hat: &q,
            xi: &xi,
            eta: &uniform(4),
        };
        assert!(policy_eval_gap(&prob, 1, 16, 0).unwrap() <= 1e-15);
        assert!(policy_eval_gap(&prob, 3, 16, 0).unwrap() > 0.0);
    }

    #[test]
    fn swapped_states_respect_the_horizon_bound() {
        for seed in 0..6 {
            let mdp = make_block_mdp(12, 4, 3, 2, 0.5, seed).unwrap();
            let mut labels = mdp.state_block().to_vec();
            labels.swap(0, 1);
            let xi: Vec<f64> = (0..12).map(|s| 1.0 + (s % 4) as f64).collect();
            let total: f64 = xi.iter().sum();
            let xi: Vec<f64> = xi.iter().map(|w| w / total).collect();
            let eta = uniform(4);
            let m = misclassification(
                &Labeling { truth: mdp.state_block(), estimate: &labels, weights: &xi, blocks: 3 },
                &Labeling { truth: mdp.action_block(), estimate: mdp.action_block(), weights: &eta, blocks: 2 },
            )
            .unwrap();
            assert!(m > 0.0);
            let q = exact_discrete(&mdp, &labels, mdp.action_block(), &xi, &eta, 3, 2).unwrap();
            let (lo, hi) = block_mass_bounds(&mdp, &xi, &eta).unwrap();
            for h in [1usize, 2, 4, 8] {
                let prob = GapProblem {
                    mdp: &mdp,
                    state_labels: &labels,
                    action_labels: mdp.action_block(),
                    q_hat: &q,
                    xi: &xi,
                    eta: &eta,
                };
                let gap = policy_eval_gap(&prob, h, 16, seed).unwrap();
                assert!(gap <= 4.0 * hi / lo * (h * h) as f64 * m, "seed {seed}, H {h}: gap {gap}, M {m}");
            }
        }
    }

    #[test]
    fn gap_rejects_bad_inputs() {
        let mdp = make_block_mdp(4, 2, 2, 2, 1.0, 0).unwrap();
        let q = exact_discrete(&mdp, mdp.state_block(), mdp.action_block(), &uniform(4), &uniform(2), 2, 2).unwrap();
        let prob = GapProblem {
            mdp: &mdp,
            state_labels: mdp.state_block(),
            action_labels: mdp.action_block(),
            q_hat: &q,
            xi: &uniform(4),
            eta: &uniform(2),
        };
        assert!(policy_eval_gap(&prob, 0, 4, 0).is_err());
        let bad = GapProblem { xi: &[0.5, 0.5], ..prob };
        assert!(policy_eval_gap(&bad, 2, 4, 0).is_err());
    }
}
