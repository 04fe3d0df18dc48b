//! Turns a configuration into a concrete environment, measures, feature
//! maps and ground truth.

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tensor_mdp::features::{make_rff, orthogonalize, Features, OneHot};
use tensor_mdp::io::{load_reference, ReferenceModel};
use tensor_mdp::mdp::{exact_ground_truth, make_block_mdp, sample_trajectory, SdeEnv, TabularMDP, TransitionDataset};
use tensor_mdp::measure::{BehaviorPolicy, Measure};
use tensor_mdp::Tensor3;

use crate::config::{EnvKind, EtaSpec, ExperimentConfig};

/// Seed offset of the trajectory that whitens the state features.
const WHITENING_SEED_OFFSET: u64 = 0x5eed;

#[derive(Debug, Clone)]
pub enum Env {
    Tabular(TabularMDP),
    Sde(SdeEnv),
}

#[derive(Debug, Clone)]
pub struct Problem {
    pub env: Env,
    pub behavior: BehaviorPolicy,
    pub eta: Measure,
    pub phi: Features,
    pub psi: Features,
}

impl Problem {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let e = &cfg.environment;
        match e.kind {
            EnvKind::Tabular => {
                let mdp = make_block_mdp(
                    e.n_states,
                    e.n_actions,
                    e.state_blocks,
                    e.action_blocks,
                    e.concentration,
                    e.mdp_seed,
                )?;
                let eta = Measure::uniform_categorical(e.n_actions);
                let phi = Features::OneHot(OneHot::new(e.n_states));
                let psi = if cfg.features.orthogonalize_action {
                    OneHot::orthonormal_under(&vec![1.0 / e.n_actions as f64; e.n_actions])?
                } else {
                    OneHot::new(e.n_actions)
                };
                Ok(Self {
                    env: Env::Tabular(mdp),
                    behavior: BehaviorPolicy::Fixed(eta.clone()),
                    eta,
                    phi,
                    psi: Features::OneHot(psi),
                })
            }
            EnvKind::Sde => {
                let env = sde_env(cfg);
                env.validate()?;
                let eta = match cfg.experiment.eta {
                    EtaSpec::Behavior => Measure::StandardNormal { dim: 2 },
                    EtaSpec::Uniform => bail!("the SDE supports eta = \"behavior\" only"),
                };
                let behavior = BehaviorPolicy::Fixed(Measure::StandardNormal { dim: 2 });
                let f = &cfg.features;
                let mut phi = make_rff(2, f.n_state, f.bandwidth, f.seed)?;
                let mut psi = make_rff(2, f.n_action, f.bandwidth, f.seed.wrapping_add(1))?;
                if f.orthogonalize_state {
                    let walk = sample_trajectory(&env, &behavior, f.whitening_samples, f.seed ^ WHITENING_SEED_OFFSET)?;
                    let states: Vec<Vec<f64>> = walk.states().chunks(2).map(<[f64]>::to_vec).collect();
                    phi = orthogonalize(&phi, &states).context("whitening state features")?;
                }
                if f.orthogonalize_action {
                    let mut rng = ChaCha8Rng::seed_from_u64(f.seed ^ WHITENING_SEED_OFFSET);
                    let draws: Vec<Vec<f64>> = (0..f.whitening_samples).map(|_| eta.sample(&mut rng)).collect();
                    psi = orthogonalize(&psi, &draws).context("whitening action features")?;
                }
                Ok(Self { env: Env::Sde(env), behavior, eta, phi: phi.into(), psi: psi.into() })
            }
        }
    }

    pub fn simulate(&self, n: usize, seed: u64) -> Result<TransitionDataset> {
        Ok(match &self.env {
            Env::Tabular(m) => sample_trajectory(m, &self.behavior, n, seed)?,
            Env::Sde(s) => sample_trajectory(s, &self.behavior, n, seed)?,
        })
    }

    pub fn eta_density(&self, a: &[f64]) -> f64 {
        self.eta.density(a)
    }

    pub fn tabular(&self) -> Option<&TabularMDP> {
        match &self.env {
            Env::Tabular(m) => Some(m),
            Env::Sde(_) => None,
        }
    }

    /// Ground-truth `P`: exact for tabular MDPs, the frozen reference for
    /// the SDE.
    pub fn ground_truth(&self, cfg: &ExperimentConfig) -> Result<Tensor3> {
        match &self.env {
            Env::Tabular(m) => {
                let xi = vec![1.0 / m.n_states() as f64; m.n_states()];
                let eta = match &self.eta {
                    Measure::Categorical(p) => p.clone(),
                    _ => unreachable!("tabular η is categorical"),
                };
                Ok(exact_ground_truth(m, &self.phi, &self.psi, &xi, &eta)?.p)
            }
            Env::Sde(_) => Ok(self.load_reference(cfg)?.p),
        }
    }

    /// The SDE reference, checked against this problem's feature maps.
    pub fn load_reference(&self, cfg: &ExperimentConfig) -> Result<ReferenceModel> {
        let path = cfg.reference_path();
        let path = path.as_path();
        if !path.exists() {
            bail!(
                "no SDE reference at {}; build it with `tensor-mdp make-reference --config <this config>` \
                 (about a minute at the default 10^6 samples)",
                path.display()
            );
        }
        let r = load_reference(path).with_context(|| format!("reading reference {}", path.display()))?;
        if r.phi != self.phi || r.psi != self.psi {
            bail!(
                "reference {} was built with different environment or feature settings \
                 (fingerprint {:?}, this config {}); rebuild it with `make-reference`",
                path.display(),
                r.meta("feature_fingerprint").unwrap_or("none"),
                cfg.feature_fingerprint()
            );
        }
        Ok(r)
    }
}

pub fn sde_env(cfg: &ExperimentConfig) -> SdeEnv {
    let e = &cfg.environment;
    SdeEnv {
        tau: e.tau,
        substeps: e.substeps,
        well_amplitude: e.well_amplitude,
        well_frequency: e.well_frequency,
        confinement: e.confinement,
        action_bound: e.action_bound,
        safety_bound: e.safety_bound,
        burn_in: e.burn_in,
        ..SdeEnv::default()
    }
}
