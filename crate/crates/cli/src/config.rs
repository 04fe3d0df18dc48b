//! Experiment configuration: a TOML file with one table per concern.
//! Every key is optional; missing keys take the documented defaults.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Seeds used when neither the command line, the config file nor
/// `TENSOR_MDP_SEED` names any.
pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
pub const SEED_ENV: &str = "TENSOR_MDP_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Sde,
    Tabular,
}

/// Target action measure `η`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EtaSpec {
    /// `η = π̄`: standard normal for the SDE, uniform for tabular MDPs.
    Behavior,
    /// Uniform over actions; tabular environments only.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvironmentConfig {
    pub kind: EnvKind,
    pub tau: f64,
    pub substeps: usize,
    pub well_amplitude: f64,
    pub well_frequency: f64,
    pub confinement: f64,
    pub action_bound: f64,
    pub safety_bound: f64,
    pub burn_in: usize,
    pub n_states: usize,
    pub n_actions: usize,
    pub state_blocks: usize,
    pub action_blocks: usize,
    pub concentration: f64,
    pub mdp_seed: u64,
}

impl Default for EnvironmentConfig {
    fn default() -> Self {
        Self {
            kind: EnvKind::Sde,
            tau: 0.1,
            substeps: 10,
            well_amplitude: 1.0,
            well_frequency: std::f64::consts::PI,
            confinement: 1.5,
            action_bound: 2.0,
            safety_bound: 6.0,
            burn_in: 100,
            n_states: 40,
            n_actions: 20,
            state_blocks: 4,
            action_blocks: 4,
            concentration: 0.5,
            mdp_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub bandwidth: f64,
    pub n_state: usize,
    pub n_action: usize,
    /// State features use this seed, action features `seed + 1`.
    pub seed: u64,
    pub orthogonalize_state: bool,
    pub orthogonalize_action: bool,
    /// Draws used to whiten the random features.
    pub whitening_samples: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            bandwidth: 0.5,
            n_state: 100,
            n_action: 50,
            seed: 0,
            orthogonalize_state: false,
            orthogonalize_action: true,
            whitening_samples: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimationConfig {
    pub ranks: [usize; 3],
    pub ridge: f64,
    pub max_condition: f64,
    pub hooi_iters: usize,
    pub hooi_tol: f64,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self { ranks: [3, 3, 3], ridge: 1e-8, max_condition: 1e14, hooi_iters: 20, hooi_tol: 1e-12 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub sample_sizes: Vec<usize>,
    pub seeds: Option<Vec<u64>>,
    /// Rank triples for `sweep`; empty means `estimation.ranks` only.
    pub sweep_ranks: Vec<[usize; 3]>,
    pub eta: EtaSpec,
    /// Wall-clock times make outputs irreproducible, so they are opt-in.
    pub record_timings: bool,
    pub out: String,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            sample_sizes: vec![10_000, 100_000, 1_000_000],
            seeds: None,
            sweep_ranks: Vec::new(),
            eta: EtaSpec::Behavior,
            record_timings: false,
            out: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusteringConfig {
    /// `[n_s, n_a]` pairs, one output set per pair.
    pub counts: Vec<[usize; 2]>,
    /// Leading trajectory states clustered.
    pub max_states: usize,
    /// Fresh `η` draws clustered.
    pub action_samples: usize,
    pub max_iters: usize,
    /// Samples of each kind entering the partition loss.
    pub loss_states: usize,
    pub loss_actions: usize,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self {
            counts: vec![[4, 4], [4, 16], [8, 16]],
            max_states: 20_000,
            action_samples: 5_000,
            max_iters: 300,
            loss_states: 1_000,
            loss_actions: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceConfig {
    pub path: String,
    pub samples: usize,
    pub seed: u64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self { path: "data/sde_reference.bin".into(), samples: 1_000_000, seed: 20_240_614 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub environment: EnvironmentConfig,
    pub features: FeatureConfig,
    pub estimation: EstimationConfig,
    pub experiment: ExperimentSection,
    pub clustering: ClusteringConfig,
    pub reference: ReferenceConfig,
    /// Directory of the file the configuration came from; relative
    /// reference paths resolve against it.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::from_toml(&text).with_context(|| format!("in {}", path.display()))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    pub fn reference_path(&self) -> PathBuf {
        match &self.base_dir {
            Some(dir) => dir.join(&self.reference.path),
            None => PathBuf::from(&self.reference.path),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Fill `experiment.seeds`: `--seed` wins, then the file, then
    /// `TENSOR_MDP_SEED`, then [`DEFAULT_SEEDS`].
    pub fn resolve_seeds(&mut self, flag: Option<u64>, env: Option<&str>) -> Result<()> {
        if let Some(s) = flag {
            self.experiment.seeds = Some(vec![s]);
        } else if self.experiment.seeds.is_none() {
            let seeds = match env {
                Some(v) => vec![v.trim().parse().with_context(|| format!("{SEED_ENV}={v:?} is not a seed"))?],
                None => DEFAULT_SEEDS.to_vec(),
            };
            self.experiment.seeds = Some(seeds);
        }
        self.validate()
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.experiment.seeds.clone().unwrap_or_else(|| DEFAULT_SEEDS.to_vec())
    }

    pub fn sweep_ranks(&self) -> Vec<[usize; 3]> {
        if self.experiment.sweep_ranks.is_empty() {
            vec![self.estimation.ranks]
        } else {
            self.experiment.sweep_ranks.clone()
        }
    }

    /// `(d_S, d_A)`.
    pub fn feature_dims(&self) -> (usize, usize) {
        match self.environment.kind {
            EnvKind::Sde => (self.features.n_state, self.features.n_action),
            EnvKind::Tabular => (self.environment.n_states, self.environment.n_actions),
        }
    }

    /// First 16 hex digits of the SHA-256 of the configuration with the
    /// output directory cleared.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.experiment.out.clear();
        hex16(c.to_toml().as_bytes())
    }

    /// Hash of everything that determines the feature maps.
    pub fn feature_fingerprint(&self) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            environment: &'a EnvironmentConfig,
            features: &'a FeatureConfig,
        }
        let text =
            toml::to_string(&Key { environment: &self.environment, features: &self.features }).expect("serializes");
        hex16(text.as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.environment;
        let f = &self.features;
        if !(e.tau > 0.0) || e.substeps == 0 {
            bail!("environment.tau must be positive and environment.substeps at least 1");
        }
        if e.kind == EnvKind::Tabular {
            if e.n_states == 0 || e.n_actions == 0 || e.state_blocks == 0 || e.action_blocks == 0 {
                bail!("tabular state, action and block counts must be positive");
            }
            if e.state_blocks > e.n_states || e.action_blocks > e.n_actions {
                bail!("cannot have more blocks than states or actions");
            }
            if !(e.concentration > 0.0) {
                bail!("environment.concentration must be positive");
            }
        } else {
            if !(f.bandwidth > 0.0) || f.n_state == 0 || f.n_action == 0 {
                bail!("features need a positive bandwidth and feature counts");
            }
            if f.whitening_samples < f.n_state.max(f.n_action) {
                bail!("features.whitening_samples must be at least the feature count");
            }
            if self.experiment.eta == EtaSpec::Uniform {
                bail!(
                    "eta = \"uniform\" has no density outside a bounded box; the SDE supports eta = \"behavior\" only"
                );
            }
        }
        let (ds, da) = self.feature_dims();
        let check = |r: [usize; 3], what: &str| -> Result<()> {
            if r.contains(&0) || r[0] > ds || r[1] > da || r[2] > ds {
                bail!("{what} {r:?} must be positive and at most the feature dims ({ds}, {da}, {ds})");
            }
            Ok(())
        };
        check(self.estimation.ranks, "estimation.ranks")?;
        for &r in &self.experiment.sweep_ranks {
            check(r, "experiment.sweep_ranks entry")?;
        }
        if self.experiment.sample_sizes.is_empty() || self.experiment.sample_sizes.contains(&0) {
            bail!("experiment.sample_sizes must be a nonempty list of positive sizes");
        }
        if self.experiment.seeds.as_ref().is_some_and(Vec::is_empty) {
            bail!("experiment.seeds must not be empty");
        }
        let c = &self.clustering;
        if c.counts.is_empty() || c.counts.iter().any(|p| p.contains(&0)) {
            bail!("clustering.counts must list positive [n_s, n_a] pairs");
        }
        if c.max_states == 0 || c.action_samples == 0 || c.loss_states == 0 || c.loss_actions == 0 {
            bail!("clustering sample counts must be positive");
        }
        if self.estimation.ridge < 0.0 || self.estimation.hooi_iters == 0 {
            bail!("estimation.ridge must be nonnegative and estimation.hooi_iters positive");
        }
        if self.reference.samples == 0 {
            bail!("reference.samples must be positive");
        }
        Ok(())
    }
}

pub fn hex16(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().take(8).map(|b| format!("{b:02x}")).collect()
}
