//! The subcommands. Each writes into `<out>/<config hash>/` and leaves a
//! `manifest_<command>.toml` next to its outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tensor_mdp::abstraction::{
    cluster_state_action, fit_discrete_clusters, misclassification, partition_loss, Abstraction, Labeling,
};
use tensor_mdp::baselines::{topr_from_moments, vanilla_estimate};
use tensor_mdp::decomposition::HooiOptions;
use tensor_mdp::embedding::{
    estimate_transition, sample_moments, EmbeddingModel, EstimateOptions, MomentOptions, SampleMoments,
};
use tensor_mdp::io::{load_model, save_model, save_reference, ReferenceModel};
use tensor_mdp::mdp::TransitionDataset;
use tensor_mdp::{SpectralNormOptions, Tensor3};

use crate::config::{EnvKind, ExperimentConfig};
use crate::metrics::{self, MetricsRow, SeedField};
use crate::problem::Problem;
use crate::svg;

pub const GIT_DESCRIBE: &str = env!("TENSOR_MDP_GIT_DESCRIBE");

/// Seed offset for the fresh `η` draws that are clustered.
const ACTION_DRAW_OFFSET: u64 = 0xac71;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub command: String,
    pub config_hash: String,
    pub git_describe: String,
    pub version: String,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest: ManifestHeader,
    pub config: ExperimentConfig,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).context("invalid manifest")
    }
}

/// A resolved configuration plus run-wide settings.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub cfg: ExperimentConfig,
    pub jobs: usize,
}

impl RunContext {
    pub fn out_dir(&self) -> PathBuf {
        Path::new(&self.cfg.experiment.out).join(self.cfg.hash())
    }

    fn prepare(&self) -> Result<PathBuf> {
        let dir = self.out_dir();
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    fn seed(&self) -> u64 {
        self.cfg.seeds()[0]
    }

    fn write_manifest(&self, command: &str, outputs: &[PathBuf]) -> Result<PathBuf> {
        let m = Manifest {
            manifest: ManifestHeader {
                command: command.into(),
                config_hash: self.cfg.hash(),
                git_describe: GIT_DESCRIBE.into(),
                version: env!("CARGO_PKG_VERSION").into(),
                outputs: outputs.iter().map(|p| file_name(p)).collect(),
            },
            config: self.cfg.clone(),
        };
        let path = self.out_dir().join(format!("manifest_{}.toml", command.replace('-', "_")));
        write(&path, toml::to_string(&m).context("serializing manifest")?.as_bytes())?;
        Ok(path)
    }

    fn default_dataset(&self) -> PathBuf {
        self.out_dir().join(format!("dataset_seed{}.csv", self.seed()))
    }

    fn estimate_options(&self) -> EstimateOptions {
        let e = &self.cfg.estimation;
        EstimateOptions {
            ridge_scale: e.ridge,
            max_condition: e.max_condition,
            hooi: HooiOptions { max_iters: e.hooi_iters, tol: e.hooi_tol },
        }
    }
}

fn file_name(p: &Path) -> String {
    p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn load_dataset(path: &Path, problem: &Problem) -> Result<TransitionDataset> {
    if !path.exists() {
        bail!("no dataset at {}; run `tensor-mdp simulate` with the same config first", path.display());
    }
    let data = TransitionDataset::load(path).with_context(|| format!("reading {}", path.display()))?;
    let want = match problem.tabular() {
        Some(_) => (1, 1),
        None => (2, 2),
    };
    if (data.state_dim(), data.action_dim()) != want {
        bail!(
            "dataset {} has dims ({}, {}), the environment needs {want:?}",
            path.display(),
            data.state_dim(),
            data.action_dim()
        );
    }
    Ok(data)
}

/// `simulate`: one trajectory per seed, as long as the largest sample size.
pub fn simulate(ctx: &RunContext) -> Result<Vec<PathBuf>> {
    let dir = ctx.prepare()?;
    let problem = Problem::new(&ctx.cfg)?;
    let n = *ctx.cfg.experiment.sample_sizes.iter().max().expect("validated nonempty");
    let mut outputs = Vec::new();
    for seed in ctx.cfg.seeds() {
        let data = problem.simulate(n, seed)?;
        if data.clamped() > 0 {
            eprintln!("warning: seed {seed}: {} of {n} steps hit the safety box", data.clamped());
        }
        let path = dir.join(format!("dataset_seed{seed}.csv"));
        data.save(&path).with_context(|| format!("writing {}", path.display()))?;
        outputs.push(path);
    }
    outputs.push(ctx.write_manifest("simulate", &outputs)?);
    Ok(outputs)
}

fn elapsed_ms(t: Instant, record: bool) -> f64 {
    if record {
        t.elapsed().as_secs_f64() * 1e3
    } else {
        0.0
    }
}

/// Per-method estimates from shared moments.
struct MethodRun {
    method: &'static str,
    estimate: Result<Tensor3>,
    wall_ms: f64,
}

fn run_methods(
    ctx: &RunContext,
    problem: &Problem,
    m: &SampleMoments,
    ranks: [usize; 3],
    moments_ms: f64,
) -> (Option<EmbeddingModel>, Vec<MethodRun>) {
    let record = ctx.cfg.experiment.record_timings;
    let e = &ctx.cfg.estimation;
    let t = Instant::now();
    let model = estimate_transition(&m.f_bar, &m.state_cov, &problem.phi, &problem.psi, ranks, ctx.estimate_options());
    let tensor_ms = elapsed_ms(t, record);
    let t = Instant::now();
    let vanilla = vanilla_estimate(&m.f_bar, &m.state_cov, e.ridge, e.max_condition);
    let vanilla_ms = elapsed_ms(t, record);
    let t = Instant::now();
    let topr = topr_from_moments(m, ranks, e.ridge, e.max_condition);
    let topr_ms = elapsed_ms(t, record);
    let (model, tensor) = match model {
        Ok(model) => {
            let p = model.p_hat.clone();
            (Some(model), Ok(p))
        }
        Err(err) => (None, Err(err.into())),
    };
    let runs = vec![
        MethodRun { method: metrics::METHODS[0], estimate: tensor, wall_ms: moments_ms + tensor_ms },
        MethodRun {
            method: metrics::METHODS[1],
            estimate: vanilla.map_err(Into::into),
            wall_ms: moments_ms + vanilla_ms,
        },
        MethodRun { method: metrics::METHODS[2], estimate: topr.map_err(Into::into), wall_ms: moments_ms + topr_ms },
    ];
    (model, runs)
}

fn error_norms(estimate: &Tensor3, truth: &Tensor3) -> Result<(f64, f64)> {
    let d = estimate.sub(truth)?;
    let opts = SpectralNormOptions { restarts: 8, ..SpectralNormOptions::default() };
    Ok((d.spectral_norm_approx(opts), d.frobenius()))
}

fn moments(ctx: &RunContext, problem: &Problem, data: &TransitionDataset) -> Result<(SampleMoments, f64)> {
    let t = Instant::now();
    let m = sample_moments(data, &problem.phi, &problem.psi, &|a| problem.eta_density(a), MomentOptions::default())?;
    Ok((m, elapsed_ms(t, ctx.cfg.experiment.record_timings)))
}

/// `estimate`: all three methods on one dataset (optionally its first `n`
/// rows); writes the tensor model and one metrics row per method.
pub fn estimate(ctx: &RunContext, dataset: Option<&Path>, n: Option<usize>) -> Result<Vec<PathBuf>> {
    let problem = Problem::new(&ctx.cfg)?;
    let truth = problem.ground_truth(&ctx.cfg)?;
    let path = dataset.map_or_else(|| ctx.default_dataset(), Path::to_path_buf);
    let mut data = load_dataset(&path, &problem)?;
    if let Some(n) = n {
        if n == 0 || n > data.len() {
            bail!("--n {n} must be between 1 and the dataset length {}", data.len());
        }
        data = data.prefix(n);
    }
    let dir = ctx.prepare()?;
    let seed = ctx.seed();
    let ranks = ctx.cfg.estimation.ranks;
    let (m, moments_ms) = moments(ctx, &problem, &data)?;
    let (model, runs) = run_methods(ctx, &problem, &m, ranks, moments_ms);
    let mut rows = Vec::new();
    for run in runs {
        let est = run.estimate.with_context(|| format!("{} estimate failed", run.method))?;
        let (err_sigma, err_fro) = error_norms(&est, &truth)?;
        rows.push(MetricsRow {
            n: data.len(),
            method: run.method.into(),
            ranks,
            seed: SeedField::Run(seed),
            err_sigma,
            err_fro,
            wall_ms: run.wall_ms,
        });
    }
    let model = model.expect("tensor estimate succeeded above");
    let model_path = dir.join(format!("model_seed{seed}_n{}.bin", data.len()));
    save_model(&model, &model_path)?;
    let metrics_path = dir.join(format!("metrics_seed{seed}_n{}.csv", data.len()));
    write(&metrics_path, metrics::to_csv(&rows).as_bytes())?;
    let mut outputs = vec![model_path, metrics_path];
    outputs.push(ctx.write_manifest("estimate", &outputs)?);
    Ok(outputs)
}

type EmbedFn<'a> = &'a dyn Fn(&EmbeddingModel, &[f64]) -> Result<Vec<f64>>;

fn plot_coords(model: &EmbeddingModel, raw: &[f64], embed: EmbedFn) -> Result<(f64, f64)> {
    if raw.len() == 2 {
        return Ok((raw[0], raw[1]));
    }
    let e = embed(model, raw)?;
    Ok((e.first().copied().unwrap_or(0.0), e.get(1).copied().unwrap_or(0.0)))
}

fn assignments_csv(labels: &[usize]) -> String {
    let mut out = String::from("point_index,cluster_id\n");
    for (i, l) in labels.iter().enumerate() {
        writeln!(out, "{i},{l}").expect("string write");
    }
    out
}

pub const CLUSTER_SUMMARY_HEADER: &str =
    "n_s,n_a,state_inertia,action_inertia,partition_loss,misclassification,fallback_pairs";

/// `cluster`: k-means on the learned embeddings for every configured
/// `(n_s, n_a)`; writes assignments, scatter plots, the fitted block
/// model and a summary.
pub fn cluster(ctx: &RunContext, model_path: Option<&Path>, dataset: Option<&Path>) -> Result<Vec<PathBuf>> {
    let problem = Problem::new(&ctx.cfg)?;
    let data_path = dataset.map_or_else(|| ctx.default_dataset(), Path::to_path_buf);
    let data = load_dataset(&data_path, &problem)?;
    let seed = ctx.seed();
    let model_path = model_path
        .map_or_else(|| ctx.out_dir().join(format!("model_seed{seed}_n{}.bin", data.len())), Path::to_path_buf);
    if !model_path.exists() {
        bail!("no model at {}; run `tensor-mdp estimate` first", model_path.display());
    }
    let model = load_model(&model_path).with_context(|| format!("reading {}", model_path.display()))?;
    let dir = ctx.prepare()?;
    let c = &ctx.cfg.clustering;
    let sd = data.state_dim();
    let states: Vec<Vec<f64>> = data.states().chunks(sd).take(c.max_states).map(<[f64]>::to_vec).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ACTION_DRAW_OFFSET);
    let actions: Vec<Vec<f64>> = (0..c.action_samples).map(|_| problem.eta.sample(&mut rng)).collect();
    let loss_states = &states[..c.loss_states.min(states.len())];
    let loss_actions = &actions[..c.loss_actions.min(actions.len())];

    let state_pts: Vec<(f64, f64)> =
        states.iter().map(|s| plot_coords(&model, s, &|m, x| Ok(m.state_embedding(x)?))).collect::<Result<_>>()?;
    let action_pts: Vec<(f64, f64)> =
        actions.iter().map(|a| plot_coords(&model, a, &|m, x| Ok(m.action_embedding(x)?))).collect::<Result<_>>()?;

    let mut outputs = Vec::new();
    let mut summary = format!("{CLUSTER_SUMMARY_HEADER}\n");
    for &[n_s, n_a] in &c.counts {
        let clusters = cluster_state_action(&model, &states, &actions, n_s, n_a, seed, c.max_iters)
            .with_context(|| format!("clustering into {n_s} x {n_a}"))?;
        let tag = format!("clusters_{n_s}x{n_a}");
        for (kind, labels, pts) in [
            ("states", &clusters.states.assignment, &state_pts),
            ("actions", &clusters.actions.assignment, &action_pts),
        ] {
            let csv = dir.join(format!("{tag}_{kind}.csv"));
            write(&csv, assignments_csv(labels).as_bytes())?;
            let (xl, yl) = if sd == 2 { ("x1", "x2") } else { ("embedding 1", "embedding 2") };
            let title = format!("{kind}: {} clusters", if kind == "states" { n_s } else { n_a });
            let plot = dir.join(format!("{tag}_{kind}.svg"));
            write(&plot, svg::scatter(&title, xl, yl, pts, labels).as_bytes())?;
            outputs.extend([csv, plot]);
        }
        let w_s = vec![1.0; loss_states.len()];
        let w_a = vec![1.0; loss_actions.len()];
        let loss = partition_loss(&model, &clusters, loss_states, &w_s, loss_actions, &w_a)?;
        let mis = block_misclassification(&problem, &clusters, &states, &actions)?;
        let discrete = fit_discrete_clusters(&data, &model, &clusters)?;
        let q_path = dir.join(format!("{tag}_q_hat.csv"));
        let mut q = String::from("i,j,k,q\n");
        for i in 0..n_s {
            for j in 0..n_a {
                for k in 0..n_s {
                    writeln!(q, "{i},{j},{k},{:.16e}", discrete.q_hat.get(i, j, k)).expect("string write");
                }
            }
        }
        write(&q_path, q.as_bytes())?;
        outputs.push(q_path);
        writeln!(
            summary,
            "{n_s},{n_a},{:.16e},{:.16e},{:.16e},{},{}",
            clusters.states.inertia,
            clusters.actions.inertia,
            loss,
            mis.map_or_else(|| "NA".to_string(), |m| format!("{m:.16e}")),
            discrete.fallback.len()
        )
        .expect("string write");
        match mis {
            Some(m) => println!("{n_s} x {n_a} clusters: partition loss {loss:.6e}, misclassification {m:.6e}"),
            None => println!("{n_s} x {n_a} clusters: partition loss {loss:.6e}"),
        }
    }
    let summary_path = dir.join("cluster_summary.csv");
    write(&summary_path, summary.as_bytes())?;
    outputs.push(summary_path);
    outputs.push(ctx.write_manifest("cluster", &outputs)?);
    Ok(outputs)
}

/// Misclassification against the true blocks of a tabular MDP whose block
/// counts match the requested cluster counts.
fn block_misclassification(
    problem: &Problem,
    clusters: &Abstraction,
    states: &[Vec<f64>],
    actions: &[Vec<f64>],
) -> Result<Option<f64>> {
    let Some(mdp) = problem.tabular() else {
        return Ok(None);
    };
    if (mdp.n_s(), mdp.n_a()) != (clusters.n_s(), clusters.n_a()) {
        return Ok(None);
    }
    let s_truth: Vec<usize> = states.iter().map(|s| mdp.state_block()[s[0] as usize]).collect();
    let a_truth: Vec<usize> = actions.iter().map(|a| mdp.action_block()[a[0] as usize]).collect();
    let s_w = vec![1.0; states.len()];
    let a_w = vec![1.0; actions.len()];
    let m = misclassification(
        &Labeling { truth: &s_truth, estimate: &clusters.states.assignment, weights: &s_w, blocks: mdp.n_s() },
        &Labeling { truth: &a_truth, estimate: &clusters.actions.assignment, weights: &a_w, blocks: mdp.n_a() },
    )?;
    Ok(Some(m))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub n: usize,
    pub method: String,
    pub ranks: [usize; 3],
    pub seed: u64,
    pub error: String,
}

pub const FAILURES_HEADER: &str = "n,method,r,l,m,seed,error";

/// Rows of one seed in `(n, ranks, method)` order.
fn sweep_seed(ctx: &RunContext, problem: &Problem, truth: &Tensor3, seed: u64) -> (Vec<MetricsRow>, Vec<Failure>) {
    let sizes = &ctx.cfg.experiment.sample_sizes;
    let ranks_list = ctx.cfg.sweep_ranks();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let fail_all = |n: usize, err: &anyhow::Error, failures: &mut Vec<Failure>| {
        for &ranks in &ranks_list {
            for method in metrics::METHODS {
                failures.push(Failure { n, method: method.into(), ranks, seed, error: format!("{err:#}") });
            }
        }
    };
    let data = match problem.simulate(*sizes.iter().max().expect("validated nonempty"), seed) {
        Ok(d) => d,
        Err(err) => {
            sizes.iter().for_each(|&n| fail_all(n, &err, &mut failures));
            return (rows, failures);
        }
    };
    for &n in sizes {
        let m = match moments(ctx, problem, &data.prefix(n)) {
            Ok(m) => m,
            Err(err) => {
                fail_all(n, &err, &mut failures);
                continue;
            }
        };
        for &ranks in &ranks_list {
            let (_, runs) = run_methods(ctx, problem, &m.0, ranks, m.1);
            for run in runs {
                match run.estimate.and_then(|e| error_norms(&e, truth)) {
                    Ok((err_sigma, err_fro)) => rows.push(MetricsRow {
                        n,
                        method: run.method.into(),
                        ranks,
                        seed: SeedField::Run(seed),
                        err_sigma,
                        err_fro,
                        wall_ms: run.wall_ms,
                    }),
                    Err(err) => {
                        failures.push(Failure { n, method: run.method.into(), ranks, seed, error: format!("{err:#}") })
                    }
                }
            }
        }
    }
    (rows, failures)
}

fn cell_key(ctx: &RunContext, n: usize, ranks: [usize; 3], seed: u64, method: &str) -> (usize, usize, usize, usize) {
    let pos = |v: &[usize], x| v.iter().position(|&y| y == x).unwrap_or(usize::MAX);
    let ni = pos(&ctx.cfg.experiment.sample_sizes, n);
    let ri = ctx.cfg.sweep_ranks().iter().position(|&r| r == ranks).unwrap_or(usize::MAX);
    let si = ctx.cfg.seeds().iter().position(|&s| s == seed).unwrap_or(usize::MAX);
    let mi = metrics::METHODS.iter().position(|&m| m == method).unwrap_or(usize::MAX);
    (ni, ri, si, mi)
}

/// `sweep`: every `(n, ranks, seed)` cell for all three methods, then the
/// per-cell mean and standard deviation over seeds.
pub fn sweep(ctx: &RunContext) -> Result<Vec<PathBuf>> {
    let dir = ctx.prepare()?;
    let problem = Problem::new(&ctx.cfg)?;
    let truth = problem.ground_truth(&ctx.cfg)?;
    let seeds = ctx.cfg.seeds();
    let pool =
        rayon::ThreadPoolBuilder::new().num_threads(ctx.jobs.max(1)).build().context("building the work pool")?;
    let per_seed: Vec<(Vec<MetricsRow>, Vec<Failure>)> =
        pool.install(|| seeds.par_iter().map(|&s| sweep_seed(ctx, &problem, &truth, s)).collect());
    let mut rows: Vec<MetricsRow> = per_seed.iter().flat_map(|(r, _)| r.iter().cloned()).collect();
    let mut failures: Vec<Failure> = per_seed.into_iter().flat_map(|(_, f)| f).collect();
    let seed_of = |s: SeedField| match s {
        SeedField::Run(s) => s,
        _ => unreachable!("raw rows carry run seeds"),
    };
    rows.sort_by_key(|r| cell_key(ctx, r.n, r.ranks, seed_of(r.seed), &r.method));
    failures.sort_by_key(|f| cell_key(ctx, f.n, f.ranks, f.seed, &f.method));
    let aggregates = metrics::aggregate(&rows);

    let metrics_path = dir.join("sweep_metrics.csv");
    let all: Vec<MetricsRow> = rows.iter().chain(&aggregates).cloned().collect();
    write(&metrics_path, metrics::to_csv(&all).as_bytes())?;
    let failures_path = dir.join("sweep_failures.csv");
    let mut f = format!("{FAILURES_HEADER}\n");
    for x in &failures {
        let [r, l, m] = x.ranks;
        writeln!(f, "{},{},{r},{l},{m},{},\"{}\"", x.n, x.method, x.seed, x.error.replace('"', "'"))
            .expect("string write");
    }
    write(&failures_path, f.as_bytes())?;
    if !failures.is_empty() {
        eprintln!("warning: {} sweep cells failed; see {}", failures.len(), failures_path.display());
    }

    let mut series = Vec::new();
    for ranks in ctx.cfg.sweep_ranks() {
        for method in metrics::METHODS {
            let pts: Vec<(f64, f64)> = aggregates
                .iter()
                .filter(|r| r.seed == SeedField::Mean && r.method == method && r.ranks == ranks)
                .map(|r| ((r.n as f64).log10(), r.err_fro))
                .collect();
            if !pts.is_empty() {
                series.push((format!("{method} {ranks:?}"), pts));
            }
        }
    }
    let plot_path = dir.join("sweep_err_fro.svg");
    write(&plot_path, svg::lines("mean Frobenius error", "log10 n", "err_fro", &series).as_bytes())?;

    let mut outputs = vec![metrics_path, failures_path, plot_path];
    outputs.push(ctx.write_manifest("sweep", &outputs)?);
    Ok(outputs)
}

/// `make-reference`: the untruncated estimate at `reference.samples`
/// transitions, stored with its feature maps.
pub fn make_reference(ctx: &RunContext, path: Option<&Path>) -> Result<Vec<PathBuf>> {
    if ctx.cfg.environment.kind == EnvKind::Tabular {
        bail!("tabular ground truth is exact; make-reference applies to the SDE only");
    }
    let problem = Problem::new(&ctx.cfg)?;
    let r = &ctx.cfg.reference;
    let data = problem.simulate(r.samples, r.seed)?;
    let (m, _) = moments(ctx, &problem, &data)?;
    let e = &ctx.cfg.estimation;
    let p = vanilla_estimate(&m.f_bar, &m.state_cov, e.ridge, e.max_condition)?;
    let reference = ReferenceModel {
        phi: problem.phi.clone(),
        psi: problem.psi.clone(),
        p,
        metadata: vec![
            ("method".into(), "vanilla".into()),
            ("samples".into(), r.samples.to_string()),
            ("seed".into(), r.seed.to_string()),
            ("clamped_steps".into(), data.clamped().to_string()),
            ("feature_fingerprint".into(), ctx.cfg.feature_fingerprint()),
        ],
    };
    let out = path.map_or_else(|| ctx.cfg.reference_path(), Path::to_path_buf);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    save_reference(&reference, &out).with_context(|| format!("writing {}", out.display()))?;
    ctx.prepare()?;
    let manifest = ctx.write_manifest("make-reference", std::slice::from_ref(&out))?;
    Ok(vec![out, manifest])
}
