use std::path::{Path, PathBuf};
use std::process::Command;

use tensor_mdp::baselines::{topr_from_moments, vanilla_estimate};
use tensor_mdp::embedding::{estimate_transition, sample_moments, EstimateOptions, MomentOptions};
use tensor_mdp_cli::commands::{self, Manifest, RunContext};
use tensor_mdp_cli::config::{EnvKind, ExperimentConfig};
use tensor_mdp_cli::metrics::{self, SeedField};
use tensor_mdp_cli::problem::Problem;
use tensor_mdp_cli::svg;

fn tabular(out: &Path, n_states: usize, n_actions: usize, blocks: [usize; 2], ranks: [usize; 3]) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.environment.kind = EnvKind::Tabular;
    cfg.environment.n_states = n_states;
    cfg.environment.n_actions = n_actions;
    cfg.environment.state_blocks = blocks[0];
    cfg.environment.action_blocks = blocks[1];
    cfg.estimation.ranks = ranks;
    cfg.experiment.sample_sizes = vec![20_000];
    cfg.experiment.seeds = Some(vec![3]);
    cfg.experiment.out = out.display().to_string();
    cfg.clustering.counts = vec![blocks];
    cfg.clustering.action_samples = 500;
    cfg.validate().unwrap();
    cfg
}

fn ctx(cfg: ExperimentConfig) -> RunContext {
    RunContext { cfg, jobs: 1 }
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

fn named(outputs: &[PathBuf], suffix: &str) -> PathBuf {
    outputs.iter().find(|p| p.display().to_string().ends_with(suffix)).cloned().unwrap()
}

#[test]
fn simulate_smoke_run_writes_rows_and_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tabular(dir.path(), 12, 6, [2, 2], [2, 2, 2]);
    cfg.experiment.sample_sizes = vec![100];
    let c = ctx(cfg.clone());
    let outputs = commands::simulate(&c).unwrap();
    let data = read(&named(&outputs, "dataset_seed3.csv"));
    assert_eq!(data.lines().count(), 101);
    let m = Manifest::load(&named(&outputs, "manifest_simulate.toml")).unwrap();
    assert_eq!(m.config, cfg);
    assert_eq!(m.manifest.config_hash, cfg.hash());
    assert_eq!(m.manifest.command, "simulate");
    assert!(outputs[0].starts_with(dir.path().join(cfg.hash())));
}

#[test]
fn every_artifact_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = || {
        let c = ctx(tabular(dir.path(), 16, 8, [2, 2], [2, 2, 4]));
        let mut files = commands::simulate(&c).unwrap();
        files.extend(commands::estimate(&c, None, None).unwrap());
        files.extend(commands::cluster(&c, None, None).unwrap());
        files.extend(commands::sweep(&c).unwrap());
        let contents: Vec<(PathBuf, Vec<u8>)> = files.iter().map(|f| (f.clone(), std::fs::read(f).unwrap())).collect();
        std::fs::remove_dir_all(c.out_dir()).unwrap();
        contents
    };
    let (a, b) = (run(), run());
    assert_eq!(a.len(), b.len());
    for ((pa, xa), (pb, xb)) in a.iter().zip(&b) {
        assert_eq!(pa, pb);
        assert!(xa == xb, "{} differs", pa.display());
    }
}

#[test]
fn sweep_is_independent_of_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tabular(dir.path(), 16, 8, [2, 2], [2, 2, 4]);
    cfg.experiment.seeds = Some(vec![1, 2, 3]);
    cfg.experiment.sample_sizes = vec![2_000, 5_000];
    let one = read(&commands::sweep(&RunContext { cfg: cfg.clone(), jobs: 1 }).unwrap()[0]);
    let many = read(&commands::sweep(&RunContext { cfg, jobs: 3 }).unwrap()[0]);
    assert_eq!(one, many);
}

#[test]
fn full_rank_estimators_coincide() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tabular(dir.path(), 8, 4, [2, 2], [8, 4, 8]);
    let problem = Problem::new(&cfg).unwrap();
    let data = problem.simulate(20_000, 5).unwrap();
    let m = sample_moments(&data, &problem.phi, &problem.psi, &|a| problem.eta_density(a), MomentOptions::default())
        .unwrap();
    let e = &cfg.estimation;
    let opts = EstimateOptions { ridge_scale: e.ridge, max_condition: e.max_condition, ..EstimateOptions::default() };
    let tensor = estimate_transition(&m.f_bar, &m.state_cov, &problem.phi, &problem.psi, e.ranks, opts).unwrap().p_hat;
    let vanilla = vanilla_estimate(&m.f_bar, &m.state_cov, e.ridge, e.max_condition).unwrap();
    let topr = topr_from_moments(&m, e.ranks, e.ridge, e.max_condition).unwrap();
    for other in [&vanilla, &topr] {
        assert!(tensor.sub(other).unwrap().frobenius() <= 1e-9 * tensor.frobenius().max(1.0));
    }
}

#[test]
fn tensor_beats_vanilla_at_exact_rank() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 1..=3 {
        let mut cfg = tabular(dir.path(), 40, 20, [4, 4], [4, 4, 16]);
        cfg.experiment.sample_sizes = vec![10_000];
        cfg.experiment.seeds = Some(vec![seed]);
        let c = ctx(cfg);
        commands::simulate(&c).unwrap();
        let out = commands::estimate(&c, None, None).unwrap();
        let rows = metrics::parse_csv(&read(&named(&out, ".csv"))).unwrap();
        let err = |m: &str| rows.iter().find(|r| r.method == m).unwrap().err_fro;
        assert!(err("tensor") < err("vanilla"), "seed {seed}: {} vs {}", err("tensor"), err("vanilla"));
    }
}

#[test]
fn metrics_file_round_trips_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let c = ctx(tabular(dir.path(), 16, 8, [2, 2], [2, 2, 4]));
    commands::simulate(&c).unwrap();
    let out = commands::estimate(&c, None, Some(5_000)).unwrap();
    let path = named(&out, "metrics_seed3_n5000.csv");
    let text = read(&path);
    let rows = metrics::parse_csv(&text).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(metrics::to_csv(&rows), text);
    assert!(rows.iter().all(|r| r.n == 5_000 && r.seed == SeedField::Run(3) && r.err_fro >= r.err_sigma));
    assert!(named(&out, "model_seed3_n5000.bin").exists());
}

#[test]
fn estimate_rejects_bad_prefix_and_missing_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let c = ctx(tabular(dir.path(), 16, 8, [2, 2], [2, 2, 4]));
    let err = commands::estimate(&c, None, None).unwrap_err();
    assert!(format!("{err:#}").contains("simulate"));
    commands::simulate(&c).unwrap();
    assert!(commands::estimate(&c, None, Some(0)).is_err());
    assert!(commands::estimate(&c, None, Some(10_000_000)).is_err());
}

#[test]
fn two_by_two_block_mdp_clusters_without_error() {
    let dir = tempfile::tempdir().unwrap();
    let c = ctx(tabular(dir.path(), 12, 6, [2, 2], [2, 2, 4]));
    commands::simulate(&c).unwrap();
    commands::estimate(&c, None, None).unwrap();
    let out = commands::cluster(&c, None, None).unwrap();
    let summary = read(&named(&out, "cluster_summary.csv"));
    let row: Vec<&str> = summary.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(&row[..2], ["2", "2"]);
    assert_eq!(row[5].parse::<f64>().unwrap(), 0.0);
    let states = read(&named(&out, "clusters_2x2_states.csv"));
    let mut ids: Vec<&str> = states.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids, ["0", "1"]);
    for kind in ["states", "actions"] {
        assert!(svg::is_well_formed(&read(&named(&out, &format!("clusters_2x2_{kind}.svg")))));
    }
}

#[test]
fn single_cluster_plot_uses_one_color() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tabular(dir.path(), 12, 6, [2, 2], [2, 2, 4]);
    cfg.clustering.counts = vec![[1, 1]];
    let c = ctx(cfg);
    commands::simulate(&c).unwrap();
    commands::estimate(&c, None, None).unwrap();
    let out = commands::cluster(&c, None, None).unwrap();
    let plot = read(&named(&out, "clusters_1x1_states.svg"));
    assert!(svg::is_well_formed(&plot));
    let mut fills: Vec<&str> =
        plot.lines().filter(|l| l.starts_with("<circle")).map(|l| l.split("fill=\"").nth(1).unwrap()).collect();
    fills.dedup();
    assert_eq!(fills.len(), 1);
}

#[test]
fn sweep_counts_rows_and_averages() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tabular(dir.path(), 16, 8, [2, 2], [2, 2, 4]);
    cfg.experiment.seeds = Some(vec![1, 2]);
    cfg.experiment.sample_sizes = vec![2_000, 8_000];
    let out = commands::sweep(&ctx(cfg)).unwrap();
    let rows = metrics::parse_csv(&read(&out[0])).unwrap();
    let (runs, agg): (Vec<_>, Vec<_>) = rows.iter().partition(|r| matches!(r.seed, SeedField::Run(_)));
    assert_eq!(runs.len(), 12);
    assert_eq!(agg.len(), 12);
    for a in agg.iter().filter(|r| r.seed == SeedField::Mean) {
        let cell: Vec<f64> = runs.iter().filter(|r| r.n == a.n && r.method == a.method).map(|r| r.err_fro).collect();
        assert_eq!(cell.len(), 2);
        assert!((a.err_fro - (cell[0] + cell[1]) / 2.0).abs() <= 1e-15 * a.err_fro);
    }
    assert_eq!(read(&out[1]).lines().count(), 1);
    assert!(svg::is_well_formed(&read(&out[2])));
}

#[test]
fn sweep_records_failed_cells_and_continues() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tabular(dir.path(), 16, 8, [2, 2], [2, 2, 4]);
    cfg.experiment.sample_sizes = vec![1, 4_000];
    cfg.estimation.max_condition = 1e6;
    let out = commands::sweep(&ctx(cfg)).unwrap();
    let rows = metrics::parse_csv(&read(&out[0])).unwrap();
    assert!(rows.iter().any(|r| r.n == 4_000));
    let failures = read(&out[1]);
    assert!(failures.lines().count() > 1, "{failures}");
    assert!(failures.lines().skip(1).all(|l| l.starts_with("1,")));
}

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tensor-mdp"))
}

#[test]
fn missing_sde_reference_explains_how_to_build_it() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("sde.toml");
    std::fs::write(
        &config,
        "[features]\nn_state = 10\nn_action = 5\nwhitening_samples = 2000\n\n[experiment]\nsample_sizes = [200]\n\n[reference]\npath = \"absent.bin\"\n",
    )
    .unwrap();
    let run = |args: &[&str]| {
        binary().arg("--config").arg(&config).arg("--out").arg(dir.path().join("o")).args(args).output().unwrap()
    };
    assert!(run(&["--seed", "1", "simulate"]).status.success());
    let out = run(&["--seed", "1", "estimate"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("make-reference"), "{stderr}");
}

#[test]
fn effective_config_round_trips() {
    let out = binary().args(["--seed", "9", "--print-effective-config"]).output().unwrap();
    assert!(out.status.success());
    let cfg = ExperimentConfig::from_toml(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(cfg.seeds(), vec![9]);
    assert_eq!(cfg.estimation.ranks, [3, 3, 3]);
}

#[test]
fn shipped_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e:#}", path.display()));
        n += 1;
    }
    assert!(n >= 3);
}

#[test]
fn committed_references_match_their_configs() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    for name in ["sde_reduced.toml", "sde_clustering.toml"] {
        let cfg = ExperimentConfig::load(&dir.join(name)).unwrap();
        let problem = Problem::new(&cfg).unwrap();
        let (ds, da) = cfg.feature_dims();
        let truth = problem.ground_truth(&cfg).unwrap_or_else(|e| panic!("{name}: {e:#}"));
        assert_eq!(truth.dims(), [ds, da, ds]);
    }
}
