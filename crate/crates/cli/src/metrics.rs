//! Metrics rows and their CSV form.

use std::fmt::Write as _;

use anyhow::{bail, Context, Result};

pub const HEADER: &str = "n,method,r,l,m,seed,err_sigma,err_fro,wall_ms";
pub const METHODS: [&str; 3] = ["tensor", "vanilla", "topr"];

/// Seed column of one row: a run seed or an aggregate over seeds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SeedField {
    Run(u64),
    Mean,
    Std,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub n: usize,
    pub method: String,
    pub ranks: [usize; 3],
    pub seed: SeedField,
    pub err_sigma: f64,
    pub err_fro: f64,
    pub wall_ms: f64,
}

fn num(v: f64) -> String {
    // 17 significant digits round-trip every f64
    format!("{v:.16e}")
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let seed = match self.seed {
            SeedField::Run(s) => s.to_string(),
            SeedField::Mean => "mean".into(),
            SeedField::Std => "std".into(),
        };
        let [r, l, m] = self.ranks;
        format!(
            "{},{},{r},{l},{m},{seed},{},{},{}",
            self.n,
            self.method,
            num(self.err_sigma),
            num(self.err_fro),
            num(self.wall_ms)
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 9 {
            bail!("expected 9 fields, got {}", f.len());
        }
        let seed = match f[5] {
            "mean" => SeedField::Mean,
            "std" => SeedField::Std,
            s => SeedField::Run(s.parse().context("seed")?),
        };
        Ok(Self {
            n: f[0].parse().context("n")?,
            method: f[1].to_string(),
            ranks: [f[2].parse()?, f[3].parse()?, f[4].parse()?],
            seed,
            err_sigma: f[6].parse().context("err_sigma")?,
            err_fro: f[7].parse().context("err_fro")?,
            wall_ms: f[8].parse().context("wall_ms")?,
        })
    }
}

pub fn to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(HEADER);
    out.push('\n');
    for r in rows {
        writeln!(out, "{}", r.to_csv()).expect("string write");
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        bail!("metrics CSV must start with `{HEADER}`");
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| MetricsRow::parse(l).with_context(|| format!("metrics line {}", i + 2)))
        .collect()
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mean and sample standard deviation over seeds for every
/// `(n, ranks, method)` cell, in first-appearance order.
pub fn aggregate(rows: &[MetricsRow]) -> Vec<MetricsRow> {
    let mut keys: Vec<(usize, [usize; 3], String)> = Vec::new();
    for r in rows.iter().filter(|r| matches!(r.seed, SeedField::Run(_))) {
        let k = (r.n, r.ranks, r.method.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let mut out = Vec::new();
    for (n, ranks, method) in keys {
        let cell: Vec<&MetricsRow> = rows
            .iter()
            .filter(|r| matches!(r.seed, SeedField::Run(_)) && r.n == n && r.ranks == ranks && r.method == method)
            .collect();
        let stat = |f: fn(&MetricsRow) -> f64| mean_std(&cell.iter().map(|r| f(r)).collect::<Vec<_>>());
        let (sm, ss) = stat(|r| r.err_sigma);
        let (fm, fs) = stat(|r| r.err_fro);
        let (wm, ws) = stat(|r| r.wall_ms);
        for (seed, s, f, w) in [(SeedField::Mean, sm, fm, wm), (SeedField::Std, ss, fs, ws)] {
            out.push(MetricsRow { n, method: method.clone(), ranks, seed, err_sigma: s, err_fro: f, wall_ms: w });
        }
    }
    out
}
