//! Synthetic tabular regression data with a binary protected attribute.
//!
//! Draw order from the seeded ChaCha8 stream: attributes, correlated feature
//! blocks, relevant-feature subset, β support, β values, quadratic weights,
//! interaction pairs, interaction weights, noise, split permutation.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::Table;

pub const GROUP0_SCALE: f64 = 0.85;
/// Strength of the quadratic and interaction weights, as a standard deviation.
pub const NONLINEAR_WEIGHT_SD: f64 = 0.4;
pub const DEFAULT_RATIOS: [f64; 3] = [0.7, 0.06, 0.24];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tightness {
    Loose,
    Tighter,
}

impl Tightness {
    /// Output box `(lower, upper)`.
    pub fn bounds(&self) -> (f64, f64) {
        match self {
            Tightness::Loose => (-3.5, 3.5),
            Tightness::Tighter => (0.0, 3.5),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    Linear,
    Nonlinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Probability of attribute value 1.
    pub imbalance: f64,
    pub relevance: f64,
    /// Bias magnitude `b`: `+b` for group 0, `-b` for group 1.
    pub bias: f64,
    pub noise: f64,
    pub tightness: Tightness,
    pub structure: Structure,
    pub n: usize,
    pub d: usize,
    pub rho: f64,
    pub block_size: usize,
    pub relevant_features: usize,
    pub beta_support: usize,
    pub interaction_pairs: usize,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            imbalance: 0.5,
            relevance: 0.3,
            bias: 3.0,
            noise: 0.125,
            tightness: Tightness::Loose,
            structure: Structure::Linear,
            n: 40_000,
            d: 150,
            rho: 0.3,
            block_size: 20,
            relevant_features: 50,
            beta_support: 15,
            interaction_pairs: 200,
            seed: 0,
        }
    }
}

fn scale_count(full: usize, d: usize) -> usize {
    ((full as f64 * d as f64 / 150.0).round() as usize).clamp(1, d)
}

impl ScenarioConfig {
    /// Shrink to `n × d`, scaling block size and feature counts with `d`.
    pub fn scaled(mut self, n: usize, d: usize) -> Self {
        self.n = n;
        self.d = d;
        self.block_size = scale_count(20, d);
        self.relevant_features = scale_count(50, d);
        self.beta_support = scale_count(15, d);
        self.interaction_pairs = ((200.0 * d as f64 / 150.0).round() as usize).max(1);
        self
    }

    pub fn bounds(&self) -> (f64, f64) {
        self.tightness.bounds()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.imbalance > 0.0 && self.imbalance < 1.0) {
            return bad("imbalance must lie in (0, 1)");
        }
        if self.n == 0 || self.d == 0 {
            return bad("n and d must be positive");
        }
        if self.block_size == 0 || self.block_size > self.d {
            return bad("block size must lie in 1..=d");
        }
        if self.relevant_features > self.d || self.beta_support > self.d {
            return bad("feature counts exceed d");
        }
        if !(self.rho > -1.0 / (self.block_size.max(2) - 1) as f64 && self.rho < 1.0) {
            return bad("block correlation is not positive definite");
        }
        if !(self.noise >= 0.0) || !self.bias.is_finite() || !self.relevance.is_finite() {
            return bad("noise, bias and relevance must be finite, noise >= 0");
        }
        let pairs = self.d * (self.d - 1) / 2;
        if self.structure == Structure::Nonlinear && self.interaction_pairs > pairs {
            return bad("more interaction pairs than feature pairs");
        }
        Ok(())
    }
}

/// The 32-scenario factorial grid.
///
/// Enumeration order, outermost factor first: imbalance (0.2, 0.5),
/// relevance/bias ((0.3, 3), (0.7, 6)), noise (0.125, 0.6), tightness
/// (loose, tighter), structure (linear, nonlinear). Config `k` gets seed
/// `base_seed + k`.
pub fn scenario_grid(base: &ScenarioConfig) -> Vec<ScenarioConfig> {
    let mut out = Vec::with_capacity(32);
    for imbalance in [0.2, 0.5] {
        for (relevance, bias) in [(0.3, 3.0), (0.7, 6.0)] {
            for noise in [0.125, 0.6] {
                for tightness in [Tightness::Loose, Tightness::Tighter] {
                    for structure in [Structure::Linear, Structure::Nonlinear] {
                        let seed = base.seed.wrapping_add(out.len() as u64);
                        out.push(ScenarioConfig {
                            imbalance,
                            relevance,
                            bias,
                            noise,
                            tightness,
                            structure,
                            seed,
                            ..base.clone()
                        });
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

fn check_ratios(ratios: [f64; 3]) -> Result<()> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(*r >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidRatios(sum));
    }
    Ok(())
}

fn cut(n: usize, ratios: [f64; 3]) -> (usize, usize) {
    let train = ((ratios[0] * n as f64).round() as usize).min(n);
    let val = ((ratios[1] * n as f64).round() as usize).min(n - train);
    (train, val)
}

fn split_indices<R: Rng>(idx: &mut [usize], ratios: [f64; 3], rng: &mut R) -> Split {
    idx.shuffle(rng);
    let (a, b) = cut(idx.len(), ratios);
    Split { train: idx[..a].to_vec(), val: idx[a..a + b].to_vec(), test: idx[a + b..].to_vec() }
}

/// Random split of `0..groups.len()`; with `stratified`, each group is cut
/// separately so every part keeps the global group proportion.
pub fn split(groups: &[bool], ratios: [f64; 3], stratified: bool, seed: u64) -> Result<Split> {
    check_ratios(ratios)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    split_with(groups, ratios, stratified, &mut rng)
}

fn split_with<R: Rng>(groups: &[bool], ratios: [f64; 3], stratified: bool, rng: &mut R) -> Result<Split> {
    if !stratified {
        let mut idx: Vec<usize> = (0..groups.len()).collect();
        return Ok(split_indices(&mut idx, ratios, rng));
    }
    let mut out = Split { train: vec![], val: vec![], test: vec![] };
    for g in [false, true] {
        let mut idx: Vec<usize> = (0..groups.len()).filter(|&i| groups[i] == g).collect();
        let part = split_indices(&mut idx, ratios, rng);
        out.train.extend(part.train);
        out.val.extend(part.val);
        out.test.extend(part.test);
    }
    out.train.shuffle(rng);
    out.val.shuffle(rng);
    out.test.shuffle(rng);
    Ok(out)
}

/// Generated data together with the latent quantities needed to audit it.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: ScenarioConfig,
    /// `n × (d + 1)`; column `d` holds the protected attribute as 0/1.
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    /// Target before standardisation and group scaling.
    pub y_raw: Vec<f64>,
    pub protected_columns: Vec<usize>,
    pub split: Split,
    pub relevant: Vec<usize>,
    pub beta: Vec<f64>,
}

fn normal_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    // column-major fill: block draws are reproducible regardless of later columns
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn block_factor(k: usize, rho: f64) -> Result<DMatrix<f64>> {
    let cov = DMatrix::from_fn(k, k, |i, j| if i == j { 1.0 } else { rho });
    cov.cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::InvalidConfig("block covariance is not positive definite".into()))
}

fn mean_sd(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (n, sum) = values.clone().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

pub fn generate(cfg: &ScenarioConfig) -> Result<Dataset> {
    generate_with_ratios(cfg, DEFAULT_RATIOS, false)
}

pub fn generate_with_ratios(cfg: &ScenarioConfig, ratios: [f64; 3], stratified: bool) -> Result<Dataset> {
    cfg.validate()?;
    check_ratios(ratios)?;
    let (n, d) = (cfg.n, cfg.d);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let bern = Bernoulli::new(cfg.imbalance).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let attr: Vec<bool> = (0..n).map(|_| bern.sample(&mut rng)).collect();

    let mut x = DMatrix::<f64>::zeros(n, d + 1);
    let mut start = 0;
    while start < d {
        let k = cfg.block_size.min(d - start);
        let l = block_factor(k, cfg.rho)?;
        let block = normal_matrix(&mut rng, n, k) * l.transpose();
        x.view_mut((0, start), (n, k)).copy_from(&block);
        start += k;
    }

    let mut relevant = sample(&mut rng, d, cfg.relevant_features).into_vec();
    relevant.sort_unstable();
    for &j in &relevant {
        for i in 0..n {
            x[(i, j)] += cfg.relevance * if attr[i] { 1.0 } else { -1.0 };
        }
    }

    let support = sample(&mut rng, d, cfg.beta_support).into_vec();
    let mut beta = vec![0.0; d];
    for &j in &support {
        beta[j] = StandardNormal.sample(&mut rng);
    }
    let beta_v = DVector::from_column_slice(&beta);
    let linear = x.columns(0, d) * &beta_v;

    let score: Vec<f64> = match cfg.structure {
        Structure::Linear => linear.iter().copied().collect(),
        Structure::Nonlinear => {
            let w = Normal::new(0.0, NONLINEAR_WEIGHT_SD).expect("positive sd");
            let alpha: Vec<f64> = (0..d).map(|_| w.sample(&mut rng)).collect();
            let pairs: Vec<(usize, usize)> = sample(&mut rng, d * (d - 1) / 2, cfg.interaction_pairs)
                .into_iter()
                .map(|p| pair_from_index(p, d))
                .collect();
            let gamma: Vec<f64> = pairs.iter().map(|_| w.sample(&mut rng)).collect();
            (0..n)
                .map(|i| {
                    let quad: f64 = (0..d).map(|j| alpha[j] * x[(i, j)].powi(2)).sum();
                    let inter: f64 =
                        pairs.iter().zip(&gamma).map(|(&(k, l), g)| g * x[(i, k)] * x[(i, l)]).sum();
                    0.7 * linear[i] + 0.2 * quad + 0.1 * inter
                })
                .collect()
        }
    };

    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let y_raw: Vec<f64> = (0..n)
        .map(|i| {
            let b = if attr[i] { -cfg.bias } else { cfg.bias };
            score[i] + b + noise.sample(&mut rng)
        })
        .collect();

    let split = split_with(&attr, ratios, stratified, &mut rng)?;

    let fit_rows: &[usize] = if split.train.len() >= 2 { &split.train } else { &[] };
    for j in 0..d {
        let (mean, sd) = if fit_rows.is_empty() {
            mean_sd((0..n).map(|i| x[(i, j)]))
        } else {
            mean_sd(fit_rows.iter().map(|&i| x[(i, j)]))
        };
        let sd = if sd > 0.0 { sd } else { 1.0 };
        for i in 0..n {
            x[(i, j)] = (x[(i, j)] - mean) / sd;
        }
    }
    for i in 0..n {
        x[(i, d)] = if attr[i] { 1.0 } else { 0.0 };
    }

    let (mean, sd) = mean_sd(y_raw.iter().copied());
    let sd = if sd > 0.0 { sd } else { 1.0 };
    let y = y_raw
        .iter()
        .zip(&attr)
        .map(|(v, &a)| {
            let s = (v - mean) / sd;
            if a { s } else { GROUP0_SCALE * s }
        })
        .collect();

    Ok(Dataset {
        config: cfg.clone(),
        x,
        y,
        y_raw,
        protected_columns: vec![d],
        split,
        relevant,
        beta,
    })
}

fn pair_from_index(mut p: usize, d: usize) -> (usize, usize) {
    for k in 0..d {
        let row = d - 1 - k;
        if p < row {
            return (k, k + 1 + p);
        }
        p -= row;
    }
    unreachable!("pair index out of range")
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    protected_columns: Vec<usize>,
    scenario: ScenarioConfig,
    relevant: Vec<usize>,
    split: Split,
}

/// Sidecar path next to a dataset CSV: `data.csv` -> `data.meta.toml`.
pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("meta.toml")
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    /// Number of columns in `x`, protected attribute included.
    pub fn width(&self) -> usize {
        self.x.ncols()
    }

    /// Group membership from the first protected column (`true` = attribute 1).
    pub fn groups(&self) -> Vec<bool> {
        let c = self.protected_columns[0];
        (0..self.n()).map(|i| self.x[(i, c)] != 0.0).collect()
    }

    pub fn rows(&self, idx: &[usize]) -> (DMatrix<f64>, Vec<f64>, Vec<bool>) {
        let x = self.x.select_rows(idx);
        let g = self.groups();
        (x, idx.iter().map(|&i| self.y[i]).collect(), idx.iter().map(|&i| g[i]).collect())
    }

    pub fn to_table(&self) -> Table {
        let mut header: Vec<String> = (1..=self.width()).map(|j| format!("x{j}")).collect();
        header.push("y".into());
        let rows = (0..self.n())
            .map(|i| {
                let mut r: Vec<f64> = self.x.row(i).iter().copied().collect();
                r.push(self.y[i]);
                r
            })
            .collect();
        Table { header, rows }
    }

    /// Write `<path>` and its sidecar. The latent raw target and β live only
    /// in memory.
    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_table().write(path)?;
        let meta = Sidecar {
            protected_columns: self.protected_columns.clone(),
            scenario: self.config.clone(),
            relevant: self.relevant.clone(),
            split: self.split.clone(),
        };
        let text = toml::to_string(&meta).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(sidecar_path(path), text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let table = Table::read(path)?;
        let meta: Sidecar = toml::from_str(&std::fs::read_to_string(sidecar_path(path))?)
            .map_err(|e| Error::Parse(e.to_string()))?;
        let width = table.header.len().checked_sub(1).ok_or_else(|| Error::Parse("no columns".into()))?;
        if table.header.last().map(String::as_str) != Some("y") {
            return Err(Error::Parse("last column must be y".into()));
        }
        let n = table.rows.len();
        if meta.protected_columns.iter().any(|&c| c >= width) {
            return Err(Error::Parse("protected column out of range".into()));
        }
        let x = DMatrix::from_fn(n, width, |i, j| table.rows[i][j]);
        let y: Vec<f64> = table.rows.iter().map(|r| r[width]).collect();
        Ok(Self {
            config: meta.scenario,
            x,
            y,
            y_raw: Vec::new(),
            protected_columns: meta.protected_columns,
            split: meta.split,
            relevant: meta.relevant,
            beta: Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, d: usize) -> ScenarioConfig {
        ScenarioConfig { seed: 7, ..Default::default() }.scaled(n, d)
    }

    fn fraction(g: &[bool], idx: &[usize]) -> f64 {
        idx.iter().filter(|&&i| g[i]).count() as f64 / idx.len() as f64
    }

    #[test]
    fn bernoulli_fraction() {
        let ds = generate(&small(10_000, 10)).unwrap();
        let frac = ds.groups().iter().filter(|&&g| g).count() as f64 / 10_000.0;
        assert!((frac - 0.5).abs() < 0.02, "{frac}");
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = ScenarioConfig { structure: Structure::Nonlinear, ..small(500, 12) };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = generate(&ScenarioConfig { seed: 8, ..cfg.clone() }).unwrap();
        assert_ne!(other.y, generate(&cfg).unwrap().y);
    }

    #[test]
    fn training_statistics_standardised() {
        let ds = generate(&small(3000, 20)).unwrap();
        for j in 0..20 {
            let (m, s) = mean_sd(ds.split.train.iter().map(|&i| ds.x[(i, j)]));
            assert!(m.abs() <= 1e-6, "mean {m}");
            assert!((s * s - 1.0).abs() <= 1e-4, "var {}", s * s);
        }
        assert!(ds.groups().iter().zip(ds.x.column(20).iter()).all(|(&g, &v)| v == if g { 1.0 } else { 0.0 }));
    }

    #[test]
    fn noiseless_linear_refit() {
        let cfg = ScenarioConfig { noise: 0.0, bias: 0.0, ..small(2000, 15) };
        let ds = generate(&cfg).unwrap();
        let n = ds.n();
        let design = DMatrix::from_fn(n, ds.width() + 1, |i, j| if j == ds.width() { 1.0 } else { ds.x[(i, j)] });
        let y = DVector::from_column_slice(&ds.y_raw);
        let coef = design.clone().svd(true, true).solve(&y, 1e-12).unwrap();
        let fit = &design * &coef;
        let mean = y.mean();
        let ss_res = (&y - &fit).norm_squared();
        let ss_tot = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
        assert!(1.0 - ss_res / ss_tot > 0.999);
        // recovered direction on the real features matches β up to the standardisation scale
        let support: Vec<usize> = (0..15).filter(|&j| ds.beta[j] != 0.0).collect();
        for j in 0..15 {
            if !support.contains(&j) {
                assert!(coef[j].abs() < 1e-8, "{j}: {}", coef[j]);
            } else {
                assert!(coef[j] * ds.beta[j] > 0.0);
            }
        }
    }

    #[test]
    fn within_block_correlation() {
        let cfg = ScenarioConfig { seed: 3, relevance: 0.0, ..Default::default() };
        let ds = generate(&cfg).unwrap();
        let n = ds.n() as f64;
        let mut worst = 0.0f64;
        for b in 0..3 {
            for (j, k) in [(0, 1), (3, 17), (8, 19)] {
                let (j, k) = (20 * b + j, 20 * b + k);
                let corr = ds.x.column(j).dot(&ds.x.column(k)) / n;
                worst = worst.max((corr - 0.3).abs());
            }
        }
        assert!(worst < 0.05, "{worst}");
        let across = ds.x.column(0).dot(&ds.x.column(20)) / n;
        assert!(across.abs() < 0.05);
    }

    #[test]
    fn bias_detectable() {
        let cfg = ScenarioConfig { bias: 6.0, noise: 0.125, relevance: 0.0, ..small(4000, 15) };
        let ds = generate(&cfg).unwrap();
        let g = ds.groups();
        let part = |want: bool| {
            let v: Vec<f64> = ds.y_raw.iter().zip(&g).filter(|(_, &a)| a == want).map(|(v, _)| *v).collect();
            let (m, s) = mean_sd(v.iter().copied());
            (m, s * s / v.len() as f64)
        };
        let ((m0, v0), (m1, v1)) = (part(false), part(true));
        let se = (v0 + v1).sqrt();
        assert!((m0 - m1 - 12.0).abs() < 4.0 * se, "{} vs 12 (se {se})", m0 - m1);
    }

    #[test]
    fn group_variance_ratio() {
        let cfg = ScenarioConfig { seed: 11, ..Default::default() };
        let ds = generate(&cfg).unwrap();
        let g = ds.groups();
        let (_, s0) = mean_sd(ds.y.iter().zip(&g).filter(|(_, &a)| !a).map(|(v, _)| *v));
        let (_, s1) = mean_sd(ds.y.iter().zip(&g).filter(|(_, &a)| a).map(|(v, _)| *v));
        let ratio = (s0 * s0) / (s1 * s1) / (0.85 * 0.85);
        assert!((ratio - 1.0).abs() < 0.05, "{ratio}");
    }

    #[test]
    fn grid_is_balanced_and_stable() {
        let base = ScenarioConfig::default();
        let grid = scenario_grid(&base);
        assert_eq!(grid.len(), 32);
        assert_eq!(grid, scenario_grid(&base));
        let count = |f: &dyn Fn(&ScenarioConfig) -> bool| grid.iter().filter(|c| f(c)).count();
        assert_eq!(count(&|c| c.imbalance == 0.2), 16);
        assert_eq!(count(&|c| c.relevance == 0.7 && c.bias == 6.0), 16);
        assert_eq!(count(&|c| c.noise == 0.6), 16);
        assert_eq!(count(&|c| c.tightness == Tightness::Tighter), 16);
        assert_eq!(count(&|c| c.structure == Structure::Nonlinear), 16);
        let seeds: std::collections::BTreeSet<u64> = grid.iter().map(|c| c.seed).collect();
        assert_eq!(seeds.len(), 32);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let g = vec![false; 100];
        let s = split(&g, DEFAULT_RATIOS, false, 1).unwrap();
        assert_eq!(s.sizes(), (70, 6, 24));
        assert_eq!(s, split(&g, DEFAULT_RATIOS, false, 1).unwrap());
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert!(matches!(split(&g, [0.7, 0.2, 0.2], false, 1), Err(Error::InvalidRatios(_))));
    }

    #[test]
    fn stratified_split_keeps_proportions() {
        let g: Vec<bool> = (0..1000).map(|i| i % 5 == 0).collect();
        let s = split(&g, DEFAULT_RATIOS, true, 4).unwrap();
        for part in [&s.train, &s.val, &s.test] {
            let tol = 1.0 / part.len() as f64;
            assert!((fraction(&g, part) - 0.2).abs() <= tol + 1e-12);
        }
    }

    #[test]
    fn pair_indexing() {
        let d = 5;
        let pairs: Vec<_> = (0..10).map(|p| pair_from_index(p, d)).collect();
        assert_eq!(pairs[0], (0, 1));
        assert_eq!(pairs[4], (1, 2));
        assert_eq!(pairs[9], (3, 4));
    }

    #[test]
    fn file_roundtrip() {
        let ds = generate(&ScenarioConfig { structure: Structure::Nonlinear, ..small(300, 9) }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        ds.write(&path).unwrap();
        assert!(sidecar_path(&path).exists());
        let back = Dataset::read(&path).unwrap();
        assert_eq!(back.x, ds.x);
        assert_eq!(back.y, ds.y);
        assert_eq!(back.split, ds.split);
        assert_eq!(back.config, ds.config);
        assert_eq!(back.protected_columns, vec![9]);
    }

    #[test]
    fn invalid_configs() {
        assert!(generate(&ScenarioConfig { imbalance: 1.0, ..small(10, 5) }).is_err());
        assert!(generate(&ScenarioConfig { block_size: 9, ..small(10, 5) }).is_err());
        assert!(generate(&ScenarioConfig { n: 0, ..small(10, 5) }).is_err());
    }
}
