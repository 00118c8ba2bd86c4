//! Primal-dual inference over a stream of batches, and the aggregate bound
//! for per-batch enforcement under varying group proportions.
//!
//! Batches smaller than `b_tau` are penalised with the current dual value:
//! `ŷ = argmin ‖ŷ - z‖² + λ·|b|·v(ŷ)`, after which
//! `λ ← max(0, λ + η/√(t+1) · |b|(v(ŷ) - ε))`. Larger batches are projected
//! onto the hard constraint `v(ŷ) <= ε` and leave the dual untouched.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::constraints::{compile, group_means, spec_terms, FairnessSpec, GroupMasks};
use crate::error::{Error, Result};
use crate::format::num;
use crate::qp::{project, project_penalized_terms, SolverConfig};

/// How small batches that lack one of the groups enter the running average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingGroupPolicy {
    /// Gap 0, batch size still counted in the denominator.
    #[default]
    CountAsZero,
    /// Batch left out of both sums.
    Exclude,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    PrimalDual,
    Hard,
    Skip,
}

impl Branch {
    pub fn as_str(&self) -> &'static str {
        match self {
            Branch::PrimalDual => "primal_dual",
            Branch::Hard => "hard",
            Branch::Skip => "skip",
        }
    }
}

/// One line of the stream log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based position of the batch in the stream.
    pub t: usize,
    pub batch_size: usize,
    pub branch: Branch,
    pub gap: f64,
    pub weighted_violation: f64,
    pub lambda: f64,
    pub running_weighted_avg: f64,
}

pub const LOG_HEADER: &str = "t,batch_size,branch,gap,weighted_violation,lambda,running_weighted_avg";

impl StepRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.t,
            self.batch_size,
            self.branch.as_str(),
            num(self.gap),
            num(self.weighted_violation),
            num(self.lambda),
            num(self.running_weighted_avg)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub eta: f64,
    pub b_tau: usize,
    pub epsilon: f64,
    #[serde(default)]
    pub missing_group: MissingGroupPolicy,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self { eta: 0.5, b_tau: 256, epsilon: 0.05, missing_group: MissingGroupPolicy::CountAsZero }
    }
}

/// Controller state; serialisable as a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualControllerState {
    pub config: StreamConfig,
    pub lambda: f64,
    /// Number of dual updates so far.
    pub t: usize,
    pub batches: usize,
    /// `Σ |b_t|` over counted batches.
    pub total_size: f64,
    /// `Σ |b_t| v_t` over counted batches.
    pub weighted_gap: f64,
    /// `Σ |b_t| (v_t - ε)` over counted batches.
    pub weighted_violation: f64,
    pub log: Vec<StepRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub y_hat: Vec<f64>,
    pub record: StepRecord,
}

const PENALTY_TOL: f64 = 1e-13;
const PENALTY_SWEEPS: usize = 10_000;

impl DualControllerState {
    pub fn new(config: StreamConfig) -> Result<Self> {
        if !(config.eta > 0.0) || !(config.epsilon >= 0.0) || config.b_tau == 0 {
            return Err(Error::InvalidConfig(format!("invalid stream configuration {config:?}")));
        }
        Ok(Self {
            config,
            lambda: 0.0,
            t: 0,
            batches: 0,
            total_size: 0.0,
            weighted_gap: 0.0,
            weighted_violation: 0.0,
            log: Vec::new(),
        })
    }

    /// Process one batch of raw predictions.
    ///
    /// For a criterion with several terms (equalized odds regions, the two
    /// group residuals) the penalty sums the term gaps under the shared dual,
    /// while the reported gap is the largest term.
    pub fn step(
        &mut self,
        z_raw: &[f64],
        masks: &GroupMasks,
        y_true: Option<&[f64]>,
        spec: &FairnessSpec,
        solver: &SolverConfig,
    ) -> Result<StepOutput> {
        if !spec.is_group_criterion() {
            return Err(Error::InvalidSpec("streaming needs a group criterion".into()));
        }
        let size = z_raw.len();
        if masks.len() != size {
            return Err(Error::DimensionMismatch("masks and batch differ in size".into()));
        }
        let eps = self.config.epsilon;
        let hard = size >= self.config.b_tau;
        let terms = match spec_terms(spec, masks, y_true) {
            Ok((terms, _)) => Some(terms),
            Err(e @ (Error::DegenerateGroup(_) | Error::NoApplicableRegion)) => {
                if hard {
                    return Err(e);
                }
                None
            }
            Err(e) => return Err(e),
        };
        let (y_hat, branch, gap) = match terms {
            None => (z_raw.to_vec(), Branch::Skip, 0.0),
            Some(terms) if hard => {
                let set = compile(std::slice::from_ref(spec), masks, y_true, size)?;
                let y = project(&DVector::from_column_slice(z_raw), &set, solver)?.y_star;
                let y: Vec<f64> = y.iter().copied().collect();
                let gap = terms.iter().map(|t| t.value(&y)).fold(0.0, f64::max);
                (y, Branch::Hard, gap)
            }
            Some(terms) => {
                let kappa = self.lambda * size as f64;
                let y = project_penalized_terms(z_raw, kappa, &terms, PENALTY_TOL, PENALTY_SWEEPS)?;
                let gap = terms.iter().map(|t| t.value(&y)).fold(0.0, f64::max);
                (y, Branch::PrimalDual, gap)
            }
        };
        let w = size as f64 * (gap - eps);
        if branch == Branch::PrimalDual {
            let eta_t = self.config.eta / ((self.t + 1) as f64).sqrt();
            self.lambda = (self.lambda + eta_t * w).max(0.0);
            self.t += 1;
        }
        let counted = branch != Branch::Skip
            || self.config.missing_group == MissingGroupPolicy::CountAsZero;
        if counted {
            self.total_size += size as f64;
            self.weighted_gap += size as f64 * gap;
            self.weighted_violation += w;
        }
        self.batches += 1;
        let record = StepRecord {
            t: self.batches,
            batch_size: size,
            branch,
            gap,
            weighted_violation: w,
            lambda: self.lambda,
            running_weighted_avg: if self.total_size > 0.0 {
                self.weighted_gap / self.total_size
            } else {
                0.0
            },
        };
        self.log.push(record);
        Ok(StepOutput { y_hat, record })
    }

    /// `Σ|b_t| v_t / Σ|b_t|`.
    pub fn aggregate_violation(&self) -> Result<f64> {
        if self.total_size == 0.0 {
            return Err(Error::EmptyStream);
        }
        Ok(self.weighted_gap / self.total_size)
    }

    pub fn to_checkpoint(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint()?)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&std::fs::read_to_string(path)?)
    }
}

/// Append records to a CSV log, writing the header when the file is new or empty.
pub fn append_log(path: &Path, records: &[StepRecord]) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut out = String::new();
    if fresh {
        out.push_str(LOG_HEADER);
        out.push('\n');
    }
    for r in records {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    file.write_all(out.as_bytes())?;
    Ok(())
}

/// Group counts and group statistics of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub n0: usize,
    pub n1: usize,
    pub f0: f64,
    pub f1: f64,
}

impl BatchStats {
    /// Group mean predictions under `mask`.
    pub fn from_predictions(mask: &[bool], y_hat: &[f64]) -> Self {
        let (n0, n1, f0, f1) = group_means(mask, y_hat);
        Self { n0, n1, f0, f1 }
    }
}

/// Aggregate bound and the realised aggregate gap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateBound {
    /// `ε + Δ_p·R·(1/p̄ + 1/(1-p̄))`.
    pub bound: f64,
    /// `|F_0 - F_1|` with sample-weighted aggregate statistics.
    pub realized: f64,
    /// `max_b |p_b - p̄|`, `p_b` the group-0 share of batch `b`.
    pub delta_p: f64,
    /// `max_{b,i} |F_{b,i}|`.
    pub r: f64,
    pub p_bar: f64,
}

pub fn lemma1_bound(stats: &[BatchStats], epsilon: f64) -> Result<AggregateBound> {
    if stats.is_empty() {
        return Err(Error::EmptyStream);
    }
    if let Some((b, _)) = stats.iter().enumerate().find(|(_, s)| s.n0 == 0 || s.n1 == 0) {
        return Err(Error::DegenerateGroup(format!("batch {b} lacks a group")));
    }
    let total0: f64 = stats.iter().map(|s| s.n0 as f64).sum();
    let total1: f64 = stats.iter().map(|s| s.n1 as f64).sum();
    let p_bar = total0 / (total0 + total1);
    if p_bar <= 0.0 || p_bar >= 1.0 {
        return Err(Error::DegenerateProportion(p_bar));
    }
    let delta_p = stats
        .iter()
        .map(|s| (s.n0 as f64 / (s.n0 + s.n1) as f64 - p_bar).abs())
        .fold(0.0, f64::max);
    let r = stats.iter().map(|s| s.f0.abs().max(s.f1.abs())).fold(0.0, f64::max);
    let f0: f64 = stats.iter().map(|s| s.n0 as f64 * s.f0).sum::<f64>() / total0;
    let f1: f64 = stats.iter().map(|s| s.n1 as f64 * s.f1).sum::<f64>() / total1;
    Ok(AggregateBound {
        bound: epsilon + delta_p * r * (1.0 / p_bar + 1.0 / (1.0 - p_bar)),
        realized: (f0 - f1).abs(),
        delta_p,
        r,
        p_bar,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qp::softshrink;

    fn parity() -> FairnessSpec {
        FairnessSpec::mean_parity("g", 0.05)
    }

    fn cfg() -> StreamConfig {
        StreamConfig { eta: 0.5, b_tau: 256, epsilon: 0.05, ..Default::default() }
    }

    #[test]
    fn feasible_batch_keeps_zero_dual() {
        let mut st = DualControllerState::new(cfg()).unwrap();
        let masks = GroupMasks::single("g", vec![false, true]);
        let out = st.step(&[0.3, 0.29], &masks, None, &parity(), &SolverConfig::default()).unwrap();
        assert_eq!(out.y_hat, vec![0.3, 0.29]);
        assert_eq!(st.lambda, 0.0);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn hard_branch_meets_tolerance() {
        let config = StreamConfig { b_tau: 4, ..cfg() };
        let mut st = DualControllerState::new(config).unwrap();
        let masks = GroupMasks::single("g", vec![false, true, false, true]);
        let out = st
            .step(&[1.0, -1.0, 2.0, 0.0], &masks, None, &parity(), &SolverConfig::default())
            .unwrap();
        assert_eq!(out.record.branch, Branch::Hard);
        assert!(out.record.gap <= 0.05 + 1e-9);
        assert_eq!(st.t, 0);
        let degenerate = GroupMasks::single("g", vec![true; 4]);
        assert!(st.step(&[0.0; 4], &degenerate, None, &parity(), &SolverConfig::default()).is_err());
    }

    #[test]
    fn small_batch_trace_matches_hand_computation() {
        // z = [1, 0], a = [1, -1]: gap = max(1 - 2λ, 0), w = 2(gap - ε)
        let mut st = DualControllerState::new(cfg()).unwrap();
        let masks = GroupMasks::single("g", vec![false, true]);
        let mut lambda = 0.0f64;
        for t in 0..5 {
            let out = st.step(&[1.0, 0.0], &masks, None, &parity(), &SolverConfig::default()).unwrap();
            let gap = softshrink(1.0, 2.0 * lambda).abs();
            let w = 2.0 * (gap - 0.05);
            lambda = (lambda + 0.5 / ((t + 1) as f64).sqrt() * w).max(0.0);
            assert!((out.record.gap - gap).abs() < 1e-12, "step {t}");
            assert!((st.lambda - lambda).abs() < 1e-12, "step {t}");
        }
        // first update: λ = 0.5 * 2 * 0.95
        assert!((st.log[0].lambda - 0.95).abs() < 1e-15);
        assert_eq!(st.log[1].gap, 0.0);
    }

    #[test]
    fn gaps_shrink_as_dual_grows() {
        // unbiased noise around a fixed offset; λ rises until the shrinkage bites
        let mut st = DualControllerState::new(StreamConfig { eta: 0.05, ..cfg() }).unwrap();
        let masks = GroupMasks::single("g", vec![false, true]);
        let mut prev_gap = f64::INFINITY;
        let mut prev_lambda = 0.0;
        for _ in 0..5 {
            let out = st.step(&[1.0, 0.0], &masks, None, &parity(), &SolverConfig::default()).unwrap();
            assert!(out.record.gap < prev_gap || out.record.gap == 0.0);
            assert!(st.lambda >= prev_lambda);
            prev_gap = out.record.gap;
            prev_lambda = st.lambda;
        }
    }

    #[test]
    fn missing_group_policies() {
        let spec = parity();
        let masks = GroupMasks::single("g", vec![true, true]);
        let mut st = DualControllerState::new(cfg()).unwrap();
        let out = st.step(&[1.0, 0.0], &masks, None, &spec, &SolverConfig::default()).unwrap();
        assert_eq!(out.record.branch, Branch::Skip);
        assert_eq!(st.total_size, 2.0);
        assert_eq!(st.t, 0);
        assert_eq!(st.aggregate_violation().unwrap(), 0.0);

        let mut st = DualControllerState::new(StreamConfig {
            missing_group: MissingGroupPolicy::Exclude,
            ..cfg()
        })
        .unwrap();
        st.step(&[1.0, 0.0], &masks, None, &spec, &SolverConfig::default()).unwrap();
        assert_eq!(st.aggregate_violation(), Err(Error::EmptyStream));
    }

    #[test]
    fn aggregate_single_batch() {
        let mut st = DualControllerState::new(StreamConfig { epsilon: 0.0, ..cfg() }).unwrap();
        let masks = GroupMasks::single("g", vec![false, false, true, true]);
        // λ = 0 on the first batch, so the output is the raw input with gap 0.2
        st.step(&[0.2, 0.2, 0.0, 0.0], &masks, None, &FairnessSpec::mean_parity("g", 0.0), &SolverConfig::default())
            .unwrap();
        assert!((st.aggregate_violation().unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(DualControllerState::new(cfg()).unwrap().aggregate_violation(), Err(Error::EmptyStream));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut st = DualControllerState::new(cfg()).unwrap();
        let masks = GroupMasks::single("g", vec![false, true, true]);
        for k in 0..7 {
            let z = [0.1 * k as f64, -0.3, 0.7];
            st.step(&z, &masks, None, &parity(), &SolverConfig::default()).unwrap();
        }
        let back = DualControllerState::from_checkpoint(&st.to_checkpoint().unwrap()).unwrap();
        assert_eq!(back, st);
    }

    #[test]
    fn log_file_appends() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let rec = StepRecord {
            t: 1,
            batch_size: 4,
            branch: Branch::PrimalDual,
            gap: 0.25,
            weighted_violation: 0.8,
            lambda: 0.2,
            running_weighted_avg: 0.25,
        };
        append_log(&path, &[rec]).unwrap();
        append_log(&path, &[StepRecord { t: 2, ..rec }]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], LOG_HEADER);
        assert!(lines[2].starts_with("2,4,primal_dual,2.5000000000000000e-1,"));
    }

    #[test]
    fn lemma1_examples() {
        // identical proportions: Δ_p = 0
        let stats = [
            BatchStats { n0: 2, n1: 2, f0: 0.3, f1: 0.28 },
            BatchStats { n0: 4, n1: 4, f0: -0.5, f1: -0.47 },
        ];
        let b = lemma1_bound(&stats, 0.05).unwrap();
        assert_eq!(b.delta_p, 0.0);
        assert_eq!(b.bound, 0.05);
        assert!(b.realized <= 0.05);

        // p̄ = 0.5, Δ_p = 0.1, R = 1 -> 0.05 + 0.1 * (2 + 2)
        let stats = [
            BatchStats { n0: 6, n1: 4, f0: 1.0, f1: 1.0 },
            BatchStats { n0: 4, n1: 6, f0: 0.0, f1: 0.0 },
        ];
        let b = lemma1_bound(&stats, 0.05).unwrap();
        assert!((b.p_bar - 0.5).abs() < 1e-15);
        assert!((b.delta_p - 0.1).abs() < 1e-15);
        assert_eq!(b.r, 1.0);
        assert!((b.bound - 0.45).abs() < 1e-15);
        assert!(b.realized <= b.bound);
    }

    #[test]
    fn lemma1_errors() {
        assert_eq!(lemma1_bound(&[], 0.1), Err(Error::EmptyStream));
        let stats = [BatchStats { n0: 0, n1: 3, f0: 0.0, f1: 1.0 }];
        assert!(matches!(lemma1_bound(&stats, 0.1), Err(Error::DegenerateGroup(_))));
    }
}
