use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Gradients, Mlp};
use crate::constraints::{compile, gap, spec_terms, FairnessSpec, GapValue, GroupMasks};
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::kkt::LayerJacobian;
use crate::qp::{project, SolverConfig};

/// Slack on top of the constraint tolerance when counting satisfied specs.
pub const SATISFACTION_SLACK: f64 = 1e-8;
/// Outputs moving further than this under post-hoc projection count as changed.
pub const CHANGE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[serde(rename = "flayer")]
    FLayer,
    Projection,
    Penalty,
    StrictPenalty,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::FLayer, Method::Projection, Method::Penalty, Method::StrictPenalty];

    pub fn name(&self) -> &'static str {
        match self {
            Method::FLayer => "flayer",
            Method::Projection => "projection",
            Method::Penalty => "penalty",
            Method::StrictPenalty => "strict-penalty",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn is_penalty(&self) -> bool {
        matches!(self, Method::Penalty | Method::StrictPenalty)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    BceWithLogits,
}

impl LossKind {
    pub fn value(&self, out: &[f64], y: &[f64]) -> f64 {
        let n = out.len() as f64;
        match self {
            LossKind::Mse => out.iter().zip(y).map(|(o, t)| (o - t).powi(2)).sum::<f64>() / n,
            LossKind::BceWithLogits => {
                out.iter().zip(y).map(|(&z, &t)| softplus(z) - t * z).sum::<f64>() / n
            }
        }
    }

    pub fn grad(&self, out: &[f64], y: &[f64]) -> Vec<f64> {
        let n = out.len() as f64;
        match self {
            LossKind::Mse => out.iter().zip(y).map(|(o, t)| 2.0 * (o - t) / n).collect(),
            LossKind::BceWithLogits => out.iter().zip(y).map(|(&z, &t)| (sigmoid(z) - t) / n).collect(),
        }
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ŷ = lo + (hi - lo)σ(z)` and its derivative.
pub fn box_reparam(z: &[f64], lo: f64, hi: f64) -> (Vec<f64>, Vec<f64>) {
    z.iter()
        .map(|&v| {
            let s = sigmoid(v);
            (lo + (hi - lo) * s, (hi - lo) * s * (1.0 - s))
        })
        .unzip()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub method: Method,
    pub learning_rate: f64,
    pub decay_factor: f64,
    /// Epochs without validation improvement before the rate decays.
    pub decay_patience: usize,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub b_train: usize,
    pub loss: LossKind,
    pub penalty_lambda: f64,
    pub strict_lambda: f64,
    pub lambda_grid: Vec<f64>,
    /// Sigmoid reparameterisation bounds for the penalty methods.
    pub box_bounds: Option<(f64, f64)>,
    /// Squared instead of absolute gap penalty.
    pub squared_penalty: bool,
    pub stratified: bool,
    pub seed: u64,
    #[serde(skip)]
    pub solver: SolverConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::FLayer,
            learning_rate: 1e-4,
            decay_factor: 0.66,
            decay_patience: 8,
            early_stop_patience: 25,
            max_epochs: 200,
            b_train: 256,
            loss: LossKind::Mse,
            penalty_lambda: 1.0,
            strict_lambda: 5000.0,
            lambda_grid: Vec::new(),
            box_bounds: None,
            squared_penalty: false,
            stratified: true,
            seed: 0,
            solver: SolverConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0) || !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad("learning rate must be > 0 and decay factor in (0, 1]");
        }
        if self.decay_patience == 0 || self.early_stop_patience == 0 || self.b_train == 0 {
            return bad("patience and batch size must be >= 1");
        }
        if !(self.penalty_lambda >= 0.0) || !(self.strict_lambda >= 0.0) || self.lambda_grid.iter().any(|l| !(*l >= 0.0)) {
            return bad("penalty weights must be >= 0");
        }
        if let Some((lo, hi)) = self.box_bounds {
            if !(lo < hi) {
                return Err(Error::InvalidBounds { lower: lo, upper: hi });
            }
        }
        self.solver.validate()
    }

    /// Penalty weight used by the configured method.
    pub fn lambda(&self) -> f64 {
        match self.method {
            Method::StrictPenalty => self.strict_lambda,
            Method::Penalty => self.penalty_lambda,
            _ => 0.0,
        }
    }

    pub fn eval_mode(&self) -> EvalMode {
        match (self.method, self.box_bounds) {
            (Method::FLayer | Method::Projection, _) => EvalMode::Project,
            (_, Some((lo, hi))) => EvalMode::Reparam { lo, hi },
            (_, None) => EvalMode::Raw,
        }
    }
}

/// Column-major samples with targets and group masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    /// `features × n`.
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    pub masks: GroupMasks,
}

impl Samples {
    pub fn new(x: DMatrix<f64>, y: Vec<f64>, masks: GroupMasks) -> Result<Self> {
        if x.ncols() != y.len() || masks.len() != y.len() {
            return Err(Error::DimensionMismatch("samples, targets and masks differ in length".into()));
        }
        Ok(Self { x, y, masks })
    }

    /// Rows `idx` of a dataset; protected column `c` becomes mask `x{c+1}`.
    pub fn from_dataset(ds: &Dataset, idx: &[usize]) -> Result<Self> {
        let x = ds.x.select_rows(idx).transpose();
        let mut masks = GroupMasks::new(idx.len());
        for &c in &ds.protected_columns {
            let values: Vec<f64> = idx.iter().map(|&i| ds.x[(i, c)]).collect();
            masks.insert_binary(format!("x{}", c + 1), &values)?;
        }
        Samples::new(x, idx.iter().map(|&i| ds.y[i]).collect(), masks)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select_columns(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            masks: self.masks.select(idx),
        }
    }
}

fn stratifying_mask<'a>(specs: &[FairnessSpec], masks: &'a GroupMasks) -> Option<&'a [bool]> {
    let spec = specs.iter().find(|s| s.is_group_criterion())?;
    match &spec.attribute {
        Some(a) => masks.get(a),
        None => masks.attributes().next().and_then(|a| masks.get(a)),
    }
}

/// Batch index lists for one epoch.
///
/// Stratified order shuffles each group and interleaves them so every batch
/// holds close to the overall group share; all batches have at least `b`
/// samples (the remainder is spread over them).
pub fn batch_order(mask: Option<&[bool]>, n: usize, b: usize, stratified: bool, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let count = (n / b.max(1)).max(1);
    let bounds: Vec<usize> = (0..=count).map(|k| k * n / count).collect();
    let order: Vec<usize> = match (stratified, mask) {
        (true, Some(mask)) => {
            let mut g1: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
            let mut g0: Vec<usize> = (0..n).filter(|&i| !mask[i]).collect();
            g0.shuffle(rng);
            g1.shuffle(rng);
            let mut out = Vec::with_capacity(n);
            let (mut i0, mut i1) = (0, 0);
            for w in bounds.windows(2) {
                let take1 = (w[1] * g1.len()).div_ceil(n.max(1)).min(g1.len()) - i1;
                let take0 = (w[1] - w[0]) - take1;
                out.extend(&g1[i1..i1 + take1]);
                out.extend(&g0[i0..i0 + take0]);
                i1 += take1;
                i0 += take0;
            }
            out
        }
        _ => {
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(rng);
            all
        }
    };
    bounds.windows(2).map(|w| order[w[0]..w[1]].to_vec()).collect()
}

fn penalty_terms(
    specs: &[FairnessSpec],
    masks: &GroupMasks,
    y: &[f64],
) -> Result<Vec<crate::constraints::GapTerm>> {
    let mut out = Vec::new();
    for spec in specs.iter().filter(|s| s.is_group_criterion()) {
        out.extend(spec_terms(spec, masks, Some(y))?.0);
    }
    Ok(out)
}

/// `base(ŷ, y) + λ Σ_terms |gap|` (or `gap²`) over the group criteria in `specs`.
pub fn penalty_objective(
    y_hat: &[f64],
    y: &[f64],
    masks: &GroupMasks,
    specs: &[FairnessSpec],
    lambda: f64,
    loss: LossKind,
    squared: bool,
) -> Result<f64> {
    let base = loss.value(y_hat, y);
    if lambda == 0.0 {
        return Ok(base);
    }
    let terms = penalty_terms(specs, masks, y)?;
    let pen: f64 = terms
        .iter()
        .map(|t| if squared { t.signed(y_hat).powi(2) } else { t.value(y_hat) })
        .sum();
    Ok(base + lambda * pen)
}

fn penalty_grad(y_hat: &[f64], terms: &[crate::constraints::GapTerm], lambda: f64, squared: bool, out: &mut [f64]) {
    for t in terms {
        let s = t.signed(y_hat);
        let w = if squared { 2.0 * s } else { s.signum() * (s != 0.0) as u8 as f64 };
        for (o, c) in out.iter_mut().zip(&t.coeffs) {
            *o += lambda * w * c;
        }
    }
}

/// Training loss of one batch under the configured method and its parameter gradients.
pub fn loss_and_grad(model: &Mlp, batch: &Samples, specs: &[FairnessSpec], cfg: &TrainConfig) -> Result<(f64, Gradients)> {
    let (z, cache) = model.forward_cached(&batch.x)?;
    let (loss, dz) = match cfg.method {
        Method::FLayer => {
            let set = compile(specs, &batch.masks, Some(&batch.y), z.len())?;
            let r = project(&DVector::from_column_slice(&z), &set, &cfg.solver)?;
            let y_star: Vec<f64> = r.y_star.iter().copied().collect();
            let dy = DVector::from_vec(cfg.loss.grad(&y_star, &batch.y));
            let dz = LayerJacobian::new(&r, &set, &cfg.solver)?.vjp(&dy)?;
            (cfg.loss.value(&y_star, &batch.y), dz.iter().copied().collect())
        }
        Method::Projection => (cfg.loss.value(&z, &batch.y), cfg.loss.grad(&z, &batch.y)),
        Method::Penalty | Method::StrictPenalty => {
            let lambda = cfg.lambda();
            let (y_hat, dydz) = match cfg.box_bounds {
                Some((lo, hi)) => box_reparam(&z, lo, hi),
                None => (z.clone(), vec![1.0; z.len()]),
            };
            let mut g = cfg.loss.grad(&y_hat, &batch.y);
            let mut loss = cfg.loss.value(&y_hat, &batch.y);
            if lambda > 0.0 {
                let terms = penalty_terms(specs, &batch.masks, &batch.y)?;
                penalty_grad(&y_hat, &terms, lambda, cfg.squared_penalty, &mut g);
                loss = penalty_objective(&y_hat, &batch.y, &batch.masks, specs, lambda, cfg.loss, cfg.squared_penalty)?;
            }
            if cfg.box_bounds.is_some() {
                for (gi, d) in g.iter_mut().zip(&dydz) {
                    *gi *= d;
                }
            }
            (loss, g)
        }
    };
    Ok((loss, model.backward(&cache, &dz)))
}

/// How predictions are produced at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum EvalMode {
    Raw,
    /// Project the whole split onto the compiled constraints.
    Project,
    Reparam { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    pub gaps: Vec<GapValue>,
    /// Specs whose every term is within tolerance.
    pub satisfied: usize,
    pub total: usize,
    /// Outputs moved by the projection.
    pub changed: usize,
    #[serde(skip)]
    pub predictions: Vec<f64>,
}

impl Metrics {
    pub fn all_satisfied(&self) -> bool {
        self.satisfied == self.total
    }

    /// Largest gap of each spec.
    pub fn max_gap_per_spec(&self) -> Vec<f64> {
        let mut out = vec![0.0f64; self.total];
        for g in &self.gaps {
            out[g.spec] = out[g.spec].max(g.value);
        }
        out
    }
}

pub fn evaluate(
    model: &Mlp,
    data: &Samples,
    specs: &[FairnessSpec],
    mode: EvalMode,
    loss: LossKind,
    solver: &SolverConfig,
) -> Result<Metrics> {
    let z = model.forward(&data.x)?;
    let (pred, changed) = match mode {
        EvalMode::Raw => (z, 0),
        EvalMode::Reparam { lo, hi } => (box_reparam(&z, lo, hi).0, 0),
        EvalMode::Project => {
            let set = compile(specs, &data.masks, Some(&data.y), z.len())?;
            let y = project(&DVector::from_column_slice(&z), &set, solver)?.y_star;
            let changed = y.iter().zip(&z).filter(|(a, b)| (*a - *b).abs() > CHANGE_TOL).count();
            (y.iter().copied().collect(), changed)
        }
    };
    score(pred, changed, data, specs, loss)
}

/// Metrics of given predictions for `data`.
pub fn score(pred: Vec<f64>, changed: usize, data: &Samples, specs: &[FairnessSpec], loss: LossKind) -> Result<Metrics> {
    let gaps = gap(specs, &data.masks, Some(&data.y), &pred)?;
    let satisfied = (0..specs.len())
        .filter(|&s| gaps.iter().filter(|g| g.spec == s).all(|g| g.satisfied(SATISFACTION_SLACK)))
        .count();
    Ok(Metrics { loss: loss.value(&pred, &data.y), gaps, satisfied, total: specs.len(), changed, predictions: pred })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_objective: f64,
    pub val_max_gap: Vec<f64>,
    pub val_satisfied: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub model: Mlp,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

fn validation(model: &Mlp, val: &Samples, specs: &[FairnessSpec], cfg: &TrainConfig) -> Result<(Metrics, f64)> {
    // Projection trains the bare network; its layer is applied only at test time
    let mode = if cfg.method == Method::Projection { EvalMode::Raw } else { cfg.eval_mode() };
    let m = evaluate(model, val, specs, mode, cfg.loss, &cfg.solver)?;
    let lambda = cfg.lambda();
    let objective = if cfg.method.is_penalty() && lambda > 0.0 {
        penalty_objective(&m.predictions, &val.y, &val.masks, specs, lambda, cfg.loss, cfg.squared_penalty)?
    } else {
        m.loss
    };
    Ok((m, objective))
}

/// SGD with plateau decay and early stopping on the validation objective.
pub fn train(model: Mlp, train: &Samples, val: &Samples, specs: &[FairnessSpec], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidConfig("empty training or validation split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mask = stratifying_mask(specs, &train.masks).map(<[bool]>::to_vec);
    let mut model = model;
    let mut lr = cfg.learning_rate;
    let (mut best, mut best_model, mut best_epoch) = (f64::INFINITY, model.clone(), 0);
    let (mut since_best, mut since_decay) = (0, 0);
    let mut log = Vec::new();
    let mut stopped_early = false;
    for epoch in 0..cfg.max_epochs {
        let batches = batch_order(mask.as_deref(), train.len(), cfg.b_train, cfg.stratified, &mut rng);
        let mut total = 0.0;
        for (b, idx) in batches.iter().enumerate() {
            let batch = train.select(idx);
            let (loss, grad) = loss_and_grad(&model, &batch, specs, cfg).map_err(|e| match e {
                Error::Infeasible => Error::InfeasibleBatchConstraints { epoch, batch: b },
                e => e,
            })?;
            total += loss;
            model.sgd_step(&grad, lr);
        }
        let (m, objective) = validation(&model, val, specs, cfg)?;
        log.push(EpochRecord {
            epoch,
            learning_rate: lr,
            train_loss: total / batches.len() as f64,
            val_loss: m.loss,
            val_objective: objective,
            val_max_gap: m.max_gap_per_spec(),
            val_satisfied: m.all_satisfied(),
        });
        if objective < best {
            best = objective;
            best_model = model.clone();
            best_epoch = epoch;
            since_best = 0;
            since_decay = 0;
        } else {
            since_best += 1;
            since_decay += 1;
            if since_decay >= cfg.decay_patience {
                lr *= cfg.decay_factor;
                since_decay = 0;
            }
            if since_best >= cfg.early_stop_patience {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainOutcome { model: best_model, log, best_epoch, stopped_early })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaTrial {
    pub lambda: f64,
    pub satisfied: bool,
    pub val_max_gap: Vec<f64>,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct LambdaSelection {
    pub lambda: f64,
    pub index: usize,
    /// No grid value met the constraints; `lambda` is the largest one.
    pub violated: bool,
    pub trials: Vec<LambdaTrial>,
    pub outcome: TrainOutcome,
}

/// Train the penalty method at every grid value and keep the smallest λ whose
/// validation gaps all meet their tolerance.
pub fn select_penalty_lambda(
    factory: &dyn Fn() -> Result<Mlp>,
    train_set: &Samples,
    val: &Samples,
    specs: &[FairnessSpec],
    grid: &[f64],
    cfg: &TrainConfig,
) -> Result<LambdaSelection> {
    if grid.is_empty() || grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidConfig("lambda grid must be nonempty and strictly ascending".into()));
    }
    let mut trials = Vec::with_capacity(grid.len());
    let mut outcomes = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let c = TrainConfig { method: Method::Penalty, penalty_lambda: lambda, ..cfg.clone() };
        let outcome = train(factory()?, train_set, val, specs, &c)?;
        let (m, _) = validation(&outcome.model, val, specs, &c)?;
        trials.push(LambdaTrial { lambda, satisfied: m.all_satisfied(), val_max_gap: m.max_gap_per_spec(), val_loss: m.loss });
        outcomes.push(outcome);
    }
    let (index, violated) = match trials.iter().position(|t| t.satisfied) {
        Some(i) => (i, false),
        None => (grid.len() - 1, true),
    };
    Ok(LambdaSelection { lambda: grid[index], index, violated, trials, outcome: outcomes.swap_remove(index) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, ScenarioConfig};
    use crate::nn::Architecture;
    use rand::Rng;

    fn toy(n: usize, seed: u64) -> Samples {
        let ds = generate(&ScenarioConfig { seed, ..Default::default() }.scaled(n, 6)).unwrap();
        Samples::from_dataset(&ds, &(0..n).collect::<Vec<_>>()).unwrap()
    }

    fn parity_box() -> Vec<FairnessSpec> {
        vec![FairnessSpec::mean_parity("x7", 0.05), FairnessSpec::bounds(-3.5, 3.5)]
    }

    #[test]
    fn penalty_objective_examples() {
        let masks = GroupMasks::single("g", vec![false, true]);
        let specs = [FairnessSpec::mean_parity("g", 0.0)];
        let v = |l| penalty_objective(&[1.0, 0.0], &[1.0, 0.0], &masks, &specs, l, LossKind::Mse, false).unwrap();
        assert_eq!(v(2.0), 2.0);
        assert_eq!(v(0.0), 0.0);
        let c = penalty_objective(&[0.4, 0.4], &[1.0, 0.0], &masks, &specs, 7.0, LossKind::Mse, false).unwrap();
        assert!((c - 0.5 * (0.36 + 0.16)).abs() < 1e-15);
        let sq = penalty_objective(&[1.0, 0.5], &[1.0, 0.5], &masks, &specs, 2.0, LossKind::Mse, true).unwrap();
        assert_eq!(sq, 0.5);
        let empty = GroupMasks::single("g", vec![true, true]);
        assert!(matches!(
            penalty_objective(&[1.0, 0.0], &[1.0, 0.0], &empty, &specs, 1.0, LossKind::Mse, false),
            Err(Error::DegenerateGroup(_))
        ));
    }

    #[test]
    fn group_residual_penalty_form() {
        let masks = GroupMasks::single("g", vec![false, false, true]);
        let specs = [FairnessSpec::group_residual("g", 0.0)];
        let y = [0.0, 1.0, 2.0];
        let y_hat = [1.0, 2.0, 1.0];
        // |mean_0(ŷ - y)| + |mean_1(ŷ - y)| = 1 + 1
        let v = penalty_objective(&y_hat, &y, &masks, &specs, 1.0, LossKind::Mse, false).unwrap();
        assert!((v - (1.0 + 2.0)).abs() < 1e-15);
    }

    #[test]
    fn bce_loss_values() {
        let l = LossKind::BceWithLogits;
        assert!((l.value(&[0.0], &[1.0]) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(l.value(&[800.0], &[1.0]).abs() < 1e-15);
        assert!(l.value(&[-800.0], &[0.0]).abs() < 1e-15);
        assert_eq!(l.grad(&[0.0, 0.0], &[1.0, 0.0]), vec![-0.25, 0.25]);
    }

    #[test]
    fn stratified_batches_contain_both_groups() {
        let mask: Vec<bool> = (0..103).map(|i| i % 5 == 0).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batches = batch_order(Some(&mask), 103, 10, true, &mut rng);
        assert_eq!(batches.len(), 10);
        let mut seen: Vec<usize> = batches.concat();
        seen.sort_unstable();
        assert_eq!(seen, (0..103).collect::<Vec<_>>());
        for b in &batches {
            assert!(b.len() >= 10);
            let ones = b.iter().filter(|&&i| mask[i]).count();
            assert!((ones as f64 - 0.2 * b.len() as f64).abs() <= 1.0, "{ones} of {}", b.len());
        }
    }

    fn fd_check(method: Method, box_bounds: Option<(f64, f64)>, tol: f64) {
        let data = toy(24, 2);
        let mut model = Mlp::new(7, &Architecture { hidden: vec![5, 4], layer_norm: false }, 3).unwrap();
        // move off the zero-bias ReLU kinks
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let jitter: Vec<f64> = model.flat().iter().map(|v| v + 0.1 * rng.random_range(-1.0..1.0)).collect();
        model.set_flat(&jitter).unwrap();
        let specs = vec![FairnessSpec::mean_parity("x7", 0.02), FairnessSpec::bounds(-0.6, 0.6)];
        let cfg = TrainConfig { method, box_bounds, penalty_lambda: 0.7, ..Default::default() };
        let (_, grad) = loss_and_grad(&model, &data, &specs, &cfg).unwrap();
        let g = grad.flat();
        let theta = model.flat();
        let loss_at = |t: &[f64]| {
            let mut m = model.clone();
            m.set_flat(t).unwrap();
            loss_and_grad(&m, &data, &specs, &cfg).unwrap().0
        };
        let h = 1e-6;
        let mut worst = 0.0f64;
        for k in 0..theta.len() {
            let mut t = theta.clone();
            t[k] += h;
            let up = loss_at(&t);
            t[k] -= 2.0 * h;
            let down = loss_at(&t);
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-3);
            worst = worst.max(rel);
        }
        assert!(worst <= tol, "{method:?}: {worst}");
    }

    #[test]
    fn gradients_through_the_layer() {
        fd_check(Method::FLayer, None, 1e-4);
    }

    #[test]
    fn gradients_of_plain_and_penalised_losses() {
        fd_check(Method::Projection, None, 1e-5);
        fd_check(Method::Penalty, Some((-3.5, 3.5)), 1e-5);
    }

    fn split(n: usize) -> (Samples, Samples) {
        let data = toy(n, 4);
        let cut = n * 3 / 4;
        (data.select(&(0..cut).collect::<Vec<_>>()), data.select(&(cut..n).collect::<Vec<_>>()))
    }

    #[test]
    fn zero_penalty_matches_projection_training() {
        let (tr, va) = split(400);
        let specs = parity_box();
        let model = Mlp::new(7, &Architecture::default(), 1).unwrap();
        let base = TrainConfig { learning_rate: 1e-2, max_epochs: 5, b_train: 64, ..Default::default() };
        let p = train(model.clone(), &tr, &va, &specs, &TrainConfig { method: Method::Projection, ..base.clone() }).unwrap();
        let q = train(model, &tr, &va, &specs, &TrainConfig { method: Method::Penalty, penalty_lambda: 0.0, ..base }).unwrap();
        assert_eq!(p.model, q.model);
        let train_losses = |o: &TrainOutcome| o.log.iter().map(|r| r.train_loss).collect::<Vec<_>>();
        assert_eq!(train_losses(&p), train_losses(&q));
    }

    #[test]
    fn strict_penalty_narrows_the_gap() {
        let (tr, va) = split(400);
        let specs = parity_box();
        let model = Mlp::new(7, &Architecture::default(), 6).unwrap();
        let base = TrainConfig { learning_rate: 1e-2, max_epochs: 8, b_train: 64, box_bounds: Some((-3.5, 3.5)), ..Default::default() };
        let free = train(model.clone(), &tr, &va, &specs, &TrainConfig { method: Method::Penalty, penalty_lambda: 0.0, ..base.clone() }).unwrap();
        let strict = train(model, &tr, &va, &specs, &TrainConfig { method: Method::StrictPenalty, ..base }).unwrap();
        let gap = |o: &TrainOutcome| o.log[o.best_epoch].val_max_gap[0];
        assert!(gap(&strict) < gap(&free), "{} vs {}", gap(&strict), gap(&free));
    }

    #[test]
    fn flayer_batches_are_feasible_and_loss_drops() {
        let (tr, va) = split(400);
        let specs = parity_box();
        let model = Mlp::new(7, &Architecture::default(), 2).unwrap();
        let cfg = TrainConfig { learning_rate: 1e-2, max_epochs: 6, b_train: 64, ..Default::default() };
        let out = train(model, &tr, &va, &specs, &cfg).unwrap();
        assert!(out.log.last().unwrap().train_loss < out.log[0].train_loss);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mask = tr.masks.get("x7").unwrap().to_vec();
        for idx in batch_order(Some(&mask), tr.len(), 64, true, &mut rng) {
            let b = tr.select(&idx);
            let m = evaluate(&out.model, &b, &specs, EvalMode::Project, LossKind::Mse, &cfg.solver).unwrap();
            assert!(m.all_satisfied(), "{:?}", m.gaps);
        }
    }

    #[test]
    fn first_epoch_reduces_loss() {
        let (tr, va) = split(600);
        let model = Mlp::new(7, &Architecture::default(), 5).unwrap();
        let cfg = TrainConfig { method: Method::Projection, learning_rate: 1e-2, max_epochs: 1, b_train: 32, ..Default::default() };
        let before = evaluate(&model, &va, &parity_box(), EvalMode::Raw, LossKind::Mse, &cfg.solver).unwrap().loss;
        let out = train(model, &tr, &va, &parity_box(), &cfg).unwrap();
        assert!(out.log[0].val_loss < before);
    }

    #[test]
    fn non_stratified_flayer_reports_degenerate_batches() {
        let (tr, va) = split(200);
        let specs = parity_box();
        let model = Mlp::new(7, &Architecture::default(), 2).unwrap();
        let cfg = TrainConfig { b_train: 1, stratified: false, max_epochs: 1, ..Default::default() };
        assert!(matches!(train(model, &tr, &va, &specs, &cfg), Err(Error::DegenerateGroup(_))));
    }

    #[test]
    fn infeasible_batches_are_reported() {
        let (tr, va) = split(200);
        // sum(y) <= -1 and sum(y) >= 1
        let specs = vec![FairnessSpec {
            kind: crate::constraints::FairnessKind::GenericAffine {
                ineq: vec![vec![1.0; 150], vec![-1.0; 150]],
                ineq_rhs: vec![-1.0, -1.0],
                eq: vec![],
                eq_rhs: vec![],
            },
            tolerance: 0.0,
            attribute: None,
        }];
        let model = Mlp::new(7, &Architecture::default(), 2).unwrap();
        let cfg = TrainConfig { b_train: 150, max_epochs: 1, ..Default::default() };
        assert!(matches!(
            train(model, &tr, &va, &specs, &cfg),
            Err(Error::InfeasibleBatchConstraints { epoch: 0, batch: 0 })
        ));
    }

    #[test]
    fn constant_predictor_metrics() {
        let (_, va) = split(400);
        let mut model = Mlp::new(7, &Architecture { hidden: vec![3], layer_norm: false }, 0).unwrap();
        model.set_flat(&vec![0.0; model.param_count()]).unwrap();
        let m = evaluate(&model, &va, &parity_box(), EvalMode::Raw, LossKind::Mse, &SolverConfig::default()).unwrap();
        assert_eq!(m.gaps[0].value, 0.0);
        let mean_sq = va.y.iter().map(|v| v * v).sum::<f64>() / va.len() as f64;
        assert!((m.loss - mean_sq).abs() < 1e-12);
        assert!(m.all_satisfied());
    }

    #[test]
    fn lambda_selection_flags() {
        let (tr, va) = split(300);
        let specs = parity_box();
        let factory = || Mlp::new(7, &Architecture::default(), 3);
        let cfg = TrainConfig { learning_rate: 1e-2, max_epochs: 3, b_train: 64, box_bounds: Some((-3.5, 3.5)), ..Default::default() };
        // a loose tolerance is met by every λ
        let loose = vec![FairnessSpec::mean_parity("x7", 100.0), FairnessSpec::bounds(-3.5, 3.5)];
        let sel = select_penalty_lambda(&factory, &tr, &va, &loose, &[0.1, 1.0], &cfg).unwrap();
        assert_eq!((sel.index, sel.violated), (0, false));
        // an impossible tolerance is met by none
        let tight = vec![FairnessSpec::mean_parity("x7", 0.0), FairnessSpec::bounds(-3.5, 3.5)];
        let sel = select_penalty_lambda(&factory, &tr, &va, &tight, &[0.0, 0.01], &cfg).unwrap();
        assert_eq!((sel.index, sel.violated, sel.lambda), (1, true, 0.01));
        assert!(select_penalty_lambda(&factory, &tr, &va, &specs, &[1.0, 0.5], &cfg).is_err());
    }
}
