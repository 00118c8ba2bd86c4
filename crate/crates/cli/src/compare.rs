//! Cross product of scenarios, batch regimes, repeats and methods.

use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use fairlayer::datagen::{generate_with_ratios, DEFAULT_RATIOS};
use fairlayer::format::num;
use fairlayer::nn::{self, batch_order, score, LambdaTrial};
use fairlayer::{
    compile, project, scenario_grid, Dataset, DualControllerState, EvalMode, FairnessSpec, Method, Mlp,
    Samples, ScenarioConfig, SolverConfig, StreamConfig,
};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::commands::{dataset_specs, write_json};
use crate::config::{Regime, StreamSection, TrainSection};
use crate::{CliError, CliResult, CompareArgs, Context};

/// Everything that determines a comparison's results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub seed: u64,
    pub scenarios: Vec<usize>,
    pub methods: Vec<Method>,
    pub regimes: Vec<Regime>,
    pub n: usize,
    pub d: usize,
    pub repeats: usize,
    pub train: TrainSection,
    pub stream: StreamSection,
}

impl Plan {
    pub fn from_context(ctx: &Context, args: &CompareArgs) -> Self {
        let mut section = if args.full { crate::config::CompareSection::full() } else { ctx.config.compare.clone() };
        if let Some(s) = &args.scenarios {
            section.scenarios = s.clone();
        }
        if let Some(m) = &args.methods {
            section.methods = m.clone();
        }
        if let Some(n) = args.n {
            section.n = n;
        }
        if let Some(d) = args.d {
            section.d = d;
        }
        if let Some(r) = args.repeats {
            section.repeats = r;
        }
        let mut train = ctx.config.train.clone();
        if let Some(e) = args.epochs {
            train.max_epochs = e;
        }
        Plan {
            seed: ctx.config.seed,
            scenarios: section.scenarios,
            methods: section.methods,
            regimes: section.regimes,
            n: section.n,
            d: section.d,
            repeats: section.repeats,
            train,
            stream: ctx.config.stream.clone(),
        }
    }

    /// sha256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("plan serialises");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    fn validate(&self) -> CliResult<()> {
        if self.scenarios.is_empty() || self.methods.is_empty() || self.regimes.is_empty() || self.repeats == 0 {
            return Err(CliError::Usage("empty comparison".into()));
        }
        if let Some(k) = self.scenarios.iter().find(|&&k| k >= 32) {
            return Err(CliError::Usage(format!("scenario {k} out of range 0..32")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub scenario: usize,
    pub regime: String,
    pub b_train: usize,
    pub b_infer: usize,
    pub repeat: usize,
    pub method: Method,
    pub test_mse: f64,
    pub parity_gap: f64,
    pub box_violation: f64,
    pub satisfied: bool,
    /// 1 = lowest test MSE among methods of the same scenario, regime and repeat.
    pub rank: usize,
    /// `(L - F) / F × 100` against the F-Layer row.
    pub relative_loss_pct: Option<f64>,
    pub lambda: Option<f64>,
    pub lambda_violated: Option<bool>,
    pub lambda_trials: Vec<LambdaTrial>,
    pub changed: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub scenario: usize,
    pub regime: String,
    pub repeat: usize,
    pub method: Method,
    pub error: String,
    pub infeasible: bool,
}

/// Reproducible part of a comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Payload {
    pub config_hash: String,
    pub plan: Plan,
    pub rows: Vec<Row>,
    pub failures: Vec<Failure>,
}

impl Payload {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("payload serialises");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "scenario,regime,repeat,method,test_mse,parity_gap,box_violation,satisfied,rank,relative_loss_pct,lambda,lambda_violated,changed,seed\n",
        );
        let opt = |v: Option<f64>| v.map(num).unwrap_or_default();
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.scenario,
                r.regime,
                r.repeat,
                r.method.name(),
                num(r.test_mse),
                num(r.parity_gap),
                num(r.box_violation),
                r.satisfied,
                r.rank,
                opt(r.relative_loss_pct),
                opt(r.lambda),
                r.lambda_violated.map(|b| b.to_string()).unwrap_or_default(),
                r.changed,
                r.seed
            ));
        }
        out
    }

    pub fn rows_for(&self, method: Method) -> impl Iterator<Item = &Row> {
        self.rows.iter().filter(move |r| r.method == method)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CellTiming {
    pub scenario: usize,
    pub regime: String,
    pub repeat: usize,
    pub method: Method,
    pub seconds: f64,
}

pub struct Outcome {
    pub payload: Payload,
    pub timings: Vec<CellTiming>,
}

struct Cell<'a> {
    data: &'a Prepared,
    regime: Regime,
    method: Method,
}

struct Prepared {
    scenario: usize,
    repeat: usize,
    seed: u64,
    ds: Dataset,
}

struct CellResult {
    row: Row,
    seconds: f64,
}

fn prepare(plan: &Plan, scenario: usize, repeat: usize) -> fairlayer::Result<Prepared> {
    let base = ScenarioConfig { seed: plan.seed + 1000 * repeat as u64, ..ScenarioConfig::default() };
    let cfg = scenario_grid(&base)[scenario].clone().scaled(plan.n, plan.d);
    let ds = generate_with_ratios(&cfg, DEFAULT_RATIOS, true)?;
    Ok(Prepared { scenario, repeat, seed: cfg.seed, ds })
}

/// Test-split outputs of a trained model under a batch regime.
fn infer(
    model: &Mlp,
    method: Method,
    mode: EvalMode,
    te: &Samples,
    specs: &[FairnessSpec],
    regime: Regime,
    stream: &StreamSection,
    seed: u64,
    solver: &SolverConfig,
) -> fairlayer::Result<(Vec<f64>, usize)> {
    let z = model.forward(&te.x)?;
    if method.is_penalty() {
        let pred = match mode {
            EvalMode::Reparam { lo, hi } => nn::box_reparam(&z, lo, hi).0,
            _ => z,
        };
        return Ok((pred, 0));
    }
    let mut y = z.clone();
    if regime.b_infer == 0 {
        let set = compile(specs, &te.masks, Some(&te.y), z.len())?;
        y = project(&DVector::from_column_slice(&z), &set, solver)?.y_star.iter().copied().collect();
    } else {
        let mask = te.masks.get(specs[0].attribute.as_deref().unwrap_or_default());
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1f);
        let batches = batch_order(mask, te.len(), regime.b_infer, true, &mut rng);
        let mut ctl = DualControllerState::new(StreamConfig {
            eta: stream.eta,
            b_tau: stream.b_tau,
            epsilon: specs[0].tolerance,
            missing_group: stream.missing_group,
        })?;
        for idx in batches {
            let batch = te.select(&idx);
            let zb: Vec<f64> = idx.iter().map(|&i| z[i]).collect();
            let out = if regime.b_infer >= stream.b_tau {
                let set = compile(specs, &batch.masks, Some(&batch.y), zb.len())?;
                project(&DVector::from_column_slice(&zb), &set, solver)?.y_star.iter().copied().collect()
            } else {
                ctl.step(&zb, &batch.masks, Some(&batch.y), &specs[0], solver)?.y_hat
            };
            for (&i, v) in idx.iter().zip(out) {
                y[i] = v;
            }
        }
    }
    let changed = y.iter().zip(&z).filter(|(a, b)| (*a - *b).abs() > nn::CHANGE_TOL).count();
    Ok((y, changed))
}

fn run_cell(plan: &Plan, cell: &Cell) -> fairlayer::Result<CellResult> {
    let start = Instant::now();
    let p = cell.data;
    let ds = &p.ds;
    let specs = dataset_specs(ds, plan.train.epsilon);
    let mut section = plan.train.clone();
    section.b_train = cell.regime.b_train;
    let cfg = section.train_config(cell.method, ds.config.bounds(), p.seed);
    let tr = Samples::from_dataset(ds, &ds.split.train)?;
    let va = Samples::from_dataset(ds, &ds.split.val)?;
    let te = Samples::from_dataset(ds, &ds.split.test)?;
    let arch = section.architecture();
    let factory = || Mlp::new(ds.width(), &arch, p.seed);
    let (model, lambda, violated, trials, cfg) = if cell.method == Method::Penalty {
        let sel = nn::select_penalty_lambda(&factory, &tr, &va, &specs, &section.lambda_grid, &cfg)?;
        let cfg = fairlayer::TrainConfig { penalty_lambda: sel.lambda, ..cfg };
        (sel.outcome.model, Some(sel.lambda), Some(sel.violated), sel.trials, cfg)
    } else {
        let out = nn::train(factory()?, &tr, &va, &specs, &cfg)?;
        let lambda = cell.method.is_penalty().then(|| cfg.lambda());
        (out.model, lambda, None, Vec::new(), cfg)
    };
    let (pred, changed) =
        infer(&model, cell.method, cfg.eval_mode(), &te, &specs, cell.regime, &plan.stream, p.seed, &cfg.solver)?;
    let m = score(pred, changed, &te, &specs, cfg.loss)?;
    let gaps = m.max_gap_per_spec();
    let row = Row {
        scenario: p.scenario,
        regime: cell.regime.label(),
        b_train: cell.regime.b_train,
        b_infer: cell.regime.b_infer,
        repeat: p.repeat,
        method: cell.method,
        test_mse: m.loss,
        parity_gap: gaps[0],
        box_violation: gaps[1],
        satisfied: m.all_satisfied(),
        rank: 0,
        relative_loss_pct: None,
        lambda,
        lambda_violated: violated,
        lambda_trials: trials,
        changed,
        seed: p.seed,
    };
    Ok(CellResult { row, seconds: start.elapsed().as_secs_f64() })
}

fn rank(rows: &mut [Row]) {
    let keys: Vec<(usize, String, usize)> = rows.iter().map(|r| (r.scenario, r.regime.clone(), r.repeat)).collect();
    for key in &keys {
        let mut idx: Vec<usize> =
            (0..rows.len()).filter(|&i| (rows[i].scenario, &rows[i].regime, rows[i].repeat) == (key.0, &key.1, key.2)).collect();
        idx.sort_by(|&a, &b| rows[a].test_mse.total_cmp(&rows[b].test_mse).then(a.cmp(&b)));
        let reference = idx.iter().find(|&&i| rows[i].method == Method::FLayer).map(|&i| rows[i].test_mse);
        for (r, &i) in idx.iter().enumerate() {
            rows[i].rank = r + 1;
            rows[i].relative_loss_pct = reference.map(|f| (rows[i].test_mse - f) / f * 100.0);
        }
    }
}

/// Run every cell in parallel; cells that fail are reported instead of aborting the run.
pub fn run(plan: &Plan) -> CliResult<Outcome> {
    plan.validate()?;
    let keys: Vec<(usize, usize)> =
        plan.scenarios.iter().flat_map(|&s| (0..plan.repeats).map(move |r| (s, r))).collect();
    let prepared: Vec<Prepared> =
        keys.par_iter().map(|&(s, r)| prepare(plan, s, r)).collect::<fairlayer::Result<_>>()?;
    let cells: Vec<Cell> = prepared
        .iter()
        .flat_map(|p| {
            plan.regimes
                .iter()
                .flat_map(move |&regime| plan.methods.iter().map(move |&method| Cell { data: p, regime, method }))
        })
        .collect();
    let results: Vec<fairlayer::Result<CellResult>> = cells.par_iter().map(|c| run_cell(plan, c)).collect();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut timings = Vec::new();
    for (cell, res) in cells.iter().zip(results) {
        let (scenario, repeat, regime) = (cell.data.scenario, cell.data.repeat, cell.regime.label());
        match res {
            Ok(r) => {
                timings.push(CellTiming { scenario, regime, repeat, method: cell.method, seconds: r.seconds });
                rows.push(r.row);
            }
            Err(e) => failures.push(Failure {
                scenario,
                regime,
                repeat,
                method: cell.method,
                infeasible: matches!(e, fairlayer::Error::Infeasible | fairlayer::Error::InfeasibleBatchConstraints { .. }),
                error: e.to_string(),
            }),
        }
    }
    rank(&mut rows);
    Ok(Outcome { payload: Payload { config_hash: plan.hash(), plan: plan.clone(), rows, failures }, timings })
}

#[derive(Serialize)]
struct Meta<'a> {
    config_hash: &'a str,
    started_unix: f64,
    finished_unix: f64,
    runtime_seconds: f64,
    threads: usize,
    cells: &'a [CellTiming],
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn command(ctx: &Context, args: &CompareArgs) -> CliResult<()> {
    let plan = Plan::from_context(ctx, args);
    if args.full {
        eprintln!(
            "warning: the full grid trains {} models at n={}, this takes hours",
            plan.scenarios.len() * plan.regimes.len() * plan.methods.len() * plan.repeats,
            plan.n
        );
    }
    let started = unix_now();
    let clock = Instant::now();
    let outcome = run(&plan)?;
    let stem = ctx.output(&args.out)?;
    let with_ext = |ext: &str| stem.with_file_name(format!("{}{ext}", stem.file_name().unwrap_or_default().to_string_lossy()));
    write(&with_ext(".csv"), &outcome.payload.to_csv())?;
    write(&with_ext(".json"), &outcome.payload.to_json())?;
    write_json(
        &with_ext(".meta.json"),
        &Meta {
            config_hash: &outcome.payload.config_hash,
            started_unix: started,
            finished_unix: unix_now(),
            runtime_seconds: clock.elapsed().as_secs_f64(),
            threads: rayon::current_num_threads(),
            cells: &outcome.timings,
        },
    )?;
    for r in &outcome.payload.rows {
        println!(
            "scenario {:>2} {:>9} {:<14} mse {} gap {} rank {}{}",
            r.scenario,
            r.regime,
            r.method.name(),
            num(r.test_mse),
            num(r.parity_gap),
            r.rank,
            if r.satisfied { "" } else { " VIOLATED" }
        );
    }
    let failures = &outcome.payload.failures;
    for f in failures {
        eprintln!("cell scenario {} {} {} failed: {}", f.scenario, f.regime, f.method.name(), f.error);
    }
    match failures.first() {
        None => Ok(()),
        Some(_) if failures.iter().all(|f| f.infeasible) => {
            Err(CliError::Infeasible(format!("{} cells infeasible", failures.len())))
        }
        Some(_) => Err(CliError::Failed(format!("{} cells failed", failures.len()))),
    }
}

