use std::path::{Path, PathBuf};

use fairlayer::datagen::{generate_with_ratios, DEFAULT_RATIOS};
use fairlayer::format::num;
use fairlayer::nn::{self, EpochRecord, LambdaTrial, Metrics};
use fairlayer::streaming::append_log;
use fairlayer::{
    scenario_grid, Dataset, DualControllerState, FairnessSpec, Method, Mlp, Samples, ScenarioConfig,
    SolverConfig, StreamConfig,
};
use serde::Serialize;

use crate::{CliError, CliResult, Context, DatagenArgs, StreamArgs, TrainArgs};

/// Mean parity on the first protected column plus the scenario's output box.
pub fn dataset_specs(ds: &Dataset, epsilon: f64) -> Vec<FairnessSpec> {
    let (lo, hi) = ds.config.bounds();
    vec![
        FairnessSpec::mean_parity(attribute_name(ds), epsilon),
        FairnessSpec::bounds(lo, hi),
    ]
}

pub fn attribute_name(ds: &Dataset) -> String {
    format!("x{}", ds.protected_columns[0] + 1)
}

pub fn load_dataset(ctx: &Context, path: &Path) -> CliResult<Dataset> {
    let path = ctx.input(path);
    Dataset::read(&path).map_err(|e| CliError::io(&path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Failed(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

pub fn datagen(ctx: &Context, args: &DatagenArgs) -> CliResult<()> {
    let seed = ctx.config.seed;
    let mut cfg = match (&args.scenario, &args.scenario_file) {
        (Some(k), None) => {
            let grid = scenario_grid(&ScenarioConfig { seed, ..ScenarioConfig::default() });
            grid.get(*k)
                .cloned()
                .ok_or_else(|| CliError::Usage(format!("scenario {k} out of range 0..{}", grid.len())))?
        }
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
        _ => return Err(CliError::Usage("give --scenario or --scenario-file".into())),
    };
    let n = args.n.or(ctx.config.data.n);
    let d = args.d.or(ctx.config.data.d);
    if n.is_some() || d.is_some() {
        cfg = cfg.clone().scaled(n.unwrap_or(cfg.n), d.unwrap_or(cfg.d));
    }
    let ds = generate_with_ratios(&cfg, DEFAULT_RATIOS, args.stratified_split)?;
    let out = ctx.output(&args.out)?;
    ds.write(&out).map_err(|e| CliError::io(&out, e))?;
    let share = ds.groups().iter().filter(|&&g| g).count() as f64 / ds.n() as f64;
    println!(
        "wrote {} (n={}, d={}, group-1 fraction={}, seed={})",
        out.display(),
        ds.n(),
        cfg.d,
        num(share),
        cfg.seed
    );
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct TrainReport {
    pub method: Method,
    pub seed: u64,
    pub lambda: Option<f64>,
    pub lambda_violated: Option<bool>,
    pub lambda_trials: Vec<LambdaTrial>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub test: Metrics,
}

fn write_train_log(path: &Path, log: &[EpochRecord]) -> CliResult<()> {
    let specs = log.first().map_or(0, |r| r.val_max_gap.len());
    let mut out = String::from("epoch,learning_rate,train_loss,val_loss,val_objective");
    for s in 0..specs {
        out.push_str(&format!(",val_max_gap_{s}"));
    }
    out.push_str(",val_satisfied\n");
    for r in log {
        out.push_str(&format!(
            "{},{},{},{},{}",
            r.epoch,
            num(r.learning_rate),
            num(r.train_loss),
            num(r.val_loss),
            num(r.val_objective)
        ));
        for g in &r.val_max_gap {
            out.push_str(&format!(",{}", num(*g)));
        }
        out.push_str(&format!(",{}\n", r.val_satisfied));
    }
    std::fs::write(path, out).map_err(|e| CliError::io(path, e))
}

pub fn train(ctx: &Context, args: &TrainArgs) -> CliResult<()> {
    let ds = load_dataset(ctx, &args.data)?;
    let mut section = ctx.config.train.clone();
    if let Some(v) = args.epsilon {
        section.epsilon = v;
    }
    if let Some(v) = args.lambda {
        section.lambda = v;
    }
    if let Some(v) = args.epochs {
        section.max_epochs = v;
    }
    if let Some(v) = args.learning_rate {
        section.learning_rate = v;
    }
    if let Some(v) = args.b_train {
        section.b_train = v;
    }
    if args.no_box_reparam {
        section.box_reparam = false;
    }
    let seed = ctx.config.seed;
    let specs = dataset_specs(&ds, section.epsilon);
    let cfg = section.train_config(args.method, ds.config.bounds(), seed);
    let tr = Samples::from_dataset(&ds, &ds.split.train)?;
    let va = Samples::from_dataset(&ds, &ds.split.val)?;
    let te = Samples::from_dataset(&ds, &ds.split.test)?;
    let arch = section.architecture();
    let factory = || Mlp::new(ds.width(), &arch, seed);

    let (outcome, lambda, violated, trials) = match (&args.lambda_grid, args.method) {
        (Some(grid), Method::Penalty) => {
            let sel = nn::select_penalty_lambda(&factory, &tr, &va, &specs, grid, &cfg)?;
            (sel.outcome, Some(sel.lambda), Some(sel.violated), sel.trials)
        }
        (Some(_), m) => return Err(CliError::Usage(format!("--lambda-grid applies to penalty, not {}", m.name()))),
        (None, m) => {
            let out = nn::train(factory()?, &tr, &va, &specs, &cfg)?;
            let lambda = m.is_penalty().then(|| cfg.lambda());
            (out, lambda, None, Vec::new())
        }
    };
    let eval_cfg = fairlayer::TrainConfig { penalty_lambda: lambda.unwrap_or(cfg.penalty_lambda), ..cfg.clone() };
    let metrics = nn::evaluate(&outcome.model, &te, &specs, eval_cfg.eval_mode(), cfg.loss, &cfg.solver)?;

    let out = ctx.output(&args.out)?;
    outcome.model.save(&out).map_err(|e| CliError::io(&out, e))?;
    write_train_log(&sibling(&out, ".log.csv"), &outcome.log)?;
    let report = TrainReport {
        method: args.method,
        seed,
        lambda,
        lambda_violated: violated,
        lambda_trials: trials,
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.log.len(),
        stopped_early: outcome.stopped_early,
        test: metrics.clone(),
    };
    write_json(&sibling(&out, ".report.json"), &report)?;
    println!(
        "{}: test loss {} constraints satisfied {}/{} (changed {})",
        args.method.name(),
        num(metrics.loss),
        metrics.satisfied,
        metrics.total,
        metrics.changed
    );
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct StreamReport {
    pub batches: usize,
    pub total_batches: usize,
    pub complete: bool,
    pub aggregate_violation: f64,
    pub epsilon: f64,
    pub slack: f64,
    pub passed: Option<bool>,
    pub lambda: f64,
}

pub fn stream(ctx: &Context, args: &StreamArgs) -> CliResult<()> {
    let mut section = ctx.config.stream.clone();
    if let Some(v) = args.batch_size {
        section.batch_size = v;
    }
    if let Some(v) = args.eta {
        section.eta = v;
    }
    if let Some(v) = args.b_tau {
        section.b_tau = v;
    }
    if let Some(v) = args.epsilon {
        section.epsilon = v;
    }
    if let Some(v) = args.slack {
        section.slack = v;
    }
    if section.batch_size == 0 {
        return Err(CliError::Usage("batch size must be >= 1".into()));
    }
    let model_path = ctx.input(&args.model);
    let model = Mlp::load(&model_path).map_err(|e| CliError::io(&model_path, e))?;
    let ds = load_dataset(ctx, &args.data)?;
    let test = Samples::from_dataset(&ds, &ds.split.test)?;
    let spec = FairnessSpec::mean_parity(attribute_name(&ds), section.epsilon);
    let log_path = ctx.output(&args.log)?;
    let ckpt_path = ctx.output(&args.checkpoint)?;
    let mut state = if args.resume {
        DualControllerState::load_checkpoint(&ckpt_path).map_err(|e| CliError::io(&ckpt_path, e))?
    } else {
        if log_path.exists() {
            std::fs::remove_file(&log_path).map_err(|e| CliError::io(&log_path, e))?;
        }
        DualControllerState::new(StreamConfig {
            eta: section.eta,
            b_tau: section.b_tau,
            epsilon: section.epsilon,
            missing_group: section.missing_group,
        })?
    };
    let batches: Vec<Vec<usize>> =
        (0..test.len()).collect::<Vec<_>>().chunks(section.batch_size).map(<[usize]>::to_vec).collect();
    let start = state.batches;
    if start > batches.len() {
        return Err(CliError::Usage("checkpoint is ahead of the stream".into()));
    }
    let end = args.max_batches.map_or(batches.len(), |m| (start + m).min(batches.len()));
    let solver = SolverConfig::default();
    for idx in &batches[start..end] {
        let batch = test.select(idx);
        let z = model.forward(&batch.x)?;
        state.step(&z, &batch.masks, Some(&batch.y), &spec, &solver)?;
    }
    append_log(&log_path, &state.log[start..]).map_err(|e| CliError::io(&log_path, e))?;
    state.save_checkpoint(&ckpt_path).map_err(|e| CliError::io(&ckpt_path, e))?;
    let complete = end == batches.len();
    let aggregate = state.aggregate_violation()?;
    let limit = section.epsilon + section.slack;
    let passed = complete.then_some(aggregate <= limit);
    write_json(
        &sibling(&log_path, ".summary.json"),
        &StreamReport {
            batches: state.batches,
            total_batches: batches.len(),
            complete,
            aggregate_violation: aggregate,
            epsilon: section.epsilon,
            slack: section.slack,
            passed,
            lambda: state.lambda,
        },
    )?;
    println!(
        "processed {}/{} batches, aggregate violation {} (limit {})",
        state.batches,
        batches.len(),
        num(aggregate),
        num(limit)
    );
    if passed == Some(false) {
        return Err(CliError::Guarantee(format!("aggregate {} exceeds {}", num(aggregate), num(limit))));
    }
    Ok(())
}
