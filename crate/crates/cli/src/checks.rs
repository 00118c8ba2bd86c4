//! Seeded property suites over the projection, its Jacobian and the streaming controller.

use fairlayer::format::num;
use fairlayer::instances::{family_instance, random_instance, Family, Instance};
use fairlayer::kkt::LayerJacobian;
use fairlayer::nn::loss_and_grad;
use fairlayer::{
    compile, generate, lemma1_bound, project, project_oracle, region_projector, spectral_report, Architecture,
    BatchStats, ConstraintSet, DualControllerState, FairnessSpec, GroupMasks, Method, Mlp, ProjectionResult,
    Samples, ScenarioConfig, SolverConfig, StreamConfig, TrainConfig,
};
use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::{CheckArgs, CliError, CliResult, Context};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Kkt,
    Spectral,
    Lipschitz,
    Lemma1,
    Thm2,
    Oracle,
}

impl Suite {
    pub const ALL: [Suite; 6] = [Suite::Oracle, Suite::Kkt, Suite::Lipschitz, Suite::Spectral, Suite::Lemma1, Suite::Thm2];

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "kkt" => Suite::Kkt,
            "spectral" => Suite::Spectral,
            "lipschitz" => Suite::Lipschitz,
            "lemma1" => Suite::Lemma1,
            "thm2" => Suite::Thm2,
            "oracle" => Suite::Oracle,
            _ => return None,
        })
    }

    pub fn run(&self, seed: u64) -> Vec<Property> {
        match self {
            Suite::Oracle => oracle(seed),
            Suite::Kkt => [kkt_jvp(seed), network_gradient(seed)].concat(),
            Suite::Lipschitz => lipschitz(seed),
            Suite::Spectral => [spectral(seed), affine(seed)].concat(),
            Suite::Lemma1 => lemma1(seed),
            Suite::Thm2 => thm2(seed),
        }
    }
}

/// One checked property with its worst observed value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Property {
    pub name: String,
    pub passed: bool,
    pub observed: f64,
    pub threshold: f64,
}

impl Property {
    pub fn at_most(name: &str, observed: f64, threshold: f64) -> Self {
        Self { name: name.into(), passed: observed <= threshold, observed, threshold }
    }

    pub fn below(name: &str, observed: f64, threshold: f64) -> Self {
        Self { name: name.into(), passed: observed < threshold, observed, threshold }
    }

    pub fn line(&self) -> String {
        format!(
            "[{}] {}: observed {} (threshold {})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            num(self.observed),
            num(self.threshold)
        )
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn unit(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    let v = DVector::from_fn(n, |_, _| normal(rng));
    let norm = v.norm();
    v / norm
}

fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v
}

/// Active set and multipliers are separated from zero by `margin`.
fn interior(r: &ProjectionResult, c: &ConstraintSet, margin: f64) -> bool {
    if !r.strictly_complementary() || sorted(r.active.clone()) != sorted(r.working.clone()) {
        return false;
    }
    let slack = c.m1() - c.a() * &r.y_star;
    (0..c.num_ineq()).all(|i| if r.active.contains(&i) { r.lambda[i] > margin } else { slack[i] > margin })
}

pub fn oracle(seed: u64) -> Vec<Property> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SolverConfig::default();
    let (mut worst, mut failed) = (0.0f64, 0);
    for _ in 0..100 {
        let n = rng.random_range(2..=16);
        let q = rng.random_range(1..=10);
        let v = rng.random_range(0..=1);
        let inst = random_instance(&mut rng, n, q, v);
        match (project(&inst.z, &inst.set, &cfg), project_oracle(&inst.z, &inst.set)) {
            (Ok(r), Ok(o)) => worst = worst.max((r.y_star - o).amax()),
            _ => failed += 1,
        }
    }
    vec![
        Property::at_most("oracle: max |project - oracle| over 100 instances", worst, 1e-8),
        Property::at_most("oracle: instances not solved", failed as f64, 0.0),
    ]
}

/// Central differences of the projection against its KKT jvp away from region boundaries.
pub fn kkt_jvp(seed: u64) -> Vec<Property> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SolverConfig::default();
    let h = 1e-6;
    let (mut worst, mut accepted, mut tries) = (0.0f64, 0, 0);
    while accepted < 100 && tries < 10_000 {
        tries += 1;
        let n = rng.random_range(8..=16);
        let q = rng.random_range(1..=10.min(n - 2));
        let inst = random_instance(&mut rng, n, q, 1);
        let Ok(base) = project(&inst.z, &inst.set, &cfg) else { continue };
        if !interior(&base, &inst.set, 1e-4) {
            continue;
        }
        let dz = unit(&mut rng, n);
        let (Ok(up), Ok(down)) =
            (project(&(&inst.z + &dz * h), &inst.set, &cfg), project(&(&inst.z - &dz * h), &inst.set, &cfg))
        else {
            continue;
        };
        if sorted(up.active.clone()) != sorted(base.active.clone()) || sorted(down.active) != sorted(base.active.clone()) {
            continue;
        }
        let fd = (up.y_star - down.y_star) / (2.0 * h);
        let Ok(j) = fairlayer::jvp(&base, &inst.set, &dz, &cfg) else { continue };
        worst = worst.max((j - &fd).norm() / fd.norm());
        accepted += 1;
    }
    vec![
        Property::at_most("kkt: jvp vs central differences, relative error", worst, 1e-5),
        Property::at_most("kkt: interior instances short of 100", (100 - accepted) as f64, 0.0),
    ]
}

/// Parameter gradients of a 2-hidden-layer network through the layer.
pub fn network_gradient(seed: u64) -> Vec<Property> {
    let ds = generate(&ScenarioConfig { seed, ..Default::default() }.scaled(24, 6)).expect("valid scenario");
    let data = Samples::from_dataset(&ds, &(0..24).collect::<Vec<_>>()).expect("dataset samples");
    let specs = vec![FairnessSpec::mean_parity("x7", 0.02), FairnessSpec::bounds(-0.6, 0.6)];
    let cfg = TrainConfig { method: Method::FLayer, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    let mut worst = 0.0f64;
    for k in 0..3 {
        let mut model = Mlp::new(7, &Architecture { hidden: vec![6, 5], layer_norm: false }, seed + k).expect("model");
        // keep finite differences off the ReLU kinks of the zero-initialised biases
        let theta: Vec<f64> = model.flat().iter().map(|v| v + 0.1 * rng.random_range(-1.0..1.0)).collect();
        model.set_flat(&theta).expect("same shape");
        let loss_at = |t: &[f64]| {
            let mut m = model.clone();
            m.set_flat(t).expect("same shape");
            loss_and_grad(&m, &data, &specs, &cfg).map(|r| r.0)
        };
        let Ok((_, grad)) = loss_and_grad(&model, &data, &specs, &cfg) else {
            worst = f64::INFINITY;
            continue;
        };
        let g = DVector::from_vec(grad.flat());
        let h = 1e-6;
        let mut fd = DVector::zeros(theta.len());
        for i in 0..theta.len() {
            let mut t = theta.clone();
            t[i] += h;
            let up = loss_at(&t);
            t[i] -= 2.0 * h;
            let down = loss_at(&t);
            fd[i] = match (up, down) {
                (Ok(u), Ok(d)) => (u - d) / (2.0 * h),
                _ => f64::NAN,
            };
        }
        let rel = (&g - &fd).norm() / fd.norm();
        worst = worst.max(if rel.is_nan() { f64::INFINITY } else { rel });
    }
    vec![Property::at_most("kkt: network parameter gradient, relative error", worst, 1e-4)]
}

fn family_instances(rng: &mut ChaCha8Rng, per_family: usize) -> Vec<(Family, Instance)> {
    let mut out = Vec::new();
    for family in Family::ALL {
        for _ in 0..per_family {
            let n = rng.random_range(6..=12);
            out.push((family, family_instance(rng, family, n)));
        }
    }
    out
}

pub fn lipschitz(seed: u64) -> Vec<Property> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SolverConfig::default();
    let (mut ratio, mut norm, mut failed) = (0.0f64, 0.0f64, 0);
    // 10 instances × 100 pairs = 1000 pairs per family
    for (k, (_, inst)) in family_instances(&mut rng, 10).into_iter().enumerate() {
        match fairlayer::lipschitz_probe(&inst.set, 100, seed + k as u64, &cfg) {
            Ok(r) => ratio = ratio.max(r),
            Err(_) => failed += 1,
        }
        let report = project(&inst.z, &inst.set, &cfg)
            .and_then(|r| region_projector(&r, &inst.set, &cfg))
            .and_then(|(p, _)| spectral_report(&p, &nalgebra::DMatrix::zeros(0, p.nrows()), 0, seed));
        match report {
            Ok(rep) => norm = norm.max(rep.spectral_norm),
            Err(_) => failed += 1,
        }
    }
    vec![
        Property::at_most("lipschitz: max ratio over 1000 pairs per family", ratio, 1.0 + 1e-9),
        Property::at_most("lipschitz: projector spectral norm", norm, 1.0 + 1e-9),
        Property::at_most("lipschitz: probes not completed", failed as f64, 0.0),
    ]
}

pub fn spectral(seed: u64) -> Vec<Property> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SolverConfig::default();
    let (mut dist, mut leak, mut failed) = (0.0f64, 0.0f64, 0);
    for (_, inst) in family_instances(&mut rng, 25) {
        let v = DVector::from_fn(inst.z.len(), |_, _| normal(&mut rng));
        let res = (|| {
            let r = project(&inst.z, &inst.set, &cfg)?;
            let jac = LayerJacobian::new(&r, &inst.set, &cfg)?;
            let (p, _) = region_projector(&r, &inst.set, &cfg)?;
            let rep = spectral_report(&p, jac.constraint_rows(), 0, seed)?;
            let dg = jac.jvp(&v)?;
            let suppression = if jac.constraint_rows().nrows() > 0 { (jac.constraint_rows() * dg).amax() } else { 0.0 };
            Ok::<_, fairlayer::Error>((rep.binary_distance, suppression))
        })();
        match res {
            Ok((d, s)) => {
                dist = dist.max(d);
                leak = leak.max(s);
            }
            Err(_) => failed += 1,
        }
    }
    vec![
        Property::at_most("spectral: eigenvalue distance to {0,1}", dist, 1e-8),
        Property::at_most("spectral: |A_A Dg v| over 100 pairs", leak, 1e-8),
        Property::at_most("spectral: instances not analysed", failed as f64, 0.0),
    ]
}

/// `g(z + δ) - g(z) = P_I δ` for perturbations that keep the active set.
pub fn affine(seed: u64) -> Vec<Property> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xaf);
    let cfg = SolverConfig::default();
    let (mut worst, mut undetected, mut instances) = (0.0f64, 0, 0);
    for (_, inst) in family_instances(&mut rng, 5) {
        let Ok(base) = project(&inst.z, &inst.set, &cfg) else { continue };
        if !base.strictly_complementary() {
            continue;
        }
        let Ok((p, _)) = region_projector(&base, &inst.set, &cfg) else { continue };
        instances += 1;
        let active = sorted(base.active.clone());
        for _ in 0..50 {
            let mut delta = DVector::from_fn(inst.z.len(), |_, _| 0.1 * normal(&mut rng));
            let mut found = None;
            for _ in 0..60 {
                match project(&(&inst.z + &delta), &inst.set, &cfg) {
                    Ok(r) if sorted(r.active.clone()) == active => {
                        found = Some(r.y_star);
                        break;
                    }
                    _ => delta *= 0.5,
                }
            }
            match found {
                Some(y) => worst = worst.max((y - &base.y_star - &p * &delta).amax()),
                None => undetected += 1,
            }
        }
    }
    vec![
        Property::at_most("affine: |g(z+d) - g(z) - P d| over 50 d per instance", worst, 1e-9),
        Property::at_most("affine: perturbations leaving the region", undetected as f64, 0.0),
        Property::at_most("affine: instances short of 16", 16usize.saturating_sub(instances) as f64, 0.0),
    ]
}

fn shuffled_mask(rng: &mut ChaCha8Rng, n0: usize, n1: usize) -> Vec<bool> {
    let mut m: Vec<bool> = (0..n0).map(|_| false).chain((0..n1).map(|_| true)).collect();
    m.shuffle(rng);
    m
}

/// Project one batch onto mean parity and return its statistics.
fn parity_batch(rng: &mut ChaCha8Rng, mask: Vec<bool>, eps: f64, cfg: &SolverConfig) -> fairlayer::Result<(BatchStats, f64)> {
    let shift = rng.random_range(-1.0..1.0);
    let z = DVector::from_fn(mask.len(), |i, _| normal(rng) + if mask[i] { shift } else { 0.0 });
    let masks = GroupMasks::single("g", mask.clone());
    let specs = [FairnessSpec::mean_parity("g", eps)];
    let set = compile(&specs, &masks, None, mask.len())?;
    let y: Vec<f64> = project(&z, &set, cfg)?.y_star.iter().copied().collect();
    let gap = fairlayer::gap(&specs, &masks, None, &y)?[0].value;
    Ok((BatchStats::from_predictions(&mask, &y), gap))
}

pub fn lemma1(seed: u64) -> Vec<Property> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SolverConfig::default();
    let (mut excess, mut strat_excess, mut batch_gap, mut failed) = (f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0f64, 0);
    let (mut respected, mut strat_respected) = (0, 0);
    for trial in 0..2000 {
        let stratified = trial >= 1000;
        let eps = rng.random_range(0.0..0.2);
        let batches = rng.random_range(3..=30);
        let size = rng.random_range(4..=40);
        let fixed0 = rng.random_range(1..size);
        let mut stats = Vec::with_capacity(batches);
        let mut ok = true;
        for _ in 0..batches {
            let (size, n0) = if stratified {
                (size, fixed0)
            } else {
                let s = rng.random_range(4..=40);
                (s, rng.random_range(1..s))
            };
            let mask = shuffled_mask(&mut rng, n0, size - n0);
            match parity_batch(&mut rng, mask, eps, &cfg) {
                Ok((s, g)) => {
                    batch_gap = batch_gap.max(g - eps);
                    stats.push(s);
                }
                Err(_) => ok = false,
            }
        }
        match lemma1_bound(&stats, eps) {
            Ok(b) if ok => {
                if stratified {
                    strat_excess = strat_excess.max(b.realized - eps);
                    strat_respected += usize::from(b.realized <= eps + 1e-9);
                } else {
                    excess = excess.max(b.realized - b.bound);
                    respected += usize::from(b.realized <= b.bound + 1e-9);
                }
            }
            _ => failed += 1,
        }
    }
    vec![
        Property::at_most("lemma1: per-batch gap above epsilon", batch_gap, 1e-9),
        Property::at_most("lemma1: realized minus bound over 1000 streams", excess, 1e-9),
        Property::at_most("lemma1: streams violating the bound", (1000 - respected) as f64, 0.0),
        Property::at_most("lemma1: stratified realized minus epsilon over 1000 streams", strat_excess, 1e-9),
        Property::at_most("lemma1: stratified streams above epsilon", (1000 - strat_respected) as f64, 0.0),
        Property::at_most("lemma1: streams not evaluated", failed as f64, 0.0),
    ]
}

/// Running weighted average gap and dual variable of the simulated stream.
#[derive(Debug, Clone)]
pub struct Thm2Trace {
    pub running_avg: Vec<f64>,
    pub lambda: Vec<f64>,
}

pub const THM2_BATCHES: usize = 5000;

/// Balanced size-4 batches with a group-0 offset of 0.5 and unit-half noise.
pub fn thm2_trace(seed: u64) -> fairlayer::Result<Thm2Trace> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SolverConfig::default();
    let spec = FairnessSpec::mean_parity("g", 0.05);
    let mut state = DualControllerState::new(StreamConfig { eta: 0.5, b_tau: 256, epsilon: 0.05, ..Default::default() })?;
    let mut trace = Thm2Trace { running_avg: Vec::with_capacity(THM2_BATCHES), lambda: Vec::with_capacity(THM2_BATCHES) };
    for _ in 0..THM2_BATCHES {
        let mask = shuffled_mask(&mut rng, 2, 2);
        let z: Vec<f64> = mask.iter().map(|&g| if g { 0.0 } else { 0.5 } + 0.5 * normal(&mut rng)).collect();
        let out = state.step(&z, &GroupMasks::single("g", mask), None, &spec, &cfg)?;
        trace.running_avg.push(out.record.running_weighted_avg);
        trace.lambda.push(out.record.lambda);
    }
    Ok(trace)
}

/// Least-squares slope of `log λ_t` on `log t` over `t ∈ [from, T]` with `λ_t > 0`.
pub fn tail_slope(lambda: &[f64], from: usize) -> f64 {
    let pts: Vec<(f64, f64)> = (from..=lambda.len())
        .filter(|&t| lambda[t - 1] > 0.0)
        .map(|t| ((t as f64).ln(), lambda[t - 1].ln()))
        .collect();
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

pub fn thm2(seed: u64) -> Vec<Property> {
    match thm2_trace(seed) {
        Ok(tr) => {
            let last = tr.running_avg[THM2_BATCHES - 1];
            let at500 = tr.running_avg[499];
            vec![
                Property::at_most("thm2: weighted average gap at T=5000", last, 0.07),
                Property::below("thm2: average at T=5000 minus average at T=500", last - at500, 0.0),
                Property::at_most("thm2: log-log tail slope of the dual variable", tail_slope(&tr.lambda, 500), 0.3),
            ]
        }
        Err(_) => vec![Property::at_most("thm2: stream completed", 1.0, 0.0)],
    }
}

pub fn command(ctx: &Context, args: &CheckArgs) -> CliResult<()> {
    let props = args.suite.run(ctx.config.seed);
    for p in &props {
        println!("{}", p.line());
    }
    let failed = props.iter().filter(|p| !p.passed).count();
    if failed > 0 {
        return Err(CliError::Failed(format!("{failed} of {} properties failed", props.len())));
    }
    Ok(())
}
