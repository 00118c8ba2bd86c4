//! Seeded random projection instances shared by tests and the check suites.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::constraints::{
    compile, ConstraintSet, FairnessSpec, GroupMasks, Region,
};

/// A feasible constraint set and an input point.
#[derive(Debug, Clone)]
pub struct Instance {
    pub set: ConstraintSet,
    pub z: DVector<f64>,
    /// A point known to satisfy `set`.
    pub feasible_point: DVector<f64>,
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Dense random rows around a known feasible point: `q` inequalities (about a
/// quarter of them tight at that point) and `v` equalities. The input `z` is
/// pushed outside so that several rows end up active.
pub fn random_instance<R: Rng>(rng: &mut R, n: usize, q: usize, v: usize) -> Instance {
    let y0 = DVector::from_fn(n, |_, _| normal(rng));
    let a = DMatrix::from_fn(q, n, |_, _| normal(rng));
    let m1 = DVector::from_fn(q, |i, _| {
        let slack = if rng.random_bool(0.25) { 0.0 } else { rng.random_range(0.0..1.0) };
        a.row(i).dot(&y0.transpose()) + slack
    });
    let b = DMatrix::from_fn(v, n, |_, _| normal(rng));
    let m2 = &b * &y0;
    let set = ConstraintSet::from_parts(a, m1, b, m2).expect("finite random instance");
    let z = DVector::from_fn(n, |i, _| y0[i] + 2.0 * normal(rng));
    Instance { set, z, feasible_point: y0 }
}

/// Constraint families used by the property suites.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Dense,
    ParityBox,
    EqualizedOdds,
    GroupResidual,
}

impl Family {
    pub const ALL: [Family; 4] =
        [Family::Dense, Family::ParityBox, Family::EqualizedOdds, Family::GroupResidual];

    pub fn name(&self) -> &'static str {
        match self {
            Family::Dense => "dense",
            Family::ParityBox => "parity+box",
            Family::EqualizedOdds => "equalized-odds",
            Family::GroupResidual => "group-residual",
        }
    }
}

fn balanced_mask<R: Rng>(rng: &mut R, n: usize) -> Vec<bool> {
    loop {
        let m: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        if m.iter().filter(|&&b| b).count() >= 2 && m.iter().filter(|&&b| !b).count() >= 2 {
            return m;
        }
    }
}

/// A random instance of the given family over `n` predictions.
pub fn family_instance<R: Rng>(rng: &mut R, family: Family, n: usize) -> Instance {
    match family {
        Family::Dense => random_instance(rng, n, n.min(10), 1),
        Family::ParityBox => {
            let masks = GroupMasks::single("g", balanced_mask(rng, n));
            let eps = rng.random_range(0.0..0.2);
            let specs = [FairnessSpec::mean_parity("g", eps), FairnessSpec::bounds(-1.0, 1.0)];
            let set = compile(&specs, &masks, None, n).expect("balanced mask");
            let z = DVector::from_fn(n, |_, _| 1.5 * normal(rng));
            Instance { set, z, feasible_point: DVector::zeros(n) }
        }
        Family::EqualizedOdds => loop {
            let masks = GroupMasks::single("g", balanced_mask(rng, n));
            let y: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
            let regions = vec![Region::point(0.0), Region::point(1.0)];
            let specs = [FairnessSpec::equalized_odds("g", regions, 0.05)];
            if let Ok(set) = compile(&specs, &masks, Some(&y), n) {
                let z = DVector::from_fn(n, |i, _| y[i] + normal(rng));
                break Instance { set, z, feasible_point: DVector::zeros(n) };
            }
        },
        Family::GroupResidual => {
            let masks = GroupMasks::single("g", balanced_mask(rng, n));
            let y: Vec<f64> = (0..n).map(|_| normal(rng)).collect();
            let specs = [FairnessSpec::group_residual("g", 0.1)];
            let set = compile(&specs, &masks, Some(&y), n).expect("balanced mask");
            let z = DVector::from_fn(n, |i, _| y[i] + normal(rng));
            Instance { set, z, feasible_point: DVector::from_vec(y) }
        }
    }
}
