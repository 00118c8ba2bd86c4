//! Exact Euclidean projection onto `{y : A y <= m1, B y = m2}`.
//!
//! The solver is a dual active-set method in the style of Goldfarb and
//! Idnani, specialised to the identity Hessian: it starts from the
//! unconstrained minimiser `z`, repeatedly adds the most violated row and
//! drops rows whose multiplier would turn negative. Rows are normalised
//! internally and kept sparse, so box rows cost O(1) per dot product. The
//! working set stays linearly independent, and its Gram matrix is kept as
//! an incrementally updated Cholesky factor.

use nalgebra::{DMatrix, DVector};

use crate::constraints::{dot, ConstraintSet, GapTerm};
use crate::error::{Error, Result};

/// Tolerances and limits for [`project`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    /// Maximum allowed row violation (in units of distance) at the solution.
    pub feasibility_tol: f64,
    /// Multipliers at or below this are weakly active.
    pub active_tol: f64,
    /// Iteration cap; `0` means `50 * rows + 100`.
    pub max_iterations: usize,
    /// Diagonal ridge for rank-deficient Gram matrices in the backward pass.
    pub ridge: f64,
    /// Strong-convexity parameter of `(mu/2)‖y‖² - ⟨z, y⟩`; `1` is the Euclidean projection.
    pub mu: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { feasibility_tol: 1e-9, active_tol: 1e-8, max_iterations: 0, ridge: 1e-12, mu: 1.0 }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("feasibility_tol", self.feasibility_tol),
            ("active_tol", self.active_tol),
            ("ridge", self.ridge),
            ("mu", self.mu),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Outcome of one projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionResult {
    pub y_star: DVector<f64>,
    /// Inequality multipliers, `>= 0`.
    pub lambda: DVector<f64>,
    /// Equality multipliers.
    pub nu: DVector<f64>,
    /// Inequality rows tight at `y_star`.
    pub active: Vec<usize>,
    /// Linearly independent inequality rows of the final working set.
    pub working: Vec<usize>,
    /// Working rows whose multiplier is at most `active_tol`.
    pub weakly_active: Vec<usize>,
    pub stationarity_residual: f64,
    pub max_violation: f64,
    pub iterations: usize,
}

impl ProjectionResult {
    pub fn strictly_complementary(&self) -> bool {
        self.weakly_active.is_empty()
    }

    /// Working rows used for differentiation: positive multipliers only.
    pub fn differentiation_set(&self) -> Vec<usize> {
        self.working.iter().copied().filter(|i| !self.weakly_active.contains(i)).collect()
    }
}

#[derive(Debug, Clone)]
struct SparseRow {
    idx: Vec<usize>,
    val: Vec<f64>,
    rhs: f64,
    norm: f64,
}

impl SparseRow {
    fn from_dense(row: impl Iterator<Item = f64>, rhs: f64) -> Self {
        let mut idx = Vec::new();
        let mut val = Vec::new();
        for (i, v) in row.enumerate() {
            if v != 0.0 {
                idx.push(i);
                val.push(v);
            }
        }
        let norm = val.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            val.iter_mut().for_each(|v| *v /= norm);
        }
        let rhs = if norm > 0.0 { rhs / norm } else { rhs };
        Self { idx, val, rhs, norm }
    }

    fn dot_dense(&self, y: &[f64]) -> f64 {
        self.idx.iter().zip(&self.val).map(|(&i, &v)| v * y[i]).sum()
    }

    fn axpy(&self, alpha: f64, y: &mut [f64]) {
        for (&i, &v) in self.idx.iter().zip(&self.val) {
            y[i] += alpha * v;
        }
    }
}

/// Lower-triangular Cholesky factor stored by rows, grown and shrunk in place.
#[derive(Debug, Default)]
struct GrowingCholesky {
    rows: Vec<Vec<f64>>,
}

impl GrowingCholesky {
    fn dim(&self) -> usize {
        self.rows.len()
    }

    /// Solve `L x = b`.
    fn forward(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        for i in 0..self.dim() {
            let row = &self.rows[i];
            let s: f64 = (0..i).map(|j| row[j] * x[j]).sum();
            x[i] = (x[i] - s) / row[i];
        }
        x
    }

    /// Solve `Lᵀ x = b`.
    fn backward(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        for i in (0..self.dim()).rev() {
            x[i] /= self.rows[i][i];
            let xi = x[i];
            for j in 0..i {
                x[j] -= self.rows[i][j] * xi;
            }
        }
        x
    }

    fn push(&mut self, l: Vec<f64>, diag: f64) {
        let mut row = l;
        row.push(diag);
        self.rows.push(row);
    }

    /// Delete row/column `k` of the factored matrix.
    fn remove(&mut self, k: usize) {
        self.rows.remove(k);
        let mut x: Vec<f64> = self.rows[k..].iter_mut().map(|r| r.remove(k)).collect();
        // rank-one update of the trailing block with the removed column
        let m = x.len();
        for i in 0..m {
            let lii = self.rows[k + i][k + i];
            let r = lii.hypot(x[i]);
            let c = r / lii;
            let s = x[i] / lii;
            self.rows[k + i][k + i] = r;
            for j in i + 1..m {
                let lji = (self.rows[k + j][k + i] + s * x[j]) / c;
                x[j] = c * x[j] - s * lji;
                self.rows[k + j][k + i] = lji;
            }
        }
    }
}

struct Problem {
    n: usize,
    /// Inequalities first, then equalities.
    rows: Vec<SparseRow>,
    q: usize,
}

impl Problem {
    fn new(c: &ConstraintSet) -> Result<Self> {
        let q = c.num_ineq();
        let mut rows = Vec::with_capacity(q + c.num_eq());
        for i in 0..q {
            rows.push(SparseRow::from_dense(c.a().row(i).iter().copied(), c.m1()[i]));
        }
        for i in 0..c.num_eq() {
            rows.push(SparseRow::from_dense(c.b().row(i).iter().copied(), c.m2()[i]));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.norm == 0.0 {
                let ok = if i < q { r.rhs >= 0.0 } else { r.rhs == 0.0 };
                if !ok {
                    return Err(Error::Infeasible);
                }
            }
        }
        Ok(Self { n: c.n(), rows, q })
    }

    fn is_eq(&self, i: usize) -> bool {
        i >= self.q
    }
}

struct ActiveEntry {
    row: usize,
    /// `-1` when an equality row was added with flipped orientation.
    sign: f64,
    u: f64,
}

struct DualActiveSet<'a> {
    p: &'a Problem,
    y: Vec<f64>,
    active: Vec<ActiveEntry>,
    chol: GrowingCholesky,
    work: Vec<f64>,
    iterations: usize,
    max_iterations: usize,
}

const DEPENDENCE_TOL: f64 = 1e-10;

impl<'a> DualActiveSet<'a> {
    fn new(p: &'a Problem, z: &[f64], max_iterations: usize) -> Self {
        Self {
            p,
            y: z.to_vec(),
            active: Vec::new(),
            chol: GrowingCholesky::default(),
            work: vec![0.0; p.n],
            iterations: 0,
            max_iterations,
        }
    }

    /// Gram products `n_jᵀ n_p` for every active row.
    fn gram_column(&mut self, sign: f64, row: &SparseRow) -> Vec<f64> {
        for (&i, &v) in row.idx.iter().zip(&row.val) {
            self.work[i] = sign * v;
        }
        let g = self
            .active
            .iter()
            .map(|e| e.sign * self.p.rows[e.row].dot_dense(&self.work))
            .collect();
        for &i in &row.idx {
            self.work[i] = 0.0;
        }
        g
    }

    /// Split `sign * n_p = N r + d` with `d ⟂ span N`.
    fn decompose(&mut self, row: usize, sign: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let prow = &self.p.rows[row];
        let g = self.gram_column(sign, prow);
        let l = self.chol.forward(&g);
        let r = self.chol.backward(&l);
        let mut d = vec![0.0; self.p.n];
        prow.axpy(sign, &mut d);
        for (e, &rj) in self.active.iter().zip(&r) {
            self.p.rows[e.row].axpy(-rj * e.sign, &mut d);
        }
        (l, r, d)
    }

    fn add_row(&mut self, row: usize, sign: f64) -> Result<()> {
        let mut u_new = 0.0;
        loop {
            self.tick()?;
            let (l, r, d) = self.decompose(row, sign);
            let dnorm2: f64 = d.iter().map(|v| v * v).sum();
            let s = sign * self.p.rows[row].dot_dense(&self.y) - sign * self.p.rows[row].rhs;
            let full = if dnorm2.sqrt() > DEPENDENCE_TOL { s / dnorm2 } else { f64::INFINITY };
            let mut partial = f64::INFINITY;
            let mut drop_at = None;
            for (k, (e, &rk)) in self.active.iter().zip(&r).enumerate() {
                if self.p.is_eq(e.row) || rk <= 0.0 {
                    continue;
                }
                let t = e.u / rk;
                if t < partial {
                    partial = t;
                    drop_at = Some(k);
                }
            }
            let t = full.min(partial);
            if !t.is_finite() {
                if self.p.is_eq(row) && s.abs() <= DEPENDENCE_TOL {
                    // consistent dependent equality: already implied
                    return Ok(());
                }
                return Err(Error::Infeasible);
            }
            for (e, &rk) in self.active.iter_mut().zip(&r) {
                e.u -= t * rk;
            }
            u_new += t;
            for (yi, di) in self.y.iter_mut().zip(&d) {
                *yi -= t * di;
            }
            if full <= partial {
                self.chol.push(l, dnorm2.sqrt());
                self.active.push(ActiveEntry { row, sign, u: u_new });
                return Ok(());
            }
            let k = drop_at.expect("finite partial step implies a blocking row");
            self.active.remove(k);
            self.chol.remove(k);
        }
    }

    fn tick(&mut self) -> Result<()> {
        self.iterations += 1;
        if self.iterations > self.max_iterations {
            return Err(Error::MaxIterations(self.max_iterations));
        }
        Ok(())
    }

    fn most_violated(&self, tol: f64) -> Option<usize> {
        let mut best = None;
        let mut worst = tol;
        for i in 0..self.p.q {
            let r = &self.p.rows[i];
            if r.norm == 0.0 {
                continue;
            }
            let s = r.dot_dense(&self.y) - r.rhs;
            if s > worst {
                worst = s;
                best = Some(i);
            }
        }
        best
    }

    fn solve(&mut self, tol: f64) -> Result<()> {
        for i in self.p.q..self.p.rows.len() {
            let r = &self.p.rows[i];
            if r.norm == 0.0 {
                continue;
            }
            let s = r.dot_dense(&self.y) - r.rhs;
            let sign = if s >= 0.0 { 1.0 } else { -1.0 };
            self.add_row(i, sign)?;
        }
        while let Some(i) = self.most_violated(tol) {
            self.add_row(i, 1.0)?;
        }
        Ok(())
    }
}

/// Project `z` onto `c`.
///
/// With `cfg.mu != 1` this minimises `(mu/2)‖y‖² - ⟨z, y⟩` over `c`, i.e.
/// projects `z / mu`.
pub fn project(z: &DVector<f64>, c: &ConstraintSet, cfg: &SolverConfig) -> Result<ProjectionResult> {
    cfg.validate()?;
    if z.len() != c.n() {
        return Err(Error::DimensionMismatch(format!(
            "input has {} entries, constraint set expects {}",
            z.len(),
            c.n()
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::DimensionMismatch("non-finite input to projection".into()));
    }
    let problem = Problem::new(c)?;
    let target: Vec<f64> = z.iter().map(|v| v / cfg.mu).collect();
    let max_it = if cfg.max_iterations == 0 {
        50 * problem.rows.len() + 100
    } else {
        cfg.max_iterations
    };
    let mut solver = DualActiveSet::new(&problem, &target, max_it);
    solver.solve(cfg.feasibility_tol)?;

    let q = c.num_ineq();
    let mut lambda = DVector::zeros(q);
    let mut nu = DVector::zeros(c.num_eq());
    let mut working = Vec::new();
    let mut weakly_active = Vec::new();
    for e in &solver.active {
        let row = &problem.rows[e.row];
        // undo row normalisation and the mu scaling of the objective
        let m = cfg.mu * e.sign * e.u / row.norm;
        if e.row < q {
            lambda[e.row] = m.max(0.0);
            working.push(e.row);
            if cfg.mu * e.u <= cfg.active_tol {
                weakly_active.push(e.row);
            }
        } else {
            nu[e.row - q] = m;
        }
    }
    working.sort_unstable();
    weakly_active.sort_unstable();
    let y_star = DVector::from_vec(solver.y);
    let active = (0..q)
        .filter(|&i| {
            let r = &problem.rows[i];
            r.norm > 0.0 && r.dot_dense(y_star.as_slice()) - r.rhs >= -cfg.feasibility_tol
        })
        .collect();
    let mut station = cfg.mu * &y_star - z;
    if q > 0 {
        station += c.a().tr_mul(&lambda);
    }
    if c.num_eq() > 0 {
        station += c.b().tr_mul(&nu);
    }
    let stationarity_residual = station.amax();
    let max_violation = c.max_violation(&y_star);
    Ok(ProjectionResult {
        y_star,
        lambda,
        nu,
        active,
        working,
        weakly_active,
        stationarity_residual,
        max_violation,
        iterations: solver.iterations,
    })
}

/// `sign(x) * max(|x| - threshold, 0)`.
pub fn softshrink(x: f64, threshold: f64) -> f64 {
    if x > threshold {
        x - threshold
    } else if x < -threshold {
        x + threshold
    } else {
        0.0
    }
}

/// Minimiser of `‖y - z‖² + kappa |aᵀy|` in closed form.
pub fn project_penalized(z_raw: &[f64], kappa: f64, direction: &[f64]) -> Result<Vec<f64>> {
    project_penalized_affine(z_raw, kappa, direction, 0.0)
}

/// Minimiser of `‖y - z‖² + kappa |aᵀy - c|`.
pub fn project_penalized_affine(
    z_raw: &[f64],
    kappa: f64,
    direction: &[f64],
    offset: f64,
) -> Result<Vec<f64>> {
    if z_raw.len() != direction.len() {
        return Err(Error::DimensionMismatch("direction and input lengths differ".into()));
    }
    if !(kappa >= 0.0) {
        return Err(Error::InvalidConfig(format!("penalty weight {kappa} must be >= 0")));
    }
    let a2 = dot(direction, direction);
    if a2 == 0.0 {
        return Err(Error::ZeroDirection);
    }
    let t0 = dot(direction, z_raw) - offset;
    let t = softshrink(t0, kappa * a2 / 2.0);
    let step = (t - t0) / a2;
    Ok(z_raw.iter().zip(direction).map(|(z, a)| z + a * step).collect())
}

/// Minimiser of `‖y - z‖² + kappa Σ_j |a_jᵀy - c_j|` for several gap terms.
///
/// Exact dual coordinate ascent over `|u_j| <= kappa` with `y = z - ½ Σ u_j a_j`;
/// a single term terminates after one sweep at the closed-form answer.
pub fn project_penalized_terms(
    z_raw: &[f64],
    kappa: f64,
    terms: &[GapTerm],
    tol: f64,
    max_sweeps: usize,
) -> Result<Vec<f64>> {
    if !(kappa >= 0.0) {
        return Err(Error::InvalidConfig(format!("penalty weight {kappa} must be >= 0")));
    }
    let norms: Vec<f64> = terms.iter().map(|t| dot(&t.coeffs, &t.coeffs)).collect();
    if norms.iter().any(|&a2| a2 == 0.0) {
        return Err(Error::ZeroDirection);
    }
    if terms.iter().any(|t| t.coeffs.len() != z_raw.len()) {
        return Err(Error::DimensionMismatch("gap term and input lengths differ".into()));
    }
    let mut y = z_raw.to_vec();
    let mut u = vec![0.0; terms.len()];
    for _ in 0..max_sweeps.max(1) {
        let mut change = 0.0f64;
        for (j, t) in terms.iter().enumerate() {
            let grad = t.signed(&y);
            let next = (u[j] + 2.0 * grad / norms[j]).clamp(-kappa, kappa);
            let du = next - u[j];
            if du != 0.0 {
                for (yi, ai) in y.iter_mut().zip(&t.coeffs) {
                    *yi -= 0.5 * du * ai;
                }
                u[j] = next;
                change = change.max(du.abs() * norms[j].sqrt());
            }
        }
        if change <= tol || terms.len() == 1 {
            break;
        }
    }
    Ok(y)
}

/// Result of [`feasibility_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct Feasibility {
    pub feasible: bool,
    pub witness: Option<DVector<f64>>,
}

fn constant_candidate(c: &ConstraintSet) -> f64 {
    // tightest common bounds implied by single-entry rows
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    for i in 0..c.num_ineq() {
        let row = c.a().row(i);
        let nz: Vec<(usize, f64)> =
            row.iter().copied().enumerate().filter(|(_, v)| *v != 0.0).collect();
        if let [(_, v)] = nz.as_slice() {
            let bound = c.m1()[i] / v;
            if *v > 0.0 {
                hi = hi.min(bound);
            } else {
                lo = lo.max(bound);
            }
        }
    }
    match (lo.is_finite(), hi.is_finite()) {
        (true, true) => 0.5 * (lo + hi),
        (true, false) => lo.max(0.0),
        (false, true) => hi.min(0.0),
        (false, false) => 0.0,
    }
}

/// Decide feasibility of `c`, returning a witness point when one exists.
///
/// A constant vector at the midpoint of the implied bounds is tried first;
/// otherwise the origin is projected onto `c`.
pub fn feasibility_check(c: &ConstraintSet, cfg: &SolverConfig) -> Feasibility {
    let guess = DVector::from_element(c.n(), constant_candidate(c));
    if c.is_satisfied(&guess, cfg.feasibility_tol) {
        return Feasibility { feasible: true, witness: Some(guess) };
    }
    let unit = SolverConfig { mu: 1.0, ..*cfg };
    match project(&DVector::zeros(c.n()), c, &unit) {
        Ok(res) if res.max_violation <= 10.0 * cfg.feasibility_tol => {
            Feasibility { feasible: true, witness: Some(res.y_star) }
        }
        _ => Feasibility { feasible: false, witness: None },
    }
}

/// Subset budget of [`project_oracle`].
pub const ORACLE_MAX_ROWS: usize = 12;

/// Reference projection by exhaustive enumeration of candidate active sets.
///
/// For every subset `I` of inequality rows (equalities always included) the
/// affine map `y = P_I z + c_I` with `P_I = I - Mᵀ(MMᵀ)⁺M`,
/// `c_I = Mᵀ(MMᵀ)⁺ r` is evaluated; the candidate that is primal feasible with
/// nonnegative multipliers satisfies KKT and is therefore the projection.
pub fn project_oracle(z: &DVector<f64>, c: &ConstraintSet) -> Result<DVector<f64>> {
    let q = c.num_ineq();
    if q > ORACLE_MAX_ROWS {
        return Err(Error::TooManyConstraints { rows: q, limit: ORACLE_MAX_ROWS });
    }
    let n = c.n();
    let v = c.num_eq();
    let tol = 1e-9;
    let mut best: Option<(f64, DVector<f64>)> = None;
    for subset in 0u32..(1u32 << q) {
        let rows: Vec<usize> = (0..q).filter(|i| subset & (1 << i) != 0).collect();
        let k = rows.len() + v;
        let y = if k == 0 {
            z.clone()
        } else {
            let mut m = DMatrix::zeros(k, n);
            let mut rhs = DVector::zeros(k);
            for (r, &i) in rows.iter().enumerate() {
                m.row_mut(r).copy_from(&c.a().row(i));
                rhs[r] = c.m1()[i];
            }
            for j in 0..v {
                m.row_mut(rows.len() + j).copy_from(&c.b().row(j));
                rhs[rows.len() + j] = c.m2()[j];
            }
            let gram = &m * m.transpose();
            let Ok(pinv) = gram.clone().pseudo_inverse(1e-12) else { continue };
            let projector = DMatrix::identity(n, n) - m.transpose() * &pinv * &m;
            let offset = m.transpose() * &pinv * &rhs;
            let y = &projector * z + offset;
            // multipliers of the chosen rows: (MMᵀ)⁺(Mz - r)
            let w = &pinv * (&m * z - &rhs);
            if (&m * &y - &rhs).amax() > tol || w.rows(0, rows.len()).iter().any(|&l| l < -tol) {
                continue;
            }
            y
        };
        if c.max_violation(&y) > tol {
            continue;
        }
        let dist = (&y - z).norm_squared();
        if best.as_ref().is_none_or(|(d, _)| dist < *d) {
            best = Some((dist, y));
        }
    }
    best.map(|(_, y)| y).ok_or(Error::Infeasible)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::{build_box, build_mean_parity, compile, FairnessSpec, GroupMasks};
    use crate::instances::random_instance;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn cfg() -> SolverConfig {
        SolverConfig::default()
    }

    fn check_kkt(z: &DVector<f64>, c: &ConstraintSet, r: &ProjectionResult) {
        assert!(r.max_violation <= 1e-9, "violation {}", r.max_violation);
        assert!(r.stationarity_residual <= 1e-9, "stationarity {}", r.stationarity_residual);
        assert!(r.lambda.iter().all(|&l| l >= 0.0));
        for i in 0..c.num_ineq() {
            if !r.active.contains(&i) {
                assert_eq!(r.lambda[i], 0.0, "inactive row {i} has multiplier");
            }
        }
        assert_eq!(z.len(), r.y_star.len());
    }

    #[test]
    fn parity_hyperplane() {
        let c = build_mean_parity(&[false, true], 0.0).unwrap();
        let z = v(&[2.0, -2.0]);
        let r = project(&z, &c, &cfg()).unwrap();
        assert!((&r.y_star - v(&[0.0, 0.0])).amax() < 1e-12);
        assert_eq!(r.active, vec![0, 1]);
        check_kkt(&z, &c, &r);
        // y - z + Aᵀλ = 0 along the normal [1, -1]
        assert!((r.lambda[0] - r.lambda[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn feasible_input_is_fixed() {
        let c = build_mean_parity(&[false, true], 0.5).unwrap();
        let z = v(&[0.3, 0.1]);
        let r = project(&z, &c, &cfg()).unwrap();
        assert_eq!(r.y_star, z);
        assert_eq!(r.lambda, DVector::zeros(2));
        assert!(r.active.is_empty());
        assert_eq!(r.iterations, 0);
    }

    #[test]
    fn gap_clipped_to_tolerance() {
        let c = build_mean_parity(&[false, true], 0.4).unwrap();
        let z = v(&[1.0, 0.0]);
        let r = project(&z, &c, &cfg()).unwrap();
        let oracle = project_oracle(&z, &c).unwrap();
        // gap of the raw input is 1; the projection leaves exactly 0.4
        assert!((&oracle - v(&[0.7, 0.3])).amax() < 1e-12);
        assert!((&r.y_star - oracle).amax() < 1e-12);
        assert_eq!(r.active, vec![0]);
        check_kkt(&z, &c, &r);
    }

    #[test]
    fn halfspace_formula() {
        let a = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, -1.0]);
        let c = ConstraintSet::inequalities_only(a, v(&[0.5])).unwrap();
        let z = v(&[1.0, 1.0, 0.0]);
        let an = v(&[1.0, 2.0, -1.0]);
        let expect = &z - &an * ((an.dot(&z) - 0.5) / an.norm_squared());
        let got = project_oracle(&z, &c).unwrap();
        assert!((&got - &expect).amax() < 1e-12);
        assert!((project(&z, &c, &cfg()).unwrap().y_star - expect).amax() < 1e-12);
        // inside: oracle returns z itself
        let inside = v(&[0.0, 0.0, 0.0]);
        assert_eq!(project_oracle(&inside, &c).unwrap(), inside);
    }

    #[test]
    fn infeasible_reported() {
        let a = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let c = ConstraintSet::inequalities_only(a, v(&[0.0, -1.0])).unwrap();
        assert_eq!(project(&v(&[0.3]), &c, &cfg()), Err(Error::Infeasible));
        assert_eq!(project_oracle(&v(&[0.3]), &c), Err(Error::Infeasible));
        let f = feasibility_check(&c, &cfg());
        assert!(!f.feasible && f.witness.is_none());
    }

    #[test]
    fn feasibility_witnesses() {
        let masks = GroupMasks::single("g", vec![false, true, true, false]);
        let specs = [FairnessSpec::mean_parity("g", 0.0), FairnessSpec::bounds(0.0, 1.0)];
        let c = compile(&specs, &masks, None, 4).unwrap();
        let f = feasibility_check(&c, &cfg());
        assert!(f.feasible);
        assert_eq!(f.witness.unwrap(), DVector::from_element(4, 0.5));

        let f = feasibility_check(&ConstraintSet::empty(3), &cfg());
        assert_eq!(f.witness.unwrap(), DVector::zeros(3));

        // needs the phase-1 projection: y1 + y2 = 3 and y1 - y2 <= -5
        let a = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        let b = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let c = ConstraintSet::from_parts(a, v(&[-5.0]), b, v(&[3.0])).unwrap();
        let f = feasibility_check(&c, &cfg());
        assert!(f.feasible);
        assert!(c.is_satisfied(&f.witness.unwrap(), 1e-9));
    }

    #[test]
    fn equality_rows() {
        let a = DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
        let b = DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        // dependent but consistent equalities
        let c = ConstraintSet::from_parts(a, v(&[0.2]), b, v(&[1.0, 2.0])).unwrap();
        let z = v(&[3.0, -1.0, 0.5]);
        let r = project(&z, &c, &cfg()).unwrap();
        check_kkt(&z, &c, &r);
        assert!((r.y_star - project_oracle(&z, &c).unwrap()).amax() < 1e-10);
    }

    #[test]
    fn box_and_parity_mix() {
        let mask = [false, false, true, true, true];
        let mut c = build_mean_parity(&mask, 0.05).unwrap();
        c.stack(&build_box(0.0, 1.0, 5).unwrap(), 1).unwrap();
        let z = v(&[1.7, 0.9, -0.4, 0.2, 0.05]);
        let r = project(&z, &c, &cfg()).unwrap();
        check_kkt(&z, &c, &r);
        assert!((&r.y_star - project_oracle(&z, &c).unwrap()).amax() < 1e-9);
        // 10 box rows + 2 parity rows is within the oracle budget
        assert_eq!(c.num_ineq(), 12);
    }

    #[test]
    fn oracle_budget() {
        let c = build_box(0.0, 1.0, 7).unwrap();
        assert!(matches!(
            project_oracle(&DVector::zeros(7), &c),
            Err(Error::TooManyConstraints { rows: 14, .. })
        ));
    }

    #[test]
    fn mu_scaling() {
        let c = build_mean_parity(&[false, true], 0.0).unwrap();
        let z = v(&[2.0, -1.0]);
        let cfg2 = SolverConfig { mu: 2.0, ..cfg() };
        let r = project(&z, &c, &cfg2).unwrap();
        assert!((&r.y_star - v(&[0.25, 0.25])).amax() < 1e-12);
        assert!(r.stationarity_residual < 1e-12);
    }

    #[test]
    fn penalized_closed_form() {
        let z = [1.0, 0.0];
        let a = [1.0, -1.0];
        assert_eq!(project_penalized(&z, 0.0, &a).unwrap(), z.to_vec());
        let y = project_penalized(&z, 0.5, &a).unwrap();
        assert!((y[0] - 0.75).abs() < 1e-15 && (y[1] - 0.25).abs() < 1e-15);
        let y = project_penalized(&z, 1e9, &a).unwrap();
        assert!(dot(&a, &y).abs() < 1e-12);
        assert_eq!(project_penalized(&z, 1.0, &[0.0, 0.0]), Err(Error::ZeroDirection));
    }

    /// Brute-force minimisation of the penalised objective on the line
    /// `y = z + s a` (the minimiser lies on it) over a fine grid of `s`.
    fn grid_penalized(z: &[f64], kappa: f64, a: &[f64]) -> Vec<f64> {
        let obj = |s: f64| {
            let y: Vec<f64> = z.iter().zip(a).map(|(zi, ai)| zi + s * ai).collect();
            let d: f64 = y.iter().zip(z).map(|(p, q)| (p - q) * (p - q)).sum();
            d + kappa * dot(a, &y).abs()
        };
        let (mut lo, mut hi) = (-10.0f64, 10.0f64);
        for _ in 0..6 {
            let steps = 2000;
            let h = (hi - lo) / steps as f64;
            let (best, _) = (0..=steps)
                .map(|k| lo + k as f64 * h)
                .map(|s| (s, obj(s)))
                .fold((0.0, f64::INFINITY), |acc, (s, f)| if f < acc.1 { (s, f) } else { acc });
            lo = best - 2.0 * h;
            hi = best + 2.0 * h;
        }
        let s = 0.5 * (lo + hi);
        z.iter().zip(a).map(|(zi, ai)| zi + s * ai).collect()
    }

    #[test]
    fn penalized_matches_grid_search() {
        let g = grid_penalized(&[1.0, 0.0], 0.5, &[1.0, -1.0]);
        assert!((g[0] - 0.75).abs() < 1e-6 && (g[1] - 0.25).abs() < 1e-6);
    }

    #[test]
    fn penalized_terms_single_matches_closed_form() {
        let z = [0.4, -0.3, 1.2, 0.0];
        let a = vec![0.5, 0.5, -0.5, -0.5];
        let term = GapTerm { spec: 0, term: 0, coeffs: a.clone(), offset: 0.0 };
        let y1 = project_penalized_terms(&z, 0.3, &[term], 1e-14, 100).unwrap();
        let y2 = project_penalized(&z, 0.3, &a).unwrap();
        for (p, q) in y1.iter().zip(&y2) {
            assert!((p - q).abs() < 1e-14);
        }
    }

    #[test]
    fn penalized_terms_multi_optimality() {
        // subgradient optimality: 2(y - z) + kappa Σ s_j a_j = 0 with s_j ∈ ∂|·|
        let z = [1.0, -0.5, 0.7, 0.2, -1.1, 0.3];
        let t1 = GapTerm { spec: 0, term: 0, coeffs: vec![0.5, 0.5, -0.5, -0.5, 0.0, 0.0], offset: 0.0 };
        let t2 = GapTerm { spec: 1, term: 0, coeffs: vec![1.0 / 3.0, 0.0, 1.0 / 3.0, 1.0 / 3.0, -0.5, -0.5], offset: 0.1 };
        let kappa = 0.4;
        let y = project_penalized_terms(&z, kappa, &[t1.clone(), t2.clone()], 1e-15, 10_000).unwrap();
        let obj = |y: &[f64]| {
            let d: f64 = y.iter().zip(&z).map(|(p, q)| (p - q) * (p - q)).sum();
            d + kappa * (t1.value(y) + t2.value(y))
        };
        let base = obj(&y);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        use rand::Rng;
        for _ in 0..500 {
            let pert: Vec<f64> = y.iter().map(|v| v + 1e-3 * rng.random_range(-1.0..1.0)).collect();
            assert!(obj(&pert) >= base - 1e-12);
        }
    }

    #[test]
    fn cholesky_remove_matches_refactor() {
        let gram = [
            [4.0, 1.0, 0.5, 0.2],
            [1.0, 3.0, 0.3, 0.1],
            [0.5, 0.3, 2.0, 0.4],
            [0.2, 0.1, 0.4, 5.0],
        ];
        let factor = |idx: &[usize]| {
            let mut ch = GrowingCholesky::default();
            for (k, &i) in idx.iter().enumerate() {
                let g: Vec<f64> = idx[..k].iter().map(|&j| gram[i][j]).collect();
                let l = ch.forward(&g);
                let d = (gram[i][i] - l.iter().map(|x| x * x).sum::<f64>()).sqrt();
                ch.push(l, d);
            }
            ch
        };
        let mut ch = factor(&[0, 1, 2, 3]);
        ch.remove(1);
        let reference = factor(&[0, 2, 3]);
        for (r1, r2) in ch.rows.iter().zip(&reference.rows) {
            for (a, b) in r1.iter().zip(r2) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn oracle_agreement_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..40 {
            let inst = random_instance(&mut rng, 8, 6, 1);
            let r = project(&inst.z, &inst.set, &cfg()).unwrap();
            check_kkt(&inst.z, &inst.set, &r);
            let o = project_oracle(&inst.z, &inst.set).unwrap();
            assert!((&r.y_star - &o).amax() < 1e-8);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn nonexpansive_and_idempotent(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inst = random_instance(&mut rng, 10, 8, 0);
            let z2 = inst.z.map(|x| x * 0.7 + 0.3);
            let p1 = project(&inst.z, &inst.set, &cfg()).unwrap();
            let p2 = project(&z2, &inst.set, &cfg()).unwrap();
            prop_assert!((&p1.y_star - &p2.y_star).norm() <= (&inst.z - &z2).norm() + 1e-9);
            let again = project(&p1.y_star, &inst.set, &cfg()).unwrap();
            prop_assert!((&again.y_star - &p1.y_star).amax() <= 1e-9);
        }
    }
}
