//! Differentiation through the projection layer.
//!
//! Linearising the KKT conditions at a solution with differentiation rows
//! `M = [A_A; B]` gives the block system
//!
//! ```text
//! [ mu·I  Mᵀ ] [ dy ]   [ dz ]
//! [ M     0  ] [ dw ] = [ 0  ]
//! ```
//!
//! whose solution is `dy = (I - Mᵀ(MMᵀ)⁻¹M) dz / mu`. [`LayerJacobian`]
//! eliminates the `mu·I` block and keeps a Cholesky factor of `MMᵀ`; the
//! dense block matrix is available through [`LayerJacobian::kkt_matrix`] for
//! cross-checking.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::constraints::ConstraintSet;
use crate::error::{Error, Result};
use crate::qp::{feasibility_check, project, ProjectionResult, SolverConfig};

/// Jacobian of the layer at one projection result.
#[derive(Debug, Clone)]
pub struct LayerJacobian {
    n: usize,
    mu: f64,
    /// Differentiation rows `[A_A; B]`.
    rows: DMatrix<f64>,
    rhs: DVector<f64>,
    active: Vec<usize>,
    factor: Option<Cholesky<f64, Dyn>>,
    ridge_applied: bool,
    weakly_active_dropped: usize,
}

impl LayerJacobian {
    /// Assemble the Jacobian; weakly active rows are left out of `A_A`.
    pub fn new(result: &ProjectionResult, c: &ConstraintSet, cfg: &SolverConfig) -> Result<Self> {
        let n = c.n();
        if result.y_star.len() != n {
            return Err(Error::DimensionMismatch("result and constraint set differ in size".into()));
        }
        let active = result.differentiation_set();
        let k = active.len() + c.num_eq();
        let mut rows = DMatrix::zeros(k, n);
        let mut rhs = DVector::zeros(k);
        for (r, &i) in active.iter().enumerate() {
            rows.row_mut(r).copy_from(&c.a().row(i));
            rhs[r] = c.m1()[i];
        }
        for j in 0..c.num_eq() {
            rows.row_mut(active.len() + j).copy_from(&c.b().row(j));
            rhs[active.len() + j] = c.m2()[j];
        }
        let mut jac = Self {
            n,
            mu: cfg.mu,
            rows,
            rhs,
            active,
            factor: None,
            ridge_applied: false,
            weakly_active_dropped: result.weakly_active.len(),
        };
        if k > 0 {
            jac.factorize(cfg.ridge)?;
        }
        Ok(jac)
    }

    fn factorize(&mut self, ridge: f64) -> Result<()> {
        let gram = &self.rows * self.rows.transpose();
        let scale = gram.diagonal().amax().max(1.0);
        let well_posed = |f: &Cholesky<f64, Dyn>| {
            let d = f.l_dirty().diagonal();
            d.iter().all(|&x| x * x > 1e-10 * scale)
        };
        if let Some(f) = gram.clone().cholesky().filter(well_posed) {
            self.factor = Some(f);
            return Ok(());
        }
        let k = gram.nrows();
        let ridged = gram + DMatrix::identity(k, k) * (ridge * scale);
        self.factor = Some(ridged.cholesky().ok_or(Error::SingularKkt)?);
        self.ridge_applied = true;
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Inequality rows in `A_A`.
    pub fn active_rows(&self) -> &[usize] {
        &self.active
    }

    /// `[A_A; B]` stacked.
    pub fn constraint_rows(&self) -> &DMatrix<f64> {
        &self.rows
    }

    /// LICQ failed on the active rows and a ridge was added to `MMᵀ`.
    pub fn ridge_applied(&self) -> bool {
        self.ridge_applied
    }

    pub fn weakly_active_dropped(&self) -> usize {
        self.weakly_active_dropped
    }

    fn check_len(&self, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.n {
            return Err(Error::DimensionMismatch(format!(
                "vector has {} entries, layer has {}",
                v.len(),
                self.n
            )));
        }
        Ok(())
    }

    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.factor {
            None => v / self.mu,
            Some(f) => {
                let w = f.solve(&(&self.rows * v));
                (v - self.rows.tr_mul(&w)) / self.mu
            }
        }
    }

    /// Forward-mode product `Dg(z) dz`.
    pub fn jvp(&self, dz: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_len(dz)?;
        Ok(self.apply(dz))
    }

    /// Reverse-mode product `Dg(z)ᵀ v`, from the transposed block system.
    pub fn vjp(&self, v_bar: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_len(v_bar)?;
        // Kᵀ = K here, so the same elimination applies
        Ok(self.apply(v_bar))
    }

    /// The full block KKT matrix `K`.
    pub fn kkt_matrix(&self) -> DMatrix<f64> {
        let k = self.rows.nrows();
        let mut kkt = DMatrix::zeros(self.n + k, self.n + k);
        kkt.view_mut((0, 0), (self.n, self.n)).fill_with_identity();
        kkt.view_mut((0, 0), (self.n, self.n)).scale_mut(self.mu);
        kkt.view_mut((0, self.n), (self.n, k)).copy_from(&self.rows.transpose());
        kkt.view_mut((self.n, 0), (k, self.n)).copy_from(&self.rows);
        kkt
    }

    /// `jvp` by a dense LU solve of the full block system.
    pub fn jvp_block(&self, dz: &DVector<f64>) -> Result<DVector<f64>> {
        self.solve_block(dz, false)
    }

    /// `vjp` by a dense LU solve of the transposed block system.
    pub fn vjp_block(&self, v_bar: &DVector<f64>) -> Result<DVector<f64>> {
        self.solve_block(v_bar, true)
    }

    fn solve_block(&self, v: &DVector<f64>, transpose: bool) -> Result<DVector<f64>> {
        self.check_len(v)?;
        let kkt = if transpose { self.kkt_matrix().transpose() } else { self.kkt_matrix() };
        let mut rhs = DVector::zeros(kkt.nrows());
        rhs.rows_mut(0, self.n).copy_from(v);
        let sol = kkt.full_piv_lu().solve(&rhs).ok_or(Error::SingularKkt)?;
        Ok(sol.rows(0, self.n).into_owned())
    }

    /// Materialised Jacobian `P_I / mu`.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n, self.n);
        for j in 0..self.n {
            let mut e = DVector::zeros(self.n);
            e[j] = 1.0;
            out.set_column(j, &self.apply(&e));
        }
        out
    }

    /// Right-hand sides of `[A_A; B]`.
    pub fn rows_rhs(&self) -> &DVector<f64> {
        &self.rhs
    }
}

pub fn jvp(
    result: &ProjectionResult,
    c: &ConstraintSet,
    dz: &DVector<f64>,
    cfg: &SolverConfig,
) -> Result<DVector<f64>> {
    LayerJacobian::new(result, c, cfg)?.jvp(dz)
}

pub fn vjp(
    result: &ProjectionResult,
    c: &ConstraintSet,
    v_bar: &DVector<f64>,
    cfg: &SolverConfig,
) -> Result<DVector<f64>> {
    LayerJacobian::new(result, c, cfg)?.vjp(v_bar)
}

/// Closed-form affine piece `g(z) = P_I z + c_I` of the region containing `result`.
///
/// `P_I = I - Mᵀ(MMᵀ)⁺M` and `c_I = Mᵀ(MMᵀ)⁺r` with `M = [A_A; B]` and `r`
/// the matching right-hand sides, computed with an SVD pseudo-inverse.
pub fn region_projector(
    result: &ProjectionResult,
    c: &ConstraintSet,
    cfg: &SolverConfig,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let jac = LayerJacobian::new(result, c, cfg)?;
    let n = c.n();
    let m = jac.constraint_rows();
    if m.nrows() == 0 {
        return Ok((DMatrix::identity(n, n) / cfg.mu, DVector::zeros(n)));
    }
    let pinv = (m * m.transpose()).pseudo_inverse(1e-12).map_err(|_| Error::SingularKkt)?;
    let p = DMatrix::identity(n, n) - m.transpose() * &pinv * m;
    let offset = m.transpose() * &pinv * jac.rows_rhs();
    Ok((p / cfg.mu, offset))
}

/// Eigenvalue check of a region projector.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralReport {
    pub eigenvalues: Vec<f64>,
    /// `max_i min(|e_i|, |e_i - 1|)`.
    pub binary_distance: f64,
    pub spectral_norm: f64,
    /// `max ‖A_A P v‖∞` over the random probes.
    pub suppression: f64,
}

pub const SPECTRAL_TOL: f64 = 1e-8;

/// Eigenvalues of `p` must lie in `{0, 1}` and `p` must annihilate the rows of
/// `active` (gradient suppression), both within [`SPECTRAL_TOL`].
pub fn spectral_diagnostics(
    p: &DMatrix<f64>,
    active: &DMatrix<f64>,
    probes: usize,
    seed: u64,
) -> Result<SpectralReport> {
    let report = spectral_report(p, active, probes, seed)?;
    if report.binary_distance > SPECTRAL_TOL {
        return Err(Error::SpectrumViolation(format!(
            "eigenvalue {:e} away from {{0, 1}}",
            report.binary_distance
        )));
    }
    if report.suppression > SPECTRAL_TOL {
        return Err(Error::SpectrumViolation(format!(
            "active rows leak {:e} through the projector",
            report.suppression
        )));
    }
    Ok(report)
}

/// The measurements behind [`spectral_diagnostics`], without thresholds.
pub fn spectral_report(
    p: &DMatrix<f64>,
    active: &DMatrix<f64>,
    probes: usize,
    seed: u64,
) -> Result<SpectralReport> {
    let n = p.nrows();
    if p.ncols() != n || (active.nrows() > 0 && active.ncols() != n) {
        return Err(Error::DimensionMismatch("projector must be square".into()));
    }
    let sym = (p + p.transpose()) * 0.5;
    let mut eigenvalues: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
    eigenvalues.sort_by(f64::total_cmp);
    let binary_distance = eigenvalues
        .iter()
        .map(|e| e.abs().min((e - 1.0).abs()))
        .fold(0.0, f64::max);
    let spectral_norm = eigenvalues.iter().map(|e| e.abs()).fold(0.0, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut suppression = 0.0f64;
    if active.nrows() > 0 {
        for _ in 0..probes {
            let v = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
            suppression = suppression.max((active * (p * v)).amax());
        }
    }
    Ok(SpectralReport { eigenvalues, binary_distance, spectral_norm, suppression })
}

/// Largest observed `‖g(z1) - g(z2)‖ / ‖z1 - z2‖` over random pairs.
pub fn lipschitz_probe(
    c: &ConstraintSet,
    trials: usize,
    seed: u64,
    cfg: &SolverConfig,
) -> Result<f64> {
    let center = feasibility_check(c, cfg).witness.ok_or(Error::Infeasible)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = c.n();
    let mut worst = 0.0f64;
    for t in 0..trials {
        // alternate wide and close pairs so both far and local behaviour are probed
        let spread = if t % 2 == 0 { 3.0 } else { 0.05 };
        let z1 = DVector::from_fn(n, |i, _| center[i] + 2.0 * sample(&mut rng));
        let z2 = DVector::from_fn(n, |i, _| z1[i] + spread * sample(&mut rng));
        let dz = (&z1 - &z2).norm();
        if dz == 0.0 {
            continue;
        }
        let g1 = project(&z1, c, cfg)?.y_star;
        let g2 = project(&z2, c, cfg)?.y_star;
        worst = worst.max((g1 - g2).norm() / dz);
    }
    Ok(worst)
}

fn sample(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}
