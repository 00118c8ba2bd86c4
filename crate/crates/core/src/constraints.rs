//! Fairness criteria compiled into stacked affine constraint systems.
//!
//! Every absolute-value criterion `|aᵀy - c| <= eps` is expanded into the
//! two one-sided rows `aᵀy <= eps + c` and `-aᵀy <= eps - c`. Rows carry a
//! [`RowTag`] naming the spec (index into the compiled list) and the term
//! (region or group) they came from.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary membership vectors, one per protected attribute.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroupMasks {
    len: usize,
    attrs: Vec<(String, Vec<bool>)>,
}

impl GroupMasks {
    pub fn new(len: usize) -> Self {
        Self { len, attrs: Vec::new() }
    }

    /// Single-attribute masks, handy for tests and streaming batches.
    pub fn single(id: impl Into<String>, mask: Vec<bool>) -> Self {
        let mut masks = Self::new(mask.len());
        masks.attrs.push((id.into(), mask));
        masks
    }

    pub fn insert(&mut self, id: impl Into<String>, mask: Vec<bool>) -> Result<()> {
        let id = id.into();
        if mask.len() != self.len {
            return Err(Error::InvalidMasks(format!(
                "mask `{id}` has length {} but batch size is {}",
                mask.len(),
                self.len
            )));
        }
        if self.attrs.iter().any(|(k, _)| *k == id) {
            return Err(Error::InvalidMasks(format!("duplicate attribute `{id}`")));
        }
        self.attrs.push((id, mask));
        Ok(())
    }

    /// Insert a mask given as 0/1 values; anything else is rejected.
    pub fn insert_binary(&mut self, id: impl Into<String>, values: &[f64]) -> Result<()> {
        let id = id.into();
        let mask = values
            .iter()
            .map(|&v| {
                if v == 0.0 {
                    Ok(false)
                } else if v == 1.0 {
                    Ok(true)
                } else {
                    Err(Error::InvalidMasks(format!("mask `{id}` has non-binary entry {v}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        self.insert(id, mask)
    }

    pub fn get(&self, id: &str) -> Option<&[bool]> {
        self.attrs.iter().find(|(k, _)| k == id).map(|(_, m)| m.as_slice())
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn attributes(&self) -> impl Iterator<Item = &str> {
        self.attrs.iter().map(|(k, _)| k.as_str())
    }

    /// Restrict every mask to the given sample indices.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            len: idx.len(),
            attrs: self
                .attrs
                .iter()
                .map(|(k, m)| (k.clone(), idx.iter().map(|&i| m[i]).collect()))
                .collect(),
        }
    }
}

/// Closed interval on the target used by equalized odds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub lo: f64,
    pub hi: f64,
}

impl Region {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn contains(&self, y: f64) -> bool {
        y >= self.lo && y <= self.hi
    }

    fn overlaps(&self, other: &Region) -> bool {
        self.lo <= other.hi && other.lo <= self.hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FairnessKind {
    MeanParity,
    EqualizedResiduals,
    GroupResidual,
    EqualizedOdds {
        regions: Vec<Region>,
    },
    Box {
        lower: f64,
        upper: f64,
    },
    /// Raw rows over the batch; only valid for a fixed batch size.
    GenericAffine {
        #[serde(default)]
        ineq: Vec<Vec<f64>>,
        #[serde(default)]
        ineq_rhs: Vec<f64>,
        #[serde(default)]
        eq: Vec<Vec<f64>>,
        #[serde(default)]
        eq_rhs: Vec<f64>,
    },
}

/// One declarative fairness criterion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessSpec {
    #[serde(flatten)]
    pub kind: FairnessKind,
    #[serde(default)]
    pub tolerance: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute: Option<String>,
}

impl FairnessSpec {
    pub fn mean_parity(attribute: impl Into<String>, tolerance: f64) -> Self {
        Self { kind: FairnessKind::MeanParity, tolerance, attribute: Some(attribute.into()) }
    }

    pub fn equalized_residuals(attribute: impl Into<String>, tolerance: f64) -> Self {
        Self {
            kind: FairnessKind::EqualizedResiduals,
            tolerance,
            attribute: Some(attribute.into()),
        }
    }

    pub fn group_residual(attribute: impl Into<String>, tolerance: f64) -> Self {
        Self { kind: FairnessKind::GroupResidual, tolerance, attribute: Some(attribute.into()) }
    }

    pub fn equalized_odds(
        attribute: impl Into<String>,
        regions: Vec<Region>,
        tolerance: f64,
    ) -> Self {
        Self {
            kind: FairnessKind::EqualizedOdds { regions },
            tolerance,
            attribute: Some(attribute.into()),
        }
    }

    pub fn bounds(lower: f64, upper: f64) -> Self {
        Self { kind: FairnessKind::Box { lower, upper }, tolerance: 0.0, attribute: None }
    }

    /// True for the kinds whose gap is a difference (or level) of group means.
    pub fn is_group_criterion(&self) -> bool {
        !matches!(self.kind, FairnessKind::Box { .. } | FairnessKind::GenericAffine { .. })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance >= 0.0) || !self.tolerance.is_finite() {
            return Err(Error::InvalidSpec(format!("tolerance {} must be >= 0", self.tolerance)));
        }
        match &self.kind {
            FairnessKind::Box { lower, upper } => {
                if !(lower <= upper) {
                    return Err(Error::InvalidBounds { lower: *lower, upper: *upper });
                }
            }
            FairnessKind::EqualizedOdds { regions } => {
                if regions.is_empty() {
                    return Err(Error::InvalidSpec("equalized odds needs at least one region".into()));
                }
                for (i, r) in regions.iter().enumerate() {
                    if !(r.lo <= r.hi) {
                        return Err(Error::InvalidSpec(format!("region {i} is empty")));
                    }
                    if regions[..i].iter().any(|o| o.overlaps(r)) {
                        return Err(Error::InvalidSpec(format!("region {i} overlaps an earlier one")));
                    }
                }
            }
            FairnessKind::GenericAffine { ineq, ineq_rhs, eq, eq_rhs } => {
                if ineq.len() != ineq_rhs.len() || eq.len() != eq_rhs.len() {
                    return Err(Error::InvalidSpec("row and right-hand side counts differ".into()));
                }
            }
            _ => {}
        }
        if self.is_group_criterion() && self.attribute.is_none() {
            return Err(Error::InvalidSpec("group criterion without attribute".into()));
        }
        Ok(())
    }
}

/// Provenance of a constraint row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RowTag {
    /// Index of the originating spec in the compiled list.
    pub spec: usize,
    /// Region (equalized odds), group (group residual) or row index within the spec.
    pub term: usize,
}

/// Stacked system `A y <= m1`, `B y = m2` over a batch of `n` predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    n: usize,
    a: DMatrix<f64>,
    m1: DVector<f64>,
    b: DMatrix<f64>,
    m2: DVector<f64>,
    ineq_tags: Vec<RowTag>,
    eq_tags: Vec<RowTag>,
    warnings: Vec<String>,
}

impl ConstraintSet {
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            a: DMatrix::zeros(0, n),
            m1: DVector::zeros(0),
            b: DMatrix::zeros(0, n),
            m2: DVector::zeros(0),
            ineq_tags: Vec::new(),
            eq_tags: Vec::new(),
            warnings: Vec::new(),
        }
    }

    /// Build from explicit matrices, tagging every row with spec 0.
    pub fn from_parts(
        a: DMatrix<f64>,
        m1: DVector<f64>,
        b: DMatrix<f64>,
        m2: DVector<f64>,
    ) -> Result<Self> {
        let n = a.ncols();
        if b.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "A has {n} columns but B has {}",
                b.ncols()
            )));
        }
        if a.nrows() != m1.len() || b.nrows() != m2.len() {
            return Err(Error::DimensionMismatch("row count and right-hand side differ".into()));
        }
        if a.iter().chain(m1.iter()).chain(b.iter()).chain(m2.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidSpec("non-finite constraint entry".into()));
        }
        let ineq_tags = (0..a.nrows()).map(|term| RowTag { spec: 0, term }).collect();
        let eq_tags = (0..b.nrows()).map(|term| RowTag { spec: 0, term }).collect();
        Ok(Self { n, a, m1, b, m2, ineq_tags, eq_tags, warnings: Vec::new() })
    }

    pub fn inequalities_only(a: DMatrix<f64>, m1: DVector<f64>) -> Result<Self> {
        let n = a.ncols();
        Self::from_parts(a, m1, DMatrix::zeros(0, n), DVector::zeros(0))
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn num_ineq(&self) -> usize {
        self.a.nrows()
    }
    pub fn num_eq(&self) -> usize {
        self.b.nrows()
    }
    pub fn is_empty(&self) -> bool {
        self.num_ineq() == 0 && self.num_eq() == 0
    }
    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn m1(&self) -> &DVector<f64> {
        &self.m1
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
    pub fn m2(&self) -> &DVector<f64> {
        &self.m2
    }
    pub fn ineq_tags(&self) -> &[RowTag] {
        &self.ineq_tags
    }
    pub fn eq_tags(&self) -> &[RowTag] {
        &self.eq_tags
    }
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Inequality row indices originating from `spec`.
    pub fn rows_for_spec(&self, spec: usize) -> Vec<usize> {
        self.ineq_tags
            .iter()
            .enumerate()
            .filter(|(_, t)| t.spec == spec)
            .map(|(i, _)| i)
            .collect()
    }

    /// Largest violation over all rows: `max(0, max(Ay - m1), max|By - m2|)`.
    pub fn max_violation(&self, y: &DVector<f64>) -> f64 {
        let mut worst = 0.0f64;
        if self.num_ineq() > 0 {
            let r = &self.a * y - &self.m1;
            worst = r.iter().fold(worst, |w, &v| w.max(v));
        }
        if self.num_eq() > 0 {
            let r = &self.b * y - &self.m2;
            worst = r.iter().fold(worst, |w, &v| w.max(v.abs()));
        }
        worst
    }

    pub fn is_satisfied(&self, y: &DVector<f64>, tol: f64) -> bool {
        self.max_violation(y) <= tol
    }

    /// Append all rows of `other`, shifting its spec tags by `spec_offset`.
    pub fn stack(&mut self, other: &ConstraintSet, spec_offset: usize) -> Result<()> {
        if other.n != self.n {
            return Err(Error::DimensionMismatch(format!(
                "cannot stack a system over {} predictions onto one over {}",
                other.n, self.n
            )));
        }
        self.a = vstack(&self.a, &other.a);
        self.m1 = vcat(&self.m1, &other.m1);
        self.b = vstack(&self.b, &other.b);
        self.m2 = vcat(&self.m2, &other.m2);
        let shift = |t: &RowTag| RowTag { spec: t.spec + spec_offset, term: t.term };
        self.ineq_tags.extend(other.ineq_tags.iter().map(shift));
        self.eq_tags.extend(other.eq_tags.iter().map(shift));
        self.warnings.extend(other.warnings.iter().cloned());
        Ok(())
    }

    fn from_rows(n: usize, rows: Vec<(Vec<f64>, f64, RowTag)>, warnings: Vec<String>) -> Self {
        let q = rows.len();
        let a = DMatrix::from_row_iterator(q, n, rows.iter().flat_map(|(r, _, _)| r.iter().copied()));
        let m1 = DVector::from_iterator(q, rows.iter().map(|(_, c, _)| *c));
        let ineq_tags = rows.iter().map(|(_, _, t)| *t).collect();
        Self {
            n,
            a,
            m1,
            b: DMatrix::zeros(0, n),
            m2: DVector::zeros(0),
            ineq_tags,
            eq_tags: Vec::new(),
            warnings,
        }
    }
}

fn vstack(top: &DMatrix<f64>, bottom: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(top.nrows() + bottom.nrows(), top.ncols());
    out.rows_mut(0, top.nrows()).copy_from(top);
    out.rows_mut(top.nrows(), bottom.nrows()).copy_from(bottom);
    out
}

fn vcat(top: &DVector<f64>, bottom: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(top.len() + bottom.len(), top.iter().chain(bottom.iter()).copied())
}

/// One absolute-value term `|coeffs·y - offset|` of a group criterion.
#[derive(Debug, Clone, PartialEq)]
pub struct GapTerm {
    pub spec: usize,
    pub term: usize,
    pub coeffs: Vec<f64>,
    pub offset: f64,
}

impl GapTerm {
    pub fn signed(&self, y: &[f64]) -> f64 {
        dot(&self.coeffs, y) - self.offset
    }

    pub fn value(&self, y: &[f64]) -> f64 {
        self.signed(y).abs()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn group_counts(mask: &[bool]) -> (usize, usize) {
    let n1 = mask.iter().filter(|&&m| m).count();
    (mask.len() - n1, n1)
}

/// Mean-difference coefficients: `1/n0` on group 0, `-1/n1` on group 1.
pub fn parity_direction(mask: &[bool]) -> Result<Vec<f64>> {
    let (n0, n1) = group_counts(mask);
    if n0 == 0 || n1 == 0 {
        return Err(Error::DegenerateGroup(format!(
            "batch of {} has {n0} non-members and {n1} members",
            mask.len()
        )));
    }
    let (w0, w1) = (1.0 / n0 as f64, -1.0 / n1 as f64);
    Ok(mask.iter().map(|&m| if m { w1 } else { w0 }).collect())
}

fn check_len(what: &str, len: usize, n: usize) -> Result<()> {
    if len != n {
        return Err(Error::DimensionMismatch(format!("{what} has length {len}, expected {n}")));
    }
    Ok(())
}

fn terms_to_rows(terms: &[GapTerm], eps: f64) -> Vec<(Vec<f64>, f64, RowTag)> {
    let mut rows = Vec::with_capacity(2 * terms.len());
    for t in terms {
        let tag = RowTag { spec: t.spec, term: t.term };
        rows.push((t.coeffs.clone(), eps + t.offset, tag));
        rows.push((t.coeffs.iter().map(|v| -v).collect(), eps - t.offset, tag));
    }
    rows
}

fn mean_parity_terms(mask: &[bool]) -> Result<Vec<GapTerm>> {
    Ok(vec![GapTerm { spec: 0, term: 0, coeffs: parity_direction(mask)?, offset: 0.0 }])
}

fn equalized_residual_terms(mask: &[bool], y_true: &[f64]) -> Result<Vec<GapTerm>> {
    check_len("y_true", y_true.len(), mask.len())?;
    let a = parity_direction(mask)?;
    let offset = dot(&a, y_true);
    Ok(vec![GapTerm { spec: 0, term: 0, coeffs: a, offset }])
}

fn group_residual_terms(mask: &[bool], y_true: &[f64]) -> Result<Vec<GapTerm>> {
    check_len("y_true", y_true.len(), mask.len())?;
    let (n0, n1) = group_counts(mask);
    if n0 == 0 || n1 == 0 {
        return Err(Error::DegenerateGroup(format!(
            "batch of {} has {n0} non-members and {n1} members",
            mask.len()
        )));
    }
    let mut terms = Vec::with_capacity(2);
    for (group, count) in [(false, n0), (true, n1)] {
        let w = 1.0 / count as f64;
        let coeffs: Vec<f64> = mask.iter().map(|&m| if m == group { w } else { 0.0 }).collect();
        let offset = dot(&coeffs, y_true);
        terms.push(GapTerm { spec: 0, term: group as usize, coeffs, offset });
    }
    Ok(terms)
}

fn equalized_odds_terms(
    mask: &[bool],
    y_true: &[f64],
    regions: &[Region],
) -> Result<(Vec<GapTerm>, Vec<String>)> {
    check_len("y_true", y_true.len(), mask.len())?;
    let mut terms = Vec::new();
    let mut warnings = Vec::new();
    for (ri, region) in regions.iter().enumerate() {
        let inside: Vec<bool> = y_true.iter().map(|&y| region.contains(y)).collect();
        let n0 = mask.iter().zip(&inside).filter(|(&m, &i)| i && !m).count();
        let n1 = mask.iter().zip(&inside).filter(|(&m, &i)| i && m).count();
        if n0 == 0 || n1 == 0 {
            warnings.push(format!(
                "region {ri} [{}, {}] skipped: {n0} non-members, {n1} members",
                region.lo, region.hi
            ));
            continue;
        }
        let (w0, w1) = (1.0 / n0 as f64, -1.0 / n1 as f64);
        let coeffs = mask
            .iter()
            .zip(&inside)
            .map(|(&m, &i)| if !i { 0.0 } else if m { w1 } else { w0 })
            .collect();
        terms.push(GapTerm { spec: 0, term: ri, coeffs, offset: 0.0 });
    }
    if terms.is_empty() {
        return Err(Error::NoApplicableRegion);
    }
    Ok((terms, warnings))
}

/// `|mean_0(y) - mean_1(y)| <= eps` as two inequality rows.
pub fn build_mean_parity(mask: &[bool], epsilon: f64) -> Result<ConstraintSet> {
    check_tolerance(epsilon)?;
    let terms = mean_parity_terms(mask)?;
    Ok(ConstraintSet::from_rows(mask.len(), terms_to_rows(&terms, epsilon), Vec::new()))
}

/// `|mean_0(ŷ - y) - mean_1(ŷ - y)| <= eps`.
pub fn build_equalized_residuals(mask: &[bool], y_true: &[f64], epsilon: f64) -> Result<ConstraintSet> {
    check_tolerance(epsilon)?;
    let terms = equalized_residual_terms(mask, y_true)?;
    Ok(ConstraintSet::from_rows(mask.len(), terms_to_rows(&terms, epsilon), Vec::new()))
}

/// `|mean_g(ŷ - y)| <= eps` for both groups; group 0 rows come first.
pub fn build_group_residual(mask: &[bool], y_true: &[f64], epsilon: f64) -> Result<ConstraintSet> {
    check_tolerance(epsilon)?;
    let terms = group_residual_terms(mask, y_true)?;
    Ok(ConstraintSet::from_rows(mask.len(), terms_to_rows(&terms, epsilon), Vec::new()))
}

/// Mean parity restricted to each output region. Regions lacking a group
/// are skipped and recorded in [`ConstraintSet::warnings`].
pub fn build_equalized_odds(
    mask: &[bool],
    y_true: &[f64],
    regions: &[Region],
    epsilon: f64,
) -> Result<ConstraintSet> {
    check_tolerance(epsilon)?;
    let (terms, warnings) = equalized_odds_terms(mask, y_true, regions)?;
    Ok(ConstraintSet::from_rows(mask.len(), terms_to_rows(&terms, epsilon), warnings))
}

/// `lower <= y_i <= upper`: rows `y_i <= upper` for every i, then `-y_i <= -lower`.
pub fn build_box(lower: f64, upper: f64, n: usize) -> Result<ConstraintSet> {
    if !(lower <= upper) {
        return Err(Error::InvalidBounds { lower, upper });
    }
    let mut rows = Vec::with_capacity(2 * n);
    for i in 0..n {
        let mut r = vec![0.0; n];
        r[i] = 1.0;
        rows.push((r, upper, RowTag { spec: 0, term: i }));
    }
    for i in 0..n {
        let mut r = vec![0.0; n];
        r[i] = -1.0;
        rows.push((r, -lower, RowTag { spec: 0, term: n + i }));
    }
    Ok(ConstraintSet::from_rows(n, rows, Vec::new()))
}

fn check_tolerance(epsilon: f64) -> Result<()> {
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(Error::InvalidSpec(format!("tolerance {epsilon} must be >= 0")));
    }
    Ok(())
}

fn build_generic(
    n: usize,
    ineq: &[Vec<f64>],
    ineq_rhs: &[f64],
    eq: &[Vec<f64>],
    eq_rhs: &[f64],
) -> Result<ConstraintSet> {
    for r in ineq.iter().chain(eq) {
        check_len("generic affine row", r.len(), n)?;
    }
    let a = DMatrix::from_row_iterator(ineq.len(), n, ineq.iter().flatten().copied());
    let b = DMatrix::from_row_iterator(eq.len(), n, eq.iter().flatten().copied());
    ConstraintSet::from_parts(
        a,
        DVector::from_column_slice(ineq_rhs),
        b,
        DVector::from_column_slice(eq_rhs),
    )
}

/// What `compile` does with a spec whose batch lacks one of the groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DegeneratePolicy {
    #[default]
    Error,
    /// Drop the spec for this batch and record a warning.
    Skip,
}

fn resolve_mask<'a>(spec: &FairnessSpec, masks: &'a GroupMasks) -> Result<&'a [bool]> {
    let id = spec
        .attribute
        .as_deref()
        .ok_or_else(|| Error::InvalidSpec("group criterion without attribute".into()))?;
    masks.get(id).ok_or_else(|| Error::UnknownAttribute(id.to_string()))
}

fn require_targets<'a>(y_true: Option<&'a [f64]>, kind: &str) -> Result<&'a [f64]> {
    y_true.ok_or_else(|| Error::InvalidSpec(format!("{kind} needs target values")))
}

/// Gap terms of one group criterion over a batch, plus skip warnings.
pub fn spec_terms(
    spec: &FairnessSpec,
    masks: &GroupMasks,
    y_true: Option<&[f64]>,
) -> Result<(Vec<GapTerm>, Vec<String>)> {
    let mask = resolve_mask(spec, masks)?;
    match &spec.kind {
        FairnessKind::MeanParity => Ok((mean_parity_terms(mask)?, Vec::new())),
        FairnessKind::EqualizedResiduals => {
            let y = require_targets(y_true, "equalized residuals")?;
            Ok((equalized_residual_terms(mask, y)?, Vec::new()))
        }
        FairnessKind::GroupResidual => {
            let y = require_targets(y_true, "group residual")?;
            Ok((group_residual_terms(mask, y)?, Vec::new()))
        }
        FairnessKind::EqualizedOdds { regions } => {
            let y = require_targets(y_true, "equalized odds")?;
            equalized_odds_terms(mask, y, regions)
        }
        FairnessKind::Box { .. } | FairnessKind::GenericAffine { .. } => {
            Err(Error::InvalidSpec("not a group criterion".into()))
        }
    }
}

fn compile_one(
    spec: &FairnessSpec,
    masks: &GroupMasks,
    y_true: Option<&[f64]>,
    n: usize,
) -> Result<ConstraintSet> {
    spec.validate()?;
    match &spec.kind {
        FairnessKind::Box { lower, upper } => build_box(*lower, *upper, n),
        FairnessKind::GenericAffine { ineq, ineq_rhs, eq, eq_rhs } => {
            build_generic(n, ineq, ineq_rhs, eq, eq_rhs)
        }
        _ => {
            let (terms, warnings) = spec_terms(spec, masks, y_true)?;
            Ok(ConstraintSet::from_rows(n, terms_to_rows(&terms, spec.tolerance), warnings))
        }
    }
}

/// Stack every spec's rows into one system; row tags index into `specs`.
pub fn compile(
    specs: &[FairnessSpec],
    masks: &GroupMasks,
    y_true: Option<&[f64]>,
    n: usize,
) -> Result<ConstraintSet> {
    compile_with(specs, masks, y_true, n, DegeneratePolicy::Error)
}

pub fn compile_with(
    specs: &[FairnessSpec],
    masks: &GroupMasks,
    y_true: Option<&[f64]>,
    n: usize,
    policy: DegeneratePolicy,
) -> Result<ConstraintSet> {
    if specs.iter().any(FairnessSpec::is_group_criterion) {
        check_len("group masks", masks.len(), n)?;
    }
    if let Some(y) = y_true {
        check_len("y_true", y.len(), n)?;
    }
    let mut out = ConstraintSet::empty(n);
    for (i, spec) in specs.iter().enumerate() {
        match compile_one(spec, masks, y_true, n) {
            Ok(set) => out.stack(&set, i)?,
            Err(e @ (Error::DegenerateGroup(_) | Error::NoApplicableRegion))
                if policy == DegeneratePolicy::Skip =>
            {
                out.warnings.push(format!("spec {i} skipped: {e}"));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Observed value of one criterion term; satisfied iff `value <= limit`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapValue {
    pub spec: usize,
    pub term: usize,
    pub value: f64,
    pub limit: f64,
}

impl GapValue {
    pub fn satisfied(&self, slack: f64) -> bool {
        self.value <= self.limit + slack
    }
}

/// Batch-level gaps per spec (per region/group where applicable).
///
/// Group criteria report `|F_0 - F_1|` (or `|mean_g(ŷ - y)|` per group for
/// group residuals) against the spec tolerance; box and generic rows report
/// their largest violation against a limit of zero.
pub fn gap(
    specs: &[FairnessSpec],
    masks: &GroupMasks,
    y_true: Option<&[f64]>,
    y_hat: &[f64],
) -> Result<Vec<GapValue>> {
    let n = y_hat.len();
    let yv = DVector::from_column_slice(y_hat);
    let mut out = Vec::new();
    for (i, spec) in specs.iter().enumerate() {
        spec.validate()?;
        if spec.is_group_criterion() {
            let (terms, _) = spec_terms(spec, masks, y_true)?;
            for t in terms {
                check_len("y_hat", n, t.coeffs.len())?;
                out.push(GapValue { spec: i, term: t.term, value: t.value(y_hat), limit: spec.tolerance });
            }
        } else {
            let set = compile_one(spec, masks, y_true, n)?;
            out.push(GapValue { spec: i, term: 0, value: set.max_violation(&yv), limit: 0.0 });
        }
    }
    Ok(out)
}

/// Group sizes and mean statistics `(n_0, n_1, F_0, F_1)` of `values` under `mask`.
pub fn group_means(mask: &[bool], values: &[f64]) -> (usize, usize, f64, f64) {
    let (mut s0, mut s1, mut n0, mut n1) = (0.0, 0.0, 0usize, 0usize);
    for (&m, &v) in mask.iter().zip(values) {
        if m {
            s1 += v;
            n1 += 1;
        } else {
            s0 += v;
            n0 += 1;
        }
    }
    let f0 = if n0 > 0 { s0 / n0 as f64 } else { 0.0 };
    let f1 = if n1 > 0 { s1 / n1 as f64 } else { 0.0 };
    (n0, n1, f0, f1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(bits: &[u8]) -> Vec<bool> {
        bits.iter().map(|&b| b == 1).collect()
    }

    fn rows(set: &ConstraintSet) -> Vec<Vec<f64>> {
        (0..set.num_ineq()).map(|i| set.a().row(i).iter().copied().collect()).collect()
    }

    #[test]
    fn mean_parity_rows() {
        let set = build_mean_parity(&mask(&[0, 0, 1, 1]), 0.1).unwrap();
        assert_eq!(rows(&set), vec![vec![0.5, 0.5, -0.5, -0.5], vec![-0.5, -0.5, 0.5, 0.5]]);
        assert_eq!(set.m1().as_slice(), &[0.1, 0.1]);

        let set = build_mean_parity(&mask(&[0, 1]), 0.0).unwrap();
        assert_eq!(rows(&set), vec![vec![1.0, -1.0], vec![-1.0, 1.0]]);
        assert_eq!(set.m1().as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn mean_parity_degenerate() {
        assert!(matches!(
            build_mean_parity(&mask(&[1, 1, 1, 1]), 0.3),
            Err(Error::DegenerateGroup(_))
        ));
        assert!(matches!(build_mean_parity(&mask(&[0, 0]), 0.0), Err(Error::DegenerateGroup(_))));
    }

    #[test]
    fn equalized_residual_rhs() {
        let set = build_equalized_residuals(&mask(&[0, 1]), &[1.0, 0.0], 0.0).unwrap();
        assert_eq!(rows(&set), vec![vec![1.0, -1.0], vec![-1.0, 1.0]]);
        assert_eq!(set.m1().as_slice(), &[1.0, -1.0]);

        let set = build_equalized_residuals(&mask(&[0, 1]), &[0.0, 0.0], 0.2).unwrap();
        assert_eq!(set.m1().as_slice(), &[0.2, 0.2]);

        let y = [1.0, 1.0, 0.0, 0.0];
        let set = build_equalized_residuals(&mask(&[0, 0, 1, 1]), &y, 0.0).unwrap();
        assert_eq!(set.m1().as_slice(), &[1.0, -1.0]);
        assert_eq!(rows(&set)[0], vec![0.5, 0.5, -0.5, -0.5]);
        // y itself has zero residual gap; so does any shift of it
        for shift in [0.0, 2.5, -1.0] {
            let p: Vec<f64> = y.iter().map(|v| v + shift).collect();
            assert!(set.is_satisfied(&DVector::from_vec(p.clone()), 1e-12));
            let r: Vec<f64> = p.iter().zip(&y).map(|(a, b)| a - b).collect();
            let (_, _, f0, f1) = group_means(&mask(&[0, 0, 1, 1]), &r);
            assert!((f0 - f1).abs() < 1e-12);
        }
    }

    #[test]
    fn group_residual_rows() {
        let set = build_group_residual(&mask(&[0, 1]), &[2.0, 3.0], 0.0).unwrap();
        assert_eq!(set.num_ineq(), 4);
        assert_eq!(set.m1().as_slice(), &[2.0, -2.0, 3.0, -3.0]);
        assert!(set.is_satisfied(&DVector::from_vec(vec![2.0, 3.0]), 1e-12));
        assert!(!set.is_satisfied(&DVector::from_vec(vec![2.1, 3.0]), 1e-12));

        let set = build_group_residual(&mask(&[0, 0, 1, 1]), &[1.0, 3.0, 0.0, 0.0], 0.0).unwrap();
        assert_eq!(rows(&set)[0], vec![0.5, 0.5, 0.0, 0.0]);
        assert_eq!(set.m1()[0], 2.0);

        let y = [0.3, -1.2, 4.0, 0.5, 0.25];
        let set = build_group_residual(&mask(&[0, 1, 1, 0, 0]), &y, 1e-4).unwrap();
        let m0 = (0.3 + 0.5 + 0.25) / 3.0;
        let m1 = (-1.2 + 4.0) / 2.0;
        let expect = [1e-4 + m0, 1e-4 - m0, 1e-4 + m1, 1e-4 - m1];
        for (got, want) in set.m1().iter().zip(expect) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn equalized_odds_regions() {
        let regions = [Region::point(1.0), Region::point(0.0)];
        let set =
            build_equalized_odds(&mask(&[0, 0, 1, 1]), &[1.0, 0.0, 1.0, 0.0], &regions, 0.0).unwrap();
        assert_eq!(
            rows(&set),
            vec![
                vec![1.0, 0.0, -1.0, 0.0],
                vec![-1.0, 0.0, 1.0, 0.0],
                vec![0.0, 1.0, 0.0, -1.0],
                vec![0.0, -1.0, 0.0, 1.0],
            ]
        );

        let regions = [Region::point(0.0), Region::point(1.0)];
        let set = build_equalized_odds(&mask(&[0, 1]), &[1.0, 1.0], &regions, 0.0).unwrap();
        assert_eq!(set.num_ineq(), 2);
        assert_eq!(set.warnings().len(), 1);
        assert_eq!(set.ineq_tags()[0].term, 1);

        assert_eq!(
            build_equalized_odds(&mask(&[0, 1]), &[0.0, 1.0], &regions, 0.0),
            Err(Error::NoApplicableRegion)
        );
    }

    #[test]
    fn box_rows() {
        let set = build_box(-3.5, 3.5, 2).unwrap();
        assert_eq!(set.num_ineq(), 4);
        let set = build_box(0.0, 3.5, 1).unwrap();
        assert_eq!(rows(&set), vec![vec![1.0], vec![-1.0]]);
        assert_eq!(set.m1().as_slice(), &[3.5, 0.0]);
        let set = build_box(1.0, 1.0, 1).unwrap();
        assert_eq!(set.m1().as_slice(), &[1.0, -1.0]);
        assert!(set.is_satisfied(&DVector::from_vec(vec![1.0]), 0.0));
        assert!(matches!(build_box(2.0, 1.0, 3), Err(Error::InvalidBounds { .. })));
    }

    fn two_attr_masks() -> GroupMasks {
        let mut m = GroupMasks::new(4);
        m.insert("a", mask(&[0, 1, 0, 1])).unwrap();
        m.insert("b", mask(&[0, 0, 1, 1])).unwrap();
        m
    }

    #[test]
    fn compile_counts_and_provenance() {
        let masks = two_attr_masks();
        let specs = [FairnessSpec::mean_parity("a", 0.05), FairnessSpec::bounds(0.0, 1.0)];
        let set = compile(&specs, &masks, None, 4).unwrap();
        assert_eq!(set.num_ineq(), 10);

        let set = compile(&[], &masks, None, 4).unwrap();
        assert!(set.is_empty());

        let specs = [FairnessSpec::mean_parity("a", 0.0), FairnessSpec::mean_parity("b", 0.0)];
        let set = compile(&specs, &masks, None, 4).unwrap();
        assert_eq!(set.num_ineq(), 4);
        assert_eq!(set.rows_for_spec(0), vec![0, 1]);
        assert_eq!(set.rows_for_spec(1), vec![2, 3]);
    }

    #[test]
    fn compile_errors_and_skips() {
        let masks = two_attr_masks();
        let specs = [FairnessSpec::mean_parity("zzz", 0.0)];
        assert_eq!(
            compile(&specs, &masks, None, 4),
            Err(Error::UnknownAttribute("zzz".into()))
        );
        let degenerate = GroupMasks::single("a", mask(&[1, 1, 1, 1]));
        let specs = [FairnessSpec::mean_parity("a", 0.0), FairnessSpec::bounds(0.0, 1.0)];
        assert!(compile(&specs, &degenerate, None, 4).is_err());
        let set = compile_with(&specs, &degenerate, None, 4, DegeneratePolicy::Skip).unwrap();
        assert_eq!(set.num_ineq(), 8);
        assert_eq!(set.warnings().len(), 1);
        assert!(set.ineq_tags().iter().all(|t| t.spec == 1));
    }

    #[test]
    fn gap_examples() {
        let m = GroupMasks::single("a", mask(&[0, 1]));
        let specs = [FairnessSpec::mean_parity("a", 0.0)];
        assert_eq!(gap(&specs, &m, None, &[1.0, 0.0]).unwrap()[0].value, 1.0);
        assert_eq!(gap(&specs, &m, None, &[0.7, 0.7]).unwrap()[0].value, 0.0);

        let m = GroupMasks::single("a", mask(&[0, 0, 1, 1]));
        assert_eq!(gap(&specs, &m, None, &[1.0, 0.0, 0.5, 0.5]).unwrap()[0].value, 0.0);

        let degenerate = GroupMasks::single("a", mask(&[0, 0]));
        assert!(matches!(gap(&specs, &degenerate, None, &[1.0, 0.0]), Err(Error::DegenerateGroup(_))));
    }

    #[test]
    fn masks_validate() {
        let mut m = GroupMasks::new(2);
        assert!(m.insert("a", vec![true]).is_err());
        m.insert_binary("a", &[0.0, 1.0]).unwrap();
        assert!(m.insert_binary("a", &[0.0, 1.0]).is_err());
        assert!(m.insert_binary("b", &[0.0, 0.5]).is_err());
    }

    #[test]
    fn spec_config_roundtrip() {
        let text = r#"
            [[fairness]]
            kind = "mean_parity"
            attribute = "g"
            tolerance = 0.05

            [[fairness]]
            kind = "equalized_odds"
            attribute = "g"
            tolerance = 0.1
            regions = [{ lo = 0.0, hi = 0.0 }, { lo = 1.0, hi = 1.0 }]

            [[fairness]]
            kind = "box"
            lower = 0.0
            upper = 3.5
        "#;
        #[derive(Deserialize)]
        struct Doc {
            fairness: Vec<FairnessSpec>,
        }
        let doc: Doc = toml::from_str(text).unwrap();
        assert_eq!(doc.fairness[0], FairnessSpec::mean_parity("g", 0.05));
        assert_eq!(
            doc.fairness[1],
            FairnessSpec::equalized_odds("g", vec![Region::point(0.0), Region::point(1.0)], 0.1)
        );
        assert_eq!(doc.fairness[2], FairnessSpec::bounds(0.0, 3.5));
    }

    #[test]
    fn overlapping_regions_rejected() {
        let spec = FairnessSpec::equalized_odds("g", vec![Region::new(0.0, 1.0), Region::new(0.5, 2.0)], 0.0);
        assert!(spec.validate().is_err());
    }

    fn mask_strategy() -> impl Strategy<Value = Vec<bool>> {
        (2usize..12).prop_flat_map(|n| proptest::collection::vec(any::<bool>(), n)).prop_filter(
            "both groups present",
            |m| m.iter().any(|&b| b) && m.iter().any(|&b| !b),
        )
    }

    fn constant_and_random(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-3.0f64..3.0, n)
    }

    proptest! {
        #[test]
        fn rows_match_absolute_criterion(
            (m, y, t) in mask_strategy().prop_flat_map(|m| {
                let n = m.len();
                (Just(m), constant_and_random(n), constant_and_random(n))
            }),
            eps in 0.0f64..1.0,
        ) {
            let specs = [
                FairnessSpec::mean_parity("g", eps),
                FairnessSpec::equalized_residuals("g", eps),
                FairnessSpec::group_residual("g", eps),
            ];
            let masks = GroupMasks::single("g", m.clone());
            let yv = DVector::from_vec(y.clone());
            for (i, spec) in specs.iter().enumerate() {
                let set = compile(std::slice::from_ref(spec), &masks, Some(&t), m.len()).unwrap();
                let gaps = gap(std::slice::from_ref(spec), &masks, Some(&t), &y).unwrap();
                let by_gap = gaps.iter().all(|g| g.value <= eps);
                // strict margins avoid ties where rounding decides both sides
                let margin = gaps.iter().map(|g| (g.value - eps).abs()).fold(f64::INFINITY, f64::min);
                if margin > 1e-12 {
                    prop_assert_eq!(by_gap, set.is_satisfied(&yv, 0.0), "spec {}", i);
                }
            }
            // constant predictions have zero parity gap
            let c = vec![y[0]; m.len()];
            let g = gap(&specs[..1], &masks, None, &c).unwrap();
            prop_assert!(g[0].value < 1e-12);
        }

        #[test]
        fn compile_order_independent(eps in 0.0f64..0.5, swap in any::<bool>()) {
            let masks = two_attr_masks();
            let specs = vec![
                FairnessSpec::mean_parity("a", eps),
                FairnessSpec::bounds(-1.0, 2.0),
                FairnessSpec::mean_parity("b", eps),
            ];
            let perm: Vec<usize> = if swap { vec![2, 0, 1] } else { vec![1, 2, 0] };
            let permuted: Vec<FairnessSpec> = perm.iter().map(|&i| specs[i].clone()).collect();
            let base = compile(&specs, &masks, None, 4).unwrap();
            let other = compile(&permuted, &masks, None, 4).unwrap();
            let collect = |set: &ConstraintSet, map: &dyn Fn(usize) -> usize| {
                let mut v: Vec<(usize, usize, Vec<u64>, u64)> = (0..set.num_ineq())
                    .map(|r| {
                        let t = set.ineq_tags()[r];
                        (map(t.spec), t.term,
                         set.a().row(r).iter().map(|x| x.to_bits()).collect(),
                         set.m1()[r].to_bits())
                    })
                    .collect();
                v.sort();
                v
            };
            let lhs = collect(&base, &|s| s);
            let rhs = collect(&other, &|s| perm[s]);
            prop_assert_eq!(lhs, rhs);
        }
    }
}
