//! Fairness layers for batched predictions.
//!
//! The core object is the projection `g(z) = argmin_{y ∈ C} ½‖y - z‖²` onto an
//! affine set `C` compiled from group-fairness criteria ([`constraints`]),
//! solved exactly by [`qp::project`] and differentiated by [`kkt`]. On top of
//! it sit a small network trainer ([`nn`]), a primal-dual controller for
//! streams of small inference batches ([`streaming`]) and a synthetic data
//! generator ([`datagen`]).

pub mod constraints;
pub mod datagen;
pub mod error;
pub mod format;
pub mod instances;
pub mod kkt;
pub mod nn;
pub mod qp;
pub mod streaming;

pub use constraints::{
    build_box, build_equalized_odds, build_equalized_residuals, build_group_residual,
    build_mean_parity, compile, compile_with, gap, ConstraintSet, DegeneratePolicy, FairnessKind,
    FairnessSpec, GapTerm, GapValue, GroupMasks, Region, RowTag,
};
pub use error::{Error, Result};
pub use kkt::{jvp, lipschitz_probe, region_projector, spectral_diagnostics, spectral_report, vjp, LayerJacobian, SpectralReport};
pub use qp::{
    feasibility_check, project, project_oracle, project_penalized, ProjectionResult, SolverConfig,
};
pub use streaming::{
    lemma1_bound, AggregateBound, BatchStats, Branch, DualControllerState, MissingGroupPolicy,
    StepRecord, StreamConfig,
};
pub use datagen::{generate, scenario_grid, split, Dataset, ScenarioConfig, Split, Structure, Tightness};
pub use format::Table;
pub use nn::{Architecture, EvalMode, LossKind, Method, Metrics, Mlp, Samples, TrainConfig};
