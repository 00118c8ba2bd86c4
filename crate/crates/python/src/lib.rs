//! Python module `fairlayer`: projection layer, Jacobian products, data
//! generation, networks and the streaming controller.

use std::collections::BTreeMap;

use fairlayer::{
    datagen, lemma1_bound, nn, project, streaming, BatchStats, ConstraintSet, DualControllerState, FairnessSpec,
    GroupMasks, LayerJacobian, MissingGroupPolicy, ProjectionResult, SolverConfig, StreamConfig,
};
use nalgebra::{DMatrix, DVector};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(fairlayer, FairlayerError, PyException);

fn err(e: fairlayer::Error) -> PyErr {
    FairlayerError::new_err(e.to_string())
}

fn masks_from(len: usize, masks: BTreeMap<String, Vec<bool>>) -> PyResult<GroupMasks> {
    let mut out = GroupMasks::new(len);
    for (id, m) in masks {
        out.insert(id, m).map_err(err)?;
    }
    Ok(out)
}

/// One fairness criterion.
#[pyclass(name = "Spec", module = "fairlayer", frozen, from_py_object)]
#[derive(Clone)]
pub struct PySpec {
    inner: FairnessSpec,
}

#[pymethods]
impl PySpec {
    #[staticmethod]
    fn mean_parity(attribute: String, tolerance: f64) -> Self {
        Self { inner: FairnessSpec::mean_parity(attribute, tolerance) }
    }

    #[staticmethod]
    fn equalized_residuals(attribute: String, tolerance: f64) -> Self {
        Self { inner: FairnessSpec::equalized_residuals(attribute, tolerance) }
    }

    #[staticmethod]
    fn group_residual(attribute: String, tolerance: f64) -> Self {
        Self { inner: FairnessSpec::group_residual(attribute, tolerance) }
    }

    #[staticmethod]
    fn bounds(lower: f64, upper: f64) -> Self {
        Self { inner: FairnessSpec::bounds(lower, upper) }
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

/// Constraint system compiled for one batch; `project`, `jvp` and `vjp` act on it.
#[pyclass(name = "Layer", module = "fairlayer")]
pub struct PyLayer {
    set: ConstraintSet,
    specs: Vec<FairnessSpec>,
    masks: GroupMasks,
    y_true: Option<Vec<f64>>,
    solver: SolverConfig,
}

impl PyLayer {
    fn solve(&self, z: &[f64]) -> PyResult<ProjectionResult> {
        if z.len() != self.set.n() {
            return Err(FairlayerError::new_err(format!("expected {} outputs, got {}", self.set.n(), z.len())));
        }
        project(&DVector::from_column_slice(z), &self.set, &self.solver).map_err(err)
    }

    fn jacobian(&self, z: &[f64]) -> PyResult<LayerJacobian> {
        let r = self.solve(z)?;
        LayerJacobian::new(&r, &self.set, &self.solver).map_err(err)
    }
}

#[pymethods]
impl PyLayer {
    #[new]
    #[pyo3(signature = (specs, masks, n, y_true=None))]
    fn new(specs: Vec<PySpec>, masks: BTreeMap<String, Vec<bool>>, n: usize, y_true: Option<Vec<f64>>) -> PyResult<Self> {
        let specs: Vec<FairnessSpec> = specs.into_iter().map(|s| s.inner).collect();
        let masks = masks_from(n, masks)?;
        let set = fairlayer::compile(&specs, &masks, y_true.as_deref(), n).map_err(err)?;
        Ok(Self { set, specs, masks, y_true, solver: SolverConfig::default() })
    }

    #[getter]
    fn num_rows(&self) -> (usize, usize) {
        (self.set.num_ineq(), self.set.num_eq())
    }

    /// Projected outputs and the active inequality rows.
    fn project(&self, z: Vec<f64>) -> PyResult<(Vec<f64>, Vec<usize>)> {
        let r = self.solve(&z)?;
        Ok((r.y_star.iter().copied().collect(), r.active))
    }

    fn jvp(&self, z: Vec<f64>, dz: Vec<f64>) -> PyResult<Vec<f64>> {
        let j = self.jacobian(&z)?;
        Ok(j.jvp(&DVector::from_vec(dz)).map_err(err)?.iter().copied().collect())
    }

    fn vjp(&self, z: Vec<f64>, v: Vec<f64>) -> PyResult<Vec<f64>> {
        let j = self.jacobian(&z)?;
        Ok(j.vjp(&DVector::from_vec(v)).map_err(err)?.iter().copied().collect())
    }

    /// Largest gap of each spec at `y`.
    fn gaps(&self, y: Vec<f64>) -> PyResult<Vec<f64>> {
        let g = fairlayer::gap(&self.specs, &self.masks, self.y_true.as_deref(), &y).map_err(err)?;
        let mut out = vec![0.0f64; self.specs.len()];
        for v in g {
            out[v.spec] = out[v.spec].max(v.value);
        }
        Ok(out)
    }
}

/// Synthetic scenario with its train/validation/test split.
#[pyclass(name = "Dataset", module = "fairlayer")]
pub struct PyDataset {
    inner: fairlayer::Dataset,
}

#[pymethods]
impl PyDataset {
    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn y(&self) -> Vec<f64> {
        self.inner.y.clone()
    }

    #[getter]
    fn groups(&self) -> Vec<bool> {
        self.inner.groups()
    }

    /// Feature rows, protected attribute last.
    #[getter]
    fn x(&self) -> Vec<Vec<f64>> {
        self.inner.x.row_iter().map(|r| r.iter().copied().collect()).collect()
    }

    #[getter]
    fn split(&self) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let s = &self.inner.split;
        (s.train.clone(), s.val.clone(), s.test.clone())
    }

    #[getter]
    fn bounds(&self) -> (f64, f64) {
        self.inner.config.bounds()
    }

    fn write(&self, path: std::path::PathBuf) -> PyResult<()> {
        self.inner.write(&path).map_err(err)
    }

    #[staticmethod]
    fn read(path: std::path::PathBuf) -> PyResult<Self> {
        Ok(Self { inner: fairlayer::Dataset::read(&path).map_err(err)? })
    }
}

/// Scenario `index` of the 32-scenario grid at size `n × d`.
#[pyfunction]
#[pyo3(signature = (index, n=4000, d=30, seed=0))]
fn generate(index: usize, n: usize, d: usize, seed: u64) -> PyResult<PyDataset> {
    let grid = fairlayer::scenario_grid(&datagen::ScenarioConfig { seed, ..Default::default() });
    let cfg = grid
        .get(index)
        .ok_or_else(|| FairlayerError::new_err(format!("scenario {index} out of range")))?
        .clone()
        .scaled(n, d);
    Ok(PyDataset { inner: fairlayer::generate(&cfg).map_err(err)? })
}

/// Dense ReLU network.
#[pyclass(name = "Mlp", module = "fairlayer")]
pub struct PyMlp {
    inner: fairlayer::Mlp,
}

#[pymethods]
impl PyMlp {
    #[new]
    #[pyo3(signature = (input, hidden, layer_norm=true, seed=0))]
    fn new(input: usize, hidden: Vec<usize>, layer_norm: bool, seed: u64) -> PyResult<Self> {
        let arch = nn::Architecture { hidden, layer_norm };
        Ok(Self { inner: fairlayer::Mlp::new(input, &arch, seed).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        Ok(Self { inner: fairlayer::Mlp::load(&path).map_err(err)? })
    }

    fn save(&self, path: std::path::PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Raw outputs for sample rows.
    fn forward(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let width = self.inner.input_width();
        if rows.iter().any(|r| r.len() != width) {
            return Err(FairlayerError::new_err(format!("every row needs {width} features")));
        }
        let x = DMatrix::from_fn(width, rows.len(), |i, j| rows[j][i]);
        self.inner.forward(&x).map_err(err)
    }
}

/// Primal-dual controller for a stream of batches under mean parity on `attribute`.
#[pyclass(name = "StreamController", module = "fairlayer")]
pub struct PyController {
    state: DualControllerState,
    spec: FairnessSpec,
    attribute: String,
}

#[pymethods]
impl PyController {
    #[new]
    #[pyo3(signature = (epsilon=0.05, eta=0.5, b_tau=256, exclude_missing=false, attribute="g".to_string()))]
    fn new(epsilon: f64, eta: f64, b_tau: usize, exclude_missing: bool, attribute: String) -> PyResult<Self> {
        let missing_group = if exclude_missing { MissingGroupPolicy::Exclude } else { MissingGroupPolicy::CountAsZero };
        let state = DualControllerState::new(StreamConfig { eta, b_tau, epsilon, missing_group }).map_err(err)?;
        Ok(Self { state, spec: FairnessSpec::mean_parity(attribute.clone(), epsilon), attribute })
    }

    /// Adjusted predictions and the logged record of one batch.
    fn step<'py>(&mut self, py: Python<'py>, z: Vec<f64>, group: Vec<bool>) -> PyResult<(Vec<f64>, Bound<'py, PyDict>)> {
        let masks = GroupMasks::single(self.attribute.clone(), group);
        let out = self.state.step(&z, &masks, None, &self.spec, &SolverConfig::default()).map_err(err)?;
        let r = out.record;
        let d = PyDict::new(py);
        d.set_item("t", r.t)?;
        d.set_item("batch_size", r.batch_size)?;
        d.set_item("branch", r.branch.as_str())?;
        d.set_item("gap", r.gap)?;
        d.set_item("weighted_violation", r.weighted_violation)?;
        d.set_item("lambda", r.lambda)?;
        d.set_item("running_weighted_avg", r.running_weighted_avg)?;
        Ok((out.y_hat, d))
    }

    #[getter]
    fn dual(&self) -> f64 {
        self.state.lambda
    }

    fn aggregate_violation(&self) -> PyResult<f64> {
        self.state.aggregate_violation().map_err(err)
    }

    fn checkpoint(&self) -> PyResult<String> {
        self.state.to_checkpoint().map_err(err)
    }

    #[staticmethod]
    #[pyo3(signature = (text, attribute="g".to_string()))]
    fn restore(text: &str, attribute: String) -> PyResult<Self> {
        let state = DualControllerState::from_checkpoint(text).map_err(err)?;
        let spec = FairnessSpec::mean_parity(attribute.clone(), state.config.epsilon);
        Ok(Self { state, spec, attribute })
    }

    #[staticmethod]
    fn log_header() -> &'static str {
        streaming::LOG_HEADER
    }
}

/// Aggregate bound over batches given as `(n0, n1, f0, f1)` tuples.
#[pyfunction]
fn aggregate_bound<'py>(py: Python<'py>, stats: Vec<(usize, usize, f64, f64)>, epsilon: f64) -> PyResult<Bound<'py, PyDict>> {
    let stats: Vec<BatchStats> = stats.into_iter().map(|(n0, n1, f0, f1)| BatchStats { n0, n1, f0, f1 }).collect();
    let b = lemma1_bound(&stats, epsilon).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("bound", b.bound)?;
    d.set_item("realized", b.realized)?;
    d.set_item("delta_p", b.delta_p)?;
    d.set_item("r", b.r)?;
    d.set_item("p_bar", b.p_bar)?;
    Ok(d)
}

#[pymodule]
#[pyo3(name = "fairlayer")]
fn fairlayer_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("FairlayerError", m.py().get_type::<FairlayerError>())?;
    m.add_class::<PySpec>()?;
    m.add_class::<PyLayer>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyMlp>()?;
    m.add_class::<PyController>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate_bound, m)?)?;
    Ok(())
}
