//! Dense ReLU networks with manual backpropagation and the training methods
//! built around the fairness layer.
//!
//! Samples are stored column-wise: a batch is a `features × batch` matrix and
//! the network maps it to one raw output per column.

mod train;

pub use train::{
    batch_order, box_reparam, evaluate, loss_and_grad, penalty_objective, score, select_penalty_lambda,
    train, EpochRecord, EvalMode, LambdaSelection, LambdaTrial, LossKind, Method, Metrics, Samples, TrainConfig,
    TrainOutcome, CHANGE_TOL, SATISFACTION_SLACK,
};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const NORM_EPS: f64 = 1e-5;

/// Hidden widths and the normalisation flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub hidden: Vec<usize>,
    pub layer_norm: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        Self { hidden: vec![32; 3], layer_norm: true }
    }
}

impl Architecture {
    /// Fifteen hidden layers of the given width.
    pub fn deep(width: usize) -> Self {
        Self { hidden: vec![width; 15], layer_norm: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out × in`.
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
    /// Layer-norm gain and shift, applied before the activation.
    pub norm: Option<(DVector<f64>, DVector<f64>)>,
}

impl Dense {
    fn zeros_like(&self) -> Self {
        Self {
            w: DMatrix::zeros(self.w.nrows(), self.w.ncols()),
            b: DVector::zeros(self.b.len()),
            norm: self.norm.as_ref().map(|(g, s)| (DVector::zeros(g.len()), DVector::zeros(s.len()))),
        }
    }

    fn param_count(&self) -> usize {
        self.w.len() + self.b.len() + self.norm.as_ref().map_or(0, |(g, s)| g.len() + s.len())
    }
}

/// Feed-forward network: ReLU hidden layers, linear scalar output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Gradients have the same layout as the model.
pub type Gradients = Mlp;

struct LayerCache {
    input: DMatrix<f64>,
    /// Normalised pre-activation and per-sample inverse std, when normalised.
    normed: Option<(DMatrix<f64>, DVector<f64>)>,
    /// Pre-activation after normalisation (ReLU mask source).
    pre: DMatrix<f64>,
}

/// Intermediate values kept by [`Mlp::forward_cached`].
pub struct ForwardCache {
    layers: Vec<LayerCache>,
}

impl Mlp {
    /// He-uniform weights `U(±√(6/fan_in))`, zero biases, unit gains.
    pub fn new(input: usize, arch: &Architecture, seed: u64) -> Result<Self> {
        if input == 0 || arch.hidden.contains(&0) {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = vec![input];
        widths.extend(&arch.hidden);
        widths.push(1);
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let limit = (6.0 / w[0] as f64).sqrt();
                Dense {
                    w: DMatrix::from_fn(w[1], w[0], |_, _| rng.random_range(-limit..limit)),
                    b: DVector::zeros(w[1]),
                    norm: (arch.layer_norm && l < last)
                        .then(|| (DVector::from_element(w[1], 1.0), DVector::zeros(w[1]))),
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        let model = Self { layers };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let Some(last) = self.layers.last() else {
            return bad("network has no layers".into());
        };
        if last.w.nrows() != 1 || last.norm.is_some() {
            return bad("output layer must be a plain scalar layer".into());
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.b.len() != layer.w.nrows() {
                return bad(format!("layer {l}: bias length"));
            }
            if let Some((g, s)) = &layer.norm {
                if g.len() != layer.w.nrows() || s.len() != layer.w.nrows() {
                    return bad(format!("layer {l}: norm length"));
                }
            }
            if l > 0 && self.layers[l - 1].w.nrows() != layer.w.ncols() {
                return bad(format!("layer {l}: input width"));
            }
        }
        if self.flat().iter().any(|v| !v.is_finite()) {
            return bad("non-finite parameter".into());
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].w.ncols()
    }

    /// Input width, hidden widths, then 1.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_width()];
        w.extend(self.layers.iter().map(|l| l.w.nrows()));
        w
    }

    pub fn zeros_like(&self) -> Self {
        Self { layers: self.layers.iter().map(Dense::zeros_like).collect() }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    /// Parameters in layer order: weights (column-major), bias, gain, shift.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
            if let Some((g, s)) = &l.norm {
                out.extend(g.iter());
                out.extend(s.iter());
            }
        }
        out
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::DimensionMismatch("flat parameter length".into()));
        }
        let mut it = values.iter().copied();
        for l in &mut self.layers {
            l.w.iter_mut().for_each(|v| *v = it.next().unwrap());
            l.b.iter_mut().for_each(|v| *v = it.next().unwrap());
            if let Some((g, s)) = &mut l.norm {
                g.iter_mut().for_each(|v| *v = it.next().unwrap());
                s.iter_mut().for_each(|v| *v = it.next().unwrap());
            }
        }
        Ok(())
    }

    /// `self -= lr * grad`.
    pub fn sgd_step(&mut self, grad: &Gradients, lr: f64) {
        for (l, g) in self.layers.iter_mut().zip(&grad.layers) {
            l.w -= &g.w * lr;
            l.b -= &g.b * lr;
            if let (Some((lg, ls)), Some((gg, gs))) = (&mut l.norm, &g.norm) {
                *lg -= gg * lr;
                *ls -= gs * lr;
            }
        }
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        self.forward_cached(x).map(|(z, _)| z)
    }

    pub fn forward_cached(&self, x: &DMatrix<f64>) -> Result<(Vec<f64>, ForwardCache)> {
        if x.nrows() != self.input_width() {
            return Err(Error::DimensionMismatch(format!(
                "input has {} features, model expects {}",
                x.nrows(),
                self.input_width()
            )));
        }
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut a = &layer.w * &h;
            for mut col in a.column_iter_mut() {
                col += &layer.b;
            }
            let normed = layer.norm.as_ref().map(|(gain, shift)| {
                let (xhat, inv) = normalise(&a);
                a = xhat.clone();
                for mut col in a.column_iter_mut() {
                    col.component_mul_assign(gain);
                    col += shift;
                }
                (xhat, inv)
            });
            let out = if l == last { a.clone() } else { a.map(|v| v.max(0.0)) };
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteActivation(l));
            }
            caches.push(LayerCache { input: std::mem::replace(&mut h, out), normed, pre: a });
        }
        Ok((h.row(0).iter().copied().collect(), ForwardCache { layers: caches }))
    }

    /// Parameter gradients given `dL/dz` for each output in the batch.
    pub fn backward(&self, cache: &ForwardCache, dz: &[f64]) -> Gradients {
        let last = self.layers.len() - 1;
        let mut grad = self.zeros_like();
        let mut delta = DMatrix::from_row_slice(1, dz.len(), dz);
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let c = &cache.layers[l];
            if l != last {
                delta.zip_apply(&c.pre, |d, p| {
                    if p <= 0.0 {
                        *d = 0.0
                    }
                });
            }
            if let (Some((gain, _)), Some((xhat, inv))) = (&layer.norm, &c.normed) {
                let g = grad.layers[l].norm.as_mut().unwrap();
                g.0 = delta.component_mul(xhat).column_sum();
                g.1 = delta.column_sum();
                let mut dxhat = delta.clone();
                for mut col in dxhat.column_iter_mut() {
                    col.component_mul_assign(gain);
                }
                delta = normalise_backward(&dxhat, xhat, inv);
            }
            grad.layers[l].b = delta.column_sum();
            grad.layers[l].w = &delta * c.input.transpose();
            if l > 0 {
                delta = layer.w.transpose() * &delta;
            }
        }
        grad
    }

    pub fn to_document(&self) -> ModelDocument {
        ModelDocument {
            format_version: FORMAT_VERSION,
            widths: self.widths(),
            hidden_activation: "relu".into(),
            output_activation: "identity".into(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerDocument {
                    rows: l.w.nrows(),
                    cols: l.w.ncols(),
                    weights: l.w.transpose().iter().copied().collect(),
                    bias: l.b.iter().copied().collect(),
                    layer_norm: l.norm.is_some(),
                    norm_gain: l.norm.as_ref().map(|(g, _)| g.iter().copied().collect()),
                    norm_shift: l.norm.as_ref().map(|(_, s)| s.iter().copied().collect()),
                })
                .collect(),
        }
    }

    pub fn from_document(doc: &ModelDocument) -> Result<Self> {
        if doc.format_version != FORMAT_VERSION {
            return Err(Error::Parse(format!("unsupported model format {}", doc.format_version)));
        }
        if doc.hidden_activation != "relu" || doc.output_activation != "identity" {
            return Err(Error::Parse("unsupported activation".into()));
        }
        let layers = doc
            .layers
            .iter()
            .map(|l| {
                if l.weights.len() != l.rows * l.cols {
                    return Err(Error::Parse("weight array length".into()));
                }
                let norm = match (l.layer_norm, &l.norm_gain, &l.norm_shift) {
                    (false, None, None) => None,
                    (true, Some(g), Some(s)) => {
                        Some((DVector::from_column_slice(g), DVector::from_column_slice(s)))
                    }
                    _ => return Err(Error::Parse("inconsistent normalisation fields".into())),
                };
                Ok(Dense {
                    w: DMatrix::from_row_slice(l.rows, l.cols, &l.weights),
                    b: DVector::from_column_slice(&l.bias),
                    norm,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let model = Self::from_layers(layers)?;
        if model.widths() != doc.widths {
            return Err(Error::Parse("widths disagree with layer shapes".into()));
        }
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&self.to_document()).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        Self::from_document(&doc)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn normalise(a: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let k = a.nrows() as f64;
    let mut xhat = a.clone();
    let mut inv = DVector::zeros(a.ncols());
    for (j, mut col) in xhat.column_iter_mut().enumerate() {
        let mean = col.sum() / k;
        col.add_scalar_mut(-mean);
        let var = col.norm_squared() / k;
        inv[j] = 1.0 / (var + NORM_EPS).sqrt();
        col *= inv[j];
    }
    (xhat, inv)
}

fn normalise_backward(dxhat: &DMatrix<f64>, xhat: &DMatrix<f64>, inv: &DVector<f64>) -> DMatrix<f64> {
    let k = dxhat.nrows() as f64;
    let mut out = dxhat.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        let xh = xhat.column(j);
        let mean_d = col.sum() / k;
        let mean_dx = col.dot(&xh) / k;
        for (v, x) in col.iter_mut().zip(xh.iter()) {
            *v = inv[j] * (*v - mean_d - x * mean_dx);
        }
    }
    out
}

/// Serialised form: row-major weights, explicit widths and activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub format_version: u32,
    pub widths: Vec<usize>,
    pub hidden_activation: String,
    pub output_activation: String,
    pub layers: Vec<LayerDocument>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDocument {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub layer_norm: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_gain: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_shift: Option<Vec<f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn random_batch(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    fn naive_forward(model: &Mlp, x: &[f64]) -> f64 {
        let mut h = x.to_vec();
        for (l, layer) in model.layers().iter().enumerate() {
            let mut a: Vec<f64> = (0..layer.w.nrows())
                .map(|i| (0..layer.w.ncols()).map(|j| layer.w[(i, j)] * h[j]).sum::<f64>() + layer.b[i])
                .collect();
            if let Some((g, s)) = &layer.norm {
                let k = a.len() as f64;
                let mean = a.iter().sum::<f64>() / k;
                let var = a.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k;
                a = a.iter().enumerate().map(|(i, v)| g[i] * (v - mean) / (var + NORM_EPS).sqrt() + s[i]).collect();
            }
            h = if l + 1 == model.layers().len() { a } else { a.into_iter().map(|v| v.max(0.0)).collect() };
        }
        h[0]
    }

    #[test]
    fn zero_weights_give_constant_output() {
        let mut m = Mlp::new(3, &Architecture { hidden: vec![4, 4], layer_norm: false }, 0).unwrap();
        let mut flat = vec![0.0; m.param_count()];
        // output bias is the final parameter
        *flat.last_mut().unwrap() = 0.7;
        m.set_flat(&flat).unwrap();
        let z = m.forward(&random_batch(3, 5, 1)).unwrap();
        assert!(z.iter().all(|&v| v == 0.7));
    }

    #[test]
    fn linear_model_is_affine() {
        let w = DMatrix::from_row_slice(1, 3, &[0.5, -1.0, 2.0]);
        let m = Mlp::from_layers(vec![Dense { w: w.clone(), b: DVector::from_element(1, 0.25), norm: None }]).unwrap();
        let x = random_batch(3, 6, 2);
        let z = m.forward(&x).unwrap();
        for j in 0..6 {
            assert!((z[j] - ((&w * x.column(j))[0] + 0.25)).abs() < 1e-14);
        }
    }

    #[test]
    fn forward_matches_straight_line_evaluation() {
        for layer_norm in [false, true] {
            let m = Mlp::new(5, &Architecture { hidden: vec![7, 6], layer_norm }, 3).unwrap();
            let x = random_batch(5, 9, 4);
            let z = m.forward(&x).unwrap();
            for j in 0..9 {
                let col: Vec<f64> = x.column(j).iter().copied().collect();
                assert!((z[j] - naive_forward(&m, &col)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dimension_and_finiteness_errors() {
        let m = Mlp::new(4, &Architecture { hidden: vec![8, 8], layer_norm: false }, 0).unwrap();
        assert!(matches!(m.forward(&DMatrix::zeros(3, 2)), Err(Error::DimensionMismatch(_))));
        let mut big = m.clone();
        let flat: Vec<f64> = m.flat().iter().map(|v| v * 1e200).collect();
        big.set_flat(&flat).unwrap();
        let x = DMatrix::from_element(4, 2, 1e200);
        assert!(matches!(big.forward(&x), Err(Error::NonFiniteActivation(_))));
    }

    #[test]
    fn backward_matches_finite_differences() {
        for layer_norm in [false, true] {
            let m = Mlp::new(4, &Architecture { hidden: vec![5, 5], layer_norm }, 5).unwrap();
            let x = random_batch(4, 6, 6);
            let weights = [0.3, -1.0, 0.5, 2.0, -0.2, 0.1];
            let loss = |m: &Mlp| m.forward(&x).unwrap().iter().zip(&weights).map(|(z, w)| z * w).sum::<f64>();
            let (_, cache) = m.forward_cached(&x).unwrap();
            let g = m.backward(&cache, &weights).flat();
            let theta = m.flat();
            let h = 1e-6;
            for k in 0..theta.len() {
                let mut p = m.clone();
                let mut t = theta.clone();
                t[k] += h;
                p.set_flat(&t).unwrap();
                let up = loss(&p);
                t[k] -= 2.0 * h;
                p.set_flat(&t).unwrap();
                let down = loss(&p);
                let fd = (up - down) / (2.0 * h);
                assert!((fd - g[k]).abs() <= 1e-6 * (1.0 + fd.abs()), "param {k}: {fd} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn json_roundtrip_is_exact() {
        let m = Mlp::new(6, &Architecture { hidden: vec![3, 2], layer_norm: true }, 9).unwrap();
        let back = Mlp::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        let doc = m.to_document();
        assert_eq!(doc.widths, vec![6, 3, 2, 1]);
        // row-major storage
        assert_eq!(doc.layers[0].weights[1], m.layers()[0].w[(0, 1)]);
        let mut bad = doc.clone();
        bad.format_version = 2;
        assert!(Mlp::from_document(&bad).is_err());
    }

    #[test]
    fn deep_architecture_shape() {
        let m = Mlp::new(10, &Architecture::deep(16), 0).unwrap();
        assert_eq!(m.widths().len(), 17);
        assert!(m.forward(&random_batch(10, 3, 0)).is_ok());
    }
}
