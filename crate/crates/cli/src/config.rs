//! Sectioned TOML configuration; command-line flags override file values.

use std::path::Path;

use fairlayer::{Architecture, LossKind, Method, MissingGroupPolicy, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    pub data: DataSection,
    pub train: TrainSection,
    pub stream: StreamSection,
    pub compare: CompareSection,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 0,
            data: DataSection::default(),
            train: TrainSection::default(),
            stream: StreamSection::default(),
            compare: CompareSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub n: Option<usize>,
    pub d: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epsilon: f64,
    pub learning_rate: f64,
    pub decay_factor: f64,
    pub decay_patience: usize,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub b_train: usize,
    pub hidden: Vec<usize>,
    pub layer_norm: bool,
    pub loss: LossKind,
    pub lambda: f64,
    pub strict_lambda: f64,
    pub lambda_grid: Vec<f64>,
    pub box_reparam: bool,
    pub squared_penalty: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            learning_rate: 1e-2,
            decay_factor: 0.66,
            decay_patience: 8,
            early_stop_patience: 25,
            max_epochs: 200,
            b_train: 256,
            hidden: vec![32; 3],
            layer_norm: true,
            loss: LossKind::Mse,
            lambda: 1.0,
            strict_lambda: 5000.0,
            lambda_grid: vec![0.01, 1.0, 10.0, 100.0],
            box_reparam: true,
            squared_penalty: false,
        }
    }
}

impl TrainSection {
    pub fn architecture(&self) -> Architecture {
        Architecture { hidden: self.hidden.clone(), layer_norm: self.layer_norm }
    }

    pub fn train_config(&self, method: Method, bounds: (f64, f64), seed: u64) -> TrainConfig {
        TrainConfig {
            method,
            learning_rate: self.learning_rate,
            decay_factor: self.decay_factor,
            decay_patience: self.decay_patience,
            early_stop_patience: self.early_stop_patience,
            max_epochs: self.max_epochs,
            b_train: self.b_train,
            loss: self.loss,
            penalty_lambda: self.lambda,
            strict_lambda: self.strict_lambda,
            lambda_grid: self.lambda_grid.clone(),
            box_bounds: self.box_reparam.then_some(bounds),
            squared_penalty: self.squared_penalty,
            stratified: true,
            seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSection {
    pub batch_size: usize,
    pub eta: f64,
    pub b_tau: usize,
    pub epsilon: f64,
    /// Allowed excess of the aggregate over `epsilon`.
    pub slack: f64,
    pub missing_group: MissingGroupPolicy,
}

impl Default for StreamSection {
    fn default() -> Self {
        Self {
            batch_size: 4,
            eta: 0.5,
            b_tau: 256,
            epsilon: 0.05,
            slack: 0.02,
            missing_group: MissingGroupPolicy::CountAsZero,
        }
    }
}

/// One training/inference batch-size pair; `b_infer = 0` means the whole split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Regime {
    pub b_train: usize,
    pub b_infer: usize,
}

impl Regime {
    pub fn label(&self) -> String {
        let infer = if self.b_infer == 0 { "full".to_string() } else { self.b_infer.to_string() };
        format!("{}/{}", self.b_train, infer)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSection {
    pub scenarios: Vec<usize>,
    pub methods: Vec<Method>,
    pub regimes: Vec<Regime>,
    pub n: usize,
    pub d: usize,
    pub repeats: usize,
}

impl Default for CompareSection {
    fn default() -> Self {
        Self {
            // imbalance 0.5, relevance 0.3, noise 0.125; loose/tighter × linear/nonlinear
            scenarios: vec![16, 17, 18, 19],
            methods: Method::ALL.to_vec(),
            regimes: vec![Regime { b_train: 256, b_infer: 0 }],
            n: 4000,
            d: 30,
            repeats: 1,
        }
    }
}

impl CompareSection {
    /// All 32 scenarios under the three published batch regimes, full scale.
    pub fn full() -> Self {
        Self {
            scenarios: (0..32).collect(),
            regimes: vec![
                Regime { b_train: 2000, b_infer: 2000 },
                Regime { b_train: 2000, b_infer: 16 },
                Regime { b_train: 256, b_infer: 16 },
            ],
            n: 40_000,
            d: 150,
            ..Self::default()
        }
    }
}

impl HarnessConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }
}
