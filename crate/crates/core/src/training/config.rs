use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Documented guidance range for the gate penalty strength.
pub const LAMBDA_GUIDANCE: (f64, f64) = (0.001, 8.0);

/// Piecewise-constant learning rate with multiplicative drops.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    /// Global epochs (0-based) at which the rate is multiplied by `factor`.
    #[serde(default)]
    pub decay_epochs: Vec<usize>,
    #[serde(default = "default_decay_factor")]
    pub factor: f64,
}

fn default_decay_factor() -> f64 {
    0.1
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self { initial: lr, decay_epochs: Vec::new(), factor: 0.1 }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        let drops = self.decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.initial * self.factor.powi(drops as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial > 0.0 && self.initial.is_finite()) {
            return Err(Error::Config(format!("initial lr must be positive, got {}", self.initial)));
        }
        if !(self.factor > 0.0 && self.factor <= 1.0) {
            return Err(Error::Config(format!("lr decay factor must be in (0, 1], got {}", self.factor)));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("lr decay epochs must be strictly increasing".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Per-channel standardization applied after scaling pixels to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn cifar10() -> Self {
        Self { mean: vec![0.4914, 0.4822, 0.4465], std: vec![0.2470, 0.2435, 0.2616] }
    }
}

impl Default for Normalization {
    fn default() -> Self {
        Self::cifar10()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSpec {
    /// Generated gratings; image size follows the model.
    Synthetic {
        train: usize,
        val: usize,
        classes: usize,
        #[serde(default = "default_noise")]
        noise: f64,
    },
    Cifar10 {
        train_files: Vec<PathBuf>,
        test_files: Vec<PathBuf>,
        /// Keep only the first `limit` records of each split.
        #[serde(default)]
        limit: Option<usize>,
        #[serde(default)]
        normalization: Normalization,
    },
}

fn default_noise() -> f64 {
    super::data::DEFAULT_NOISE
}

impl DataSpec {
    pub fn num_classes(&self) -> usize {
        match self {
            DataSpec::Synthetic { classes, .. } => *classes,
            DataSpec::Cifar10 { .. } => 10,
        }
    }
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::Synthetic { train: 200, val: 100, classes: 4, noise: default_noise() }
    }
}

fn d_momentum() -> f64 {
    0.9
}
fn d_wd() -> f64 {
    5e-4
}
fn d_mu() -> f64 {
    1.0
}
fn d_batch() -> usize {
    128
}
fn d_shift() -> usize {
    4
}
fn d_true() -> bool {
    true
}

/// Hyper-parameters of the two-phase training procedure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    #[serde(default = "d_mu")]
    pub mu: f64,
    pub lr: LrSchedule,
    /// Joint epochs.
    pub n0: usize,
    /// Base-only epochs with embedding and gate heads frozen.
    pub n1: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default = "d_true")]
    pub augment: bool,
    /// Maximum shift in pixels for augmentation.
    #[serde(default = "d_shift")]
    pub max_shift: usize,
    /// Evaluate on the validation split after every epoch.
    #[serde(default = "d_true")]
    pub eval_every_epoch: bool,
    #[serde(default)]
    pub data: DataSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            mu: d_mu(),
            lr: LrSchedule { initial: 0.1, decay_epochs: vec![150, 250], factor: 0.1 },
            n0: 300,
            n1: 50,
            batch_size: d_batch(),
            momentum: d_momentum(),
            weight_decay: d_wd(),
            seed: 0,
            precision: Precision::F32,
            augment: true,
            max_shift: d_shift(),
            eval_every_epoch: true,
            data: DataSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn epochs(&self) -> usize {
        self.n0 + self.n1
    }

    pub fn lambda_in_guidance(&self) -> bool {
        (LAMBDA_GUIDANCE.0..=LAMBDA_GUIDANCE.1).contains(&self.lambda)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("mu", self.mu)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite nonnegative number, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay must be nonnegative, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        self.lr.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable config")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_drops_exactly_at_configured_epochs() {
        let s = LrSchedule { initial: 0.1, decay_epochs: vec![150, 250], factor: 0.1 };
        assert_eq!(s.lr(0), 0.1);
        assert_eq!(s.lr(149), 0.1);
        assert!((s.lr(150) - 0.01).abs() < 1e-15);
        assert!((s.lr(249) - 0.01).abs() < 1e-15);
        assert!((s.lr(250) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn rejects_negative_coefficients() {
        let mut c = TrainConfig { lambda: -1.0, ..TrainConfig::default() };
        assert!(c.validate().is_err());
        c.lambda = 0.0;
        c.mu = -0.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn minimal_json_uses_defaults() {
        let c = TrainConfig::from_json(r#"{"lambda":0.5,"lr":{"initial":0.05},"n0":2,"n1":1}"#).unwrap();
        assert_eq!(c.mu, 1.0);
        assert_eq!(c.batch_size, 128);
        assert_eq!(c.momentum, 0.9);
        assert_eq!(c.weight_decay, 5e-4);
        assert_eq!(c.lr.factor, 0.1);
        let back = TrainConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }
}
