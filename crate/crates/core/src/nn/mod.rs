// SPDX-License-Identifier: Apache-2.0

//! Dense 5-D tensors, a reverse-mode tape and the layers, losses and
//! optimizer the coding and up-sampling networks are built from.

pub mod adam;
pub mod checkpoint;
pub mod conv;
pub mod fit;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod likelihood;
pub mod loss;
pub mod tensor;

pub use adam::Adam;
pub use checkpoint::Checkpoint;
pub use fit::{fit, FitOptions, FitReport};
pub use graph::{Graph, Var};
pub use layers::{Conv3d, ConvSpec, Irb, IrbSpec, ParamSet};
pub use loss::{color_mse, focal_loss, total_distortion};
pub use tensor::{Real, Tensor};

/// Rate/distortion training hyper-parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub omega: f64,
    pub learning_rate: f64,
    pub batch: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub width_divisor: usize,
    /// Stride-2 layers in each hyper transform (0, 1 or 2).
    pub hyper_strides: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.001,
            alpha: 0.7,
            gamma: 2.0,
            omega: 0.5,
            learning_rate: 1e-4,
            batch: 16,
            patience: 5,
            max_epochs: 100,
            seed: 0,
            width_divisor: 1,
            hyper_strides: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> crate::Result<()> {
        let bad = |m: &str| Err(crate::Error::Config(m.to_string()));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)");
        }
        if self.gamma < 0.0 {
            return bad("gamma must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.omega) {
            return bad("omega must lie in [0, 1]");
        }
        if self.lambda <= 0.0 {
            return bad("lambda must be positive");
        }
        if self.batch == 0 || self.width_divisor == 0 {
            return bad("batch and width divisor must be positive");
        }
        if self.hyper_strides > 2 {
            return bad("hyper_strides must be 0, 1 or 2");
        }
        if self.learning_rate < 0.0 {
            return bad("learning rate must be non-negative");
        }
        Ok(())
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            learning_rate: self.learning_rate,
            batch: self.batch,
            patience: self.patience,
            max_epochs: self.max_epochs,
            seed: self.seed,
        }
    }

    pub fn from_toml(text: &str) -> crate::Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| crate::Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plain numeric config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_parsing() {
        let d = TrainConfig::default();
        assert_eq!((d.alpha, d.gamma, d.omega, d.learning_rate, d.batch, d.patience), (0.7, 2.0, 0.5, 1e-4, 16, 5));
        let c = TrainConfig::from_toml("lambda = 0.01\nseed = 7\n").unwrap();
        assert_eq!(c.lambda, 0.01);
        assert_eq!(c.seed, 7);
        assert_eq!(c.batch, 16);
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert!(TrainConfig::from_toml("alpha = 1.5").is_err());
        assert!(TrainConfig::from_toml("lambda = 0").is_err());
    }
}
