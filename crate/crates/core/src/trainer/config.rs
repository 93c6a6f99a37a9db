use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use super::adam::AdamConfig;
use crate::augment::{AugmentationSpec, FlipAxis, NegativeTransform, PositiveTransform};
use crate::error::{config_err, Result};
use crate::model::ModelConfig;
use crate::objective::LossWeights;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub seed: u64,
    pub augmentation: AugmentationSpec,
    pub dataset_dir: PathBuf,
    pub output_dir: PathBuf,
    /// Keep `epoch_NNNN.dsck` for every epoch besides `last.dsck`.
    pub checkpoint_history: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                image_size: 32,
                ..ModelConfig::default()
            },
            batch_size: 64,
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            epochs: 250,
            seed: 0,
            augmentation: AugmentationSpec::color_position(),
            dataset_dir: PathBuf::from("data"),
            output_dir: PathBuf::from("run"),
            checkpoint_history: false,
        }
    }
}

pub(crate) fn parse_value<T: FromStr>(key: &str, value: &str, expected: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| config_err!("key '{key}' expects {expected}, got '{value}'"))
}

fn parse_list<T: FromStr>(key: &str, value: &str, expected: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s, expected))
        .collect()
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn flip_name(a: FlipAxis) -> &'static str {
    match a {
        FlipAxis::Horizontal => "horizontal",
        FlipAxis::Vertical => "vertical",
    }
}

impl TrainConfig {
    /// Hyperparameter keys and their current values, in a fixed order.
    /// Paths are excluded; see [`TrainConfig::path_entries`].
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let a = &self.augmentation;
        let r = &a.ranges;
        vec![
            ("batch_size", self.batch_size.to_string()),
            ("image_size", self.model.image_size.to_string()),
            ("latent_dim", self.model.latent_dim.to_string()),
            ("num_attributes", self.model.num_attributes.to_string()),
            ("context_dim", self.model.context_dim.to_string()),
            ("lambda_kl", self.weights.kl.to_string()),
            ("lambda_cen", self.weights.cen.to_string()),
            ("lambda_a", self.weights.a.to_string()),
            ("learning_rate", self.adam.learning_rate.to_string()),
            ("adam_beta1", self.adam.beta1.to_string()),
            ("adam_beta2", self.adam.beta2.to_string()),
            ("adam_eps", self.adam.eps.to_string()),
            ("epochs", self.epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("bernoulli_p", a.bernoulli_p.to_string()),
            ("negative_transforms", join(&a.negatives)),
            ("positive_transforms", join(&a.positives)),
            ("noise_sigmas", join(&r.noise_sigmas)),
            ("smooth_sigmas", join(&r.smooth_sigmas)),
            (
                "flip_axes",
                r.flip_axes.iter().map(|f| flip_name(*f)).collect::<Vec<_>>().join(","),
            ),
            ("rotation_degrees", join(&r.rotation_degrees)),
            ("crop_fraction", format!("{},{}", r.crop_fraction.0, r.crop_fraction.1)),
            ("cutout_sides", join(&r.cutout_sides)),
            ("checkpoint_history", self.checkpoint_history.to_string()),
        ]
    }

    /// This config with paths reset to their defaults, as stored in
    /// checkpoints.
    pub fn without_paths(&self) -> Self {
        let d = Self::default();
        Self {
            dataset_dir: d.dataset_dir,
            output_dir: d.output_dir,
            ..self.clone()
        }
    }

    pub fn path_entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("dataset_dir", self.dataset_dir.display().to_string()),
            ("output_dir", self.output_dir.display().to_string()),
        ]
    }

    /// Sets one key; returns `Ok(false)` if the key is not a training key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        const UINT: &str = "a non-negative integer";
        const FLOAT: &str = "a number";
        let v = value.trim();
        let a = &mut self.augmentation;
        match key {
            "batch_size" => self.batch_size = parse_value(key, v, UINT)?,
            "image_size" => self.model.image_size = parse_value(key, v, UINT)?,
            "latent_dim" => self.model.latent_dim = parse_value(key, v, UINT)?,
            "num_attributes" => self.model.num_attributes = parse_value(key, v, UINT)?,
            "context_dim" => self.model.context_dim = parse_value(key, v, UINT)?,
            "lambda_kl" => self.weights.kl = parse_value(key, v, FLOAT)?,
            "lambda_cen" => self.weights.cen = parse_value(key, v, FLOAT)?,
            "lambda_a" => self.weights.a = parse_value(key, v, FLOAT)?,
            "learning_rate" => self.adam.learning_rate = parse_value(key, v, FLOAT)?,
            "adam_beta1" => self.adam.beta1 = parse_value(key, v, FLOAT)?,
            "adam_beta2" => self.adam.beta2 = parse_value(key, v, FLOAT)?,
            "adam_eps" => self.adam.eps = parse_value(key, v, FLOAT)?,
            "epochs" => self.epochs = parse_value(key, v, UINT)?,
            "seed" => self.seed = parse_value(key, v, UINT)?,
            "bernoulli_p" => a.bernoulli_p = parse_value(key, v, FLOAT)?,
            "negative_transforms" => {
                a.negatives = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(NegativeTransform::from_str)
                    .collect::<Result<_>>()?
            }
            "positive_transforms" => {
                a.positives = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(PositiveTransform::from_str)
                    .collect::<Result<_>>()?
            }
            "noise_sigmas" => a.ranges.noise_sigmas = parse_list(key, v, "a list of numbers")?,
            "smooth_sigmas" => a.ranges.smooth_sigmas = parse_list(key, v, "a list of numbers")?,
            "flip_axes" => {
                a.ranges.flip_axes = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| match s {
                        "horizontal" => Ok(FlipAxis::Horizontal),
                        "vertical" => Ok(FlipAxis::Vertical),
                        _ => Err(config_err!("key '{key}' expects horizontal/vertical, got '{s}'")),
                    })
                    .collect::<Result<_>>()?
            }
            "rotation_degrees" => a.ranges.rotation_degrees = parse_list(key, v, "a list of integers")?,
            "crop_fraction" => {
                let pair: Vec<f64> = parse_list(key, v, "two numbers 'lo,hi'")?;
                let [lo, hi] = pair[..] else {
                    return Err(config_err!("key '{key}' expects two numbers 'lo,hi', got '{v}'"));
                };
                a.ranges.crop_fraction = (lo, hi);
            }
            "cutout_sides" => a.ranges.cutout_sides = parse_list(key, v, "a list of integers")?,
            "checkpoint_history" => self.checkpoint_history = parse_value(key, v, "true or false")?,
            "dataset_dir" => self.dataset_dir = PathBuf::from(v),
            "output_dir" => self.output_dir = PathBuf::from(v),
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        self.augmentation.validate(self.model.num_attributes)?;
        if self.batch_size == 0 {
            return Err(config_err!("batch_size must be positive"));
        }
        let adam = &self.adam;
        if !(adam.learning_rate > 0.0 && adam.eps > 0.0) {
            return Err(config_err!("learning_rate and adam_eps must be positive"));
        }
        if !((0.0..1.0).contains(&adam.beta1) && (0.0..1.0).contains(&adam.beta2)) {
            return Err(config_err!("adam betas must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!(c.batch_size, 64);
        assert_eq!(c.epochs, 250);
        assert_eq!(
            (c.model.latent_dim, c.model.num_attributes, c.model.context_dim),
            (32, 2, 100)
        );
        assert_eq!(c.adam, AdamConfig { learning_rate: 1e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 });
        assert!(c.validate().is_ok());
    }

    #[test]
    fn entries_round_trip_through_set() {
        let mut c = TrainConfig::default();
        c.set("negative_transforms", "flip, cutout").unwrap();
        c.set("crop_fraction", "0.7,0.8").unwrap();
        c.set("flip_axes", "vertical").unwrap();
        c.set("lambda_cen", "0.5").unwrap();
        let mut back = TrainConfig::default();
        for (k, v) in c.entries().into_iter().chain(c.path_entries()) {
            assert!(back.set(k, &v).unwrap(), "{k}");
        }
        assert_eq!(back, c);
    }

    #[test]
    fn bad_values_name_the_key_and_type() {
        let mut c = TrainConfig::default();
        let err = c.set("batch_size", "many").unwrap_err().to_string();
        assert!(err.contains("batch_size") && err.contains("integer"), "{err}");
        assert!(!c.set("batch_sz", "16").unwrap());
        assert!(c.set("negative_transforms", "blur").is_err());
        assert!(c.set("crop_fraction", "0.7").is_err());
        c.set("num_attributes", "3").unwrap();
        assert!(c.validate().is_err());
    }
}
