//! Training configuration and its flat key-value file form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{CorpusConfig, MAX_MODALITIES};
use crate::discriminator::{DiscriminatorConfig, PatchLayer};
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::losses::LossWeights;
use crate::training::adam::AdamConfig;

/// Which objective is optimised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Forward direction, finest level only: adversarial + λ·identity.
    Base,
    /// Forward direction, every discriminator level: Σ adversarial + λ·identity.
    Multilevel,
    /// Both directions with cycle, feature matching, identity and texture terms.
    Full,
}

/// Which samples the replay pool holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolTarget {
    /// Real target images, feeding the real side of feature matching.
    Real,
    /// Generated images, feeding the fake side of the discriminator loss.
    Fake,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub weights: LossWeights,
    pub adam_g: AdamConfig,
    pub adam_d: AdamConfig,
    pub batch_size: usize,
    pub steps: u64,
    pub pool_capacity: usize,
    pub pool_target: PoolTarget,
    pub seed: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Steps between metric rows; 0 logs every step.
    pub log_every: u64,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub corpus: CorpusConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Full,
            weights: LossWeights::default(),
            adam_g: AdamConfig::default(),
            adam_d: AdamConfig::default(),
            batch_size: 1,
            steps: 20_000,
            pool_capacity: 50,
            pool_target: PoolTarget::Real,
            seed: 0,
            checkpoint_every: 1000,
            log_every: 0,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            corpus: CorpusConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Small 32×32 run on two identities, sized for a few CPU minutes.
    pub fn smoke() -> Self {
        let generator = GeneratorConfig {
            base_channels: 8,
            max_channels: 32,
            n_down: 2,
            n_up: 2,
            image_size: 32,
            ..Default::default()
        };
        let discriminator = DiscriminatorConfig {
            layers: vec![
                PatchLayer::new(4, 2, 1, 16),
                PatchLayer::new(4, 2, 1, 32),
                PatchLayer::new(4, 2, 1, 32),
                PatchLayer::new(4, 1, 2, 32),
                PatchLayer::new(4, 1, 2, 1),
            ],
            ..Default::default()
        };
        let corpus = CorpusConfig {
            train_identities: 2,
            heldout_identities: 2,
            image_size: 32,
            ..Default::default()
        };
        Self {
            steps: 500,
            checkpoint_every: 0,
            generator,
            discriminator,
            corpus,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        for (name, a) in [("G", &self.adam_g), ("D", &self.adam_d)] {
            if !(a.lr > 0.0 && a.lr.is_finite()) {
                return Err(Error::Config(format!("{name} learning rate must be > 0, got {}", a.lr)));
            }
            if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 {
                return Err(Error::Config(format!("{name} optimiser moments out of range")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        self.generator.validate()?;
        let size = self.generator.image_size;
        if !size.is_power_of_two() || size < 32 {
            return Err(Error::Config(format!(
                "image_size must be a power of two ≥ 32, got {size}"
            )));
        }
        self.discriminator.validate(self.generator.image_size)?;
        if self.generator.n_modalities > MAX_MODALITIES {
            return Err(Error::Config(format!(
                "at most {MAX_MODALITIES} modalities are available, got {}",
                self.generator.n_modalities
            )));
        }
        if self.corpus.image_size != self.generator.image_size
            || self.corpus.modalities != self.generator.n_modalities
        {
            return Err(Error::Config(
                "corpus image size and modality count must match the generator".into(),
            ));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let flat: FlatConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        let cfg = flat.into_config();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config file {}: {e}", path.display()))
        })?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&FlatConfig::from(self)).expect("flat config serialises")
    }
}

/// The on-disk form: one level of `key = value` pairs, all optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlatConfig {
    pub mode: Mode,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub pool_capacity: usize,
    pub pool_target: PoolTarget,
    pub checkpoint_every: u64,
    pub log_every: u64,

    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub eta: f64,
    pub lambda_base: f64,

    pub image_size: usize,
    pub n_modalities: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub n_down: usize,
    pub n_resblocks: usize,
    pub n_up: usize,
    pub stem_kernel: usize,
    pub down_kernel: usize,
    pub res_kernel: usize,
    pub landmark_stroke: usize,
    pub gen_init_std: f64,

    pub disc_levels: usize,
    pub disc_kernels: Vec<usize>,
    pub disc_strides: Vec<usize>,
    pub disc_paddings: Vec<usize>,
    pub disc_channels: Vec<usize>,
    pub disc_leaky_slope: f64,
    pub disc_norm: bool,
    pub disc_init_std: f64,

    pub corpus_seed: u64,
    pub train_identities: usize,
    pub heldout_identities: usize,
    pub emotions: usize,
}

impl Default for FlatConfig {
    fn default() -> Self {
        Self::from(&TrainConfig::default())
    }
}

impl From<&TrainConfig> for FlatConfig {
    fn from(c: &TrainConfig) -> Self {
        let g = &c.generator;
        let d = &c.discriminator;
        let col = |f: fn(&PatchLayer) -> usize| d.layers.iter().map(f).collect();
        Self {
            mode: c.mode,
            steps: c.steps,
            batch_size: c.batch_size,
            seed: c.seed,
            lr_g: c.adam_g.lr,
            lr_d: c.adam_d.lr,
            beta1: c.adam_g.beta1,
            beta2: c.adam_g.beta2,
            adam_eps: c.adam_g.eps,
            pool_capacity: c.pool_capacity,
            pool_target: c.pool_target,
            checkpoint_every: c.checkpoint_every,
            log_every: c.log_every,
            alpha: c.weights.alpha,
            beta: c.weights.beta,
            gamma: c.weights.gamma,
            eta: c.weights.eta,
            lambda_base: c.weights.lambda_base,
            image_size: g.image_size,
            n_modalities: g.n_modalities,
            base_channels: g.base_channels,
            max_channels: g.max_channels,
            n_down: g.n_down,
            n_resblocks: g.n_resblocks,
            n_up: g.n_up,
            stem_kernel: g.stem_kernel,
            down_kernel: g.down_kernel,
            res_kernel: g.res_kernel,
            landmark_stroke: g.landmark_stroke,
            gen_init_std: g.init_std,
            disc_levels: d.n_levels,
            disc_kernels: col(|l| l.kernel),
            disc_strides: col(|l| l.stride),
            disc_paddings: col(|l| l.padding),
            disc_channels: col(|l| l.channels),
            disc_leaky_slope: d.leaky_slope,
            disc_norm: d.norm,
            disc_init_std: d.init_std,
            corpus_seed: c.corpus.seed,
            train_identities: c.corpus.train_identities,
            heldout_identities: c.corpus.heldout_identities,
            emotions: c.corpus.emotions,
        }
    }
}

impl FlatConfig {
    pub fn into_config(self) -> TrainConfig {
        let adam = |lr| AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        };
        let n = self
            .disc_kernels
            .len()
            .max(self.disc_strides.len())
            .max(self.disc_paddings.len())
            .max(self.disc_channels.len());
        let at = |v: &[usize], i: usize| v.get(i).copied().unwrap_or(0);
        let layers = (0..n)
            .map(|i| {
                PatchLayer::new(
                    at(&self.disc_kernels, i),
                    at(&self.disc_strides, i),
                    at(&self.disc_paddings, i),
                    at(&self.disc_channels, i),
                )
            })
            .collect();
        TrainConfig {
            mode: self.mode,
            weights: LossWeights {
                alpha: self.alpha,
                beta: self.beta,
                gamma: self.gamma,
                eta: self.eta,
                lambda_base: self.lambda_base,
            },
            adam_g: adam(self.lr_g),
            adam_d: adam(self.lr_d),
            batch_size: self.batch_size,
            steps: self.steps,
            pool_capacity: self.pool_capacity,
            pool_target: self.pool_target,
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
            log_every: self.log_every,
            generator: GeneratorConfig {
                base_channels: self.base_channels,
                max_channels: self.max_channels,
                n_down: self.n_down,
                n_resblocks: self.n_resblocks,
                n_up: self.n_up,
                n_modalities: self.n_modalities,
                image_size: self.image_size,
                stem_kernel: self.stem_kernel,
                down_kernel: self.down_kernel,
                res_kernel: self.res_kernel,
                landmark_stroke: self.landmark_stroke,
                init_std: self.gen_init_std,
            },
            discriminator: DiscriminatorConfig {
                n_levels: self.disc_levels,
                layers,
                leaky_slope: self.disc_leaky_slope,
                norm: self.disc_norm,
                init_std: self.disc_init_std,
            },
            corpus: CorpusConfig {
                seed: self.corpus_seed,
                train_identities: self.train_identities,
                heldout_identities: self.heldout_identities,
                emotions: self.emotions,
                modalities: self.n_modalities,
                image_size: self.image_size,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_reference_run() {
        let cfg = TrainConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, TrainConfig::default());
        assert_eq!(cfg.generator.image_size, 64);
        assert_eq!(cfg.discriminator.receptive_field(), 70);
    }

    #[test]
    fn round_trips_through_text() {
        for cfg in [TrainConfig::default(), TrainConfig::smoke()] {
            cfg.validate().unwrap();
            assert_eq!(TrainConfig::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
        }
    }

    #[test]
    fn keys_override_defaults() {
        let cfg = TrainConfig::from_toml_str(
            "mode = \"base\"\nimage_size = 32\nalpha = 3.5\ndisc_paddings = [1, 1, 1, 2, 2]\n",
        )
        .unwrap();
        assert_eq!(cfg.mode, Mode::Base);
        assert_eq!(cfg.corpus.image_size, 32);
        assert_eq!(cfg.weights.alpha, 3.5);
        assert_eq!(cfg.discriminator.layers[4].padding, 2);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(TrainConfig::from_toml_str("no_such_key = 1").unwrap_err().to_string().contains("no_such_key"));
        assert!(TrainConfig::from_toml_str("lr_g = 0.0").is_err());
        assert!(TrainConfig::from_toml_str("gamma = -1.0").is_err());
        assert!(TrainConfig::from_toml_str("image_size = 48").is_err());
        assert!(TrainConfig::from_toml_str("n_modalities = 4").is_err());
        let err = TrainConfig::load(Path::new("/definitely/missing.toml")).unwrap_err();
        assert!(err.to_string().contains("/definitely/missing.toml"));
    }
}
