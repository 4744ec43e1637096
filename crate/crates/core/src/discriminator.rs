//! Multi-level patch discriminators.
//!
//! Each level is an independent fully-convolutional network whose output is a
//! grid of unbounded per-patch scores. Intermediate activations are exposed
//! for feature matching.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bound, Conv, InstanceNorm, LayerBuilder, ParamSet};
use crate::tensor::{Graph, Scalar, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchLayer {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub channels: usize,
}

impl PatchLayer {
    pub const fn new(kernel: usize, stride: usize, padding: usize, channels: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
            channels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub n_levels: usize,
    /// Layer stack shared by every level; the last layer emits the score map.
    pub layers: Vec<PatchLayer>,
    pub leaky_slope: f64,
    /// Instance normalisation on hidden layers after the first. Off by
    /// default: it couples every patch to the whole image.
    pub norm: bool,
    pub init_std: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            n_levels: 2,
            layers: vec![
                PatchLayer::new(4, 2, 1, 32),
                PatchLayer::new(4, 2, 1, 64),
                PatchLayer::new(4, 2, 1, 128),
                PatchLayer::new(4, 1, 1, 128),
                PatchLayer::new(4, 1, 1, 1),
            ],
            leaky_slope: 0.2,
            norm: false,
            init_std: 0.02,
        }
    }
}

impl DiscriminatorConfig {
    /// Side length of the score map for a square input, if the chain is valid.
    pub fn logit_size(&self, input: usize) -> Result<usize> {
        self.layers.iter().try_fold(input, |side, l| {
            if l.kernel == 0 || l.stride == 0 || side + 2 * l.padding < l.kernel {
                Err(Error::Config(format!(
                    "discriminator layer {l:?} collapses a {side}×{side} map"
                )))
            } else {
                Ok((side + 2 * l.padding - l.kernel) / l.stride + 1)
            }
        })
    }

    pub fn validate(&self, image_size: usize) -> Result<()> {
        if self.n_levels == 0 || self.layers.len() < 2 {
            return Err(Error::Config(
                "discriminator needs at least one level and two layers".into(),
            ));
        }
        if self.layers.last().map(|l| l.channels) != Some(1) {
            return Err(Error::Config("last discriminator layer must have 1 channel".into()));
        }
        for level in 0..self.n_levels {
            let side = image_size >> level;
            if side << level != image_size || side == 0 {
                return Err(Error::Config(format!(
                    "image size {image_size} cannot be halved {level} times"
                )));
            }
            self.logit_size(side)?;
        }
        Ok(())
    }

    pub fn receptive_field(&self) -> usize {
        let ks: Vec<(usize, usize)> = self.layers.iter().map(|l| (l.kernel, l.stride)).collect();
        receptive_field(&ks)
    }
}

/// Receptive field of a convolution stack given `(kernel, stride)` per layer.
pub fn receptive_field(layers: &[(usize, usize)]) -> usize {
    let (mut r, mut jump) = (1usize, 1usize);
    for &(k, s) in layers {
        r += k.saturating_sub(1) * jump;
        jump *= s;
    }
    r
}

/// Inclusive input-coordinate span (may extend into padding) seen by output
/// position `index` along one axis.
pub fn receptive_window(layers: &[PatchLayer], index: usize) -> (isize, isize) {
    let (mut lo, mut hi) = (index as isize, index as isize);
    for l in layers.iter().rev() {
        let (s, p, k) = (l.stride as isize, l.padding as isize, l.kernel as isize);
        lo = lo * s - p;
        hi = hi * s - p + k - 1;
    }
    (lo, hi)
}

/// Score map plus the hidden activations that produced it.
#[derive(Debug, Clone)]
pub struct PatchResponse {
    pub logits: Var,
    pub features: Vec<Var>,
}

#[derive(Debug, Clone)]
struct Layer {
    conv: Conv,
    norm: Option<InstanceNorm>,
}

/// One discriminator level.
#[derive(Debug, Clone)]
pub struct Discriminator<T> {
    input_size: usize,
    slope: f64,
    params: ParamSet<T>,
    layers: Vec<Layer>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(config: &DiscriminatorConfig, input_size: usize, seed: u64) -> Result<Self> {
        config.logit_size(input_size)?;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = LayerBuilder::new(&mut params, &mut rng, config.init_std);
        let mut c_in = 3;
        let last = config.layers.len() - 1;
        let layers = config
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let use_norm = config.norm && i > 0 && i < last;
                let conv = b.conv(
                    &format!("conv{i}"),
                    c_in,
                    l.channels,
                    l.kernel,
                    l.stride,
                    l.padding,
                    !use_norm,
                );
                let norm = use_norm.then(|| b.norm(&format!("conv{i}.norm"), l.channels));
                c_in = l.channels;
                Layer { conv, norm }
            })
            .collect();
        Ok(Self {
            input_size,
            slope: config.leaky_slope,
            params,
            layers,
        })
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, image: Var) -> Result<PatchResponse> {
        let (c, h, w) = g.value(image).chw()?;
        if c != 3 || h != self.input_size || w != self.input_size {
            return Err(Error::Contract(format!(
                "discriminator level expects 3×{s}×{s}, got {c}×{h}×{w}",
                s = self.input_size
            )));
        }
        let last = self.layers.len() - 1;
        let mut x = image;
        let mut features = Vec::with_capacity(last);
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.conv.apply(g, p, x)?;
            if i == last {
                break;
            }
            if let Some(norm) = &layer.norm {
                x = norm.apply(g, p, x)?;
            }
            x = g.leaky_relu(x, T::lit(self.slope));
            features.push(x);
        }
        Ok(PatchResponse {
            logits: x,
            features,
        })
    }
}

/// The full set of levels: level `k` judges images at `image_size / 2^k`.
#[derive(Debug, Clone)]
pub struct MultiDiscriminator<T> {
    levels: Vec<Discriminator<T>>,
}

impl<T: Scalar> MultiDiscriminator<T> {
    pub fn new(config: &DiscriminatorConfig, image_size: usize, seed: u64) -> Result<Self> {
        config.validate(image_size)?;
        let levels = (0..config.n_levels)
            .map(|k| Discriminator::new(config, image_size >> k, seed.wrapping_add(k as u64)))
            .collect::<Result<_>>()?;
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[Discriminator<T>] {
        &self.levels
    }

    pub fn levels_mut(&mut self) -> &mut [Discriminator<T>] {
        &mut self.levels
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Bound> {
        self.levels
            .iter()
            .map(|d| d.params().bind(g, trainable))
            .collect()
    }

    /// One response per level; `images[k]` must be at level `k`'s scale.
    pub fn apply(&self, g: &mut Graph<T>, bound: &[Bound], images: &[Var]) -> Result<Vec<PatchResponse>> {
        if images.len() != self.levels.len() || bound.len() != self.levels.len() {
            return Err(Error::Contract(format!(
                "{} discriminator levels, got {} images",
                self.levels.len(),
                images.len()
            )));
        }
        self.levels
            .iter()
            .zip(bound)
            .zip(images)
            .map(|((d, p), &img)| d.forward(g, p, img))
            .collect()
    }
}
