//! Training objectives as graph functions returning scalar [`Var`]s.
//!
//! Adversarial terms use the least-squares form on raw patch logits. Callers
//! decide what is detached except where noted: feature matching always
//! detaches its real branch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bound, Conv, LayerBuilder, ParamSet};
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Cycle consistency.
    pub alpha: f64,
    /// Feature matching.
    pub beta: f64,
    /// Identity ℓ1.
    pub gamma: f64,
    /// Gram texture.
    pub eta: f64,
    /// Identity weight of the adversarial-plus-identity base objective.
    pub lambda_base: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 10.0,
            gamma: 5.0,
            eta: 10.0,
            lambda_base: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("eta", self.eta),
            ("lambda_base", self.lambda_base),
        ];
        match all.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            Some((name, v)) => Err(Error::Config(format!(
                "loss weight {name} must be finite and non-negative, got {v}"
            ))),
            None => Ok(()),
        }
    }

    /// Weights that reduce the total to adversarial terms plus λ·identity.
    pub fn base(&self) -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            gamma: self.lambda_base,
            eta: 0.0,
            lambda_base: self.lambda_base,
        }
    }
}

fn batch_mean<T: Scalar>(g: &mut Graph<T>, terms: &[Var]) -> Result<Var> {
    if terms.is_empty() {
        return Err(Error::Contract("empty sample list".into()));
    }
    let s = g.add_all(terms)?;
    Ok(g.scale(s, T::lit(1.0 / terms.len() as f64)))
}

fn mean_sq_offset<T: Scalar>(g: &mut Graph<T>, logits: Var, target: f64) -> Var {
    let d = g.add_scalar(logits, T::lit(-target));
    let sq = g.square(d);
    g.mean(sq)
}

/// `½·mean((D(real)−1)²) + ½·mean(D(fake)²)`, each side averaged over its samples.
pub fn adv_loss_d<T: Scalar>(g: &mut Graph<T>, real: &[Var], fake: &[Var]) -> Result<Var> {
    let r: Vec<Var> = real.iter().map(|&l| mean_sq_offset(g, l, 1.0)).collect();
    let f: Vec<Var> = fake.iter().map(|&l| mean_sq_offset(g, l, 0.0)).collect();
    let r = batch_mean(g, &r)?;
    let f = batch_mean(g, &f)?;
    let s = g.add(r, f)?;
    Ok(g.scale(s, T::lit(0.5)))
}

/// `mean((D(fake)−1)²)`, averaged over samples.
pub fn adv_loss_g<T: Scalar>(g: &mut Graph<T>, fake: &[Var]) -> Result<Var> {
    let f: Vec<Var> = fake.iter().map(|&l| mean_sq_offset(g, l, 1.0)).collect();
    batch_mean(g, &f)
}

/// Mean absolute difference.
pub fn identity_l1<T: Scalar>(g: &mut Graph<T>, target: Var, generated: Var) -> Result<Var> {
    g.l1_distance(target, generated)
}

/// `Σ_layers mean|E_batch[real] − E_batch[fake]|`. Each batch entry is one
/// sample's ordered feature list; the real side is detached.
pub fn feature_matching<T: Scalar>(
    g: &mut Graph<T>,
    real: &[Vec<Var>],
    fake: &[Vec<Var>],
) -> Result<Var> {
    let n_layers = real.first().map(Vec::len).unwrap_or(0);
    if real.is_empty()
        || fake.is_empty()
        || real.iter().chain(fake).any(|f| f.len() != n_layers)
        || n_layers == 0
    {
        return Err(Error::Contract(
            "feature matching needs non-empty batches with equal layer counts".into(),
        ));
    }
    let mut per_layer = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let r: Vec<Var> = real.iter().map(|f| g.detach(f[l])).collect();
        let f: Vec<Var> = fake.iter().map(|f| f[l]).collect();
        let r = batch_mean(g, &r)?;
        let f = batch_mean(g, &f)?;
        per_layer.push(g.l1_distance(r, f)?);
    }
    g.add_all(&per_layer)
}

/// Gram matrix of a κ×H×W feature map over vectorised positions, optionally
/// divided by κ·H·W.
pub fn gram<T: Scalar>(g: &mut Graph<T>, features: Var, normalize: bool) -> Result<Var> {
    let (k, h, w) = g.value(features).chw()?;
    let flat = g.reshape(features, &[k, h * w])?;
    let flat_t = g.transpose(flat)?;
    let m = g.matmul(flat, flat_t)?;
    Ok(if normalize {
        g.scale(m, T::lit(1.0 / (k * h * w) as f64))
    } else {
        m
    })
}

/// Fixed random convolutional feature extractor for texture statistics.
///
/// Five blocks of 3×3 conv + relu with 2× average pooling between blocks;
/// the activation after each block is tapped. Weights never receive
/// gradients: they enter every graph as constants.
#[derive(Debug, Clone)]
pub struct TextureNet<T> {
    params: ParamSet<T>,
    blocks: Vec<Conv>,
}

pub const TEXTURE_CHANNELS: [usize; 5] = [8, 16, 32, 32, 32];
const TEXTURE_SEED: u64 = 0x7e57_u64;

impl<T: Scalar> TextureNet<T> {
    pub fn new() -> Self {
        Self::with_channels(&TEXTURE_CHANNELS, TEXTURE_SEED)
    }

    pub fn with_channels(channels: &[usize], seed: u64) -> Self {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c_in = 3;
        let mut blocks = Vec::with_capacity(channels.len());
        for (i, &c) in channels.iter().enumerate() {
            // He-scaled so activations keep their magnitude through depth
            let std = (2.0 / (9 * c_in) as f64).sqrt();
            let mut b = LayerBuilder::new(&mut params, &mut rng, std);
            blocks.push(b.conv(&format!("block{i}"), c_in, c, 3, 1, 1, false));
            c_in = c;
        }
        Self { params, blocks }
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }

    /// Tapped activations, one per block.
    pub fn features(&self, g: &mut Graph<T>, image: Var) -> Result<Vec<Var>> {
        let p = Bound::from_vars(
            self.params
                .tensors()
                .iter()
                .map(|t| g.constant(t.clone()))
                .collect(),
        );
        let mut x = image;
        let mut taps = Vec::with_capacity(self.blocks.len());
        for (i, conv) in self.blocks.iter().enumerate() {
            if i > 0 {
                let (_, h, w) = g.value(x).chw()?;
                if h >= 2 && w >= 2 {
                    x = g.average_downsample(x)?;
                }
            }
            x = conv.apply(g, &p, x)?;
            x = g.relu(x);
            taps.push(x);
        }
        Ok(taps)
    }
}

impl<T: Scalar> Default for TextureNet<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Squared Frobenius distance between normalised Gram matrices, averaged
/// over the extractor's tapped layers.
pub fn texture_loss<T: Scalar>(
    g: &mut Graph<T>,
    image_a: Var,
    image_b: Var,
    net: &TextureNet<T>,
) -> Result<Var> {
    if g.shape(image_a) != g.shape(image_b) {
        return Err(Error::Contract(format!(
            "texture loss needs equal shapes, got {:?} and {:?}",
            g.shape(image_a),
            g.shape(image_b)
        )));
    }
    let fa = net.features(g, image_a)?;
    let fb = net.features(g, image_b)?;
    let mut per_layer = Vec::with_capacity(fa.len());
    for (a, b) in fa.into_iter().zip(fb) {
        let ga = gram(g, a, true)?;
        let gb = gram(g, b, true)?;
        let d = g.sub(ga, gb)?;
        let sq = g.square(d);
        per_layer.push(g.sum(sq));
    }
    batch_mean(g, &per_layer)
}

/// `mean|rec_A − A| + mean|rec_B − B|`.
pub fn cycle_loss<T: Scalar>(
    g: &mut Graph<T>,
    image_a: Var,
    reconstructed_a: Var,
    image_b: Var,
    reconstructed_b: Var,
) -> Result<Var> {
    let a = g.l1_distance(reconstructed_a, image_a)?;
    let b = g.l1_distance(reconstructed_b, image_b)?;
    g.add(a, b)
}

/// Every component of the full objective. Absent terms count as zero.
#[derive(Debug, Clone, Default)]
pub struct ObjectiveTerms {
    /// Generator adversarial terms in the A→B direction, one per level.
    pub gan_ab: Vec<Var>,
    /// Generator adversarial terms in the B→A direction, one per level.
    pub gan_ba: Vec<Var>,
    pub cycle: Option<Var>,
    /// Feature matching terms, one per level and direction.
    pub feature_matching: Vec<Var>,
    pub identity: Option<Var>,
    pub texture: Option<Var>,
}

/// `Σgan_ab + Σgan_ba + α·cycle + β·Σfm + γ·identity + η·texture`.
pub fn total_objective<T: Scalar>(
    g: &mut Graph<T>,
    terms: &ObjectiveTerms,
    weights: &LossWeights,
) -> Result<Var> {
    let mut named: Vec<(String, Var, f64)> = Vec::new();
    for (i, &v) in terms.gan_ab.iter().enumerate() {
        named.push((format!("gan_ab[{i}]"), v, 1.0));
    }
    for (i, &v) in terms.gan_ba.iter().enumerate() {
        named.push((format!("gan_ba[{i}]"), v, 1.0));
    }
    if let Some(v) = terms.cycle {
        named.push(("cycle".into(), v, weights.alpha));
    }
    for (i, &v) in terms.feature_matching.iter().enumerate() {
        named.push((format!("feature_matching[{i}]"), v, weights.beta));
    }
    if let Some(v) = terms.identity {
        named.push(("identity".into(), v, weights.gamma));
    }
    if let Some(v) = terms.texture {
        named.push(("texture".into(), v, weights.eta));
    }
    let mut parts = Vec::with_capacity(named.len());
    for (name, v, w) in named {
        if g.shape(v).iter().product::<usize>() != 1 {
            return Err(Error::Contract(format!("objective term {name} is not a scalar")));
        }
        g.check_finite(v, &format!("objective term {name}"))?;
        parts.push(if w == 1.0 { v } else { g.scale(v, T::lit(w)) });
    }
    if parts.is_empty() {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    g.add_all(&parts)
}
