//! The shared bidirectional generator `G(I | L, c̄)`.
//!
//! Encoder (stem + stride-2 convolutions), a residual trunk, and a decoder of
//! stride-2 transposed convolutions. Every upsampling stage but the last also
//! feeds a 1×1 "fusion" branch that emits a tanh-bounded RGB image at that
//! stage's resolution for multi-level supervision.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{assemble_input, Condition, ConditionedInput};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv, InstanceNorm, LayerBuilder, ParamSet};
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    /// Channel widths double per downsampling stage up to this cap.
    pub max_channels: usize,
    pub n_down: usize,
    pub n_resblocks: usize,
    pub n_up: usize,
    pub n_modalities: usize,
    pub image_size: usize,
    pub stem_kernel: usize,
    pub down_kernel: usize,
    pub res_kernel: usize,
    pub landmark_stroke: usize,
    pub init_std: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            max_channels: 128,
            n_down: 4,
            n_resblocks: 9,
            n_up: 4,
            n_modalities: 2,
            image_size: 64,
            stem_kernel: 7,
            down_kernel: 4,
            res_kernel: 3,
            landmark_stroke: 1,
            init_std: 0.02,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("generator: {m}")));
        if self.n_up != self.n_down {
            return fail(format!("n_up ({}) must equal n_down ({})", self.n_up, self.n_down));
        }
        if self.n_modalities == 0 || self.base_channels == 0 || self.max_channels == 0 {
            return fail("channel and modality counts must be positive".into());
        }
        let factor = 1usize << self.n_down;
        if self.image_size == 0 || self.image_size % factor != 0 {
            return fail(format!(
                "image_size {} not divisible by 2^n_down = {factor}",
                self.image_size
            ));
        }
        if self.image_size < 8 {
            return fail("image_size must be at least 8".into());
        }
        if self.stem_kernel % 2 == 0 || self.res_kernel % 2 == 0 {
            return fail("stem and residual kernels must be odd".into());
        }
        if self.down_kernel < 2 {
            return fail("down_kernel must be at least 2".into());
        }
        if self.n_resblocks > 0 && (self.image_size / factor).pow(2) < 2 {
            return fail("bottleneck too small for instance normalisation".into());
        }
        Ok(())
    }

    pub fn input_channels(&self) -> usize {
        3 + 1 + self.n_modalities
    }

    /// Channel width after `level` downsampling stages.
    pub fn channels_at(&self, level: usize) -> usize {
        (self.base_channels << level).min(self.max_channels.max(self.base_channels))
    }

    /// Side lengths of the intermediate outputs, coarse to fine.
    pub fn intermediate_sizes(&self) -> Vec<usize> {
        (1..self.n_up).rev().map(|j| self.image_size >> j).collect()
    }
}

#[derive(Debug, Clone)]
struct Stage {
    conv: Conv,
    norm: InstanceNorm,
}

impl Stage {
    fn apply<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = self.conv.apply(g, p, x)?;
        let y = self.norm.apply(g, p, y)?;
        Ok(g.relu(y))
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    first: Stage,
    second_conv: Conv,
    second_norm: InstanceNorm,
}

impl ResBlock {
    fn apply<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = self.first.apply(g, p, x)?;
        let y = self.second_conv.apply(g, p, y)?;
        let y = self.second_norm.apply(g, p, y)?;
        g.add(x, y)
    }
}

#[derive(Debug, Clone)]
struct Layout {
    stem: Stage,
    down: Vec<Stage>,
    res: Vec<ResBlock>,
    up: Vec<Stage>,
    aux: Vec<Conv>,
    out: Conv,
}

fn build_layout<T: Scalar>(cfg: &GeneratorConfig, params: &mut ParamSet<T>, seed: u64) -> Layout {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = LayerBuilder::new(params, &mut rng, cfg.init_std);
    let stem = Stage {
        conv: b.conv(
            "stem",
            cfg.input_channels(),
            cfg.channels_at(0),
            cfg.stem_kernel,
            1,
            cfg.stem_kernel / 2,
            false,
        ),
        norm: b.norm("stem.norm", cfg.channels_at(0)),
    };
    let dk = cfg.down_kernel;
    let dpad = (dk - 1) / 2;
    let down = (1..=cfg.n_down)
        .map(|i| Stage {
            conv: b.conv(
                &format!("down{i}"),
                cfg.channels_at(i - 1),
                cfg.channels_at(i),
                dk,
                2,
                dpad,
                false,
            ),
            norm: b.norm(&format!("down{i}.norm"), cfg.channels_at(i)),
        })
        .collect();
    let width = cfg.channels_at(cfg.n_down);
    let rk = cfg.res_kernel;
    let res = (0..cfg.n_resblocks)
        .map(|j| ResBlock {
            first: Stage {
                conv: b.conv(&format!("res{j}.conv1"), width, width, rk, 1, rk / 2, false),
                norm: b.norm(&format!("res{j}.norm1"), width),
            },
            second_conv: b.conv(&format!("res{j}.conv2"), width, width, rk, 1, rk / 2, false),
            second_norm: b.norm(&format!("res{j}.norm2"), width),
        })
        .collect();
    // transposed kernel 4 / stride 2 / pad 1 exactly doubles the side
    let up: Vec<Stage> = (1..=cfg.n_up)
        .map(|i| {
            let from = cfg.channels_at(cfg.n_down + 1 - i);
            let to = cfg.channels_at(cfg.n_down - i);
            Stage {
                conv: b.conv_transpose(&format!("up{i}"), from, to, 4, 2, 1, false),
                norm: b.norm(&format!("up{i}.norm"), to),
            }
        })
        .collect();
    let aux = (1..cfg.n_up)
        .map(|i| {
            let ch = cfg.channels_at(cfg.n_down - i);
            b.conv(&format!("aux{i}"), ch, 3, 1, 1, 0, true)
        })
        .collect();
    let out = b.conv(
        "out",
        cfg.channels_at(0),
        3,
        cfg.stem_kernel,
        1,
        cfg.stem_kernel / 2,
        true,
    );
    Layout {
        stem,
        down,
        res,
        up,
        aux,
        out,
    }
}

/// Generator parameters plus the layer layout derived from its config.
#[derive(Debug, Clone)]
pub struct Generator<T> {
    config: GeneratorConfig,
    params: ParamSet<T>,
    layout: Layout,
}

/// Final image and auxiliary outputs of one generator application.
#[derive(Debug, Clone)]
pub struct Translation {
    pub image: Var,
    /// Coarse to fine, `H/2^(n_up−1)` … `H/2`.
    pub intermediates: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorImages<T> {
    pub image: Tensor<T>,
    pub intermediates: Vec<Tensor<T>>,
}

/// Anything that maps an image to a new image under a target condition.
pub trait Translator<T: Scalar> {
    fn translate(&self, g: &mut Graph<T>, image: Var, condition: &Condition) -> Result<Translation>;
}

impl<T: Scalar> Generator<T> {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let layout = build_layout(&config, &mut params, seed);
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn from_params(config: GeneratorConfig, named: &[(String, Tensor<T>)]) -> Result<Self> {
        let mut g = Self::new(config, 0)?;
        g.params.load_from(named)?;
        Ok(g)
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundGenerator<'_, T> {
        BoundGenerator {
            generator: self,
            vars: self.params.bind(g, trainable),
        }
    }

    /// Run the network on an already-assembled input var.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, input: Var) -> Result<Translation> {
        let (c, h, w) = g.value(input).chw()?;
        let cfg = &self.config;
        if c != cfg.input_channels() || h != cfg.image_size || w != cfg.image_size {
            return Err(Error::Contract(format!(
                "generator expects {}×{s}×{s} input, got {c}×{h}×{w}",
                cfg.input_channels(),
                s = cfg.image_size
            )));
        }
        let l = &self.layout;
        let mut x = l.stem.apply(g, p, input)?;
        for stage in &l.down {
            x = stage.apply(g, p, x)?;
        }
        for block in &l.res {
            x = block.apply(g, p, x)?;
        }
        let mut intermediates = Vec::with_capacity(l.aux.len());
        for (i, stage) in l.up.iter().enumerate() {
            x = stage.apply(g, p, x)?;
            if let Some(aux) = l.aux.get(i) {
                let y = aux.apply(g, p, x)?;
                intermediates.push(g.tanh(y));
            }
        }
        let y = l.out.apply(g, p, x)?;
        Ok(Translation {
            image: g.tanh(y),
            intermediates,
        })
    }

    /// Gradient-free forward pass on a conditioned input.
    pub fn infer(&self, input: &ConditionedInput<T>) -> Result<GeneratorImages<T>> {
        if input.n_modalities() != self.config.n_modalities {
            return Err(Error::Contract(format!(
                "input carries {} modality planes, generator expects {}",
                input.n_modalities(),
                self.config.n_modalities
            )));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(input.tensor().clone());
        let t = self.forward(&mut g, &p, x)?;
        Ok(GeneratorImages {
            image: g.value(t.image).clone(),
            intermediates: t.intermediates.iter().map(|&v| g.value(v).clone()).collect(),
        })
    }

    /// Translate a plain image to `condition`, assembling the input planes.
    pub fn apply(&self, image: &Tensor<T>, condition: &Condition) -> Result<GeneratorImages<T>> {
        let (c, h, w) = image.chw()?;
        if c != 3 {
            return Err(Error::shape("generator apply", format!("image has {c} channels")));
        }
        let planes = condition.planes(h, w, self.config.landmark_stroke)?;
        let input = assemble_input(
            image,
            &planes.slice_channels(0, 1)?,
            &planes.slice_channels(1, planes.shape()[0])?,
        )?;
        self.infer(&input)
    }

    pub fn cast<U: Scalar>(&self) -> Generator<U> {
        Generator {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }
}

/// A generator whose parameters are leaves on a particular graph.
pub struct BoundGenerator<'a, T> {
    generator: &'a Generator<T>,
    vars: Bound,
}

impl<T: Scalar> BoundGenerator<'_, T> {
    pub fn vars(&self) -> &Bound {
        &self.vars
    }

    pub fn generator(&self) -> &Generator<T> {
        self.generator
    }
}

impl<T: Scalar> Translator<T> for BoundGenerator<'_, T> {
    fn translate(&self, g: &mut Graph<T>, image: Var, condition: &Condition) -> Result<Translation> {
        let cfg = self.generator.config();
        if condition.modality.count() != cfg.n_modalities {
            return Err(Error::Contract(format!(
                "condition has {} modalities, generator expects {}",
                condition.modality.count(),
                cfg.n_modalities
            )));
        }
        let input = condition.attach(g, image, cfg.landmark_stroke)?;
        self.generator.forward(g, &self.vars, input)
    }
}

/// Returns its input unchanged; a reference point for the cycle machinery.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityTranslator;

impl<T: Scalar> Translator<T> for IdentityTranslator {
    fn translate(&self, _g: &mut Graph<T>, image: Var, _condition: &Condition) -> Result<Translation> {
        Ok(Translation {
            image,
            intermediates: vec![],
        })
    }
}

pub struct CycleOutput {
    pub forward: Translation,
    pub reconstructed: Translation,
}

/// `I_A → G(I_A, L_B, c̄_B) → G(·, L_A, c̄_A)` with one translator.
pub fn cycle_apply<T: Scalar, G: Translator<T> + ?Sized>(
    generator: &G,
    g: &mut Graph<T>,
    image_a: Var,
    target: &Condition,
    source: &Condition,
) -> Result<CycleOutput> {
    let forward = generator.translate(g, image_a, target)?;
    let reconstructed = generator.translate(g, forward.image, source)?;
    Ok(CycleOutput {
        forward,
        reconstructed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{
        assemble_input, broadcast_modality, rasterize_landmarks, LandmarkSet, ModalityCode,
    };
    use crate::tensor::grad_check;
    use rand::Rng;

    fn landmarks(seed: u64) -> LandmarkSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LandmarkSet::new((0..68).map(|_| [rng.random(), rng.random()]).collect()).unwrap()
    }

    fn input<T: Scalar>(cfg: &GeneratorConfig, seed: u64) -> ConditionedInput<T> {
        let s = cfg.image_size;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = Tensor::from_fn(&[3, s, s], |_| T::lit(rng.random_range(-1.0..1.0)));
        let heat = rasterize_landmarks(&landmarks(seed), s, s, 1).unwrap();
        let planes = broadcast_modality(ModalityCode::new(0, cfg.n_modalities).unwrap(), s, s);
        assemble_input(&image, &heat, &planes).unwrap()
    }

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            base_channels: 4,
            max_channels: 16,
            n_resblocks: 2,
            image_size: 32,
            ..Default::default()
        }
    }

    #[test]
    fn output_shapes_at_64() {
        let cfg = GeneratorConfig {
            base_channels: 4,
            max_channels: 8,
            n_resblocks: 1,
            ..Default::default()
        };
        let gen = Generator::<f32>::new(cfg.clone(), 1).unwrap();
        let out = gen.infer(&input(&cfg, 2)).unwrap();
        assert_eq!(out.image.shape(), &[3, 64, 64]);
        let shapes: Vec<_> = out.intermediates.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![3, 8, 8], vec![3, 16, 16], vec![3, 32, 32]]);
        assert_eq!(cfg.intermediate_sizes(), vec![8, 16, 32]);
    }

    #[test]
    fn outputs_are_tanh_bounded() {
        let mut cfg = small();
        cfg.init_std = 0.5;
        let gen = Generator::<f32>::new(cfg.clone(), 3).unwrap();
        let out = gen.infer(&input(&cfg, 4)).unwrap();
        for t in std::iter::once(&out.image).chain(&out.intermediates) {
            assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn parameter_count_depends_only_on_config() {
        let a = Generator::<f32>::new(small(), 1).unwrap();
        let b = Generator::<f32>::new(small(), 99).unwrap();
        assert_eq!(a.params().scalar_count(), b.params().scalar_count());
        assert_eq!(a.params().names(), b.params().names());
        assert_ne!(a.params().digest(), b.params().digest());
    }

    #[test]
    fn config_validation() {
        let bad = GeneratorConfig { image_size: 40, ..small() };
        assert!(Generator::<f32>::new(bad, 0).is_err());
        let bad = GeneratorConfig { n_up: 3, ..small() };
        assert!(Generator::<f32>::new(bad, 0).is_err());
        let gen = Generator::<f32>::new(small(), 0).unwrap();
        let wrong = input::<f32>(&GeneratorConfig { n_modalities: 3, ..small() }, 1);
        assert!(gen.infer(&wrong).is_err());
    }

    #[test]
    fn output_shape_independent_of_content() {
        let cfg = small();
        let gen = Generator::<f32>::new(cfg.clone(), 5).unwrap();
        let a = gen.infer(&input(&cfg, 1)).unwrap();
        let b = gen.infer(&input(&cfg, 2)).unwrap();
        assert_eq!(a.image.shape(), b.image.shape());
        assert_ne!(a.image, b.image);
    }

    #[test]
    fn residual_trunk_preserves_shape() {
        let cfg = small();
        let gen = Generator::<f32>::new(cfg.clone(), 5).unwrap();
        let mut g = Graph::new();
        let p = gen.params().bind(&mut g, false);
        let width = cfg.channels_at(cfg.n_down);
        let side = cfg.image_size >> cfg.n_down;
        let x = g.constant(Tensor::from_fn(&[width, side, side], |i| (i as f32).sin()));
        let mut y = x;
        for block in &gen.layout.res {
            y = block.apply(&mut g, &p, y).unwrap();
            assert_eq!(g.shape(y), g.shape(x));
        }
    }

    #[test]
    fn weight_gradient_matches_finite_differences() {
        let cfg = GeneratorConfig {
            base_channels: 2,
            max_channels: 4,
            n_down: 3,
            n_up: 3,
            n_resblocks: 1,
            image_size: 16,
            init_std: 0.3,
            ..Default::default()
        };
        let gen = Generator::<f64>::new(cfg.clone(), 7).unwrap();
        let x = input::<f64>(&cfg, 8).into_tensor();
        // probe a handful of parameter tensors across the network
        for name in ["stem.weight", "down2.weight", "res0.conv1.weight", "up2.weight", "aux1.bias", "out.weight", "up3.norm.scale"] {
            let idx = gen.params().names().iter().position(|n| n == name).unwrap();
            let point = gen.params().tensors()[idx].clone();
            let err = grad_check(
                |g, wv| {
                    let mut p = gen.params().bind(g, false).vars().to_vec();
                    p[idx] = wv;
                    let bound = Bound::from_vars(p);
                    let xv = g.constant(x.clone());
                    let t = gen.forward(g, &bound, xv)?;
                    Ok(g.mean(t.image))
                },
                &point,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-3, "{name}: {err}");
        }
    }

    #[test]
    fn cycle_with_identity_stub_reconstructs_exactly() {
        let mut g = Graph::<f32>::new();
        let img = Tensor::from_fn(&[3, 16, 16], |i| ((i % 11) as f32) / 11.0);
        let a = g.constant(img.clone());
        let ca = Condition::new(landmarks(1), ModalityCode::new(0, 2).unwrap());
        let cb = Condition::new(landmarks(2), ModalityCode::new(1, 2).unwrap());
        let out = cycle_apply(&IdentityTranslator, &mut g, a, &cb, &ca).unwrap();
        assert_eq!(g.value(out.reconstructed.image), &img);
    }

    #[test]
    fn cycle_shares_one_parameter_set() {
        let cfg = small();
        let gen = Generator::<f32>::new(cfg.clone(), 1).unwrap();
        let mut g = Graph::new();
        let bound = gen.bind(&mut g, true);
        let leaves_before = g.leaf_count();
        let img = g.constant(input::<f32>(&cfg, 3).image());
        let ca = Condition::new(landmarks(1), ModalityCode::new(0, 2).unwrap());
        let cb = Condition::new(landmarks(2), ModalityCode::new(1, 2).unwrap());
        let out = cycle_apply(&bound, &mut g, img, &cb, &ca).unwrap();
        assert_eq!(g.shape(out.reconstructed.image), &[3, 32, 32]);
        // only the image and two condition-plane constants were added as leaves
        let leaves_after = g.leaf_count();
        assert_eq!(leaves_after - leaves_before, 3);
        let loss = g.mean(out.reconstructed.image);
        g.backward(loss).unwrap();
        // the first-pass stem weight receives gradient through both applications
        assert!(g.grad(bound.vars().vars()[0]).is_some());
    }
}
