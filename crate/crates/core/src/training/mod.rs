//! Alternating discriminator/generator optimisation over the toy corpus.
//!
//! Each step first updates every active discriminator level on detached
//! generations, then recomputes the generations and updates the generator
//! on the weighted objective. A step that hits a non-finite value leaves the
//! trainer untouched.

mod adam;
mod checkpoint;
mod config;
mod metrics;
mod pool;

pub use adam::{adam_update, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use config::{FlatConfig, Mode, PoolTarget, TrainConfig};
pub use metrics::{MetricsLog, StepMetrics};
pub use pool::{ImagePool, PoolDecision};

use std::path::Path;
use std::time::Instant;

use crate::conditioning::Condition;
use crate::data::{Corpus, TrainTuple};
use crate::discriminator::MultiDiscriminator;
use crate::error::{Error, Result};
use crate::generator::{Generator, Translation, Translator};
use crate::losses::{
    adv_loss_d, adv_loss_g, cycle_loss, feature_matching, identity_l1, texture_loss,
    total_objective, ObjectiveTerms, TextureNet,
};
use crate::nn::{Bound, ParamSet};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Direction {
    AtoB,
    BtoA,
}

struct Leg<'a> {
    source: &'a Tensor<f32>,
    source_cond: Condition,
    target: &'a Tensor<f32>,
    target_cond: Condition,
}

impl Direction {
    fn leg(self, t: &TrainTuple<f32>) -> Leg<'_> {
        let a = Condition::new(t.landmarks_a.clone(), t.code_a);
        let b = Condition::new(t.landmarks_b.clone(), t.code_b);
        match self {
            Direction::AtoB => Leg {
                source: &t.image_a,
                source_cond: a,
                target: &t.image_b,
                target_cond: b,
            },
            Direction::BtoA => Leg {
                source: &t.image_b,
                source_cond: b,
                target: &t.image_a,
                target_cond: a,
            },
        }
    }
}

fn downsample_times(g: &mut Graph<f32>, mut v: Var, times: usize) -> Result<Var> {
    for _ in 0..times {
        v = g.average_downsample(v)?;
    }
    Ok(v)
}

/// Generated samples judged at discriminator `level`: the auxiliary output
/// at that scale (if any) and the downsampled final image, as separate samples.
fn level_fakes(g: &mut Graph<f32>, t: &Translation, level: usize, final_image: Var) -> Result<Vec<Var>> {
    let mut out = Vec::with_capacity(2);
    let n = t.intermediates.len();
    if level > 0 && level <= n {
        out.push(t.intermediates[n - level]);
    }
    out.push(downsample_times(g, final_image, level)?);
    Ok(out)
}

fn assert_no_grads(g: &Graph<f32>, bound: &Bound, what: &str) -> Result<()> {
    let touched = bound
        .vars()
        .iter()
        .filter_map(|&v| g.grad(v))
        .any(|t| t.data().iter().any(|&x| x != 0.0));
    if touched {
        return Err(Error::Contract(format!(
            "{what} parameters received gradients in the other network's update"
        )));
    }
    Ok(())
}

/// Full training state: both networks, optimiser moments, pools, step counter.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    generator: Generator<f32>,
    discriminator: MultiDiscriminator<f32>,
    adam_g: AdamState<f32>,
    adam_d: Vec<AdamState<f32>>,
    pools: Vec<ImagePool>,
    texture: TextureNet<f32>,
    corpus: Corpus,
    step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let generator = Generator::new(config.generator.clone(), config.seed)?;
        let discriminator = MultiDiscriminator::new(
            &config.discriminator,
            config.generator.image_size,
            config.seed ^ 0xd15c,
        )?;
        let adam_g = AdamState::new(generator.params().tensors());
        let adam_d = discriminator
            .levels()
            .iter()
            .map(|d| AdamState::new(d.params().tensors()))
            .collect();
        let pools = (0..config.generator.n_modalities)
            .map(|m| ImagePool::new(config.pool_capacity, config.seed.wrapping_add(100 + m as u64)))
            .collect();
        let corpus = Corpus::new(config.corpus.clone())?;
        Ok(Self {
            config,
            generator,
            discriminator,
            adam_g,
            adam_d,
            pools,
            texture: TextureNet::new(),
            corpus,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn generator(&self) -> &Generator<f32> {
        &self.generator
    }

    pub fn discriminator(&self) -> &MultiDiscriminator<f32> {
        &self.discriminator
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn pools(&self) -> &[ImagePool] {
        &self.pools
    }

    /// Completed steps.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn directions(&self) -> &'static [Direction] {
        match self.config.mode {
            Mode::Full => &[Direction::AtoB, Direction::BtoA],
            Mode::Base | Mode::Multilevel => &[Direction::AtoB],
        }
    }

    fn levels(&self) -> std::ops::Range<usize> {
        match self.config.mode {
            Mode::Base => 0..1,
            Mode::Multilevel | Mode::Full => 0..self.discriminator.n_levels(),
        }
    }

    /// The tuples the next step will train on.
    pub fn next_batch(&self) -> Result<Vec<TrainTuple<f32>>> {
        let b = self.config.batch_size as u64;
        (0..b).map(|i| self.corpus.tuple(self.step * b + i)).collect()
    }

    /// Draw the next batch from the corpus and train on it.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let batch = self.next_batch()?;
        self.train_step(&batch)
    }

    pub fn train_step(&mut self, batch: &[TrainTuple<f32>]) -> Result<StepMetrics> {
        if batch.is_empty() {
            return Err(Error::Contract("empty training batch".into()));
        }
        let size = self.config.generator.image_size;
        for t in batch {
            for img in [&t.image_a, &t.image_b] {
                if img.shape() != [3, size, size] {
                    return Err(Error::Contract(format!(
                        "tuple image {:?} does not match model size {size}",
                        img.shape()
                    )));
                }
            }
        }
        let start = Instant::now();
        let mut disc = self.discriminator.clone();
        let mut adam_d = self.adam_d.clone();
        let mut pools = self.pools.clone();

        let d_total = self.discriminator_half_step(batch, &mut disc, &mut adam_d, &mut pools)?;
        let (mut metrics, grads) = self.generator_half_step(batch, &disc, &mut pools)?;
        let mut params = self.generator.params().clone();
        let mut adam_g = self.adam_g.clone();
        adam_update(params.tensors_mut(), &grads, &mut adam_g, &self.config.adam_g)?;
        if params.tensors().iter().any(|t| !t.all_finite()) {
            return Err(Error::NonFinite("generator parameters after update".into()));
        }

        *self.generator.params_mut() = params;
        self.adam_g = adam_g;
        self.discriminator = disc;
        self.adam_d = adam_d;
        self.pools = pools;
        self.step += 1;
        metrics.step = self.step;
        metrics.d_total = d_total;
        metrics.wall_time = start.elapsed().as_secs_f64();
        Ok(metrics)
    }

    fn discriminator_half_step(
        &self,
        batch: &[TrainTuple<f32>],
        disc: &mut MultiDiscriminator<f32>,
        adam_d: &mut [AdamState<f32>],
        pools: &mut [ImagePool],
    ) -> Result<f64> {
        let mut g = Graph::new();
        // bound as trainable so the assertion below checks that fakes were detached
        let gen = self.generator.bind(&mut g, true);
        let d_bound = disc.bind(&mut g, true);
        let mut terms = Vec::new();
        for tuple in batch {
            for &dir in self.directions() {
                let leg = dir.leg(tuple);
                let src = g.constant(leg.source.clone());
                let tr = gen.translate(&mut g, src, &leg.target_cond)?;
                let final_image = match self.config.pool_target {
                    PoolTarget::Fake => {
                        let fake = g.value(tr.image).clone();
                        let pooled = pools[leg.target_cond.modality.index()].query(fake);
                        g.constant(pooled)
                    }
                    PoolTarget::Real => g.detach(tr.image),
                };
                let target = g.constant(leg.target.clone());
                for level in self.levels() {
                    let fakes: Vec<Var> = level_fakes(&mut g, &tr, level, final_image)?
                        .into_iter()
                        .map(|v| g.detach(v))
                        .collect();
                    let real = downsample_times(&mut g, target, level)?;
                    let d = &disc.levels()[level];
                    let real_logits = d.forward(&mut g, &d_bound[level], real)?.logits;
                    let fake_logits = fakes
                        .iter()
                        .map(|&f| Ok(d.forward(&mut g, &d_bound[level], f)?.logits))
                        .collect::<Result<Vec<_>>>()?;
                    terms.push(adv_loss_d(&mut g, &[real_logits], &fake_logits)?);
                }
            }
        }
        let sum = g.add_all(&terms)?;
        let total = g.scale(sum, 1.0 / batch.len() as f32);
        g.check_finite(total, "discriminator loss")?;
        g.backward(total)?;
        assert_no_grads(&g, gen.vars(), "generator")?;
        for level in self.levels() {
            let grads = disc.levels()[level].params().grads(&g, &d_bound[level]);
            let params = disc.levels_mut()[level].params_mut();
            adam_update(params.tensors_mut(), &grads, &mut adam_d[level], &self.config.adam_d)?;
        }
        Ok(g.scalar_value(total) as f64)
    }

    fn generator_half_step(
        &self,
        batch: &[TrainTuple<f32>],
        disc: &MultiDiscriminator<f32>,
        pools: &mut [ImagePool],
    ) -> Result<(StepMetrics, Vec<Tensor<f32>>)> {
        let full = self.config.mode == Mode::Full;
        let weights = if full {
            self.config.weights
        } else {
            self.config.weights.base()
        };
        let mut g = Graph::new();
        let gen = self.generator.bind(&mut g, true);
        let d_bound = disc.bind(&mut g, false);
        let mut totals = Vec::with_capacity(batch.len());
        let mut m = StepMetrics::default();
        for tuple in batch {
            let mut terms = ObjectiveTerms::default();
            let mut identity = Vec::new();
            let mut texture = Vec::new();
            let mut recon = Vec::new();
            for &dir in self.directions() {
                let leg = dir.leg(tuple);
                let src = g.constant(leg.source.clone());
                let target = g.constant(leg.target.clone());
                let tr = gen.translate(&mut g, src, &leg.target_cond)?;
                let fm_real = match (full, self.config.pool_target) {
                    (false, _) => None,
                    (true, PoolTarget::Real) => {
                        let pool = &mut pools[leg.target_cond.modality.index()];
                        Some(g.constant(pool.query(leg.target.clone())))
                    }
                    (true, PoolTarget::Fake) => Some(target),
                };
                for level in self.levels() {
                    let d = &disc.levels()[level];
                    let fakes = level_fakes(&mut g, &tr, level, tr.image)?;
                    let responses = fakes
                        .iter()
                        .map(|&f| d.forward(&mut g, &d_bound[level], f))
                        .collect::<Result<Vec<_>>>()?;
                    let logits: Vec<Var> = responses.iter().map(|r| r.logits).collect();
                    let gan = adv_loss_g(&mut g, &logits)?;
                    match dir {
                        Direction::AtoB => terms.gan_ab.push(gan),
                        Direction::BtoA => terms.gan_ba.push(gan),
                    }
                    if let Some(real) = fm_real {
                        let real = downsample_times(&mut g, real, level)?;
                        let real = d.forward(&mut g, &d_bound[level], real)?;
                        let fake_feats: Vec<Vec<Var>> =
                            responses.into_iter().map(|r| r.features).collect();
                        terms
                            .feature_matching
                            .push(feature_matching(&mut g, &[real.features], &fake_feats)?);
                    }
                }
                identity.push(identity_l1(&mut g, target, tr.image)?);
                if full {
                    texture.push(texture_loss(&mut g, tr.image, target, &self.texture)?);
                    let rec = gen.translate(&mut g, tr.image, &leg.source_cond)?;
                    recon.push((src, rec.image));
                }
            }
            terms.identity = Some(g.add_all(&identity)?);
            if full {
                terms.texture = Some(g.add_all(&texture)?);
                let [(a, rec_a), (b, rec_b)] = [recon[0], recon[1]];
                terms.cycle = Some(cycle_loss(&mut g, a, rec_a, b, rec_b)?);
            }
            let total = total_objective(&mut g, &terms, &weights)?;
            m.accumulate(&g, &terms, total);
            totals.push(total);
        }
        let sum = g.add_all(&totals)?;
        let n = batch.len() as f32;
        let total = g.scale(sum, 1.0 / n);
        g.check_finite(total, "generator objective")?;
        g.backward(total)?;
        for b in &d_bound {
            assert_no_grads(&g, b, "discriminator")?;
        }
        m.scale(1.0 / batch.len() as f64);
        let grads = self.generator.params().grads(&g, gen.vars());
        Ok((m, grads))
    }

    /// Train until `config.steps`, appending metrics and writing checkpoints
    /// under `out_dir`. Returns the path of the final checkpoint.
    pub fn run(&mut self, out_dir: &Path) -> Result<std::path::PathBuf> {
        std::fs::create_dir_all(out_dir)?;
        let mut log = MetricsLog::open(&out_dir.join("metrics.csv"))?;
        let every = self.config.log_every.max(1);
        while self.step < self.config.steps {
            let m = self.step()?;
            if m.step % every == 0 || m.step == self.config.steps {
                log.append(&m)?;
                log::info!(
                    "step {} d={:.4} g={:.4} identity={:.4} ({:.2}s)",
                    m.step,
                    m.d_total,
                    m.g_total,
                    m.identity,
                    m.wall_time
                );
            }
            let ck = self.config.checkpoint_every;
            if ck > 0 && m.step % ck == 0 && m.step < self.config.steps {
                save_checkpoint(self, &out_dir.join(format!("step_{:07}.pgan", m.step)))?;
            }
        }
        let path = out_dir.join("final.pgan");
        save_checkpoint(self, &path)?;
        Ok(path)
    }

    /// Adopt the step budget and logging cadence of `other` for a resumed run.
    /// Every other setting must match the one the state was trained with.
    pub fn extend_schedule(&mut self, other: &TrainConfig) -> Result<()> {
        let mut probe = other.clone();
        probe.steps = self.config.steps;
        probe.checkpoint_every = self.config.checkpoint_every;
        probe.log_every = self.config.log_every;
        if probe != self.config {
            return Err(Error::Config(
                "resume config differs from the checkpoint's beyond steps/checkpoint_every/log_every".into(),
            ));
        }
        self.config.steps = other.steps;
        self.config.checkpoint_every = other.checkpoint_every;
        self.config.log_every = other.log_every;
        Ok(())
    }

    pub(crate) fn parts_mut(&mut self) -> TrainerParts<'_> {
        TrainerParts {
            generator: self.generator.params_mut(),
            discriminator: self
                .discriminator
                .levels_mut()
                .iter_mut()
                .map(|d| d.params_mut())
                .collect(),
            adam_g: &mut self.adam_g,
            adam_d: &mut self.adam_d,
            pools: &mut self.pools,
            step: &mut self.step,
        }
    }
}

/// Mutable views used when restoring a checkpoint.
pub(crate) struct TrainerParts<'a> {
    pub generator: &'a mut ParamSet<f32>,
    pub discriminator: Vec<&'a mut ParamSet<f32>>,
    pub adam_g: &'a mut AdamState<f32>,
    pub adam_d: &'a mut Vec<AdamState<f32>>,
    pub pools: &'a mut Vec<ImagePool>,
    pub step: &'a mut u64,
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::discriminator::PatchLayer;

    pub(crate) fn tiny(mode: Mode) -> TrainConfig {
        let mut cfg = TrainConfig::smoke();
        cfg.mode = mode;
        cfg.generator.base_channels = 4;
        cfg.generator.max_channels = 8;
        cfg.generator.n_resblocks = 2;
        cfg.discriminator.layers = vec![
            PatchLayer::new(4, 2, 1, 4),
            PatchLayer::new(4, 2, 1, 8),
            PatchLayer::new(4, 2, 1, 8),
            PatchLayer::new(4, 1, 2, 8),
            PatchLayer::new(4, 1, 2, 1),
        ];
        cfg.pool_capacity = 2;
        cfg
    }

    #[test]
    fn first_step_metrics_are_finite_and_non_negative() {
        for mode in [Mode::Base, Mode::Multilevel, Mode::Full] {
            let mut t = Trainer::new(tiny(mode)).unwrap();
            let m = t.step().unwrap();
            assert_eq!(m.step, 1);
            for (name, v) in m.named_losses() {
                assert!(v.is_finite() && v >= 0.0, "{mode:?} {name} = {v}");
            }
            match mode {
                Mode::Full => assert!(m.cycle > 0.0 && m.texture > 0.0 && m.gan_ba > 0.0),
                _ => assert_eq!((m.cycle, m.texture, m.feature_matching, m.gan_ba), (0.0, 0.0, 0.0, 0.0)),
            }
        }
    }

    #[test]
    fn base_mode_objective_is_adversarial_plus_lambda_identity() {
        let cfg = tiny(Mode::Base);
        let lambda = cfg.weights.lambda_base;
        let mut t = Trainer::new(cfg).unwrap();
        let m = t.step().unwrap();
        let expected = m.gan_ab + lambda * m.identity;
        assert!((m.g_total - expected).abs() < 1e-5 * expected.max(1.0), "{m:?}");
    }

    #[test]
    fn full_mode_total_uses_weights() {
        let cfg = tiny(Mode::Full);
        let w = cfg.weights;
        let mut t = Trainer::new(cfg).unwrap();
        let m = t.step().unwrap();
        let expected = m.gan_ab + m.gan_ba + w.alpha * m.cycle + w.beta * m.feature_matching
            + w.gamma * m.identity + w.eta * m.texture;
        assert!((m.g_total - expected).abs() < 1e-4 * expected, "{m:?}");
    }

    #[test]
    fn deterministic_under_seed() {
        let run = || {
            let mut t = Trainer::new(tiny(Mode::Full)).unwrap();
            (0..3).map(|_| t.step().unwrap().without_time()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn updates_touch_the_right_networks() {
        let mut t = Trainer::new(tiny(Mode::Base)).unwrap();
        let g0 = t.generator().params().digest();
        let d0: Vec<String> = t.discriminator().levels().iter().map(|d| d.params().digest()).collect();
        t.step().unwrap();
        assert_ne!(t.generator().params().digest(), g0);
        assert_ne!(t.discriminator().levels()[0].params().digest(), d0[0]);
        // base mode never trains the half-resolution level
        assert_eq!(t.discriminator().levels()[1].params().digest(), d0[1]);
    }

    #[test]
    fn fake_pool_mode_runs() {
        let mut cfg = tiny(Mode::Full);
        cfg.pool_target = PoolTarget::Fake;
        let mut t = Trainer::new(cfg).unwrap();
        for _ in 0..3 {
            t.step().unwrap();
        }
        assert_eq!(t.pools().iter().map(ImagePool::len).sum::<usize>(), 4);
    }

    #[test]
    fn batches_average() {
        let mut cfg = tiny(Mode::Full);
        cfg.batch_size = 2;
        let mut t = Trainer::new(cfg).unwrap();
        assert_eq!(t.next_batch().unwrap().len(), 2);
        let m = t.step().unwrap();
        assert!(m.g_total.is_finite());
        assert!(t.train_step(&[]).is_err());
    }

    #[test]
    fn rejects_mismatched_tuples() {
        let mut t = Trainer::new(tiny(Mode::Base)).unwrap();
        let mut batch = t.next_batch().unwrap();
        batch[0].image_a = Tensor::zeros(&[3, 16, 16]);
        let before = t.generator().params().digest();
        assert!(matches!(t.train_step(&batch), Err(Error::Contract(_))));
        assert_eq!(t.generator().params().digest(), before);
        assert_eq!(t.step_count(), 0);
    }

    #[test]
    fn non_finite_input_aborts_without_mutation() {
        let mut t = Trainer::new(tiny(Mode::Full)).unwrap();
        let mut batch = t.next_batch().unwrap();
        batch[0].image_b.data_mut()[5] = f32::NAN;
        let before = t.generator().params().digest();
        let err = t.train_step(&batch).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)), "{err}");
        assert_eq!(t.generator().params().digest(), before);
        assert_eq!(t.step_count(), 0);
    }
}
