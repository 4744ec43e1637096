//! Reconstruction metrics, inference timing and the modality-transfer report.
//!
//! Metrics remap images from the model range [−1,1] to [0,1] first.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::conditioning::{Condition, LandmarkSet, ModalityCode};
use crate::data::{face_landmarks, render, Emotion, EvalPair, FaceSpec};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::tensor::{Scalar, Tensor};

fn unit(x: f64) -> f64 {
    (x + 1.0) / 2.0
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean squared difference on [0,1].
pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape("mse", a, b)?;
    if a.is_empty() {
        return Err(Error::shape("mse", "empty images".to_string()));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = unit(x.to_f64_lossy()) - unit(y.to_f64_lossy());
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

/// Mean absolute difference in the model range, the scale of the identity loss.
pub fn l1<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape("l1", a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.to_f64_lossy() - y.to_f64_lossy()).abs())
        .sum();
    Ok(sum / a.len().max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimParams {
    /// Normalised 1-D Gaussian taps.
    pub fn kernel(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let taps: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - r;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let s: f64 = taps.iter().sum();
        taps.into_iter().map(|t| t / s).collect()
    }

    pub fn constants(&self) -> (f64, f64) {
        let l = self.dynamic_range;
        ((self.k1 * l).powi(2), (self.k2 * l).powi(2))
    }
}

/// Rec. 601 luma of a 3×H×W image on [0,1], row-major H×W.
pub fn luma<T: Scalar>(image: &Tensor<T>) -> Result<(Vec<f64>, usize, usize)> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(Error::shape("luma", format!("{c} channels")));
    }
    let d = image.data();
    let n = h * w;
    let y = (0..n)
        .map(|i| {
            0.299 * unit(d[i].to_f64_lossy())
                + 0.587 * unit(d[n + i].to_f64_lossy())
                + 0.114 * unit(d[2 * n + i].to_f64_lossy())
        })
        .collect();
    Ok((y, h, w))
}

/// Valid-mode separable filtering of an H×W plane with `k` along both axes.
fn filter(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..n).map(|t| k[t] * x[r * w + c + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..n).map(|t| k[t] * rows[(r + t) * ow + c]).sum();
        }
    }
    out
}

/// Mean local structural similarity of the luma planes over all valid windows.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, p: &SsimParams) -> Result<f64> {
    same_shape("ssim", a, b)?;
    if p.window == 0 || p.window % 2 == 0 || !(p.sigma > 0.0) {
        return Err(Error::Contract(format!(
            "ssim window must be odd and sigma positive, got {} / {}",
            p.window, p.sigma
        )));
    }
    let (x, h, w) = luma(a)?;
    let (y, _, _) = luma(b)?;
    if h < p.window || w < p.window {
        return Err(Error::shape(
            "ssim",
            format!("{h}×{w} image is smaller than the {} window", p.window),
        ));
    }
    let k = p.kernel();
    let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(a, b)| a * b).collect::<Vec<_>>();
    let mx = filter(&x, h, w, &k);
    let my = filter(&y, h, w, &k);
    let sxx = filter(&prod(&x, &x), h, w, &k);
    let syy = filter(&prod(&y, &y), h, w, &k);
    let sxy = filter(&prod(&x, &y), h, w, &k);
    let (c1, c2) = p.constants();
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

/// Produces Î_B from a source image, its landmarks and a target modality.
pub trait ImageTranslator {
    fn translate_image(
        &self,
        source: &Tensor<f32>,
        landmarks: &LandmarkSet,
        target: ModalityCode,
    ) -> Result<Tensor<f32>>;
}

impl ImageTranslator for Generator<f32> {
    fn translate_image(
        &self,
        source: &Tensor<f32>,
        landmarks: &LandmarkSet,
        target: ModalityCode,
    ) -> Result<Tensor<f32>> {
        Ok(self.apply(source, &Condition::new(landmarks.clone(), target))?.image)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub identity_id: u64,
    pub mse: f64,
    pub ssim: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusDescriptor {
    pub seed: u64,
    pub identities: usize,
    pub pairs: usize,
    pub image_size: usize,
    pub source_modality: usize,
    pub target_modality: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint_id: String,
    pub corpus: CorpusDescriptor,
    pub ssim_params: SsimParams,
    pub mean_mse: f64,
    pub mean_ssim: f64,
    pub mean_inference_seconds: f64,
    pub samples: Vec<SampleScore>,
    /// Warm timing of a single forward pass, when measured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub benchmark: Option<BenchmarkReport>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let c = &self.corpus;
        let _ = writeln!(s, "checkpoint {}", self.checkpoint_id);
        let _ = writeln!(
            s,
            "corpus seed {} | {} identities | {} pairs | {}×{} | modality {} → {}",
            c.seed, c.identities, c.pairs, c.image_size, c.image_size, c.source_modality, c.target_modality
        );
        let p = &self.ssim_params;
        let _ = writeln!(
            s,
            "ssim window {} sigma {} k1 {} k2 {} L {}",
            p.window, p.sigma, p.k1, p.k2, p.dynamic_range
        );
        let _ = writeln!(s, "{:>6} {:>12} {:>10} {:>10} {:>10}", "#", "identity", "mse", "ssim", "seconds");
        for (i, r) in self.samples.iter().enumerate() {
            let _ = writeln!(
                s,
                "{i:>6} {:>12} {:>10.5} {:>10.5} {:>10.5}",
                r.identity_id, r.mse, r.ssim, r.seconds
            );
        }
        let _ = writeln!(
            s,
            "{:>6} {:>12} {:>10.5} {:>10.5} {:>10.5}",
            "mean", "", self.mean_mse, self.mean_ssim, self.mean_inference_seconds
        );
        if let Some(b) = &self.benchmark {
            let _ = writeln!(
                s,
                "inference {:.6} s/image at {}×{} over {} runs ({} warm-up) on {}",
                b.mean_seconds, b.image_size, b.image_size, b.repetitions, b.warmup, b.hardware
            );
        }
        s
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Score `Î_B = translate(I_A, L_A, c̄_B)` against each pair's ground truth.
pub fn evaluate_modality_transfer<M: ImageTranslator + ?Sized>(
    model: &M,
    pairs: &[EvalPair<f32>],
    corpus_seed: u64,
    checkpoint_id: &str,
) -> Result<EvalReport> {
    let Some(first) = pairs.first() else {
        return Err(Error::Contract("no held-out pairs with ground truth to evaluate".into()));
    };
    let params = SsimParams::default();
    let mut samples = Vec::with_capacity(pairs.len());
    for pair in pairs {
        if pair.target.shape() != pair.source.shape() {
            return Err(Error::Contract(format!(
                "ground truth {:?} does not match source {:?}",
                pair.target.shape(),
                pair.source.shape()
            )));
        }
        let start = Instant::now();
        let out = model.translate_image(&pair.source, &pair.landmarks, pair.target_code)?;
        let seconds = start.elapsed().as_secs_f64();
        samples.push(SampleScore {
            identity_id: pair.identity_id,
            mse: mse(&out, &pair.target)?,
            ssim: ssim(&out, &pair.target, &params)?,
            seconds,
        });
    }
    let mut ids: Vec<u64> = pairs.iter().map(|p| p.identity_id).collect();
    ids.sort_unstable();
    ids.dedup();
    Ok(EvalReport {
        checkpoint_id: checkpoint_id.to_string(),
        corpus: CorpusDescriptor {
            seed: corpus_seed,
            identities: ids.len(),
            pairs: pairs.len(),
            image_size: first.source.shape()[1],
            source_modality: first.source_code.index(),
            target_modality: first.target_code.index(),
        },
        ssim_params: params,
        mean_mse: mean(samples.iter().map(|s| s.mse)),
        mean_ssim: mean(samples.iter().map(|s| s.ssim)),
        mean_inference_seconds: mean(samples.iter().map(|s| s.seconds)),
        samples,
        benchmark: None,
    })
}

/// Mean model-range L1 between `Î_B` and `I_B` over the pairs.
pub fn heldout_identity_l1<M: ImageTranslator + ?Sized>(model: &M, pairs: &[EvalPair<f32>]) -> Result<f64> {
    let mut total = 0.0;
    for p in pairs {
        let out = model.translate_image(&p.source, &p.landmarks, p.target_code)?;
        total += l1(&out, &p.target)?;
    }
    Ok(total / pairs.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub mean_seconds: f64,
    pub repetitions: usize,
    pub warmup: usize,
    pub image_size: usize,
    pub hardware: String,
}

/// CPU model, core count and target triple, as far as the platform reveals them.
pub fn hardware_string() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!(
        "{cpu}, {cores} logical cores, {}-{}",
        std::env::consts::ARCH,
        std::env::consts::OS
    )
}

/// Mean wall-clock seconds per forward pass, timed around the call only.
pub fn benchmark_inference<M: ImageTranslator + ?Sized>(
    model: &M,
    pair: &EvalPair<f32>,
    warmup: usize,
    repetitions: usize,
) -> Result<BenchmarkReport> {
    for _ in 0..warmup {
        model.translate_image(&pair.source, &pair.landmarks, pair.target_code)?;
    }
    let reps = repetitions.max(1);
    let mut total = 0.0;
    for _ in 0..reps {
        let start = Instant::now();
        let out = model.translate_image(&pair.source, &pair.landmarks, pair.target_code)?;
        total += start.elapsed().as_secs_f64();
        std::hint::black_box(out);
    }
    Ok(BenchmarkReport {
        // a timer tick can be coarser than a tiny forward pass
        mean_seconds: (total / reps as f64).max(1e-9),
        repetitions: reps,
        warmup,
        image_size: pair.source.shape()[1],
        hardware: hardware_string(),
    })
}

/// Mean luma of generated images as the mouth curvature sweeps −1 → +1.
///
/// The source image keeps its own expression; only the landmarks change.
/// The region is the union box of the mouth landmarks over the sweep, padded.
pub fn mouth_sweep<M: ImageTranslator + ?Sized>(
    model: &M,
    source: &Tensor<f32>,
    spec: &FaceSpec,
    target: ModalityCode,
    points: usize,
) -> Result<Vec<f64>> {
    let (_, h, w) = source.chw()?;
    let base = spec.emotion;
    let sets: Vec<LandmarkSet> = (0..points)
        .map(|i| {
            let c = -1.0 + 2.0 * i as f64 / (points.max(2) - 1) as f64;
            face_landmarks(&spec.with_emotion(Emotion::new(c, base.eye_openness, base.brow_raise)))
        })
        .collect();
    let (mut x0, mut x1, mut y0, mut y1) = (1.0f64, 0.0f64, 1.0f64, 0.0f64);
    for s in &sets {
        for p in &s.points()[48..68] {
            x0 = x0.min(p[0]);
            x1 = x1.max(p[0]);
            y0 = y0.min(p[1]);
            y1 = y1.max(p[1]);
        }
    }
    let pad = 0.03;
    let px = |v: f64, n: usize| ((v * n as f64).floor().max(0.0) as usize).min(n - 1);
    let (r0, r1) = (px(y0 - pad, h), px(y1 + pad, h));
    let (c0, c1) = (px(x0 - pad, w), px(x1 + pad, w));
    sets.iter()
        .map(|l| {
            let out = model.translate_image(source, l, target)?;
            let (y, _, _) = luma(&out)?;
            let mut s = 0.0;
            for r in r0..=r1 {
                for c in c0..=c1 {
                    s += y[r * w + c];
                }
            }
            Ok(s / ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64)
        })
        .collect()
}

/// Steps of `values` that move in the direction of the overall change.
pub fn monotone_steps(values: &[f64]) -> usize {
    let (Some(first), Some(last)) = (values.first(), values.last()) else {
        return 0;
    };
    let dir = (last - first).signum();
    values
        .windows(2)
        .filter(|w| dir != 0.0 && (w[1] - w[0]) * dir > 0.0)
        .count()
}

/// Source image of `spec` in modality 0 at `size`, for sweeps.
pub fn sweep_source(spec: &FaceSpec, n_modalities: usize, size: usize) -> Result<Tensor<f32>> {
    Ok(render::<f32>(spec, ModalityCode::new(0, n_modalities)?, size)?.image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Corpus, CorpusConfig};
    use crate::generator::GeneratorConfig;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[3, h, w], |_| rng.random_range(-1.0..1.0))
    }

    /// Per-window SSIM written straight from the definition, 2-D weights.
    fn ssim_direct(a: &Tensor<f64>, b: &Tensor<f64>, p: &SsimParams) -> f64 {
        let (x, h, w) = luma(a).unwrap();
        let (y, _, _) = luma(b).unwrap();
        let n = p.window;
        let r = (n / 2) as f64;
        let mut wts = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let (di, dj) = (i as f64 - r, j as f64 - r);
                wts[i * n + j] = (-(di * di + dj * dj) / (2.0 * p.sigma * p.sigma)).exp();
            }
        }
        let z: f64 = wts.iter().sum();
        let (c1, c2) = ((p.k1 * p.dynamic_range).powi(2), (p.k2 * p.dynamic_range).powi(2));
        let mut total = 0.0;
        let mut count = 0;
        for r0 in 0..=h - n {
            for c0 in 0..=w - n {
                let at = |v: &[f64], i: usize, j: usize| v[(r0 + i) * w + c0 + j];
                let (mut ux, mut uy) = (0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        ux += wts[i * n + j] / z * at(&x, i, j);
                        uy += wts[i * n + j] / z * at(&y, i, j);
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        let q = wts[i * n + j] / z;
                        vx += q * (at(&x, i, j) - ux).powi(2);
                        vy += q * (at(&y, i, j) - uy).powi(2);
                        cov += q * (at(&x, i, j) - ux) * (at(&y, i, j) - uy);
                    }
                }
                total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2))
                    / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    fn small() -> SsimParams {
        SsimParams {
            window: 5,
            ..Default::default()
        }
    }

    #[test]
    fn metric_oracles_on_8x8() {
        for seed in 0..20 {
            let a = random_image(seed, 8, 8);
            let b = random_image(seed + 1000, 8, 8);
            let direct_mse = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| ((x + 1.0) / 2.0 - (y + 1.0) / 2.0).powi(2))
                .sum::<f64>()
                / a.len() as f64;
            assert!((mse(&a, &b).unwrap() - direct_mse).abs() < 1e-10);
            for window in [3, 5, 7] {
                let p = SsimParams { window, ..Default::default() };
                let fast = ssim(&a, &b, &p).unwrap();
                assert!((fast - ssim_direct(&a, &b, &p)).abs() < 1e-10, "seed {seed} window {window}");
            }
        }
    }

    #[test]
    fn identical_and_constant_images() {
        let a = random_image(3, 16, 16);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert!((ssim(&a, &a, &SsimParams::default()).unwrap() - 1.0).abs() < 1e-12);
        let zero = Tensor::<f64>::full(&[3, 16, 16], -1.0);
        let one = Tensor::<f64>::full(&[3, 16, 16], 1.0);
        assert!((mse(&zero, &one).unwrap() - 1.0).abs() < 1e-15);
        let c1 = 0.01f64.powi(2);
        let expected = c1 / (1.0 + c1);
        let got = ssim(&zero, &one, &SsimParams::default()).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn rejects_bad_inputs() {
        let a = random_image(0, 8, 8);
        assert!(ssim(&a, &a, &SsimParams::default()).is_err());
        assert!(ssim(&a, &a, &SsimParams { window: 4, ..Default::default() }).is_err());
        assert!(mse(&a, &random_image(0, 8, 9)).is_err());
    }

    proptest! {
        #[test]
        fn metrics_symmetric_and_bounded(s1 in 0u64..1000, s2 in 0u64..1000) {
            let a = random_image(s1, 8, 8);
            let b = random_image(s2, 8, 8);
            prop_assert_eq!(mse(&a, &b).unwrap(), mse(&b, &a).unwrap());
            let v = ssim(&a, &b, &small()).unwrap();
            prop_assert!((v - ssim(&b, &a, &small()).unwrap()).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&v));
        }
    }

    struct Echo;
    impl ImageTranslator for Echo {
        fn translate_image(&self, s: &Tensor<f32>, _: &LandmarkSet, _: ModalityCode) -> Result<Tensor<f32>> {
            Ok(s.clone())
        }
    }

    struct Oracle(Vec<(Tensor<f32>, Tensor<f32>)>);
    impl ImageTranslator for Oracle {
        fn translate_image(&self, s: &Tensor<f32>, _: &LandmarkSet, _: ModalityCode) -> Result<Tensor<f32>> {
            Ok(self.0.iter().find(|(a, _)| a == s).expect("known source").1.clone())
        }
    }

    fn pairs() -> Vec<EvalPair<f32>> {
        let corpus = Corpus::new(CorpusConfig {
            heldout_identities: 2,
            emotions: 3,
            image_size: 32,
            ..Default::default()
        })
        .unwrap();
        corpus.heldout_pairs().unwrap()
    }

    #[test]
    fn stub_translators() {
        let pairs = pairs();
        let perfect = Oracle(pairs.iter().map(|p| (p.source.clone(), p.target.clone())).collect());
        let r = evaluate_modality_transfer(&perfect, &pairs, 0, "oracle").unwrap();
        assert_eq!(r.mean_mse, 0.0);
        assert!((r.mean_ssim - 1.0).abs() < 1e-12);

        let r = evaluate_modality_transfer(&Echo, &pairs, 0, "echo").unwrap();
        for (s, p) in r.samples.iter().zip(&pairs) {
            assert_eq!(s.mse, mse(&p.source, &p.target).unwrap());
        }
        let n = r.samples.len() as f64;
        let avg = |f: fn(&SampleScore) -> f64| r.samples.iter().map(f).sum::<f64>() / n;
        assert!((r.mean_mse - avg(|s| s.mse)).abs() < 1e-15);
        assert!((r.mean_ssim - avg(|s| s.ssim)).abs() < 1e-15);
        assert!((r.mean_inference_seconds - avg(|s| s.seconds)).abs() < 1e-15);
        assert_eq!(r.corpus.pairs, 6);
        assert_eq!(r.corpus.identities, 2);

        let back: EvalReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        assert!(r.to_table().contains("mean"));
        assert!(evaluate_modality_transfer(&Echo, &[], 0, "x").is_err());
    }

    #[test]
    fn evaluation_leaves_parameters_alone() {
        let cfg = GeneratorConfig {
            base_channels: 4,
            max_channels: 8,
            n_resblocks: 1,
            image_size: 32,
            ..Default::default()
        };
        let g = Generator::<f32>::new(cfg, 1).unwrap();
        let before = g.params().digest();
        let pairs = pairs();
        evaluate_modality_transfer(&g, &pairs[..2], 0, "g").unwrap();
        heldout_identity_l1(&g, &pairs[..2]).unwrap();
        let b = benchmark_inference(&g, &pairs[0], 1, 2).unwrap();
        assert!(b.mean_seconds > 0.0);
        assert!(!b.hardware.is_empty());
        assert_eq!(g.params().digest(), before);
    }

    #[test]
    fn monotone_step_count() {
        assert_eq!(monotone_steps(&[1.0, 2.0, 3.0, 2.5, 4.0, 5.0]), 4);
        assert_eq!(monotone_steps(&[5.0, 4.0, 3.0, 2.0, 1.0, 0.0]), 5);
        assert_eq!(monotone_steps(&[1.0, 1.0]), 0);
    }

    #[test]
    fn ground_truth_renders_pass_the_sweep() {
        // renders the expression whose landmarks are closest to the request
        struct Render(FaceSpec);
        impl ImageTranslator for Render {
            fn translate_image(&self, s: &Tensor<f32>, l: &LandmarkSet, m: ModalityCode) -> Result<Tensor<f32>> {
                let size = s.shape()[1];
                let best = (0..=40)
                    .map(|i| -1.0 + i as f64 / 20.0)
                    .min_by(|a, b| {
                        let d = |c: f64| {
                            let e = Emotion::new(c, self.0.emotion.eye_openness, self.0.emotion.brow_raise);
                            let p = face_landmarks(&self.0.with_emotion(e));
                            p.points().iter().zip(l.points()).map(|(u, v)| (u[0] - v[0]).abs() + (u[1] - v[1]).abs()).sum::<f64>()
                        };
                        d(*a).total_cmp(&d(*b))
                    })
                    .unwrap();
                let e = Emotion::new(best, self.0.emotion.eye_openness, self.0.emotion.brow_raise);
                Ok(render::<f32>(&self.0.with_emotion(e), m, size)?.image)
            }
        }
        let spec = crate::data::sample_identity(4);
        let src = sweep_source(&spec, 2, 32).unwrap();
        let vals = mouth_sweep(&Render(spec.clone()), &src, &spec, ModalityCode::new(1, 2).unwrap(), 6).unwrap();
        assert_eq!(monotone_steps(&vals), 5, "{vals:?}");
    }
}
