//! Procedural toy portraits with exact 68-point landmark ground truth.
//!
//! A face is an ellipse with hair, brows, eyes, a nose and a two-lip mouth.
//! Geometry (and hence landmarks) comes from a [`FaceSpec`]; the modality only
//! changes surface texture, so the same spec renders with identical landmarks
//! in every modality.

use std::f64::consts::PI;
use std::path::Path;

use image::ImageEncoder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{LandmarkSet, ModalityCode, N_LANDMARKS};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Number of texture styles the renderer knows.
pub const MAX_MODALITIES: usize = 3;

const CENTER: [f64; 2] = [0.5, 0.52];
const BACKGROUND: [f64; 3] = [0.30, 0.35, 0.45];
const HAIR: [f64; 3] = [0.25, 0.15, 0.08];
const BROW: [f64; 3] = [0.20, 0.12, 0.08];
const LIP: [f64; 3] = [0.65, 0.22, 0.25];
const LIP_LINE: [f64; 3] = [0.45, 0.12, 0.15];
const MOUTH_INSIDE: [f64; 3] = [0.12, 0.04, 0.05];
const EYE_WHITE: [f64; 3] = [0.95, 0.95, 0.95];
const DARK: [f64; 3] = [0.08, 0.08, 0.10];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityParams {
    /// Face ellipse semi-axes, in [0.28, 0.36] and [0.34, 0.42].
    pub face_rx: f64,
    pub face_ry: f64,
    /// Distance between eye centres, in [0.14, 0.20].
    pub eye_spacing: f64,
    /// RGB in [0,1]; channel ranges [0.75,0.95], [0.55,0.75], [0.45,0.65].
    pub skin: [f64; 3],
    /// How far the hair band reaches down from the top of the face, in [0.06, 0.14].
    pub hair_height: f64,
}

impl IdentityParams {
    pub const RANGES: [(&'static str, f64, f64); 7] = [
        ("face_rx", 0.28, 0.36),
        ("face_ry", 0.34, 0.42),
        ("eye_spacing", 0.14, 0.20),
        ("skin_r", 0.75, 0.95),
        ("skin_g", 0.55, 0.75),
        ("skin_b", 0.45, 0.65),
        ("hair_height", 0.06, 0.14),
    ];

    pub fn values(&self) -> [f64; 7] {
        [
            self.face_rx,
            self.face_ry,
            self.eye_spacing,
            self.skin[0],
            self.skin[1],
            self.skin[2],
            self.hair_height,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Emotion {
    /// −1 frown … +1 smile; the mouth also opens wider as it rises.
    pub mouth_curvature: f64,
    /// 0 closed … 1 wide open.
    pub eye_openness: f64,
    /// −1 lowered … +1 raised.
    pub brow_raise: f64,
}

impl Emotion {
    pub fn new(mouth_curvature: f64, eye_openness: f64, brow_raise: f64) -> Self {
        Self {
            mouth_curvature: mouth_curvature.clamp(-1.0, 1.0),
            eye_openness: eye_openness.clamp(0.0, 1.0),
            brow_raise: brow_raise.clamp(-1.0, 1.0),
        }
    }
}

/// The eight expressions the default corpus draws from.
pub const EMOTIONS: [(&str, Emotion); 8] = [
    ("neutral", Emotion { mouth_curvature: 0.0, eye_openness: 0.6, brow_raise: 0.0 }),
    ("happy", Emotion { mouth_curvature: 1.0, eye_openness: 0.5, brow_raise: 0.2 }),
    ("sad", Emotion { mouth_curvature: -0.8, eye_openness: 0.4, brow_raise: -0.4 }),
    ("angry", Emotion { mouth_curvature: -0.5, eye_openness: 0.7, brow_raise: -1.0 }),
    ("surprised", Emotion { mouth_curvature: 0.3, eye_openness: 1.0, brow_raise: 1.0 }),
    ("fearful", Emotion { mouth_curvature: -0.3, eye_openness: 0.9, brow_raise: 0.7 }),
    ("disgusted", Emotion { mouth_curvature: -1.0, eye_openness: 0.2, brow_raise: -0.6 }),
    ("contemptuous", Emotion { mouth_curvature: 0.5, eye_openness: 0.3, brow_raise: -0.2 }),
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaceSpec {
    pub identity_id: u64,
    pub identity: IdentityParams,
    pub emotion: Emotion,
}

impl FaceSpec {
    pub fn with_emotion(&self, emotion: Emotion) -> Self {
        Self { emotion, ..*self }
    }
}

/// Deterministic identity for `seed`, with a neutral expression.
pub fn sample_identity(seed: u64) -> FaceSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |i: usize| {
        let (_, lo, hi) = IdentityParams::RANGES[i];
        rng.random_range(lo..=hi)
    };
    let identity = IdentityParams {
        face_rx: draw(0),
        face_ry: draw(1),
        eye_spacing: draw(2),
        skin: [draw(3), draw(4), draw(5)],
        hair_height: draw(6),
    };
    FaceSpec {
        identity_id: seed,
        identity,
        emotion: EMOTIONS[0].1,
    }
}

/// Analytic feature geometry in normalised coordinates.
struct Geometry {
    eye_y: f64,
    eye_x: [f64; 2],
    eye_half_width: f64,
    eye_half_height: f64,
    brows: [Vec<[f64; 2]>; 2],
    nose: Vec<[f64; 2]>,
    nose_base: Vec<[f64; 2]>,
    mouth: Mouth,
}

struct Mouth {
    cx: f64,
    cy: f64,
    half_width: f64,
    bend: f64,
    upper: f64,
    opening: f64,
}

const INNER_SPAN: f64 = 0.8;

impl Mouth {
    fn base(&self, t: f64) -> f64 {
        self.cy - self.bend * t * t
    }

    fn outer_upper(&self, t: f64) -> f64 {
        self.base(t) - self.upper * (1.0 - t * t)
    }

    fn outer_lower(&self, t: f64) -> f64 {
        self.base(t) + (self.upper + self.opening) * (1.0 - t * t)
    }

    fn inner_upper(&self, t: f64) -> f64 {
        self.base(t)
    }

    fn inner_lower(&self, t: f64) -> f64 {
        let s = t / INNER_SPAN;
        self.base(t) + self.opening * (1.0 - s * s)
    }

    fn point(&self, t: f64, y: impl Fn(&Self, f64) -> f64) -> [f64; 2] {
        [self.cx + self.half_width * t, y(self, t)]
    }
}

impl Geometry {
    fn new(spec: &FaceSpec) -> Self {
        let id = &spec.identity;
        let e = &spec.emotion;
        let [cx, cy] = CENTER;
        let eye_y = cy - 0.22 * id.face_ry;
        let eye_x = [cx - id.eye_spacing / 2.0, cx + id.eye_spacing / 2.0];
        let brow_y = eye_y - 0.065 - 0.025 * e.brow_raise;
        let brow = |ex: f64| {
            (0..5)
                .map(|i| {
                    let t = i as f64 / 2.0 - 1.0;
                    [ex + 0.055 * t, brow_y + 0.015 * t * t]
                })
                .collect::<Vec<_>>()
        };
        let nose_tip = cy + 0.25 * id.face_ry;
        let nose = (0..4)
            .map(|i| [cx, eye_y + (nose_tip - eye_y) * i as f64 / 3.0])
            .collect();
        let nose_base = (0..5)
            .map(|i| {
                let t = i as f64 / 2.0 - 1.0;
                [cx + 0.035 * t, nose_tip + 0.012 - 0.012 * t * t]
            })
            .collect();
        let mouth = Mouth {
            cx,
            cy: cy + 0.52 * id.face_ry,
            half_width: 0.32 * id.face_rx,
            bend: 0.06 * e.mouth_curvature,
            upper: 0.012,
            opening: 0.008 + 0.08 * (e.mouth_curvature + 1.0) / 2.0,
        };
        Self {
            eye_y,
            eye_x,
            eye_half_width: 0.045,
            eye_half_height: 0.005 + 0.022 * e.eye_openness,
            brows: [brow(eye_x[0]), brow(eye_x[1])],
            nose,
            nose_base,
            mouth,
        }
    }

    fn eye_loop(&self, side: usize) -> Vec<[f64; 2]> {
        [180.0f64, 120.0, 60.0, 0.0, 300.0, 240.0]
            .iter()
            .map(|deg| {
                let a = deg.to_radians();
                [
                    self.eye_x[side] + self.eye_half_width * a.cos(),
                    self.eye_y - self.eye_half_height * a.sin(),
                ]
            })
            .collect()
    }

    fn outer_lips(&self) -> Vec<[f64; 2]> {
        let m = &self.mouth;
        let upper = (0..=6).map(|i| m.point(i as f64 / 3.0 - 1.0, Mouth::outer_upper));
        let lower = (1..=5).rev().map(|i| m.point(i as f64 / 3.0 - 1.0, Mouth::outer_lower));
        upper.chain(lower).collect()
    }

    fn landmarks(&self, spec: &FaceSpec) -> Vec<[f64; 2]> {
        let id = &spec.identity;
        let [cx, cy] = CENTER;
        let mut pts = Vec::with_capacity(N_LANDMARKS);
        for i in 0..17 {
            let a = PI - PI * i as f64 / 16.0;
            pts.push([cx + id.face_rx * a.cos(), cy + id.face_ry * a.sin()]);
        }
        pts.extend(&self.brows[0]);
        pts.extend(&self.brows[1]);
        pts.extend(&self.nose);
        pts.extend(&self.nose_base);
        pts.extend(self.eye_loop(0));
        pts.extend(self.eye_loop(1));
        pts.extend(self.outer_lips());
        let m = &self.mouth;
        for t in [-INNER_SPAN, -0.4, 0.0, 0.4, INNER_SPAN] {
            pts.push(m.point(t, Mouth::inner_upper));
        }
        for t in [0.4, 0.0, -0.4] {
            pts.push(m.point(t, Mouth::inner_lower));
        }
        pts
    }
}

/// Exact landmark positions for a spec.
pub fn face_landmarks(spec: &FaceSpec) -> LandmarkSet {
    let g = Geometry::new(spec);
    LandmarkSet::new(g.landmarks(spec)).expect("toy geometry stays inside the unit square")
}

fn seg_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    ((p[0] - a[0] - t * dx).powi(2) + (p[1] - a[1] - t * dy).powi(2)).sqrt()
}

fn polyline_distance(p: [f64; 2], pts: &[[f64; 2]], closed: bool) -> f64 {
    let n = pts.len();
    let segs = if closed { n } else { n - 1 };
    (0..segs)
        .map(|i| seg_distance(p, pts[i], pts[(i + 1) % n]))
        .fold(f64::INFINITY, f64::min)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Texture applied on top of the flat rendering; identical for all identities.
fn apply_modality(rgb: [f64; 3], modality: usize, p: [f64; 2], pixel: usize) -> [f64; 3] {
    match modality {
        0 => rgb,
        1 => {
            let stripe = ((p[0] + p[1]) * 10.0).floor() as i64 % 2 == 0;
            let k = if stripe { 0.65 } else { 1.0 };
            rgb.map(|c| c * k)
        }
        _ => {
            let n = (splitmix(pixel as u64 ^ 0x6a09_e667) >> 11) as f64 / (1u64 << 53) as f64;
            let d = 0.24 * (n - 0.5);
            rgb.map(|c| (c + d).clamp(0.0, 1.0))
        }
    }
}

fn shade(spec: &FaceSpec, g: &Geometry, p: [f64; 2], px_size: f64) -> [f64; 3] {
    let id = &spec.identity;
    let [cx, cy] = CENTER;
    let (x, y) = (p[0], p[1]);
    let ell = |rx: f64, ry: f64| ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2);
    let mut c = BACKGROUND;
    if ell(id.face_rx, id.face_ry) <= 1.0 {
        c = id.skin;
    }
    if ell(id.face_rx + 0.03, id.face_ry + 0.03) <= 1.0 && y < cy - id.face_ry + id.hair_height {
        c = HAIR;
    }
    let stroke = 0.012f64.max(0.6 * px_size);
    for brow in &g.brows {
        if polyline_distance(p, brow, false) <= stroke {
            c = BROW;
        }
    }
    let nose_shade = id.skin.map(|v| v * 0.6);
    if polyline_distance(p, &g.nose, false) <= 0.75 * stroke
        || polyline_distance(p, &g.nose_base, false) <= 0.75 * stroke
    {
        c = nose_shade;
    }
    for side in 0..2 {
        let (dx, dy) = (x - g.eye_x[side], y - g.eye_y);
        let inside = (dx / g.eye_half_width).powi(2) + (dy / g.eye_half_height).powi(2) <= 1.0;
        if inside {
            let pupil = (dx * dx + dy * dy).sqrt() <= g.eye_half_height.min(0.014);
            c = if pupil { DARK } else { EYE_WHITE };
        }
        if polyline_distance(p, &g.eye_loop(side), true) <= 0.5 * stroke {
            c = DARK;
        }
    }
    let m = &g.mouth;
    let t = (x - m.cx) / m.half_width;
    if t.abs() <= 1.0 && y >= m.outer_upper(t) && y <= m.outer_lower(t) {
        c = LIP;
        if t.abs() <= INNER_SPAN && y >= m.inner_upper(t) && y <= m.inner_lower(t) {
            c = MOUTH_INSIDE;
        }
    }
    if polyline_distance(p, &g.outer_lips(), true) <= 0.5 * stroke {
        c = LIP_LINE;
    }
    c
}

/// One rendered portrait.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySample<T> {
    /// 3×H×W in [−1,1].
    pub image: Tensor<T>,
    pub landmarks: LandmarkSet,
    pub modality: ModalityCode,
    pub identity_id: u64,
}

fn check_size(size: usize) -> Result<()> {
    if size < 32 || !size.is_power_of_two() {
        return Err(Error::Contract(format!(
            "render size must be a power of two ≥ 32, got {size}"
        )));
    }
    Ok(())
}

/// Anti-aliasing: each pixel averages a 3×3 grid of shading samples.
const SUPERSAMPLE: usize = 3;

/// Render `spec` in `modality` at `size`×`size`.
pub fn render<T: Scalar>(spec: &FaceSpec, modality: ModalityCode, size: usize) -> Result<ToySample<T>> {
    check_size(size)?;
    if modality.index() >= MAX_MODALITIES {
        return Err(Error::Contract(format!(
            "unsupported modality {} (renderer knows {MAX_MODALITIES})",
            modality.index()
        )));
    }
    let geom = Geometry::new(spec);
    let px = 1.0 / size as f64;
    let plane = size * size;
    let mut data = vec![T::zero(); 3 * plane];
    for row in 0..size {
        for col in 0..size {
            let i = row * size + col;
            let mut rgb = [0.0; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let p = [
                        (col as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64) * px,
                        (row as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64) * px,
                    ];
                    let c = apply_modality(shade(spec, &geom, p, px), modality.index(), p, i);
                    for ch in 0..3 {
                        rgb[ch] += c[ch];
                    }
                }
            }
            let n = (SUPERSAMPLE * SUPERSAMPLE) as f64;
            for (ch, v) in rgb.iter().enumerate() {
                data[ch * plane + i] = T::lit(2.0 * v / n - 1.0);
            }
        }
    }
    Ok(ToySample {
        image: Tensor::new(&[3, size, size], data)?,
        landmarks: LandmarkSet::new(geom.landmarks(spec))?,
        modality,
        identity_id: spec.identity_id,
    })
}

/// `(I_A, I_B, L_A, L_B, c̄_A, c̄_B)` for one identity.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainTuple<T> {
    pub image_a: Tensor<T>,
    pub image_b: Tensor<T>,
    pub landmarks_a: LandmarkSet,
    pub landmarks_b: LandmarkSet,
    pub code_a: ModalityCode,
    pub code_b: ModalityCode,
}

pub fn make_tuple<T: Scalar>(
    spec: &FaceSpec,
    emotion_a: Emotion,
    emotion_b: Emotion,
    modality_a: ModalityCode,
    modality_b: ModalityCode,
    size: usize,
) -> Result<TrainTuple<T>> {
    let a = render::<T>(&spec.with_emotion(emotion_a), modality_a, size)?;
    let b = render::<T>(&spec.with_emotion(emotion_b), modality_b, size)?;
    Ok(TrainTuple {
        image_a: a.image,
        image_b: b.image,
        landmarks_a: a.landmarks,
        landmarks_b: b.landmarks,
        code_a: a.modality,
        code_b: b.modality,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub train_identities: usize,
    pub heldout_identities: usize,
    /// How many of the canonical expressions to draw from.
    pub emotions: usize,
    pub modalities: usize,
    pub image_size: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_identities: 32,
            heldout_identities: 8,
            emotions: EMOTIONS.len(),
            modalities: 2,
            image_size: 64,
        }
    }
}

/// Source image in modality 0 and its modality-1 ground truth with the same
/// landmarks.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair<T> {
    pub source: Tensor<T>,
    pub target: Tensor<T>,
    pub landmarks: LandmarkSet,
    pub source_code: ModalityCode,
    pub target_code: ModalityCode,
    pub identity_id: u64,
}

/// Reproducible, unbounded corpus: `(seed, index)` fixes every sample.
#[derive(Debug, Clone)]
pub struct Corpus {
    config: CorpusConfig,
}

impl Corpus {
    pub fn new(config: CorpusConfig) -> Result<Self> {
        check_size(config.image_size)?;
        if config.train_identities == 0 {
            return Err(Error::Config("corpus needs at least one training identity".into()));
        }
        if config.emotions == 0 || config.emotions > EMOTIONS.len() {
            return Err(Error::Config(format!(
                "emotions must be in 1..={}, got {}",
                EMOTIONS.len(),
                config.emotions
            )));
        }
        if config.modalities == 0 || config.modalities > MAX_MODALITIES {
            return Err(Error::Config(format!(
                "modalities must be in 1..={MAX_MODALITIES}, got {}",
                config.modalities
            )));
        }
        Ok(Self { config })
    }

    pub fn config(&self) -> &CorpusConfig {
        &self.config
    }

    fn identity_seed(&self, k: usize) -> u64 {
        splitmix(self.config.seed.wrapping_mul(0x1000_0000_01b3) ^ k as u64)
    }

    /// Training identity `k` (wraps around the configured count).
    pub fn train_identity(&self, k: usize) -> FaceSpec {
        sample_identity(self.identity_seed(k % self.config.train_identities))
    }

    /// Held-out identities never appear in training tuples.
    pub fn heldout_identity(&self, k: usize) -> FaceSpec {
        sample_identity(self.identity_seed(self.config.train_identities + k))
    }

    fn code(&self, index: usize) -> ModalityCode {
        ModalityCode::new(index, self.config.modalities).expect("index below modality count")
    }

    fn index_rng(&self, index: u64, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(self.config.seed ^ splitmix(index)));
        rng.set_stream(stream);
        rng
    }

    /// Training tuple `index`: random identity, expressions and modalities.
    pub fn tuple<T: Scalar>(&self, index: u64) -> Result<TrainTuple<T>> {
        let mut rng = self.index_rng(index, 1);
        let spec = self.train_identity(rng.random_range(0..self.config.train_identities));
        let ea = EMOTIONS[rng.random_range(0..self.config.emotions)].1;
        let eb = EMOTIONS[rng.random_range(0..self.config.emotions)].1;
        let ma = self.code(rng.random_range(0..self.config.modalities));
        let mb = self.code(rng.random_range(0..self.config.modalities));
        make_tuple(&spec, ea, eb, ma, mb, self.config.image_size)
    }

    /// Single rendered training sample `index`.
    pub fn sample<T: Scalar>(&self, index: u64) -> Result<ToySample<T>> {
        let mut rng = self.index_rng(index, 2);
        let spec = self.train_identity(rng.random_range(0..self.config.train_identities));
        let e = EMOTIONS[rng.random_range(0..self.config.emotions)].1;
        let m = self.code(rng.random_range(0..self.config.modalities));
        render(&spec.with_emotion(e), m, self.config.image_size)
    }

    /// Every held-out identity × expression as a modality 0 → 1 pair.
    pub fn heldout_pairs<T: Scalar>(&self) -> Result<Vec<EvalPair<T>>> {
        if self.config.modalities < 2 {
            return Err(Error::Contract(
                "modality transfer pairs need at least two modalities".into(),
            ));
        }
        let mut out = Vec::new();
        for k in 0..self.config.heldout_identities {
            let id = self.heldout_identity(k);
            for &(_, e) in &EMOTIONS[..self.config.emotions] {
                let spec = id.with_emotion(e);
                let a = render::<T>(&spec, self.code(0), self.config.image_size)?;
                let b = render::<T>(&spec, self.code(1), self.config.image_size)?;
                out.push(EvalPair {
                    source: a.image,
                    target: b.image,
                    landmarks: a.landmarks,
                    source_code: a.modality,
                    target_code: b.modality,
                    identity_id: spec.identity_id,
                });
            }
        }
        Ok(out)
    }
}

/// Quantise a 3×H×W tensor in [−1,1] to an 8-bit RGB PNG.
pub fn encode_png<T: Scalar>(image: &Tensor<T>) -> Result<Vec<u8>> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(Error::Image(format!("PNG export needs 3 channels, got {c}")));
    }
    let plane = h * w;
    let d = image.data();
    let mut rgb = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for ch in 0..3 {
            let v = (d[ch * plane + i].to_f64_lossy() + 1.0) * 0.5;
            rgb.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(&rgb, w as u32, h as u32, image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(out)
}

/// Decode a PNG into a 3×H×W tensor in [−1,1]. Alpha and grey are converted.
pub fn decode_png<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = h * w;
    let mut data = vec![T::zero(); 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for ch in 0..3 {
            data[ch * plane + i] = T::lit(px.0[ch] as f64 / 255.0 * 2.0 - 1.0);
        }
    }
    Tensor::new(&[3, h, w], data)
}

#[derive(Serialize)]
struct Sidecar<'a> {
    points: &'a [[f64; 2]],
    modality: usize,
    identity_id: u64,
}

/// Write `count` corpus samples as `sample_NNNNN.png` plus a landmark JSON
/// sidecar each. The cache is derived data only.
pub fn write_cache(corpus: &Corpus, count: usize, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for i in 0..count {
        let s = corpus.sample::<f32>(i as u64)?;
        let stem = format!("sample_{i:05}");
        std::fs::write(dir.join(format!("{stem}.png")), encode_png(&s.image)?)?;
        let side = Sidecar {
            points: s.landmarks.points(),
            modality: s.modality.index(),
            identity_id: s.identity_id,
        };
        std::fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&side)?,
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{rasterize_landmarks, LANDMARK_GROUPS};
    use proptest::prelude::*;

    fn code(i: usize) -> ModalityCode {
        ModalityCode::new(i, 3).unwrap()
    }

    #[test]
    fn identities_are_deterministic_and_distinct() {
        assert_eq!(sample_identity(7), sample_identity(7));
        assert_ne!(sample_identity(1).identity, sample_identity(2).identity);
    }

    proptest! {
        #[test]
        fn identity_parameters_in_range(seed in any::<u64>()) {
            let spec = sample_identity(seed);
            for ((name, lo, hi), v) in IdentityParams::RANGES.iter().zip(spec.identity.values()) {
                prop_assert!(v >= *lo && v <= *hi, "{} = {}", name, v);
            }
        }

        #[test]
        fn landmarks_valid_for_any_expression(
            seed in any::<u64>(), m in -1.0f64..=1.0, e in 0.0f64..=1.0, b in -1.0f64..=1.0,
        ) {
            let spec = sample_identity(seed).with_emotion(Emotion::new(m, e, b));
            prop_assert_eq!(face_landmarks(&spec).points().len(), 68);
        }
    }

    #[test]
    fn modalities_share_geometry() {
        let spec = sample_identity(3).with_emotion(EMOTIONS[1].1);
        let a = render::<f32>(&spec, code(0), 64).unwrap();
        let b = render::<f32>(&spec, code(1), 64).unwrap();
        let c = render::<f32>(&spec, code(2), 64).unwrap();
        assert_eq!(a.landmarks, b.landmarks);
        assert_eq!(a.landmarks, c.landmarks);
        assert_ne!(a.image, b.image);
        assert_ne!(a.image, c.image);
        for s in [&a, &b, &c] {
            assert!(s.image.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn mouth_landmarks_follow_curvature() {
        let base = sample_identity(4);
        let smile = face_landmarks(&base.with_emotion(Emotion::new(1.0, 0.5, 0.0)));
        let frown = face_landmarks(&base.with_emotion(Emotion::new(-1.0, 0.5, 0.0)));
        // corners rise with a smile
        for corner in [48, 54] {
            assert!(smile.points()[corner][1] < frown.points()[corner][1]);
        }
        assert_ne!(&smile.points()[48..68], &frown.points()[48..68]);
        assert_eq!(&smile.points()[..17], &frown.points()[..17]);
    }

    #[test]
    fn render_rejects_bad_arguments() {
        let spec = sample_identity(1);
        assert!(render::<f32>(&spec, code(0), 48).is_err());
        assert!(render::<f32>(&spec, code(0), 16).is_err());
        assert!(render::<f32>(&spec, ModalityCode::new(3, 4).unwrap(), 32).is_err());
    }

    #[test]
    fn landmarks_sit_on_rendered_edges() {
        for seed in 0..6 {
            for &(_, e) in &EMOTIONS {
                let spec = sample_identity(seed).with_emotion(e);
                let s = render::<f64>(&spec, code(0), 64).unwrap();
                let d = s.image.data();
                let at = |r: usize, c: usize| [d[r * 64 + c], d[4096 + r * 64 + c], d[8192 + r * 64 + c]];
                for (i, p) in s.landmarks.points().iter().enumerate() {
                    let (c0, r0) = ((p[0] * 64.0) as usize, (p[1] * 64.0) as usize);
                    let mut seen = Vec::new();
                    for r in r0.saturating_sub(1)..=(r0 + 1).min(63) {
                        for c in c0.saturating_sub(1)..=(c0 + 1).min(63) {
                            seen.push(at(r, c));
                        }
                    }
                    assert!(
                        seen.iter().any(|v| *v != seen[0]),
                        "seed {seed} landmark {i} at {p:?} is not on an edge"
                    );
                }
            }
        }
    }

    #[test]
    fn landmark_heatmap_overlaps_features() {
        let spec = sample_identity(9).with_emotion(EMOTIONS[4].1);
        let s = render::<f64>(&spec, code(0), 64).unwrap();
        let heat = rasterize_landmarks::<f64>(&s.landmarks, 64, 64, 1).unwrap();
        assert!(heat.sum() > 100.0);
        assert_eq!(LANDMARK_GROUPS.len(), 9);
    }

    #[test]
    fn mouth_darkens_as_curvature_rises() {
        let spec = sample_identity(11);
        let neutral = face_landmarks(&spec);
        let mouth: Vec<_> = neutral.points()[48..68].to_vec();
        let (x0, x1) = mouth.iter().fold((1.0f64, 0.0f64), |a, p| (a.0.min(p[0]), a.1.max(p[0])));
        let (y0, y1) = mouth.iter().fold((1.0f64, 0.0f64), |a, p| (a.0.min(p[1]), a.1.max(p[1])));
        let region = |img: &Tensor<f64>| {
            let (r0, r1) = (((y0 - 0.06) * 64.0) as usize, ((y1 + 0.06) * 64.0) as usize);
            let (c0, c1) = ((x0 * 64.0) as usize, (x1 * 64.0) as usize);
            let mut s = 0.0;
            for r in r0..=r1 {
                for c in c0..=c1 {
                    s += (0..3).map(|ch| img.data()[ch * 4096 + r * 64 + c]).sum::<f64>();
                }
            }
            s
        };
        let vals: Vec<f64> = (0..=5)
            .map(|i| {
                let m = -1.0 + 0.4 * i as f64;
                let s = render::<f64>(&spec.with_emotion(Emotion::new(m, 0.6, 0.0)), code(0), 64).unwrap();
                region(&s.image)
            })
            .collect();
        assert!(vals.windows(2).all(|w| w[1] < w[0]), "{vals:?}");
    }

    #[test]
    fn tuples_follow_their_inputs() {
        let spec = sample_identity(5);
        let t = make_tuple::<f32>(&spec, EMOTIONS[1].1, EMOTIONS[1].1, code(1), code(1), 32).unwrap();
        assert_eq!(t.image_a, t.image_b);
        assert_eq!(t.code_a, code(1));
        let t = make_tuple::<f32>(&spec, EMOTIONS[1].1, EMOTIONS[2].1, code(0), code(1), 32).unwrap();
        assert_ne!(t.landmarks_a, t.landmarks_b);
        assert_eq!((t.code_a, t.code_b), (code(0), code(1)));
    }

    #[test]
    fn corpus_is_reproducible_and_separates_heldout() {
        let cfg = CorpusConfig {
            train_identities: 2,
            heldout_identities: 2,
            emotions: 3,
            image_size: 32,
            ..Default::default()
        };
        let a = Corpus::new(cfg.clone()).unwrap();
        let b = Corpus::new(cfg).unwrap();
        assert_eq!(a.tuple::<f32>(17).unwrap(), b.tuple::<f32>(17).unwrap());
        assert_ne!(a.tuple::<f32>(17).unwrap(), a.tuple::<f32>(18).unwrap());
        let train: Vec<u64> = (0..2).map(|k| a.train_identity(k).identity_id).collect();
        let pairs = a.heldout_pairs::<f32>().unwrap();
        assert_eq!(pairs.len(), 6);
        assert!(pairs.iter().all(|p| !train.contains(&p.identity_id)));
        assert!(pairs.iter().all(|p| p.source != p.target));
    }

    #[test]
    fn png_round_trip_is_quantisation_exact() {
        let s = render::<f32>(&sample_identity(2), code(1), 32).unwrap();
        let bytes = encode_png(&s.image).unwrap();
        let back = decode_png::<f32>(&bytes).unwrap();
        assert_eq!(back.shape(), &[3, 32, 32]);
        assert!(back.max_abs_diff(&s.image) <= 1.0 / 255.0 + 1e-6);
        assert_eq!(encode_png(&back).unwrap(), bytes);
        assert!(decode_png::<f32>(b"not a png").is_err());
    }

    #[test]
    fn cache_is_byte_identical() {
        let corpus = Corpus::new(CorpusConfig {
            image_size: 32,
            ..Default::default()
        })
        .unwrap();
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_cache(&corpus, 3, d1.path()).unwrap();
        write_cache(&corpus, 3, d2.path()).unwrap();
        for name in ["sample_00000.png", "sample_00002.json"] {
            assert_eq!(
                std::fs::read(d1.path().join(name)).unwrap(),
                std::fs::read(d2.path().join(name)).unwrap()
            );
        }
        let json = std::fs::read_to_string(d1.path().join("sample_00001.json")).unwrap();
        let set: LandmarkSet = serde_json::from_str(&json).unwrap();
        assert_eq!(set.points().len(), 68);
    }
}
