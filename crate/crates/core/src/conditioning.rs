//! Conditioning inputs: landmark heatmaps, broadcast modality planes, and the
//! `(3+1+n)×H×W` generator input.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

pub const N_LANDMARKS: usize = 68;

/// A named run of landmark indices drawn as one polyline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LandmarkGroup {
    pub name: &'static str,
    pub start: usize,
    /// Inclusive.
    pub end: usize,
    pub closed: bool,
}

/// Standard 68-point facial landmark topology.
pub const LANDMARK_GROUPS: [LandmarkGroup; 9] = [
    LandmarkGroup { name: "jaw", start: 0, end: 16, closed: false },
    LandmarkGroup { name: "brow_left", start: 17, end: 21, closed: false },
    LandmarkGroup { name: "brow_right", start: 22, end: 26, closed: false },
    LandmarkGroup { name: "nose_bridge", start: 27, end: 30, closed: false },
    LandmarkGroup { name: "nose_base", start: 31, end: 35, closed: false },
    LandmarkGroup { name: "eye_left", start: 36, end: 41, closed: true },
    LandmarkGroup { name: "eye_right", start: 42, end: 47, closed: true },
    LandmarkGroup { name: "lips_outer", start: 48, end: 59, closed: true },
    LandmarkGroup { name: "lips_inner", start: 60, end: 67, closed: true },
];

/// 68 keypoints with coordinates normalised to `[0, 1]`.
///
/// Serialises as `{"points": [[x, y], ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LandmarkJson", into = "LandmarkJson")]
pub struct LandmarkSet {
    points: Vec<[f64; 2]>,
}

#[derive(Serialize, Deserialize)]
struct LandmarkJson {
    points: Vec<[f64; 2]>,
}

impl TryFrom<LandmarkJson> for LandmarkSet {
    type Error = Error;

    fn try_from(value: LandmarkJson) -> Result<Self> {
        LandmarkSet::new(value.points)
    }
}

impl From<LandmarkSet> for LandmarkJson {
    fn from(value: LandmarkSet) -> Self {
        LandmarkJson {
            points: value.points,
        }
    }
}

impl LandmarkSet {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        if points.len() != N_LANDMARKS {
            return Err(Error::Contract(format!(
                "expected {N_LANDMARKS} landmark points, got {}",
                points.len()
            )));
        }
        if let Some((i, p)) = points
            .iter()
            .enumerate()
            .find(|(_, p)| !p.iter().all(|c| (0.0..=1.0).contains(c)))
        {
            return Err(Error::Contract(format!(
                "landmark {i} at ({}, {}) lies outside [0,1]²",
                p[0], p[1]
            )));
        }
        Ok(Self { points })
    }

    /// Clamp every coordinate into `[0, 1]` (NaN becomes 0).
    pub fn clamped(points: Vec<[f64; 2]>) -> Result<Self> {
        let clamp = |c: f64| if c.is_nan() { 0.0 } else { c.clamp(0.0, 1.0) };
        Self::new(points.into_iter().map(|[x, y]| [clamp(x), clamp(y)]).collect())
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    /// Segments of every connectivity group, closing the loops.
    pub fn segments(&self) -> Vec<([f64; 2], [f64; 2])> {
        let mut segs = Vec::new();
        for g in &LANDMARK_GROUPS {
            let pts = &self.points[g.start..=g.end];
            segs.extend(pts.windows(2).map(|w| (w[0], w[1])));
            if g.closed {
                segs.push((pts[pts.len() - 1], pts[0]));
            }
        }
        segs
    }
}

/// One-hot target domain selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModalityCode {
    index: usize,
    n: usize,
}

impl ModalityCode {
    pub fn new(index: usize, n: usize) -> Result<Self> {
        if index >= n {
            return Err(Error::Contract(format!(
                "modality index {index} out of range for {n} modalities"
            )));
        }
        Ok(Self { index, n })
    }

    pub fn index(self) -> usize {
        self.index
    }

    pub fn count(self) -> usize {
        self.n
    }

    pub fn one_hot(self) -> Vec<f64> {
        (0..self.n).map(|i| if i == self.index { 1.0 } else { 0.0 }).collect()
    }
}

// Continuous pixel coordinate of a normalised position, inside [0, size).
fn to_pixel(c: f64, size: usize) -> f64 {
    (c * size as f64).clamp(0.0, size as f64 * (1.0 - 1e-12))
}

/// Grid cells touched by the segment, using half-open `[i, i+1)` cells.
fn supercover(a: [f64; 2], b: [f64; 2], h: usize, w: usize, mut mark: impl FnMut(usize, usize)) {
    // canonical orientation so a segment rasterises identically either way
    let (a, b) = if (a[0], a[1]) <= (b[0], b[1]) { (a, b) } else { (b, a) };
    let (x0, y0) = (to_pixel(a[0], w), to_pixel(a[1], h));
    let (x1, y1) = (to_pixel(b[0], w), to_pixel(b[1], h));
    let (mut cx, mut cy) = (x0.floor() as isize, y0.floor() as isize);
    let (ex, ey) = (x1.floor() as isize, y1.floor() as isize);
    let (dx, dy) = (x1 - x0, y1 - y0);
    let axis = |d: f64, p: f64, c: isize| -> (isize, f64, f64) {
        if d > 0.0 {
            (1, (c as f64 + 1.0 - p) / d, 1.0 / d)
        } else if d < 0.0 {
            (-1, (c as f64 - p) / d, -1.0 / d)
        } else {
            (0, f64::INFINITY, f64::INFINITY)
        }
    };
    let (sx, mut tx, dtx) = axis(dx, x0, cx);
    let (sy, mut ty, dty) = axis(dy, y0, cy);
    let max_steps = (ex - cx).abs() + (ey - cy).abs();
    mark(cy as usize, cx as usize);
    for _ in 0..max_steps {
        if (cx, cy) == (ex, ey) {
            break;
        }
        if (tx < ty && cx != ex) || cy == ey {
            cx += sx;
            tx += dtx;
        } else {
            cy += sy;
            ty += dty;
        }
        mark(cy as usize, cx as usize);
    }
}

fn stamp(canvas: &mut [f64], h: usize, w: usize, row: usize, col: usize, stroke: usize) {
    let lo = (stroke as isize - 1) / 2;
    let hi = stroke as isize / 2;
    for dy in -lo..=hi {
        for dx in -lo..=hi {
            let (r, c) = (row as isize + dy, col as isize + dx);
            if r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w {
                canvas[r as usize * w + c as usize] = 1.0;
            }
        }
    }
}

fn check_raster_args(h: usize, w: usize, stroke: usize) -> Result<()> {
    if h < 8 || w < 8 || stroke == 0 {
        return Err(Error::Contract(format!(
            "rasterisation needs H, W ≥ 8 and stroke ≥ 1 (got {h}×{w}, stroke {stroke})"
        )));
    }
    Ok(())
}

/// Binary `1×H×W` raster of arbitrary normalised segments.
pub fn rasterize_segments<T: Scalar>(
    segments: &[([f64; 2], [f64; 2])],
    h: usize,
    w: usize,
    stroke: usize,
) -> Result<Tensor<T>> {
    check_raster_args(h, w, stroke)?;
    for (a, b) in segments {
        if !a.iter().chain(b).all(|c| (0.0..=1.0).contains(c)) {
            return Err(Error::Contract(format!(
                "segment endpoint outside [0,1]²: {a:?} → {b:?}"
            )));
        }
    }
    let mut canvas = vec![0.0; h * w];
    for &(a, b) in segments {
        supercover(a, b, h, w, |r, c| stamp(&mut canvas, h, w, r, c, stroke));
    }
    Tensor::new(&[1, h, w], canvas.into_iter().map(T::lit).collect())
}

/// One-channel binary heatmap of the landmark polylines.
pub fn rasterize_landmarks<T: Scalar>(
    landmarks: &LandmarkSet,
    h: usize,
    w: usize,
    stroke: usize,
) -> Result<Tensor<T>> {
    rasterize_segments(&landmarks.segments(), h, w, stroke)
}

/// `n×H×W` planes: plane `index` all ones, the rest zeros.
pub fn broadcast_modality<T: Scalar>(code: ModalityCode, h: usize, w: usize) -> Tensor<T> {
    let plane = h * w;
    Tensor::from_fn(&[code.count(), h, w], |i| {
        if i / plane == code.index() {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// Generator input: image, heatmap, and modality planes stacked along channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedInput<T> {
    tensor: Tensor<T>,
    n_modalities: usize,
}

impl<T: Scalar> ConditionedInput<T> {
    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.tensor
    }

    pub fn n_modalities(&self) -> usize {
        self.n_modalities
    }

    pub fn image(&self) -> Tensor<T> {
        self.tensor.slice_channels(0, 3).expect("validated layout")
    }

    pub fn heatmap(&self) -> Tensor<T> {
        self.tensor.slice_channels(3, 4).expect("validated layout")
    }

    pub fn modality_planes(&self) -> Tensor<T> {
        self.tensor
            .slice_channels(4, 4 + self.n_modalities)
            .expect("validated layout")
    }
}

/// Concatenate `image (3×H×W) | heatmap (1×H×W) | modality (n×H×W)`.
pub fn assemble_input<T: Scalar>(
    image: &Tensor<T>,
    heatmap: &Tensor<T>,
    modality: &Tensor<T>,
) -> Result<ConditionedInput<T>> {
    let (ci, _, _) = image.chw()?;
    let (ch, _, _) = heatmap.chw()?;
    let (n, _, _) = modality.chw()?;
    if ci != 3 || ch != 1 || n == 0 {
        return Err(Error::shape(
            "assemble_input",
            format!("channels image={ci} heatmap={ch} modality={n}"),
        ));
    }
    let tensor = Tensor::concat_channels(&[image, heatmap, modality])?;
    Ok(ConditionedInput {
        tensor,
        n_modalities: n,
    })
}

/// A target condition `(L, c̄)` for one generator application.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub landmarks: LandmarkSet,
    pub modality: ModalityCode,
}

impl Condition {
    pub fn new(landmarks: LandmarkSet, modality: ModalityCode) -> Self {
        Self {
            landmarks,
            modality,
        }
    }

    /// Heatmap and modality planes, `(1+n)×H×W`.
    pub fn planes<T: Scalar>(&self, h: usize, w: usize, stroke: usize) -> Result<Tensor<T>> {
        let heat = rasterize_landmarks(&self.landmarks, h, w, stroke)?;
        let modality = broadcast_modality(self.modality, h, w);
        Tensor::concat_channels(&[&heat, &modality])
    }

    /// Graph-level assembly: `image` may itself be a generator output.
    pub fn attach<T: Scalar>(&self, g: &mut Graph<T>, image: Var, stroke: usize) -> Result<Var> {
        let (c, h, w) = g.value(image).chw()?;
        if c != 3 {
            return Err(Error::shape("condition", format!("image has {c} channels")));
        }
        let planes = g.constant(self.planes(h, w, stroke)?);
        g.channel_concat(&[image, planes])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn uniform_set(x: f64, y: f64) -> LandmarkSet {
        LandmarkSet::new(vec![[x, y]; N_LANDMARKS]).unwrap()
    }

    #[test]
    fn single_segment_is_a_horizontal_run() {
        let t: Tensor<f64> =
            rasterize_segments(&[([0.25, 0.5], [0.75, 0.5])], 64, 64, 1).unwrap();
        // oracle: continuous endpoints at x=16.0 and x=48.0 on row y=32.0
        for r in 0..64 {
            for c in 0..64 {
                let expected = if r == 32 && (16..=48).contains(&c) { 1.0 } else { 0.0 };
                assert_eq!(t.data()[r * 64 + c], expected, "pixel ({r},{c})");
            }
        }
    }

    #[test]
    fn degenerate_landmarks_light_one_pixel() {
        let t: Tensor<f32> = rasterize_landmarks(&uniform_set(0.5, 0.5), 64, 64, 1).unwrap();
        assert_eq!(t.sum(), 1.0);
        assert_eq!(t.data()[32 * 64 + 32], 1.0);
        let t: Tensor<f32> = rasterize_landmarks(&uniform_set(0.5, 0.5), 64, 64, 3).unwrap();
        assert_eq!(t.sum(), 9.0);
    }

    #[test]
    fn landmark_count_and_range_are_validated() {
        assert!(LandmarkSet::new(vec![[0.5, 0.5]; 67]).is_err());
        let mut pts = vec![[0.5, 0.5]; 68];
        pts[3] = [1.2, 0.1];
        let err = LandmarkSet::new(pts.clone()).unwrap_err();
        assert!(err.to_string().contains("landmark 3"));
        assert_eq!(LandmarkSet::clamped(pts).unwrap().points()[3], [1.0, 0.1]);
        assert!(rasterize_segments::<f32>(&[([0.0, 0.0], [1.5, 0.0])], 8, 8, 1).is_err());
        assert!(rasterize_segments::<f32>(&[], 4, 8, 1).is_err());
    }

    #[test]
    fn landmark_json_schema() {
        let set = uniform_set(0.25, 0.75);
        let json = serde_json::to_string(&set).unwrap();
        assert!(json.starts_with("{\"points\":[[0.25,0.75]"));
        let back: LandmarkSet = serde_json::from_str(&json).unwrap();
        assert_eq!(back, set);
        let short = r#"{"points": [[0.1, 0.2]]}"#;
        let err = serde_json::from_str::<LandmarkSet>(short).unwrap_err();
        assert!(err.to_string().contains("got 1"));
    }

    #[test]
    fn broadcast_modality_examples() {
        let t: Tensor<f32> = broadcast_modality(ModalityCode::new(0, 2).unwrap(), 4, 4);
        assert_eq!(t.shape(), &[2, 4, 4]);
        assert!(t.data()[..16].iter().all(|&v| v == 1.0));
        assert!(t.data()[16..].iter().all(|&v| v == 0.0));
        let t: Tensor<f32> = broadcast_modality(ModalityCode::new(2, 3).unwrap(), 5, 7);
        assert!(t.slice_channels(2, 3).unwrap().data().iter().all(|&v| v == 1.0));
        assert_eq!(t.sum(), 35.0);
        assert!(ModalityCode::new(3, 3).is_err());
    }

    #[test]
    fn assemble_input_layout() {
        let h = 64;
        let image = Tensor::<f32>::from_fn(&[3, h, h], |i| (i % 7) as f32 / 7.0);
        let heat: Tensor<f32> =
            rasterize_landmarks(&uniform_set(0.3, 0.6), h, h, 1).unwrap();
        let planes = broadcast_modality(ModalityCode::new(1, 2).unwrap(), h, h);
        let input = assemble_input(&image, &heat, &planes).unwrap();
        assert_eq!(input.tensor().shape(), &[6, 64, 64]);
        assert_eq!(input.heatmap(), heat);
        assert_eq!(input.image(), image);
        assert_eq!(input.modality_planes(), planes);

        let one = broadcast_modality(ModalityCode::new(0, 1).unwrap(), h, h);
        let input = assemble_input(&image, &heat, &one).unwrap();
        assert_eq!(input.tensor().shape(), &[5, 64, 64]);

        let small = Tensor::<f32>::zeros(&[1, 32, 32]);
        assert!(assemble_input(&image, &small, &planes).is_err());
    }

    fn landmark_strategy() -> impl Strategy<Value = LandmarkSet> {
        prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), N_LANDMARKS)
            .prop_map(|v| LandmarkSet::new(v.into_iter().map(|(x, y)| [x, y]).collect()).unwrap())
    }

    proptest! {
        #[test]
        fn heatmap_is_binary(set in landmark_strategy(), stroke in 1usize..4) {
            let t: Tensor<f32> = rasterize_landmarks(&set, 32, 32, stroke).unwrap();
            prop_assert!(t.data().iter().all(|&v| v == 0.0 || v == 1.0));
            prop_assert!(t.sum() >= 1.0);
        }

        #[test]
        fn closed_loop_rotation_and_reversal_invariant(set in landmark_strategy(), shift in 1usize..6) {
            let base: Tensor<f32> = rasterize_landmarks(&set, 48, 48, 1).unwrap();
            let mut pts = set.points().to_vec();
            pts[36..42].rotate_left(shift);
            pts[48..60].reverse();
            let moved = LandmarkSet::new(pts).unwrap();
            let other: Tensor<f32> = rasterize_landmarks(&moved, 48, 48, 1).unwrap();
            prop_assert_eq!(base, other);
        }

        #[test]
        fn coarse_support_matches_downsampled_fine_support(set in landmark_strategy()) {
            let coarse: Tensor<f32> = rasterize_landmarks(&set, 32, 32, 1).unwrap();
            let fine: Tensor<f32> = rasterize_landmarks(&set, 64, 64, 1).unwrap();
            for r in 0..32 {
                for c in 0..32 {
                    if coarse.data()[r * 32 + c] == 0.0 {
                        continue;
                    }
                    let covered = (0..2).any(|dy| (0..2).any(|dx| {
                        fine.data()[(2 * r + dy) * 64 + 2 * c + dx] == 1.0
                    }));
                    prop_assert!(covered, "coarse pixel ({}, {}) not covered", r, c);
                }
            }
        }
    }
}
