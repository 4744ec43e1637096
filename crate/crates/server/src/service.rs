//! Loaded model and the one inference path shared by the CLI and HTTP.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use pgan_core::conditioning::{Condition, LandmarkSet, ModalityCode, N_LANDMARKS};
use pgan_core::data::{decode_png, encode_png};
use pgan_core::generator::Generator;
use pgan_core::training::load_checkpoint;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    /// The request body is not parseable at all.
    #[error("{0}")]
    Malformed(String),
    /// Parseable, but violates the request schema or the model's contract.
    #[error("{0}")]
    Invalid(String),
    #[error("internal error: {0}")]
    Internal(String),
}

pub type ServiceResult<T> = std::result::Result<T, ServiceError>;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferOptions {
    pub return_intermediates: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferRequest {
    /// Base64 PNG at model resolution.
    pub image: String,
    /// Normalised `[x, y]` pairs, origin top-left.
    pub landmarks: Vec<[f64; 2]>,
    pub modality: usize,
    #[serde(default)]
    pub options: InferOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferResponse {
    pub image: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intermediates: Option<Vec<String>>,
    pub latency_ms: f64,
}

/// Encoded outputs of one translation.
#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub image: Vec<u8>,
    pub intermediates: Vec<Vec<u8>>,
}

/// Immutable generator plus the identity of the checkpoint it came from.
#[derive(Debug)]
pub struct Model {
    generator: Generator<f32>,
    checkpoint_id: String,
}

impl Model {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let (trainer, id) = load_checkpoint(path)
            .map_err(|e| anyhow::anyhow!("cannot load checkpoint {}: {e}", path.display()))?;
        Ok(Self::new(trainer.generator().clone(), id))
    }

    pub fn new(generator: Generator<f32>, checkpoint_id: String) -> Self {
        Self {
            generator,
            checkpoint_id,
        }
    }

    pub fn generator(&self) -> &Generator<f32> {
        &self.generator
    }

    pub fn checkpoint_id(&self) -> &str {
        &self.checkpoint_id
    }

    pub fn resolution(&self) -> usize {
        self.generator.config().image_size
    }

    pub fn n_modalities(&self) -> usize {
        self.generator.config().n_modalities
    }

    /// Validate the inputs, run the generator, and encode the results as PNG.
    pub fn translate_png(
        &self,
        png: &[u8],
        landmarks: Vec<[f64; 2]>,
        modality: usize,
        intermediates: bool,
    ) -> ServiceResult<Rendered> {
        if landmarks.len() != N_LANDMARKS {
            return Err(ServiceError::Invalid(format!(
                "expected {N_LANDMARKS} landmark points, got {}",
                landmarks.len()
            )));
        }
        let landmarks = LandmarkSet::new(landmarks).map_err(|e| ServiceError::Invalid(e.to_string()))?;
        let n = self.n_modalities();
        let code = ModalityCode::new(modality, n).map_err(|_| {
            ServiceError::Invalid(format!("modality {modality} out of range, model has {n}"))
        })?;
        let image = decode_png::<f32>(png)
            .map_err(|e| ServiceError::Invalid(format!("image is not a readable PNG: {e}")))?;
        let s = self.resolution();
        let (_, h, w) = image.chw().map_err(|e| ServiceError::Internal(e.to_string()))?;
        if (h, w) != (s, s) {
            return Err(ServiceError::Invalid(format!(
                "image is {w}×{h}, model expects {s}×{s}"
            )));
        }
        let out = self
            .generator
            .apply(&image, &Condition::new(landmarks, code))
            .map_err(|e| ServiceError::Internal(e.to_string()))?;
        if !out.image.all_finite() {
            return Err(ServiceError::Internal("generator produced non-finite pixels".into()));
        }
        let encode = |t| encode_png(t).map_err(|e| ServiceError::Internal(e.to_string()));
        Ok(Rendered {
            image: encode(&out.image)?,
            intermediates: if intermediates {
                out.intermediates.iter().map(encode).collect::<ServiceResult<_>>()?
            } else {
                Vec::new()
            },
        })
    }

    /// Full JSON-level handling of an `/infer` body.
    pub fn infer_json(&self, body: &[u8]) -> ServiceResult<InferResponse> {
        let req: InferRequest = serde_json::from_slice(body).map_err(|e| {
            if e.is_data() {
                ServiceError::Invalid(format!("request does not match the schema: {e}"))
            } else {
                ServiceError::Malformed(format!("malformed JSON: {e}"))
            }
        })?;
        let png = STANDARD
            .decode(req.image.as_bytes())
            .map_err(|e| ServiceError::Invalid(format!("image is not valid base64: {e}")))?;
        let start = std::time::Instant::now();
        let r = self.translate_png(&png, req.landmarks, req.modality, req.options.return_intermediates)?;
        let latency_ms = start.elapsed().as_secs_f64() * 1e3;
        Ok(InferResponse {
            image: STANDARD.encode(&r.image),
            intermediates: req
                .options
                .return_intermediates
                .then(|| r.intermediates.iter().map(|p| STANDARD.encode(p)).collect()),
            latency_ms,
        })
    }
}
