#![allow(dead_code)]

use std::path::{Path, PathBuf};

use pgan_core::data::{encode_png, face_landmarks, render, sample_identity};
use pgan_core::conditioning::ModalityCode;
use pgan_core::training::{save_checkpoint, TrainConfig, Trainer};

/// Small 32×32, two-modality model with one training step applied.
pub fn tiny_config() -> TrainConfig {
    let mut c = TrainConfig::smoke();
    c.generator.base_channels = 4;
    c.generator.max_channels = 8;
    c.generator.n_resblocks = 1;
    // three intermediate outputs at 4, 8 and 16 px
    c.generator.n_down = 4;
    c.generator.n_up = 4;
    c.steps = 1;
    c
}

pub fn checkpoint(dir: &Path) -> PathBuf {
    let mut t = Trainer::new(tiny_config()).unwrap();
    t.step().unwrap();
    let path = dir.join("tiny.pgan");
    save_checkpoint(&t, &path).unwrap();
    path
}

/// A corpus-style source PNG and its 68 landmark points.
pub fn source(size: usize) -> (Vec<u8>, Vec<[f64; 2]>) {
    let spec = sample_identity(3);
    let s = render::<f32>(&spec, ModalityCode::new(0, 2).unwrap(), size).unwrap();
    (encode_png(&s.image).unwrap(), face_landmarks(&spec).points().to_vec())
}
