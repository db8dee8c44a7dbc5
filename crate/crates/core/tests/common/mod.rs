#![allow(dead_code)]

pub mod oracles;
pub mod suites;

use locret_core::caa::ResidualMode;
use locret_core::corpus::{CLS, PAD};
use locret_core::encoders::{ModelConfig, ModelParams};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TINY_VOCAB: usize = 12;

/// c = c_t = d = 8 on a 4×4 patch grid, M = 3.
pub fn tiny_config(mode: ResidualMode) -> ModelConfig {
    ModelConfig {
        image_size: 16,
        patch_size: 4,
        image_hidden: 8,
        image_channels: 8,
        text_channels: 8,
        joint_dim: 8,
        vocab_size: TINY_VOCAB,
        max_len: 6,
        heads: 2,
        blocks: 3,
        residual_mode: mode,
    }
}

pub fn tiny_params(seed: u64) -> ModelParams {
    ModelParams::init(tiny_config(ResidualMode::Paper), seed).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(side: usize, rng: &mut ChaCha8Rng) -> Array2<f32> {
    Array2::from_shape_simple_fn((side, side), || rng.random_range(0.0f32..1.0))
}

/// `[CLS]` followed by `len - 1` content tokens and `pad` trailing pads.
pub fn random_tokens(len: usize, pad: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let mut t = vec![CLS];
    t.extend((1..len).map(|_| rng.random_range(2..TINY_VOCAB as u32)));
    t.extend(std::iter::repeat_n(PAD, pad));
    t
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}
