#![allow(dead_code)]

use lams_core::backend::{ToyAffineBackend, ToyConfig, ToyMode};
use lams_core::tensor::Image;
use ndarray::Array3;

/// Published default attention-mixing weights (4 decimals), loop order.
pub const WA: [f64; 50] = [
    0.696, 0.6951, 0.694, 0.6926, 0.691, 0.689, 0.6866, 0.6836, 0.68, 0.6757, 0.6704, 0.6641, 0.6566, 0.6476, 0.637,
    0.6245, 0.61, 0.5933, 0.5742, 0.5527, 0.5288, 0.5028, 0.4749, 0.4456, 0.4153, 0.3847, 0.3544, 0.3251, 0.2972,
    0.2712, 0.2473, 0.2258, 0.2067, 0.19, 0.1755, 0.163, 0.1524, 0.1434, 0.1359, 0.1296, 0.1243, 0.12, 0.1164, 0.1134,
    0.111, 0.109, 0.1074, 0.106, 0.1049, 0.104,
];

/// Published default latent-mixing weights.
pub fn wz() -> Vec<f64> {
    let mut w = vec![0.6; 10];
    w.resize(50, 0.0);
    w
}

/// Smooth RGB test image in `[0.1, 0.9]`.
pub fn test_image(size: usize, seed: usize) -> Image {
    Array3::from_shape_fn((3, size, size), |(c, y, x)| {
        0.5 + 0.4 * (((c + 1) * (y + 2 * seed + 1)) as f64 * 0.37 + x as f64 * 0.21).sin()
    })
}

pub fn toy(mode: ToyMode, seed: u64) -> ToyAffineBackend {
    ToyAffineBackend::new(ToyConfig { mode, seed, ..ToyConfig::default() }).unwrap()
}
