//! Dense tensor aliases and small helpers shared across modules.

use ndarray::Array3;
use sha2::{Digest, Sha256};

/// Latent tensor laid out as `channels x height x width`.
pub type Latent = Array3<f64>;

/// Image tensor laid out as `channels x height x width`, values in `[0, 1]`.
pub type Image = Array3<f64>;

pub fn shape3(a: &Array3<f64>) -> [usize; 3] {
    let (c, h, w) = a.dim();
    [c, h, w]
}

/// Largest absolute elementwise difference. Panics on shape mismatch.
pub fn max_abs_diff(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim(), "shape mismatch");
    a.iter().zip(b.iter()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// True when every element has the same bit pattern.
pub fn bit_identical(a: &Array3<f64>, b: &Array3<f64>) -> bool {
    a.dim() == b.dim() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Incremental SHA-256 used for content keys and artifact names.
#[derive(Default, Clone)]
pub struct ContentHasher(Sha256);

impl ContentHasher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.bytes(s.as_bytes())
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.0.update((b.len() as u64).to_le_bytes());
        self.0.update(b);
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.0.update(v.to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.0.update(v.to_bits().to_le_bytes());
        self
    }

    pub fn array(&mut self, a: &Array3<f64>) -> &mut Self {
        for d in a.shape() {
            self.u64(*d as u64);
        }
        for v in a.iter() {
            self.0.update(v.to_le_bytes());
        }
        self
    }

    pub fn finish_hex(&self) -> String {
        hex::encode(self.0.clone().finalize())
    }

    pub fn finish_u64(&self) -> u64 {
        let digest = self.0.clone().finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }
}

/// Stable 64-bit seed derived from a label and a base seed.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    ContentHasher::new().u64(base).str(label).finish_u64()
}
