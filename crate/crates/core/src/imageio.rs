//! Image files and inline images.
//!
//! Images are `channels x height x width` arrays with values in `[0, 1]`.
//! Decoding always yields RGB; encoding writes 8-bit RGB (3 channels) or
//! grayscale (1 channel), clamping to `[0, 1]`.

use std::path::{Path, PathBuf};

use base64::Engine;
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Image;

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("{path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("{0}")]
    Decode(String),
    #[error("invalid base64: {0}")]
    Base64(String),
    #[error("cannot encode an image with {0} channels")]
    Channels(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// An image given by filesystem path or inline base64 bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageInput {
    Path(String),
    Base64(String),
}

impl ImageInput {
    /// Raw file bytes; relative paths resolve against `base_dir`.
    pub fn bytes(&self, base_dir: Option<&Path>) -> Result<Vec<u8>, ImageIoError> {
        match self {
            ImageInput::Path(p) => {
                let mut path = PathBuf::from(p);
                if path.is_relative() {
                    if let Some(base) = base_dir {
                        path = base.join(path);
                    }
                }
                std::fs::read(&path).map_err(|source| ImageIoError::Read { path: path.display().to_string(), source })
            }
            ImageInput::Base64(data) => decode_base64(data),
        }
    }

    pub fn load(&self, base_dir: Option<&Path>) -> Result<Image, ImageIoError> {
        decode_image(&self.bytes(base_dir)?)
    }
}

pub fn decode_base64(data: &str) -> Result<Vec<u8>, ImageIoError> {
    let data = data.split_once("base64,").map_or(data, |(_, rest)| rest);
    base64::engine::general_purpose::STANDARD.decode(data.trim()).map_err(|e| ImageIoError::Base64(e.to_string()))
}

pub fn encode_base64(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub fn decode_image(bytes: &[u8]) -> Result<Image, ImageIoError> {
    let rgb = image::load_from_memory(bytes).map_err(|e| ImageIoError::Decode(e.to_string()))?.to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        f64::from(rgb.get_pixel(x as u32, y as u32)[c]) / 255.0
    }))
}

pub fn load_image(path: &Path) -> Result<Image, ImageIoError> {
    ImageInput::Path(path.display().to_string()).load(None)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>, ImageIoError> {
    let (c, h, w) = img.dim();
    let color = match c {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        other => return Err(ImageIoError::Channels(other)),
    };
    let mut raw = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                raw.push(to_u8(img[[ch, y, x]]));
            }
        }
    }
    let mut out = Vec::new();
    image::ImageEncoder::write_image(image::codecs::png::PngEncoder::new(&mut out), &raw, w as u32, h as u32, color)
        .map_err(|e| ImageIoError::Decode(e.to_string()))?;
    Ok(out)
}

pub fn save_png(img: &Image, path: &Path) -> Result<(), ImageIoError> {
    std::fs::write(path, encode_png(img)?)?;
    Ok(())
}

/// The image after 8-bit quantization, as a PNG round trip would produce it.
pub fn quantize(img: &Image) -> Image {
    img.mapv(|v| f64::from(to_u8(v)) / 255.0)
}
