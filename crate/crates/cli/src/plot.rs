use std::path::Path;

use anyhow::Result;
use lams_core::imageio::save_png;
use ndarray::Array3;

pub const WIDTH: usize = 400;
pub const HEIGHT: usize = 240;
pub const MARGIN: usize = 20;

/// Plots weights in `[0, 1]` against iteration as a grayscale PNG: black
/// curve, gray axes, white background. The y axis spans 0 to 1.
pub fn write_curve(weights: &[f64], path: &Path) -> Result<()> {
    let mut img = Array3::from_elem((1, HEIGHT, WIDTH), 1.0);
    let (x0, x1) = (MARGIN, WIDTH - MARGIN - 1);
    let (y_top, y_bottom) = (MARGIN, HEIGHT - MARGIN - 1);
    for x in x0..=x1 {
        img[[0, y_bottom, x]] = 0.6;
    }
    for y in y_top..=y_bottom {
        img[[0, y, x0]] = 0.6;
    }
    let to_y = |w: f64| y_bottom - (w.clamp(0.0, 1.0) * (y_bottom - y_top) as f64).round() as usize;
    let span = weights.len().saturating_sub(1).max(1) as f64;
    for x in x0..=x1 {
        // Linear interpolation between neighbouring iterations.
        let pos = (x - x0) as f64 / (x1 - x0) as f64 * span;
        let i = (pos.floor() as usize).min(weights.len().saturating_sub(1));
        let next = (i + 1).min(weights.len() - 1);
        let frac = pos - i as f64;
        let w = weights[i] + (weights[next] - weights[i]) * frac;
        img[[0, to_y(w), x]] = 0.0;
    }
    save_png(&img, path)?;
    Ok(())
}
