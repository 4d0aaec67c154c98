//! Tiled binary PPM output.

use crate::error::{CliError, CliResult};

/// Side length of a square image with `d` pixels.
pub fn square_side(d: usize) -> CliResult<usize> {
    let side = (d as f64).sqrt().round() as usize;
    if side * side != d || d == 0 {
        return Err(CliError::Data(format!(
            "ppm output needs a square pixel count, but samples have {d} values"
        )));
    }
    Ok(side)
}

/// Tiles `rows x cols` square grayscale images (values in `[0, 1]`) with
/// one-pixel white separators into a P6 image.
pub fn tile_grid(images: &[f64], d: usize, rows: usize, cols: usize) -> CliResult<Vec<u8>> {
    let side = square_side(d)?;
    if rows == 0 || cols == 0 || images.len() < rows * cols * d {
        return Err(CliError::Usage(format!(
            "a {rows}x{cols} grid needs {} images, got {}",
            rows * cols,
            images.len() / d
        )));
    }
    let width = cols * side + cols - 1;
    let height = rows * side + rows - 1;
    let mut gray = vec![255u8; width * height];
    for r in 0..rows {
        for c in 0..cols {
            let img = &images[(r * cols + c) * d..(r * cols + c + 1) * d];
            for y in 0..side {
                for x in 0..side {
                    let v = img[y * side + x];
                    let px = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                    gray[(r * (side + 1) + y) * width + c * (side + 1) + x] = px;
                }
            }
        }
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend(gray.iter().flat_map(|&g| [g, g, g]));
    Ok(out)
}
