//! Attention map rendering: one cross-attention row over the patch grid
//! becomes a grayscale image aligned with the input canvas.
//!
//! Pipeline: reshape the row to the grid, divide by a display scale, clip
//! to [0, 1], upsample by the patch size (nearest by default, bilinear on
//! request), then quantize round(255 v) into a PGM.

use thiserror::Error;

use crate::data::ppm::{encode_pgm, PpmError};

#[derive(Debug, Error)]
pub enum VizError {
    #[error("attention row has {len} values, grid is {h}x{w}")]
    GridMismatch { len: usize, h: usize, w: usize },
    #[error("display scale must be finite and positive, got {0}")]
    BadScale(f64),
    #[error("upsample factor must be at least 1")]
    BadFactor,
    #[error(transparent)]
    Ppm(#[from] PpmError),
}

/// Row -> grid values divided by `scale` and clipped to [0, 1].
pub fn attention_gray(
    row: &[f64],
    grid_h: usize,
    grid_w: usize,
    scale: f64,
) -> Result<Vec<f64>, VizError> {
    if row.len() != grid_h * grid_w {
        return Err(VizError::GridMismatch {
            len: row.len(),
            h: grid_h,
            w: grid_w,
        });
    }
    if !(scale.is_finite() && scale > 0.0) {
        return Err(VizError::BadScale(scale));
    }
    Ok(row.iter().map(|v| (v / scale).clamp(0.0, 1.0)).collect())
}

/// Each grid cell becomes a `factor` x `factor` block.
pub fn upsample_nearest(
    grid: &[f64],
    grid_h: usize,
    grid_w: usize,
    factor: usize,
) -> Result<Vec<f64>, VizError> {
    check_grid(grid, grid_h, grid_w, factor)?;
    let (oh, ow) = (grid_h * factor, grid_w * factor);
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = grid[(y / factor) * grid_w + x / factor];
        }
    }
    Ok(out)
}

/// Pixel-center bilinear interpolation between the four surrounding cells,
/// clamped at the border.
pub fn upsample_bilinear(
    grid: &[f64],
    grid_h: usize,
    grid_w: usize,
    factor: usize,
) -> Result<Vec<f64>, VizError> {
    check_grid(grid, grid_h, grid_w, factor)?;
    let (oh, ow) = (grid_h * factor, grid_w * factor);
    let f = factor as f64;
    let sample = |gy: usize, gx: usize| grid[gy * grid_w + gx];
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        // Output pixel centers mapped into grid-cell-center coordinates.
        let sy = ((y as f64 + 0.5) / f - 0.5).clamp(0.0, (grid_h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(grid_h - 1);
        let ty = sy - y0 as f64;
        for x in 0..ow {
            let sx = ((x as f64 + 0.5) / f - 0.5).clamp(0.0, (grid_w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(grid_w - 1);
            let tx = sx - x0 as f64;
            let top = sample(y0, x0) * (1.0 - tx) + sample(y0, x1) * tx;
            let bot = sample(y1, x0) * (1.0 - tx) + sample(y1, x1) * tx;
            out[y * ow + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    Ok(out)
}

fn check_grid(grid: &[f64], h: usize, w: usize, factor: usize) -> Result<(), VizError> {
    if grid.len() != h * w {
        return Err(VizError::GridMismatch {
            len: grid.len(),
            h,
            w,
        });
    }
    if factor == 0 {
        return Err(VizError::BadFactor);
    }
    Ok(())
}

/// Quantizes [0, 1] gray values to bytes and wraps them as a PGM.
pub fn gray_to_pgm(gray: &[f64], width: usize, height: usize) -> Result<Vec<u8>, VizError> {
    let bytes: Vec<u8> = gray
        .iter()
        .map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8)
        .collect();
    Ok(encode_pgm(width, height, &bytes)?)
}

/// Full pipeline from one attention row to PGM bytes at canvas resolution.
pub fn render_attention(
    row: &[f64],
    grid_h: usize,
    grid_w: usize,
    patch: usize,
    scale: f64,
    bilinear: bool,
) -> Result<Vec<u8>, VizError> {
    let gray = attention_gray(row, grid_h, grid_w, scale)?;
    let up = if bilinear {
        upsample_bilinear(&gray, grid_h, grid_w, patch)?
    } else {
        upsample_nearest(&gray, grid_h, grid_w, patch)?
    };
    gray_to_pgm(&up, grid_w * patch, grid_h * patch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ppm::decode_pgm;

    #[test]
    fn uniform_attention_lands_on_the_reference_gray() {
        // 1/36 over a 6x6 grid at the default display scale 0.06:
        // (1/36)/0.06 = 0.46296, round(255 * 0.46296) = 118.
        let row = vec![1.0 / 36.0; 36];
        let pgm = render_attention(&row, 6, 6, 8, 0.06, false).unwrap();
        let (w, h, gray) = decode_pgm(&pgm).unwrap();
        assert_eq!((w, h), (48, 48));
        assert!(gray.iter().all(|&g| g == 118), "expected flat 118");
    }

    #[test]
    fn one_hot_row_renders_a_single_white_block() {
        let mut row = vec![0.0; 9];
        row[4] = 1.0;
        let pgm = render_attention(&row, 3, 3, 4, 1.0, false).unwrap();
        let (w, h, gray) = decode_pgm(&pgm).unwrap();
        assert_eq!((w, h), (12, 12));
        for y in 0..12 {
            for x in 0..12 {
                let expect = if (4..8).contains(&y) && (4..8).contains(&x) {
                    255
                } else {
                    0
                };
                assert_eq!(gray[y * 12 + x], expect, "pixel ({y},{x})");
            }
        }
    }

    #[test]
    fn values_above_scale_saturate() {
        let gray = attention_gray(&[0.5, 0.03, 0.06], 1, 3, 0.06).unwrap();
        assert_eq!(gray, vec![1.0, 0.5, 1.0]);
    }

    #[test]
    fn nearest_replicates_exact_blocks() {
        let up = upsample_nearest(&[0.0, 1.0, 0.25, 0.75], 2, 2, 2).unwrap();
        assert_eq!(
            up,
            vec![
                0.0, 0.0, 1.0, 1.0, //
                0.0, 0.0, 1.0, 1.0, //
                0.25, 0.25, 0.75, 0.75, //
                0.25, 0.25, 0.75, 0.75,
            ]
        );
    }

    #[test]
    fn bilinear_interpolates_between_cell_centers_and_preserves_range() {
        let up = upsample_bilinear(&[0.0, 1.0], 1, 2, 4).unwrap();
        assert_eq!(up.len(), 32);
        // Monotone left to right, endpoints clamped to the cell values.
        for x in 0..7 {
            assert!(up[x] <= up[x + 1] + 1e-12);
        }
        assert_eq!(up[0], 0.0);
        assert_eq!(up[7], 1.0);
        // Midpoint between the two cell centers interpolates evenly.
        assert!((up[3] - 0.375).abs() < 1e-12);
        assert!((up[4] - 0.625).abs() < 1e-12);
        // Constant input stays constant.
        let flat = upsample_bilinear(&[0.6; 6], 2, 3, 5).unwrap();
        assert!(flat.iter().all(|v| (v - 0.6).abs() < 1e-12));
    }

    #[test]
    fn head_mean_is_linear_in_the_inputs() {
        // Rendering the mean of two rows equals averaging their gray values
        // to within one quantization level, provided nothing clips.
        let a = vec![0.01, 0.02, 0.03, 0.04];
        let b = vec![0.05, 0.02, 0.01, 0.0];
        let mean: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x + y) / 2.0).collect();
        let scale = 0.06;
        let ga = attention_gray(&a, 2, 2, scale).unwrap();
        let gb = attention_gray(&b, 2, 2, scale).unwrap();
        let gm = attention_gray(&mean, 2, 2, scale).unwrap();
        for i in 0..4 {
            let avg = (ga[i] + gb[i]) / 2.0;
            assert!((255.0 * (gm[i] - avg)).abs() <= 1.0);
        }
    }

    #[test]
    fn rejects_bad_rows_and_scales() {
        assert!(matches!(
            attention_gray(&[0.0; 5], 2, 3, 0.06),
            Err(VizError::GridMismatch { len: 5, h: 2, w: 3 })
        ));
        assert!(matches!(
            attention_gray(&[0.0; 6], 2, 3, 0.0),
            Err(VizError::BadScale(_))
        ));
        assert!(matches!(
            upsample_nearest(&[0.0; 6], 2, 3, 0),
            Err(VizError::BadFactor)
        ));
    }
}
