//! 2D sine-cosine position encodings for the spatial feature grid.
//!
//! The first half of each vector encodes the row index, the second half the
//! column index; within a half, channels alternate sin/cos over a geometric
//! frequency ladder. Deterministic in (h, w, d, temperature).

use thiserror::Error;

use crate::tensor::{Scalar, Tensor};

/// Frequency base of the encoding ladder.
pub const DEFAULT_TEMPERATURE: f64 = 10_000.0;

#[derive(Debug, Error)]
pub enum PositionError {
    #[error("encoding width {0} not divisible by 4 (two axes x sin/cos pairs)")]
    WidthNotDivisibleBy4(usize),
    #[error("empty grid {h}x{w}")]
    EmptyGrid { h: usize, w: usize },
}

/// Per-cell position vectors for an `h` x `w` grid, flattened row-major
/// into a `[h*w, d]` table.
#[derive(Debug, Clone)]
pub struct SpatialPositionEncoding<S: Scalar> {
    h: usize,
    w: usize,
    table: Tensor<S>,
}

impl<S: Scalar> SpatialPositionEncoding<S> {
    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    /// The `[h*w, d]` encoding table, a constant (never trainable).
    pub fn table(&self) -> &Tensor<S> {
        &self.table
    }
}

/// Builds the encoding for an `h` x `w` grid of `d`-dimensional vectors.
///
/// Channel `2i` of a half is `sin(p * omega_i)` and `2i+1` is
/// `cos(p * omega_i)` with `omega_i = temperature^(-2i / (d/2))`, where `p`
/// is the row index for the first half and the column index for the second.
pub fn sincos_2d<S: Scalar>(
    h: usize,
    w: usize,
    d: usize,
    temperature: f64,
) -> Result<SpatialPositionEncoding<S>, PositionError> {
    if d == 0 || d % 4 != 0 {
        return Err(PositionError::WidthNotDivisibleBy4(d));
    }
    if h == 0 || w == 0 {
        return Err(PositionError::EmptyGrid { h, w });
    }
    let half = d / 2;
    let pairs = half / 2;
    let omegas: Vec<f64> = (0..pairs)
        .map(|i| temperature.powf(-((2 * i) as f64) / half as f64))
        .collect();
    let mut data = Vec::with_capacity(h * w * d);
    for y in 0..h {
        for x in 0..w {
            for (p, half_len) in [(y as f64, half), (x as f64, half)] {
                debug_assert_eq!(half_len, 2 * pairs);
                for &omega in &omegas {
                    data.push(S::from_f64((p * omega).sin()));
                    data.push(S::from_f64((p * omega).cos()));
                }
            }
        }
    }
    let table = Tensor::from_vec(&[h * w, d], data).expect("table sized by construction");
    Ok(SpatialPositionEncoding { h, w, table })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build(h: usize, w: usize, d: usize) -> SpatialPositionEncoding<f64> {
        sincos_2d(h, w, d, DEFAULT_TEMPERATURE).unwrap()
    }

    #[test]
    fn origin_cell_is_pure_cosine() {
        let pe = build(3, 3, 8);
        let row = &pe.table().data()[0..8];
        for pair in row.chunks(2) {
            assert_eq!(pair[0], 0.0);
            assert_eq!(pair[1], 1.0);
        }
    }

    #[test]
    fn axes_are_separable() {
        let pe = build(4, 5, 12);
        let d = 12;
        let half = d / 2;
        let cell = |y: usize, x: usize| &pe.table().data()[(y * 5 + x) * d..(y * 5 + x + 1) * d];
        // Moving along x keeps the row half fixed; moving along y keeps the
        // column half fixed.
        assert_eq!(&cell(2, 0)[..half], &cell(2, 4)[..half]);
        assert_eq!(&cell(0, 3)[half..], &cell(3, 3)[half..]);
        assert_ne!(&cell(2, 0)[half..], &cell(2, 4)[half..]);
        assert_ne!(&cell(0, 3)[..half], &cell(3, 3)[..half]);
    }

    #[test]
    fn entries_stay_in_unit_range() {
        for (h, w, d) in [(1, 1, 4), (7, 3, 16), (6, 6, 64), (13, 2, 32)] {
            let pe = build(h, w, d);
            assert!(pe.table().data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn distinct_cells_get_distinct_vectors() {
        let (h, w, d) = (6, 6, 64);
        let pe = build(h, w, d);
        let rows: Vec<&[f64]> = pe.table().data().chunks(d).collect();
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                assert_ne!(rows[i], rows[j], "cells {i} and {j} collide");
            }
        }
    }

    #[test]
    fn deterministic_in_inputs() {
        let a = build(5, 4, 16);
        let b = build(5, 4, 16);
        let bits = |t: &SpatialPositionEncoding<f64>| {
            t.table().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn rejects_bad_widths() {
        assert!(matches!(
            sincos_2d::<f32>(2, 2, 6, DEFAULT_TEMPERATURE),
            Err(PositionError::WidthNotDivisibleBy4(6))
        ));
        assert!(sincos_2d::<f32>(2, 2, 0, DEFAULT_TEMPERATURE).is_err());
        assert!(sincos_2d::<f32>(0, 2, 4, DEFAULT_TEMPERATURE).is_err());
    }

    #[test]
    fn table_is_not_trainable() {
        assert!(!build(2, 2, 4).table().requires_grad());
    }
}
