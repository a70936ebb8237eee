//! Fourier time conditioning.
//!
//! The score network and both guidance classifiers consume the diffusion
//! time through a fixed feature map appended to each row:
//! `[t, sin(2πkt), cos(2πkt) for k = 1..8]`, 17 extra dimensions in total.

use alloc::vec::Vec;
use ndarray::{Array2, ArrayView2};

/// Number of harmonics.
const HARMONICS: usize = 8;

/// Width of the time-feature block.
pub const TIME_FEATURES: usize = 1 + 2 * HARMONICS;

/// Writes the 17 time features for `t` into `out`.
pub fn time_features(t: f32, out: &mut [f32]) {
    debug_assert_eq!(out.len(), TIME_FEATURES);
    out[0] = t;
    let tau = 2.0 * core::f32::consts::PI * t;
    for k in 1..=HARMONICS {
        let (s, c) = libm::sincosf(tau * k as f32);
        out[2 * k - 1] = s;
        out[2 * k] = c;
    }
}

/// Single row + time → augmented row of width `x.len() + TIME_FEATURES`.
pub fn augment_row(x: &[f32], t: f32) -> Vec<f32> {
    let mut row = Vec::with_capacity(x.len() + TIME_FEATURES);
    row.extend_from_slice(x);
    row.resize(x.len() + TIME_FEATURES, 0.0);
    let p = x.len();
    time_features(t, &mut row[p..]);
    row
}

/// Batch version with a per-row time.
pub fn augment_batch(x: ArrayView2<f32>, t: &[f32]) -> Array2<f32> {
    debug_assert_eq!(x.nrows(), t.len());
    let (n, p) = (x.nrows(), x.ncols());
    let mut out = Array2::zeros((n, p + TIME_FEATURES));
    for i in 0..n {
        let mut row = out.row_mut(i);
        let row = row.as_slice_mut().unwrap();
        for j in 0..p {
            row[j] = x[[i, j]];
        }
        time_features(t[i], &mut row[p..]);
    }
    out
}
