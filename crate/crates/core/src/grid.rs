//! Periodic spatial grids and the batched spectral engine.
//!
//! Fields live on `[0, L)^dim` with `n` points per axis (power of two) stored
//! flat in row-major order. The frequency lattice is `xi_k = 2 pi k / L` with
//! `k` in `[-n/2, n/2)` per axis, kept in FFT storage order.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    /// Spatial dimension, 1 (smoke tests only), 2 or 3.
    pub dim: usize,
    /// Points per axis; power of two.
    pub n: usize,
    /// Box side length.
    pub len: f64,
}

impl Grid {
    pub fn new(dim: usize, n: usize, len: f64) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(CoreError::InvalidParameter(format!("dim {dim} not in 1..=3")));
        }
        if !n.is_power_of_two() || n < 4 {
            return Err(CoreError::InvalidParameter(format!(
                "n = {n} must be a power of two >= 4"
            )));
        }
        if !(len > 0.0) {
            return Err(CoreError::InvalidParameter(format!("box length {len} <= 0")));
        }
        Ok(Grid { dim, n, len })
    }

    /// Total number of grid points / lattice modes.
    pub fn size(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    /// Frequency lattice spacing per axis.
    pub fn dxi(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.len
    }

    /// Lattice cell measure in frequency space, (2 pi / L)^dim.
    pub fn dxi_measure(&self) -> f64 {
        self.dxi().powi(self.dim as i32)
    }

    /// Grid spacing per axis.
    pub fn dx(&self) -> f64 {
        self.len / self.n as f64
    }

    /// Spatial cell measure.
    pub fn dx_measure(&self) -> f64 {
        self.dx().powi(self.dim as i32)
    }

    /// Signed integer index of an axis position in FFT storage order.
    #[inline]
    pub fn signed_index(&self, k: usize) -> i64 {
        if k < self.n / 2 {
            k as i64
        } else {
            k as i64 - self.n as i64
        }
    }

    /// Frequency component for one storage index.
    #[inline]
    pub fn freq_1d(&self, k: usize) -> f64 {
        self.signed_index(k) as f64 * self.dxi()
    }

    /// Decompose a flat index into per-axis storage indices (row-major).
    #[inline]
    pub fn unravel(&self, flat: usize) -> [usize; 3] {
        let n = self.n;
        match self.dim {
            1 => [flat, 0, 0],
            2 => [flat / n, flat % n, 0],
            _ => [flat / (n * n), (flat / n) % n, flat % n],
        }
    }

    /// Frequency vector (padded with zeros above `dim`) for a flat index.
    #[inline]
    pub fn xi(&self, flat: usize) -> [f64; 3] {
        let idx = self.unravel(flat);
        let mut v = [0.0; 3];
        for (a, out) in v.iter_mut().enumerate().take(self.dim) {
            *out = self.freq_1d(idx[a]);
        }
        v
    }

    /// |xi|^2 for a flat index.
    #[inline]
    pub fn xi_abs2(&self, flat: usize) -> f64 {
        let v = self.xi(flat);
        v[0] * v[0] + v[1] * v[1] + v[2] * v[2]
    }

    /// Largest per-axis frequency magnitude (Nyquist edge).
    pub fn nyquist(&self) -> f64 {
        std::f64::consts::PI * self.n as f64 / self.len
    }

    /// Flat index of the lattice mode with signed per-axis indices `k`,
    /// or None if any component is outside `[-n/2, n/2)`.
    pub fn flat_of_signed(&self, k: [i64; 3]) -> Option<usize> {
        let n = self.n as i64;
        let mut flat = 0usize;
        for a in 0..self.dim {
            let ka = k[a];
            if ka < -n / 2 || ka >= n / 2 {
                return None;
            }
            let st = if ka >= 0 { ka } else { ka + n } as usize;
            flat = flat * self.n + st;
        }
        Some(flat)
    }

    /// Check that a wavevector lies on the lattice, returning its flat index.
    pub fn lattice_index(&self, xi: [f64; 3]) -> Result<usize> {
        let dxi = self.dxi();
        let mut k = [0i64; 3];
        for a in 0..self.dim {
            let f = xi[a] / dxi;
            let r = f.round();
            if (f - r).abs() > 1e-9 * (1.0 + f.abs()) {
                return Err(CoreError::OffLatticeFrequency { xi });
            }
            k[a] = r as i64;
        }
        self.flat_of_signed(k)
            .ok_or(CoreError::OffLatticeFrequency { xi })
    }
}

/// Cached FFT plans and scratch for one grid.
///
/// Conventions: `forward` is the unnormalized analysis DFT
/// `X_k = sum_j x_j e^{-i xi_k . x_j}`; `inverse` applies the unnormalized
/// synthesis sum and divides by the total size so that inverse(forward) = id.
/// `synthesize` is the bare synthesis sum `u(x_j) = sum_k c_k e^{i xi_k . x_j}`
/// used to realize fields from spectral coefficients.
pub struct SpectralEngine {
    pub grid: Grid,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl SpectralEngine {
    pub fn new(grid: Grid) -> Self {
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(grid.n);
        let inv = planner.plan_fft_inverse(grid.n);
        SpectralEngine { grid, fwd, inv }
    }

    fn apply_axes(&self, data: &mut [Complex64], plan: &Arc<dyn Fft<f64>>) {
        let n = self.grid.n;
        let total = self.grid.size();
        debug_assert_eq!(data.len(), total);
        let mut scratch = vec![Complex64::default(); plan.get_inplace_scratch_len()];
        // last axis: contiguous rows
        for chunk in data.chunks_exact_mut(n) {
            plan.process_with_scratch(chunk, &mut scratch);
        }
        // remaining axes: gather strided lanes
        let mut lane = vec![Complex64::default(); n];
        for axis in 0..self.grid.dim - 1 {
            let stride = n.pow((self.grid.dim - 1 - axis) as u32);
            let lanes = total / n;
            for l in 0..lanes {
                // index of lane start: iterate all positions with axis-index 0
                let block = l / stride;
                let offset = l % stride;
                let start = block * stride * n + offset;
                for (i, v) in lane.iter_mut().enumerate() {
                    *v = data[start + i * stride];
                }
                plan.process_with_scratch(&mut lane, &mut scratch);
                for (i, v) in lane.iter().enumerate() {
                    data[start + i * stride] = *v;
                }
            }
        }
    }

    /// Unnormalized analysis transform, in place.
    pub fn forward(&self, data: &mut [Complex64]) {
        self.apply_axes(data, &self.fwd);
    }

    /// Normalized inverse: inverse(forward(u)) == u.
    pub fn inverse(&self, data: &mut [Complex64]) {
        self.apply_axes(data, &self.inv);
        let scale = 1.0 / self.grid.size() as f64;
        for v in data.iter_mut() {
            *v *= scale;
        }
    }

    /// Bare synthesis sum from spectral coefficients, in place.
    pub fn synthesize(&self, data: &mut [Complex64]) {
        self.apply_axes(data, &self.inv);
    }

    /// Synthesis coefficients of a field: forward / size.
    pub fn coefficients(&self, data: &mut [Complex64]) {
        self.apply_axes(data, &self.fwd);
        let scale = 1.0 / self.grid.size() as f64;
        for v in data.iter_mut() {
            *v *= scale;
        }
    }

    /// Apply a spectral multiplier `m(flat mode index)` to a physical-space field.
    pub fn apply_multiplier<F: Fn(usize) -> Complex64>(&self, data: &mut [Complex64], m: F) {
        self.forward(data);
        for (k, v) in data.iter_mut().enumerate() {
            *v *= m(k);
        }
        self.inverse(data);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip(dim: usize, n: usize) {
        let grid = Grid::new(dim, n, 7.5).unwrap();
        let eng = SpectralEngine::new(grid);
        let mut data: Vec<Complex64> = (0..grid.size())
            .map(|i| {
                let x = (i as f64 * 0.7391).sin();
                let y = (i as f64 * 1.3921 + 0.4).cos();
                Complex64::new(x, y)
            })
            .collect();
        let orig = data.clone();
        eng.forward(&mut data);
        eng.inverse(&mut data);
        let scale: f64 = orig.iter().map(|v| v.norm()).fold(0.0, f64::max);
        for (a, b) in data.iter().zip(&orig) {
            assert!((a - b).norm() <= 1e-12 * scale);
        }
    }

    #[test]
    fn fft_roundtrip_all_dims() {
        roundtrip(1, 64);
        roundtrip(2, 16);
        roundtrip(3, 8);
    }

    #[test]
    fn synthesis_of_plane_wave() {
        let grid = Grid::new(2, 8, 4.0).unwrap();
        let eng = SpectralEngine::new(grid);
        // coefficient 1 at mode k=(1, -2)
        let flat = grid.flat_of_signed([1, -2, 0]).unwrap();
        let mut c = vec![Complex64::default(); grid.size()];
        c[flat] = Complex64::new(1.0, 0.0);
        eng.synthesize(&mut c);
        let xi = grid.xi(flat);
        let dx = grid.dx();
        for j in 0..grid.size() {
            let idx = grid.unravel(j);
            let x = [idx[0] as f64 * dx, idx[1] as f64 * dx];
            let expect = Complex64::from_polar(1.0, xi[0] * x[0] + xi[1] * x[1]);
            assert!((c[j] - expect).norm() < 1e-12);
        }
    }

    #[test]
    fn frequency_lattice_symmetric() {
        let grid = Grid::new(3, 8, 3.0).unwrap();
        // every mode except the Nyquist rows has its negative on the lattice
        let mut count = 0;
        for flat in 0..grid.size() {
            let idx = grid.unravel(flat);
            if (0..3).any(|a| idx[a] == grid.n / 2) {
                continue;
            }
            let k: Vec<i64> = (0..3).map(|a| -grid.signed_index(idx[a])).collect();
            assert!(grid.flat_of_signed([k[0], k[1], k[2]]).is_some());
            count += 1;
        }
        assert!(count > 0);
    }

    #[test]
    fn off_lattice_rejected() {
        let grid = Grid::new(2, 8, 4.0).unwrap();
        let dxi = grid.dxi();
        assert!(grid.lattice_index([dxi, -2.0 * dxi, 0.0]).is_ok());
        assert!(matches!(
            grid.lattice_index([0.5 * dxi, 0.0, 0.0]),
            Err(CoreError::OffLatticeFrequency { .. })
        ));
    }
}
