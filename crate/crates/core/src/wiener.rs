//! Counter-based Gaussian coefficients for the discretized Wiener integral.
//!
//! Every coefficient is a pure function of `(seed, realization, mode)`, so
//! regeneration is bit-identical and realizations can be produced in any
//! order by any number of workers. The counter contract is part of the
//! public interface and versioned through `COUNTER_CONTRACT_VERSION`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

/// Version tag of the (seed, realization, mode) -> coefficient map.
pub const COUNTER_CONTRACT_VERSION: u32 = 1;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const MIX_R: u64 = 0xC2B2_AE3D_27D4_EB4F;
const MIX_S: u64 = 0x1656_67B1_9E37_79F9;

#[inline]
fn splitmix_finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64-bit counter hash of the full key; two finalizer rounds.
#[inline]
pub fn counter_hash(seed: u64, realization: u64, mode: u64, slot: u64) -> u64 {
    let z = seed
        .wrapping_add(GOLDEN.wrapping_mul(realization.wrapping_add(1)))
        .wrapping_add(MIX_R.wrapping_mul(mode.wrapping_add(1)))
        .wrapping_add(MIX_S.wrapping_mul(slot.wrapping_add(1)));
    splitmix_finalize(splitmix_finalize(z))
}

/// Uniform in (0, 1]: (x + 1) / 2^64 on the top 53 bits.
#[inline]
fn to_unit(x: u64) -> f64 {
    ((x >> 11) + 1) as f64 * (1.0 / 9007199254740992.0)
}

/// Standard complex Gaussian, E g = 0, E|g|^2 = 1, via the polar form.
#[inline]
pub fn standard_complex_gaussian(seed: u64, realization: u64, mode: u64) -> Complex64 {
    let u1 = to_unit(counter_hash(seed, realization, mode, 0));
    let u2 = to_unit(counter_hash(seed, realization, mode, 1));
    let r = (-u1.ln()).sqrt();
    Complex64::from_polar(r, 2.0 * std::f64::consts::PI * u2)
}

/// Provenance of one sampled ensemble: the Wiener coefficients are
/// `g[realization][mode] = standard_complex_gaussian(seed, realization, mode)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WienerSample {
    pub seed: u64,
    /// Ensemble size N.
    pub n_realizations: usize,
}

impl WienerSample {
    pub fn new(seed: u64, n_realizations: usize) -> Self {
        WienerSample {
            seed,
            n_realizations,
        }
    }

    #[inline]
    pub fn coefficient(&self, realization: usize, mode: usize) -> Complex64 {
        standard_complex_gaussian(self.seed, realization as u64, mode as u64)
    }

    /// All coefficients of one realization for `n_modes` lattice modes.
    pub fn realization_coefficients(&self, realization: usize, n_modes: usize) -> Vec<Complex64> {
        (0..n_modes)
            .map(|m| self.coefficient(realization, m))
            .collect()
    }
}
