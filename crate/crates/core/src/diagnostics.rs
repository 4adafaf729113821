//! Discrete function-space norms, Strichartz-ratio checks, density-operator
//! construction with weighted Schatten norms, and the density-matrix
//! scattering check.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::field::{EnsembleField, SpaceTimePotential};
use crate::grid::{Grid, SpectralEngine};
use crate::profiles::MomentumDistribution;

/// A discrete L^p_t W^{s,q}_x norm with the L^2_omega reduction either inside
/// (L^p_t L^q_x L^2_omega) or outside (L^2_omega L^p_t L^q_x).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NormSpec {
    pub p: f64,
    pub q: f64,
    /// Bessel weight exponent; <xi>^s applied spectrally.
    pub s: f64,
    pub omega_inside: bool,
}

impl NormSpec {
    pub fn space_time(p: f64, q: f64) -> Self {
        NormSpec {
            p,
            q,
            s: 0.0,
            omega_inside: true,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.p < 1.0 || self.q < 1.0 {
            return Err(CoreError::InvalidParameter(format!(
                "norm exponents must be >= 1, got p={} q={}",
                self.p, self.q
            )));
        }
        Ok(())
    }
}

fn lp_reduce(values: impl Iterator<Item = (f64, f64)>, p: f64) -> f64 {
    // values yields (weighted measure, magnitude)
    if p.is_infinite() {
        values.fold(0.0, |a, (_, v)| a.max(v))
    } else {
        let mut acc = 0.0;
        for (w, v) in values {
            acc += w * v.powf(p);
        }
        acc.powf(1.0 / p)
    }
}

fn bessel_weight_inplace(field: &mut [Complex64], grid: &Grid, s: f64, engine: &SpectralEngine) {
    if s == 0.0 {
        return;
    }
    let size = grid.size();
    let mult: Vec<f64> = (0..size).map(|k| (1.0 + grid.xi_abs2(k)).powf(s / 2.0)).collect();
    field.par_chunks_mut(size).for_each(|chunk| {
        engine.forward(chunk);
        for (c, m) in chunk.iter_mut().zip(&mult) {
            *c *= *m;
        }
        engine.inverse(chunk);
    });
}

fn time_weight(j: usize, n: usize) -> f64 {
    if n == 1 {
        1.0
    } else if j == 0 || j == n - 1 {
        0.5
    } else {
        1.0
    }
}

/// Norm of an ensemble history (one field per time node, uniform spacing dt).
pub fn ensemble_spacetime_norm(
    history: &[EnsembleField],
    spec: &NormSpec,
    dt: f64,
    engine: &SpectralEngine,
) -> Result<f64> {
    spec.validate()?;
    if history.is_empty() {
        return Ok(0.0);
    }
    let grid = history[0].grid;
    let s = grid.size();
    let n = history[0].n_realizations;
    let dx_meas = grid.dx_measure();
    let n_t = history.len();

    if spec.omega_inside {
        // L^p_t L^q_x L^2_omega
        let per_time: Vec<f64> = history
            .iter()
            .map(|field| {
                let mut work = field.values.clone();
                bessel_weight_inplace(&mut work, &grid, spec.s, engine);
                // pointwise rms over omega
                let rms: Vec<f64> = (0..s)
                    .into_par_iter()
                    .map(|x| {
                        let mut acc = 0.0;
                        for r in 0..n {
                            acc += work[r * s + x].norm_sqr();
                        }
                        (acc / n as f64).sqrt()
                    })
                    .collect();
                lp_reduce(rms.iter().map(|&v| (dx_meas, v)), spec.q)
            })
            .collect();
        Ok(lp_reduce(
            per_time
                .iter()
                .enumerate()
                .map(|(j, &v)| (time_weight(j, n_t) * dt, v)),
            spec.p,
        ))
    } else {
        // L^2_omega L^p_t L^q_x
        let per_real: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|r| {
                let per_time: Vec<f64> = history
                    .iter()
                    .map(|field| {
                        let mut work = field.realization(r).to_vec();
                        bessel_weight_inplace(&mut work, &grid, spec.s, engine);
                        lp_reduce(work.iter().map(|z| (dx_meas, z.norm())), spec.q)
                    })
                    .collect();
                lp_reduce(
                    per_time
                        .iter()
                        .enumerate()
                        .map(|(j, &v)| (time_weight(j, n_t) * dt, v)),
                    spec.p,
                )
            })
            .collect();
        Ok((per_real.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt())
    }
}

/// Norm of a real space-time potential (no omega axis).
pub fn potential_spacetime_norm(
    v: &SpaceTimePotential,
    spec: &NormSpec,
    engine: &SpectralEngine,
) -> Result<f64> {
    spec.validate()?;
    let grid = v.grid;
    let s = grid.size();
    let dx_meas = grid.dx_measure();
    let per_time: Vec<f64> = (0..v.n_time)
        .map(|j| {
            let mut work: Vec<Complex64> = v.at(j).iter().map(|&x| Complex64::new(x, 0.0)).collect();
            bessel_weight_inplace(&mut work, &grid, spec.s, engine);
            lp_reduce((0..s).map(|x| (dx_meas, work[x].norm())), spec.q)
        })
        .collect();
    Ok(lp_reduce(
        per_time
            .iter()
            .enumerate()
            .map(|(j, &val)| (time_weight(j, v.n_time) * v.dt, val)),
        spec.p,
    ))
}

/// Check the Strichartz admissibility relation 2/p + d/q = d/2 - s.
pub fn strichartz_admissible(p: f64, q: f64, s: f64, dim: usize) -> bool {
    let lhs = 2.0 / p + dim as f64 / q;
    let rhs = dim as f64 / 2.0 - s;
    (lhs - rhs).abs() <= 1e-9
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrichartzPoint {
    pub n: usize,
    pub ratio: f64,
    pub numerator: f64,
    pub denominator: f64,
    pub degenerate: bool,
}

/// ||S(t) Z_0||_{L^p_t L^q_x L^2_omega} / || |grad|^s Z_0 ||_{L^2_{x,omega}}
/// across a resolution ladder; the free flight is exact (spectral phases).
pub fn strichartz_ratio<F>(
    make_z0: F,
    grids: &[Grid],
    p: f64,
    q: f64,
    s: f64,
    n_time: usize,
    dt: f64,
    m: f64,
) -> Result<Vec<StrichartzPoint>>
where
    F: Fn(&Grid, &SpectralEngine) -> Result<EnsembleField>,
{
    if grids.is_empty() {
        return Ok(vec![]);
    }
    if !strichartz_admissible(p, q, s, grids[0].dim) {
        return Err(CoreError::InadmissibleExponents {
            p,
            q,
            s,
            dim: grids[0].dim,
        });
    }
    let mut out = Vec::new();
    for grid in grids {
        let engine = SpectralEngine::new(*grid);
        let z0 = make_z0(grid, &engine)?;
        // denominator: homogeneous |grad|^s in L^2_{x, omega}
        let size = grid.size();
        let n = z0.n_realizations;
        let mut spectra = z0.values.clone();
        spectra.par_chunks_mut(size).for_each(|chunk| {
            engine.coefficients(chunk);
        });
        let mut denom_sq = 0.0;
        for r in 0..n {
            for k in 0..size {
                let w = grid.xi_abs2(k).powf(s);
                denom_sq += w * spectra[r * size + k].norm_sqr();
            }
        }
        // Parseval on the torus: ||u||_{L^2_x}^2 = L^d sum |u_hat_synth|^2
        let denom = (denom_sq * grid.len.powi(grid.dim as i32) / n as f64).sqrt();

        let history: Vec<EnsembleField> = (0..n_time)
            .map(|j| crate::field::free_propagate(&z0, &engine, j as f64 * dt, m))
            .collect();
        let numerator = ensemble_spacetime_norm(
            &history,
            &NormSpec {
                p,
                q,
                s: 0.0,
                omega_inside: true,
            },
            dt,
            &engine,
        )?;
        let degenerate = denom < 1e-300;
        out.push(StrichartzPoint {
            n: grid.n,
            ratio: if degenerate { f64::NAN } else { numerator / denom },
            numerator,
            denominator: denom,
            degenerate,
        });
    }
    Ok(out)
}

/// Finite density matrix on a truncated Fourier basis.
/// gamma[a][b] = E( x_hat_{k_a} conj(x_hat_{k_b}) ) / dxi^d, so that the
/// equilibrium ensemble converges to the multiplier diag(f^2(xi_k)).
#[derive(Debug, Clone)]
pub struct DensityOperator {
    pub grid: Grid,
    /// flat lattice indices of the retained modes
    pub modes: Vec<usize>,
    pub xi_abs: Vec<f64>,
    pub matrix: DMatrix<Complex64>,
    /// 1 / dxi^d, the lattice normalization making gamma_f the f^2 multiplier
    pub normalization: f64,
}

/// Modes with |xi| <= xi_cut, excluding the asymmetric Nyquist rows.
pub fn truncated_modes(grid: &Grid, xi_cut: f64) -> Result<Vec<usize>> {
    let max_allowed = (grid.n as f64 / 2.0 - 1.0) * grid.dxi();
    if xi_cut > max_allowed * (1.0 + 1e-12) {
        return Err(CoreError::CutoffTooLarge {
            cutoff: xi_cut,
            max: max_allowed,
        });
    }
    let mut modes = Vec::new();
    for k in 0..grid.size() {
        let idx = grid.unravel(k);
        let nyq = (0..grid.dim).any(|a| idx[a] == grid.n / 2);
        if !nyq && grid.xi_abs2(k).sqrt() <= xi_cut {
            modes.push(k);
        }
    }
    Ok(modes)
}

/// Truncated synthesis-coefficient matrix (modes x realizations).
pub fn truncated_coefficients(
    field: &EnsembleField,
    modes: &[usize],
    engine: &SpectralEngine,
) -> DMatrix<Complex64> {
    let s = field.grid.size();
    let n = field.n_realizations;
    let mut spectra = field.values.clone();
    spectra.par_chunks_mut(s).for_each(|chunk| {
        engine.coefficients(chunk);
    });
    DMatrix::from_fn(modes.len(), n, |a, r| spectra[r * s + modes[a]])
}

pub fn build_density_operator(
    field: &EnsembleField,
    xi_cut: f64,
    engine: &SpectralEngine,
) -> Result<DensityOperator> {
    let grid = field.grid;
    let modes = truncated_modes(&grid, xi_cut)?;
    let coeffs = truncated_coefficients(field, &modes, engine);
    let n = field.n_realizations as f64;
    let normalization = 1.0 / grid.dxi_measure();
    let matrix = (&coeffs * coeffs.adjoint()) * Complex64::new(normalization / n, 0.0);
    let xi_abs = modes.iter().map(|&k| grid.xi_abs2(k).sqrt()).collect();
    Ok(DensityOperator {
        grid,
        modes,
        xi_abs,
        matrix,
        normalization,
    })
}

fn lp_of_singular_values(sv: &[f64], p: f64) -> f64 {
    if p.is_infinite() {
        sv.iter().fold(0.0f64, |a, &b| a.max(b))
    } else {
        sv.iter().map(|v| v.powf(p)).sum::<f64>().powf(1.0 / p)
    }
}

/// Weighted Schatten norm || <grad>^s gamma <grad>^s ||_{S^p} by dense SVD.
pub fn schatten_norm(op: &DensityOperator, p: f64, s: f64) -> Result<f64> {
    if p < 1.0 {
        return Err(CoreError::InvalidParameter(format!("Schatten p must be >= 1, got {p}")));
    }
    let weights: Vec<f64> = op.xi_abs.iter().map(|&x| (1.0 + x * x).powf(s / 2.0)).collect();
    let mut mat = op.matrix.clone();
    let dim = mat.nrows();
    for a in 0..dim {
        for b in 0..dim {
            mat[(a, b)] *= Complex64::new(weights[a] * weights[b], 0.0);
        }
    }
    let svd = mat.try_svd(false, false, 1e-12, 10_000).ok_or(CoreError::SvdFailure)?;
    let sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    Ok(lp_of_singular_values(&sv, p))
}

/// Weighted Schatten norm of the Hermitian low-rank form C M C^H without
/// materializing the full matrix: thin QR of the weighted factor, then a
/// small Hermitian eigenproblem.
pub fn schatten_norm_factored(
    c: &DMatrix<Complex64>,
    m: &DMatrix<Complex64>,
    weights: &[f64],
    p: f64,
) -> Result<f64> {
    if p < 1.0 {
        return Err(CoreError::InvalidParameter(format!("Schatten p must be >= 1, got {p}")));
    }
    let mut wc = c.clone();
    for (a, w) in weights.iter().enumerate() {
        for b in 0..wc.ncols() {
            wc[(a, b)] *= Complex64::new(*w, 0.0);
        }
    }
    let qr = wc.qr();
    let r = qr.r();
    let small = &r * m * r.adjoint();
    let eig = small.symmetric_eigen();
    let sv: Vec<f64> = eig.eigenvalues.iter().map(|v| v.abs()).collect();
    Ok(lp_of_singular_values(&sv, p))
}

/// The scattering wave operator on the truncated basis:
/// W_{V,+} = -i int_0^T S(-tau) V(tau) S(tau) dtau (trapezoid in tau).
/// Multiplication by V couples modes through the synthesis coefficients of V.
pub fn wave_operator_matrix(
    v: &SpaceTimePotential,
    modes: &[usize],
    m: f64,
    engine: &SpectralEngine,
) -> DMatrix<Complex64> {
    let grid = v.grid;
    let s = grid.size();
    let dim = modes.len();
    let dt = v.dt;
    // synthesis coefficients of every time slice
    let mut v_hat = vec![Complex64::default(); v.n_time * s];
    v_hat.par_chunks_mut(s).enumerate().for_each(|(j, chunk)| {
        for (x, c) in chunk.iter_mut().enumerate() {
            *c = Complex64::new(v.at(j)[x], 0.0);
        }
        engine.coefficients(chunk);
    });
    // mode differences k_a - k_b resolved on the lattice once
    let signed: Vec<[i64; 3]> = modes
        .iter()
        .map(|&k| {
            let idx = grid.unravel(k);
            let mut out = [0i64; 3];
            for a in 0..grid.dim {
                out[a] = grid.signed_index(idx[a]);
            }
            out
        })
        .collect();
    let diff_flat: Vec<Option<usize>> = (0..dim * dim)
        .map(|ab| {
            let (a, b) = (ab / dim, ab % dim);
            let d = [
                signed[a][0] - signed[b][0],
                signed[a][1] - signed[b][1],
                signed[a][2] - signed[b][2],
            ];
            grid.flat_of_signed(d)
        })
        .collect();
    let phase: Vec<f64> = modes.iter().map(|&k| m + grid.xi_abs2(k)).collect();

    let mut acc = DMatrix::<Complex64>::zeros(dim, dim);
    for j in 0..v.n_time {
        let t = j as f64 * dt;
        let w = time_weight(j, v.n_time) * dt;
        let slice = &v_hat[j * s..(j + 1) * s];
        let rows: Vec<Vec<Complex64>> = (0..dim)
            .into_par_iter()
            .map(|a| {
                (0..dim)
                    .map(|b| {
                        match diff_flat[a * dim + b] {
                            Some(kd) => {
                                // S(-t) V S(t): e^{+i t ph_a} V_hat(k_a - k_b) e^{-i t ph_b}
                                let ph = t * (phase[a] - phase[b]);
                                slice[kd] * Complex64::from_polar(w, ph)
                            }
                            None => Complex64::default(),
                        }
                    })
                    .collect()
            })
            .collect();
        for (a, row) in rows.into_iter().enumerate() {
            for (b, val) in row.into_iter().enumerate() {
                acc[(a, b)] += val;
            }
        }
    }
    acc * Complex64::new(0.0, -1.0)
}

/// Which gamma_f is subtracted in the scattering residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GammaRef {
    /// empirical (1/N) Y0 Y0^H from the paired ensemble: the Monte-Carlo
    /// fluctuation cancels structurally
    Empirical,
    /// the analytic multiplier diag f^2(xi_k)
    Multiplier,
}

pub struct CorollaryInput<'a> {
    pub grid: Grid,
    pub modes: Vec<usize>,
    pub times: Vec<f64>,
    /// truncated coefficients of X at each sampled time (modes x N)
    pub x_coeffs: Vec<DMatrix<Complex64>>,
    pub y0_coeffs: DMatrix<Complex64>,
    pub zplus_coeffs: DMatrix<Complex64>,
    /// the (already convolved) potential driving the wave operator
    pub v: SpaceTimePotential,
    pub m: f64,
    pub f: &'a MomentumDistribution,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorollaryReport {
    pub times: Vec<f64>,
    /// || S(-t) gamma(t) S(t) - gamma_f - gamma_plus ||_{S^{s,p}} per time
    pub residuals: Vec<f64>,
    pub gamma_plus_norm: f64,
    pub gamma_ref: GammaRef,
    pub p: f64,
    pub s: f64,
    /// residuals strictly decreasing over the last three samples
    pub tail_decreasing: bool,
}

pub fn corollary_check(
    input: &CorollaryInput,
    p: f64,
    s: f64,
    gamma_ref: GammaRef,
    engine: &SpectralEngine,
) -> Result<CorollaryReport> {
    let grid = input.grid;
    let dim = input.modes.len();
    let n = input.y0_coeffs.ncols();
    let nf = n as f64;
    let norm_c = 1.0 / grid.dxi_measure();
    let weights: Vec<f64> = input
        .modes
        .iter()
        .map(|&k| (1.0 + grid.xi_abs2(k)).powf(s / 2.0))
        .collect();

    let w_op = wave_operator_matrix(&input.v, &input.modes, input.m, engine);
    // scattered profile per realization: A = W_{V,+} Y0 + Z_+
    let a = &w_op * &input.y0_coeffs + &input.zplus_coeffs;

    // gamma_plus = E(|A><Y0| + |Y0><A| + |A><A|) as a factored Hermitian form
    let c_plus = {
        let mut c = DMatrix::<Complex64>::zeros(dim, 2 * n);
        c.view_mut((0, 0), (dim, n)).copy_from(&a);
        c.view_mut((0, n), (dim, n)).copy_from(&input.y0_coeffs);
        c
    };
    let m_plus = {
        let mut m = DMatrix::<Complex64>::zeros(2 * n, 2 * n);
        let one = Complex64::new(norm_c / nf, 0.0);
        for i in 0..n {
            m[(i, i)] = one;
            m[(i, n + i)] = one;
            m[(n + i, i)] = one;
        }
        m
    };
    let gamma_plus_norm = schatten_norm_factored(&c_plus, &m_plus, &weights, p)?;

    let phases: Vec<f64> = input.modes.iter().map(|&k| input.m + grid.xi_abs2(k)).collect();
    let mut residuals = Vec::with_capacity(input.times.len());
    for (it, &t) in input.times.iter().enumerate() {
        // back-propagated coefficients B = S(-t) X(t)
        let mut b = input.x_coeffs[it].clone();
        for aidx in 0..dim {
            let rot = Complex64::from_polar(1.0, t * phases[aidx]);
            for r in 0..n {
                b[(aidx, r)] *= rot;
            }
        }
        match gamma_ref {
            GammaRef::Empirical => {
                // R = (1/N)(B B^H - Y0 Y0^H - A Y0^H - Y0 A^H - A A^H), factored
                let mut c = DMatrix::<Complex64>::zeros(dim, 3 * n);
                c.view_mut((0, 0), (dim, n)).copy_from(&b);
                c.view_mut((0, n), (dim, n)).copy_from(&input.y0_coeffs);
                c.view_mut((0, 2 * n), (dim, n)).copy_from(&a);
                let mut m = DMatrix::<Complex64>::zeros(3 * n, 3 * n);
                let pos = Complex64::new(norm_c / nf, 0.0);
                let neg = -pos;
                for i in 0..n {
                    m[(i, i)] = pos;
                    m[(n + i, n + i)] = neg;
                    m[(n + i, 2 * n + i)] = neg;
                    m[(2 * n + i, n + i)] = neg;
                    m[(2 * n + i, 2 * n + i)] = neg;
                }
                residuals.push(schatten_norm_factored(&c, &m, &weights, p)?);
            }
            GammaRef::Multiplier => {
                // dense residual with the analytic gamma_f = diag f^2
                let mut dense = (&b * b.adjoint()) * Complex64::new(norm_c / nf, 0.0);
                let gamma_plus_dense = {
                    let ay = (&a * input.y0_coeffs.adjoint()) * Complex64::new(norm_c / nf, 0.0);
                    let aa = (&a * a.adjoint()) * Complex64::new(norm_c / nf, 0.0);
                    &ay + ay.adjoint() + aa
                };
                dense -= gamma_plus_dense;
                for (aidx, &k) in input.modes.iter().enumerate() {
                    let f2 = input.f.f2(grid.xi_abs2(k).sqrt());
                    dense[(aidx, aidx)] -= Complex64::new(f2, 0.0);
                }
                for a2 in 0..dim {
                    for b2 in 0..dim {
                        dense[(a2, b2)] *= Complex64::new(weights[a2] * weights[b2], 0.0);
                    }
                }
                let svd = dense
                    .try_svd(false, false, 1e-12, 10_000)
                    .ok_or(CoreError::SvdFailure)?;
                let sv: Vec<f64> = svd.singular_values.iter().copied().collect();
                residuals.push(lp_of_singular_values(&sv, p));
            }
        }
    }

    let k = residuals.len();
    let tail_decreasing =
        k >= 3 && residuals[k - 3] > residuals[k - 2] && residuals[k - 2] > residuals[k - 1];
    Ok(CorollaryReport {
        times: input.times.clone(),
        residuals,
        gamma_plus_norm,
        gamma_ref,
        p,
        s,
        tail_decreasing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::sample_equilibrium;
    use crate::wiener::WienerSample;
    use approx::assert_relative_eq;

    fn setup(n_real: usize) -> (MomentumDistribution, Grid, SpectralEngine, WienerSample) {
        let f = MomentumDistribution::fermi(1.0, 0.0, 2).unwrap();
        let grid = Grid::new(2, 16, 8.0).unwrap();
        let engine = SpectralEngine::new(grid);
        let wiener = WienerSample::new(7, n_real);
        (f, grid, engine, wiener)
    }

    #[test]
    fn norm_zero_homogeneity_triangle() {
        let (f, grid, engine, wiener) = setup(8);
        let y = sample_equilibrium(&f, &grid, &engine, &wiener, 0.0, 0.0).unwrap();
        let z = EnsembleField::zeros(grid, 8, 0.0);
        let dt = 0.1;
        for spec in [
            NormSpec { p: 2.0, q: 2.0, s: 0.0, omega_inside: true },
            NormSpec { p: f64::INFINITY, q: 2.0, s: 0.5, omega_inside: true },
            NormSpec { p: 10.0 / 3.0, q: 10.0 / 3.0, s: 0.5, omega_inside: true },
            NormSpec { p: 5.0, q: 5.0, s: 0.0, omega_inside: false },
        ] {
            let hist = vec![y.clone(), y.clone(), y.clone()];
            let base = ensemble_spacetime_norm(&hist, &spec, dt, &engine).unwrap();
            assert!(base > 0.0);
            assert_eq!(
                ensemble_spacetime_norm(&[z.clone()], &spec, dt, &engine).unwrap(),
                0.0
            );
            // homogeneity
            let mut scaled_hist = hist.clone();
            for fld in scaled_hist.iter_mut() {
                fld.scale(Complex64::new(-2.5, 0.0));
            }
            let scaled = ensemble_spacetime_norm(&scaled_hist, &spec, dt, &engine).unwrap();
            assert_relative_eq!(scaled, 2.5 * base, max_relative = 1e-12);
            // triangle on doubled field
            let mut sum_hist = hist.clone();
            for (a, b) in sum_hist.iter_mut().zip(&hist) {
                a.axpy(Complex64::new(1.0, 0.0), b);
            }
            let sum = ensemble_spacetime_norm(&sum_hist, &spec, dt, &engine).unwrap();
            assert!(sum <= 2.0 * base * (1.0 + 1e-12));
        }
    }

    #[test]
    fn norm_flat_rms_identity() {
        // s=0, p=q=2, omega inside: equals flat rms times the measure factor
        let (f, grid, engine, wiener) = setup(4);
        let y = sample_equilibrium(&f, &grid, &engine, &wiener, 0.0, 0.0).unwrap();
        let hist = vec![y.clone(), y.clone()];
        let dt = 0.3;
        let spec = NormSpec::space_time(2.0, 2.0);
        let norm = ensemble_spacetime_norm(&hist, &spec, dt, &engine).unwrap();
        let mut acc = 0.0;
        for v in &y.values {
            acc += v.norm_sqr();
        }
        let mean_sq = acc / y.values.len() as f64;
        // time measure: trapezoid over 2 nodes = dt; space: dx^d * size = L^d
        let expect = (mean_sq * grid.len.powi(2) * dt).sqrt();
        assert_relative_eq!(norm, expect, max_relative = 1e-12);
    }

    #[test]
    fn norm_plane_wave_bessel_weight() {
        let grid = Grid::new(2, 16, 8.0).unwrap();
        let engine = SpectralEngine::new(grid);
        let flat = grid.flat_of_signed([3, -2, 0]).unwrap();
        let mut u = EnsembleField::zeros(grid, 1, 0.0);
        let dx = grid.dx();
        let xi = grid.xi(flat);
        for j in 0..grid.size() {
            let idx = grid.unravel(j);
            u.values[j] = Complex64::from_polar(1.0, xi[0] * idx[0] as f64 * dx + xi[1] * idx[1] as f64 * dx);
        }
        let s = 0.7;
        let spec0 = NormSpec { p: 2.0, q: 2.0, s: 0.0, omega_inside: true };
        let spec_s = NormSpec { p: 2.0, q: 2.0, s, omega_inside: true };
        let hist = vec![u];
        let n0 = ensemble_spacetime_norm(&hist, &spec0, 1.0, &engine).unwrap();
        let ns = ensemble_spacetime_norm(&hist, &spec_s, 1.0, &engine).unwrap();
        let expect = (1.0 + grid.xi_abs2(flat)).powf(s / 2.0);
        assert_relative_eq!(ns / n0, expect, max_relative = 1e-10);
    }

    #[test]
    fn strichartz_admissibility_and_translation() {
        assert!(strichartz_admissible(10.0 / 3.0, 10.0 / 3.0, 0.0, 3));
        assert!(!strichartz_admissible(4.0, 4.0, 0.0, 3));
        assert!(strichartz_admissible(4.0, 4.0, 0.0, 2));
        let bad = strichartz_ratio(
            |_, _| unreachable!(),
            &[Grid::new(3, 8, 6.0).unwrap()],
            4.0,
            4.0,
            0.0,
            4,
            0.1,
            0.0,
        );
        assert!(matches!(bad, Err(CoreError::InadmissibleExponents { .. })));
    }

    #[test]
    fn density_operator_equilibrium_structure() {
        let (f, grid, engine, _) = setup(0);
        let wiener = WienerSample::new(5, 2048);
        let y = sample_equilibrium(&f, &grid, &engine, &wiener, 0.0, 0.0).unwrap();
        let xi_cut = 4.0 * grid.dxi();
        let op = build_density_operator(&y, xi_cut, &engine).unwrap();
        let dim = op.modes.len();
        let mc = 5.0 / (wiener.n_realizations as f64).sqrt();
        let mut max_off = 0.0f64;
        for a in 0..dim {
            let f2 = f.f2(op.xi_abs[a]);
            let diag = op.matrix[(a, a)].re;
            assert!((diag - f2).abs() <= mc * f2.max(0.1), "diag {diag} vs {f2}");
            for b in 0..dim {
                if a != b {
                    max_off = max_off.max(op.matrix[(a, b)].norm());
                }
            }
        }
        assert!(max_off <= mc * f.f2(0.0), "off-diagonal {max_off}");
        // hermitian
        for a in 0..dim {
            for b in 0..dim {
                let d = (op.matrix[(a, b)] - op.matrix[(b, a)].conj()).norm();
                assert!(d <= 1e-10 * f.f2(0.0));
            }
        }
    }

    #[test]
    fn density_rank_one_ensemble() {
        // all realizations equal u: gamma = |u><u| exactly
        let grid = Grid::new(2, 8, 4.0).unwrap();
        let engine = SpectralEngine::new(grid);
        let s = grid.size();
        let mut u = EnsembleField::zeros(grid, 3, 0.0);
        for r in 0..3 {
            for j in 0..s {
                u.realization_mut(r)[j] = Complex64::new((j as f64 * 0.21).sin(), (j as f64 * 0.13).cos());
            }
        }
        let op = build_density_operator(&u, 2.0 * grid.dxi(), &engine).unwrap();
        // rank 1: Schatten-p norm equals the single singular value for all p
        let s1 = schatten_norm(&op, 1.0, 0.3).unwrap();
        let s2 = schatten_norm(&op, 2.0, 0.3).unwrap();
        let si = schatten_norm(&op, f64::INFINITY, 0.3).unwrap();
        assert_relative_eq!(s1, s2, max_relative = 1e-9);
        assert_relative_eq!(s2, si, max_relative = 1e-9);
    }

    #[test]
    fn density_from_perturbed_run_is_hermitian_psd() {
        let (f, grid, engine, _) = setup(0);
        let wiener = WienerSample::new(23, 96);
        let mut y = sample_equilibrium(&f, &grid, &engine, &wiener, 0.0, 0.0).unwrap();
        // perturb each realization smoothly
        for r in 0..y.n_realizations {
            for (j, v) in y.realization_mut(r).iter_mut().enumerate() {
                *v += Complex64::new(0.05 * ((j + r) as f64 * 0.17).sin(), 0.0);
            }
        }
        let op = build_density_operator(&y, 3.0 * grid.dxi(), &engine).unwrap();
        let trace: f64 = (0..op.modes.len()).map(|a| op.matrix[(a, a)].re).sum();
        let eig = op.matrix.clone().symmetric_eigen();
        let min_eig = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &b| a.min(b));
        assert!(min_eig >= -1e-8 * trace, "min eigenvalue {min_eig} vs trace {trace}");
    }

    #[test]
    fn schatten_frobenius_and_monotonicity() {
        let (f, grid, engine, _) = setup(0);
        let wiener = WienerSample::new(11, 64);
        let y = sample_equilibrium(&f, &grid, &engine, &wiener, 0.0, 0.0).unwrap();
        let op = build_density_operator(&y, 3.0 * grid.dxi(), &engine).unwrap();
        let s = 0.5;
        // Schatten-2 equals the entrywise weighted Frobenius norm
        let s2 = schatten_norm(&op, 2.0, s).unwrap();
        let mut frob = 0.0;
        for a in 0..op.modes.len() {
            for b in 0..op.modes.len() {
                let wa = (1.0 + op.xi_abs[a] * op.xi_abs[a]).powf(s / 2.0);
                let wb = (1.0 + op.xi_abs[b] * op.xi_abs[b]).powf(s / 2.0);
                frob += (op.matrix[(a, b)] * wa * wb).norm_sqr();
            }
        }
        assert_relative_eq!(s2, frob.sqrt(), max_relative = 1e-9);
        // monotonicity ||.||_{S^p} <= ||.||_{S^p'} for p >= p'
        let s1 = schatten_norm(&op, 1.0, s).unwrap();
        let s4 = schatten_norm(&op, 4.0, s).unwrap();
        let si = schatten_norm(&op, f64::INFINITY, s).unwrap();
        assert!(si <= s4 * (1.0 + 1e-12) && s4 <= s2 * (1.0 + 1e-12) && s2 <= s1 * (1.0 + 1e-12));
    }

    #[test]
    fn schatten_unitary_invariance_under_free_flow() {
        let (f, grid, engine, _) = setup(0);
        let wiener = WienerSample::new(13, 64);
        let y = sample_equilibrium(&f, &grid, &engine, &wiener, 0.0, 0.0).unwrap();
        let op = build_density_operator(&y, 3.0 * grid.dxi(), &engine).unwrap();
        // conjugate by diag(e^{-i t (m + |xi|^2)})
        let t = 0.73;
        let mut conj = op.clone();
        for a in 0..op.modes.len() {
            for b in 0..op.modes.len() {
                let pa = t * grid.xi_abs2(op.modes[a]);
                let pb = t * grid.xi_abs2(op.modes[b]);
                conj.matrix[(a, b)] *= Complex64::from_polar(1.0, -(pa - pb));
            }
        }
        for p in [1.0, 2.0, 4.0] {
            let n0 = schatten_norm(&op, p, 0.0).unwrap();
            let n1 = schatten_norm(&conj, p, 0.0).unwrap();
            assert_relative_eq!(n0, n1, max_relative = 1e-10);
        }
    }

    #[test]
    fn factored_schatten_matches_dense() {
        let (f, grid, engine, _) = setup(0);
        let wiener = WienerSample::new(17, 48);
        let y = sample_equilibrium(&f, &grid, &engine, &wiener, 0.0, 0.0).unwrap();
        let modes = truncated_modes(&grid, 3.0 * grid.dxi()).unwrap();
        let c = truncated_coefficients(&y, &modes, &engine);
        let n = y.n_realizations;
        let mut m = DMatrix::<Complex64>::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = Complex64::new(1.0 / n as f64, 0.0);
        }
        let weights: Vec<f64> = modes.iter().map(|&k| (1.0 + grid.xi_abs2(k)).powf(0.25)).collect();
        let fac = schatten_norm_factored(&c, &m, &weights, 4.0).unwrap();
        // dense reference
        let dense = (&c * &m * c.adjoint()).map(|z| z);
        let mut weighted = dense;
        for a in 0..modes.len() {
            for b in 0..modes.len() {
                weighted[(a, b)] *= Complex64::new(weights[a] * weights[b], 0.0);
            }
        }
        let svd = weighted.try_svd(false, false, 1e-12, 10_000).unwrap();
        let sv: Vec<f64> = svd.singular_values.iter().copied().collect();
        let dense_norm = lp_of_singular_values(&sv, 4.0);
        assert_relative_eq!(fac, dense_norm, max_relative = 1e-9);
    }

    #[test]
    fn wave_operator_constant_potential() {
        // V(t,x) = c: W_{V,+} = -i c T diag(1) on the truncated basis
        let grid = Grid::new(2, 8, 4.0).unwrap();
        let engine = SpectralEngine::new(grid);
        let n_t = 9;
        let dt = 0.05;
        let c = 0.8;
        let v = SpaceTimePotential::constant_in_space(grid, dt, &vec![c; n_t]);
        let modes = truncated_modes(&grid, 2.0 * grid.dxi()).unwrap();
        let w = wave_operator_matrix(&v, &modes, 0.3, &engine);
        let t_total = (n_t - 1) as f64 * dt;
        for a in 0..modes.len() {
            for b in 0..modes.len() {
                let expect = if a == b {
                    Complex64::new(0.0, -c * t_total)
                } else {
                    Complex64::default()
                };
                assert!((w[(a, b)] - expect).norm() <= 1e-12 * (1.0 + c * t_total));
            }
        }
    }
}
