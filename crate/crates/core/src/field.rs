//! Ensembles of complex fields on periodic grids: equilibrium sampling from
//! the discretized Wiener integral, free and transported propagators, and the
//! Duhamel operator W_V.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{CoreError, Result};
use crate::grid::{Grid, SpectralEngine};
use crate::profiles::MomentumDistribution;
use crate::wiener::WienerSample;

/// N complex realizations of a field on one grid at one time.
/// Storage is realization-major: `values[r * grid.size() + j]`.
#[derive(Debug, Clone)]
pub struct EnsembleField {
    pub grid: Grid,
    pub n_realizations: usize,
    pub time: f64,
    pub values: Vec<Complex64>,
    pub provenance: Option<WienerSample>,
}

impl EnsembleField {
    pub fn zeros(grid: Grid, n_realizations: usize, time: f64) -> Self {
        EnsembleField {
            grid,
            n_realizations,
            time,
            values: vec![Complex64::default(); n_realizations * grid.size()],
            provenance: None,
        }
    }

    #[inline]
    pub fn realization(&self, r: usize) -> &[Complex64] {
        let s = self.grid.size();
        &self.values[r * s..(r + 1) * s]
    }

    #[inline]
    pub fn realization_mut(&mut self, r: usize) -> &mut [Complex64] {
        let s = self.grid.size();
        &mut self.values[r * s..(r + 1) * s]
    }

    /// NaN/Inf write barrier.
    pub fn validate(&self, step: usize) -> Result<()> {
        if self.values.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            Err(CoreError::NaNDetected { step })
        } else {
            Ok(())
        }
    }

    pub fn check_same_shape(&self, other: &EnsembleField) -> Result<()> {
        if self.grid != other.grid || self.n_realizations != other.n_realizations {
            return Err(CoreError::GridMismatch(format!(
                "ensemble shapes differ: ({:?}, N={}) vs ({:?}, N={})",
                self.grid, self.n_realizations, other.grid, other.n_realizations
            )));
        }
        Ok(())
    }

    /// Pointwise ensemble mean of |u|^2. Realizations are accumulated in
    /// ascending order at every grid point, so the result does not depend on
    /// the worker count.
    pub fn mean_abs2(&self) -> Vec<f64> {
        let s = self.grid.size();
        let n = self.n_realizations;
        let inv = 1.0 / n as f64;
        let mut out = vec![0.0; s];
        out.par_iter_mut().enumerate().for_each(|(j, o)| {
            let mut acc = 0.0;
            for r in 0..n {
                acc += self.values[r * s + j].norm_sqr();
            }
            *o = acc * inv;
        });
        out
    }

    /// Pointwise ensemble mean of conj(a) * b.
    pub fn mean_conj_product(&self, other: &EnsembleField) -> Result<Vec<Complex64>> {
        self.check_same_shape(other)?;
        let s = self.grid.size();
        let n = self.n_realizations;
        let inv = 1.0 / n as f64;
        let mut out = vec![Complex64::default(); s];
        out.par_iter_mut().enumerate().for_each(|(j, o)| {
            let mut acc = Complex64::default();
            for r in 0..n {
                acc += self.values[r * s + j].conj() * other.values[r * s + j];
            }
            *o = acc * inv;
        });
        Ok(out)
    }

    /// Pointwise 2 Re E(conj(a) b), the potential-shaped reduction.
    pub fn two_re_mean_conj(&self, other: &EnsembleField) -> Result<Vec<f64>> {
        Ok(self
            .mean_conj_product(other)?
            .into_iter()
            .map(|z| 2.0 * z.re)
            .collect())
    }

    /// Per-realization discrete L^2 mass, |u|_{L^2}^2 = dx^d sum |u|^2.
    pub fn mass_per_realization(&self) -> Vec<f64> {
        let meas = self.grid.dx_measure();
        (0..self.n_realizations)
            .map(|r| self.realization(r).iter().map(|v| v.norm_sqr()).sum::<f64>() * meas)
            .collect()
    }

    pub fn axpy(&mut self, alpha: Complex64, other: &EnsembleField) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: Complex64) {
        for a in self.values.iter_mut() {
            *a *= alpha;
        }
    }
}

/// Real scalar field on a uniform time grid times a spatial grid.
#[derive(Debug, Clone)]
pub struct SpaceTimePotential {
    pub grid: Grid,
    pub dt: f64,
    /// values[time][gridpoint], flattened time-major; n_time nodes t_j = j dt.
    pub values: Vec<f64>,
    pub n_time: usize,
}

impl SpaceTimePotential {
    pub fn zeros(grid: Grid, n_time: usize, dt: f64) -> Self {
        SpaceTimePotential {
            grid,
            dt,
            values: vec![0.0; n_time * grid.size()],
            n_time,
        }
    }

    pub fn from_fn<F: Fn(usize, usize) -> f64>(grid: Grid, n_time: usize, dt: f64, f: F) -> Self {
        let s = grid.size();
        let mut v = SpaceTimePotential::zeros(grid, n_time, dt);
        for j in 0..n_time {
            for x in 0..s {
                v.values[j * s + x] = f(j, x);
            }
        }
        v
    }

    /// Spatially constant profile from time samples.
    pub fn constant_in_space(grid: Grid, dt: f64, profile: &[f64]) -> Self {
        SpaceTimePotential::from_fn(grid, profile.len(), dt, |j, _| profile[j])
    }

    #[inline]
    pub fn at(&self, j: usize) -> &[f64] {
        let s = self.grid.size();
        &self.values[j * s..(j + 1) * s]
    }

    #[inline]
    pub fn at_mut(&mut self, j: usize) -> &mut [f64] {
        let s = self.grid.size();
        &mut self.values[j * s..(j + 1) * s]
    }

    pub fn time(&self, j: usize) -> f64 {
        j as f64 * self.dt
    }

    pub fn check_same_shape(&self, other: &SpaceTimePotential) -> Result<()> {
        if self.grid != other.grid || self.n_time != other.n_time || self.dt != other.dt {
            return Err(CoreError::GridMismatch(
                "space-time potentials have different shapes".into(),
            ));
        }
        Ok(())
    }

    /// Convolve with the interaction in space: multiply each time slice by
    /// w_hat on the frequency lattice. Real output enforced.
    pub fn convolve_w<F: Fn(f64) -> f64>(&self, engine: &SpectralEngine, w_hat: F) -> Self {
        let s = self.grid.size();
        let mut out = SpaceTimePotential::zeros(self.grid, self.n_time, self.dt);
        let mult: Vec<f64> = (0..s).map(|k| w_hat(self.grid.xi_abs2(k).sqrt())).collect();
        let slices: Vec<Vec<f64>> = (0..self.n_time)
            .into_par_iter()
            .map(|j| {
                let mut buf: Vec<Complex64> = self
                    .at(j)
                    .iter()
                    .map(|&v| Complex64::new(v, 0.0))
                    .collect();
                engine.forward(&mut buf);
                for (b, m) in buf.iter_mut().zip(&mult) {
                    *b *= *m;
                }
                engine.inverse(&mut buf);
                buf.into_iter().map(|z| z.re).collect()
            })
            .collect();
        for (j, sl) in slices.into_iter().enumerate() {
            out.at_mut(j).copy_from_slice(&sl);
        }
        out
    }

    pub fn l2_norm(&self) -> f64 {
        let meas = self.grid.dx_measure() * self.dt;
        (self.values.iter().map(|v| v * v).sum::<f64>() * meas).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |a, &b| a.max(b.abs()))
    }
}

/// Lattice Riemann sum of int f^2: sum_k f^2(xi_k) dxi^d.
pub fn lattice_f2_sum(f: &MomentumDistribution, grid: &Grid) -> f64 {
    let meas = grid.dxi_measure();
    (0..grid.size())
        .map(|k| f.f2(grid.xi_abs2(k).sqrt()))
        .sum::<f64>()
        * meas
}

fn nyquist_check(f: &MomentumDistribution, grid: &Grid) -> Result<()> {
    let tail = f.f2(grid.nyquist()) * grid.dxi_measure() * grid.size() as f64;
    let tol = 1e-8 * lattice_f2_sum(f, grid).max(1e-300);
    if tail > tol {
        return Err(CoreError::NyquistUnderresolved { tail, tolerance: tol });
    }
    Ok(())
}

/// Sample the Gaussian equilibrium at time `t`:
/// Y(w_r, t, x) = sum_k f(xi_k) sqrt(dxi^d) g[r][k] e^{i(xi_k.x - t(m + |xi_k|^2))}.
pub fn sample_equilibrium(
    f: &MomentumDistribution,
    grid: &Grid,
    engine: &SpectralEngine,
    wiener: &WienerSample,
    t: f64,
    m: f64,
) -> Result<EnsembleField> {
    nyquist_check(f, grid)?;
    let s = grid.size();
    let sqrt_meas = grid.dxi_measure().sqrt();
    let weight: Vec<Complex64> = (0..s)
        .map(|k| {
            let amp = f.f(grid.xi_abs2(k).sqrt()) * sqrt_meas;
            Complex64::from_polar(amp, -t * (m + grid.xi_abs2(k)))
        })
        .collect();

    let mut out = EnsembleField::zeros(*grid, wiener.n_realizations, t);
    out.provenance = Some(*wiener);
    out.values
        .par_chunks_mut(s)
        .enumerate()
        .for_each(|(r, chunk)| {
            for (k, c) in chunk.iter_mut().enumerate() {
                *c = weight[k] * wiener.coefficient(r, k);
            }
            engine.synthesize(chunk);
        });
    out.validate(0)?;
    Ok(out)
}

/// Free propagator S(dt) = e^{-i dt (m - Laplace)}: spectral multiplier
/// e^{-i dt (m + |xi|^2)} applied per realization.
pub fn free_propagate(
    field: &EnsembleField,
    engine: &SpectralEngine,
    dt: f64,
    m: f64,
) -> EnsembleField {
    let mut out = field.clone();
    free_propagate_inplace(&mut out, engine, dt, m);
    out
}

pub fn free_propagate_inplace(field: &mut EnsembleField, engine: &SpectralEngine, dt: f64, m: f64) {
    if dt == 0.0 {
        return;
    }
    let s = field.grid.size();
    let grid = field.grid;
    let mult: Vec<Complex64> = (0..s)
        .map(|k| Complex64::from_polar(1.0, -dt * (m + grid.xi_abs2(k))))
        .collect();
    field.values.par_chunks_mut(s).for_each(|chunk| {
        engine.forward(chunk);
        for (c, w) in chunk.iter_mut().zip(&mult) {
            *c *= *w;
        }
        engine.inverse(chunk);
    });
    field.time += dt;
}

/// Transported propagator S_xi(dt): spectral multiplier
/// e^{-i dt (|eta|^2 + 2 eta . xi)}; the mass term is excluded.
pub fn transported_propagate(
    field: &EnsembleField,
    engine: &SpectralEngine,
    dt: f64,
    xi: [f64; 3],
) -> Result<EnsembleField> {
    let grid = field.grid;
    grid.lattice_index(xi)?;
    let s = grid.size();
    let mult: Vec<Complex64> = (0..s)
        .map(|k| {
            let eta = grid.xi(k);
            let phase = grid.xi_abs2(k) + 2.0 * (eta[0] * xi[0] + eta[1] * xi[1] + eta[2] * xi[2]);
            Complex64::from_polar(1.0, -dt * phase)
        })
        .collect();
    let mut out = field.clone();
    out.values.par_chunks_mut(s).for_each(|chunk| {
        engine.forward(chunk);
        for (c, w) in chunk.iter_mut().zip(&mult) {
            *c *= *w;
        }
        engine.inverse(chunk);
    });
    out.time += dt;
    Ok(out)
}

/// A time-indexed ensemble target for the Duhamel integral.
pub trait TimeTarget: Sync {
    fn grid(&self) -> Grid;
    fn n_realizations(&self) -> usize;
    fn n_time(&self) -> usize;
    /// Write the target values at time node `j`, realization-major.
    fn write_at(&self, j: usize, engine: &SpectralEngine, out: &mut [Complex64]);
}

/// The equilibrium Y as a virtual history (regenerated spectrally per node).
pub struct EquilibriumHistory {
    base: Vec<Complex64>, // f(xi) sqrt(dxi^d) g[r][k], realization-major
    grid: Grid,
    n_realizations: usize,
    n_time: usize,
    dt: f64,
    m: f64,
}

impl EquilibriumHistory {
    pub fn new(
        f: &MomentumDistribution,
        grid: &Grid,
        wiener: &WienerSample,
        n_time: usize,
        dt: f64,
        m: f64,
    ) -> Result<Self> {
        nyquist_check(f, grid)?;
        let s = grid.size();
        let sqrt_meas = grid.dxi_measure().sqrt();
        let amp: Vec<f64> = (0..s).map(|k| f.f(grid.xi_abs2(k).sqrt()) * sqrt_meas).collect();
        let mut base = vec![Complex64::default(); wiener.n_realizations * s];
        base.par_chunks_mut(s).enumerate().for_each(|(r, chunk)| {
            for (k, c) in chunk.iter_mut().enumerate() {
                *c = amp[k] * wiener.coefficient(r, k);
            }
        });
        Ok(EquilibriumHistory {
            base,
            grid: *grid,
            n_realizations: wiener.n_realizations,
            n_time,
            dt,
            m,
        })
    }
}

impl TimeTarget for EquilibriumHistory {
    fn grid(&self) -> Grid {
        self.grid
    }
    fn n_realizations(&self) -> usize {
        self.n_realizations
    }
    fn n_time(&self) -> usize {
        self.n_time
    }
    fn write_at(&self, j: usize, engine: &SpectralEngine, out: &mut [Complex64]) {
        let s = self.grid.size();
        let t = j as f64 * self.dt;
        let grid = self.grid;
        let m = self.m;
        let phase: Vec<Complex64> = (0..s)
            .map(|k| Complex64::from_polar(1.0, -t * (m + grid.xi_abs2(k))))
            .collect();
        out.par_chunks_mut(s).enumerate().for_each(|(r, chunk)| {
            let src = &self.base[r * s..(r + 1) * s];
            for (k, c) in chunk.iter_mut().enumerate() {
                *c = src[k] * phase[k];
            }
            engine.synthesize(chunk);
        });
    }
}

/// Free evolution S(t) Z_0 of a fixed initial ensemble as a virtual history.
pub struct FreeHistory {
    spectra: Vec<Complex64>, // synthesis coefficients of Z_0, realization-major
    grid: Grid,
    n_realizations: usize,
    n_time: usize,
    dt: f64,
    m: f64,
}

impl FreeHistory {
    pub fn new(z0: &EnsembleField, engine: &SpectralEngine, n_time: usize, dt: f64, m: f64) -> Self {
        let s = z0.grid.size();
        let mut spectra = z0.values.clone();
        spectra.par_chunks_mut(s).for_each(|chunk| {
            engine.coefficients(chunk);
        });
        FreeHistory {
            spectra,
            grid: z0.grid,
            n_realizations: z0.n_realizations,
            n_time,
            dt,
            m,
        }
    }
}

impl TimeTarget for FreeHistory {
    fn grid(&self) -> Grid {
        self.grid
    }
    fn n_realizations(&self) -> usize {
        self.n_realizations
    }
    fn n_time(&self) -> usize {
        self.n_time
    }
    fn write_at(&self, j: usize, engine: &SpectralEngine, out: &mut [Complex64]) {
        let s = self.grid.size();
        let t = j as f64 * self.dt;
        let grid = self.grid;
        let m = self.m;
        let phase: Vec<Complex64> = (0..s)
            .map(|k| Complex64::from_polar(1.0, -t * (m + grid.xi_abs2(k))))
            .collect();
        out.par_chunks_mut(s).enumerate().for_each(|(r, chunk)| {
            let src = &self.spectra[r * s..(r + 1) * s];
            for (k, c) in chunk.iter_mut().enumerate() {
                *c = src[k] * phase[k];
            }
            engine.synthesize(chunk);
        });
    }
}

/// A stored history of ensemble fields.
pub struct StoredHistory {
    pub fields: Vec<EnsembleField>,
}

impl TimeTarget for StoredHistory {
    fn grid(&self) -> Grid {
        self.fields[0].grid
    }
    fn n_realizations(&self) -> usize {
        self.fields[0].n_realizations
    }
    fn n_time(&self) -> usize {
        self.fields.len()
    }
    fn write_at(&self, j: usize, _engine: &SpectralEngine, out: &mut [Complex64]) {
        out.copy_from_slice(&self.fields[j].values);
    }
}

fn multiply_pointwise(pot_slice: &[f64], field: &[Complex64], out: &mut [Complex64], s: usize) {
    out.par_chunks_mut(s).enumerate().for_each(|(r, chunk)| {
        let src = &field[r * s..(r + 1) * s];
        for (j, c) in chunk.iter_mut().enumerate() {
            *c = src[j] * pot_slice[j];
        }
    });
}

/// One Duhamel integral evaluated incrementally along a shared time loop:
///   W(t_{j+1}) = S(dt)[ W(t_j) - i dt/2 F(t_j) ] - i dt/2 F(t_{j+1}),
/// F(t_j) = V(t_j) . target(t_j) (trapezoid in tau, second order). States can
/// be chained: one state's current value may serve as the next one's target.
pub struct DuhamelState {
    pub w: EnsembleField,
    f_prev: Vec<Complex64>,
    scratch: Vec<Complex64>,
    started: bool,
}

impl DuhamelState {
    pub fn new(grid: Grid, n_realizations: usize) -> Self {
        let len = n_realizations * grid.size();
        DuhamelState {
            w: EnsembleField::zeros(grid, n_realizations, 0.0),
            f_prev: vec![Complex64::default(); len],
            scratch: vec![Complex64::default(); len],
            started: false,
        }
    }

    /// Advance to the time node whose potential slice and target values are
    /// given. Must be called once per node in order, starting at j = 0
    /// (where W stays zero and only F is recorded).
    pub fn advance(
        &mut self,
        engine: &SpectralEngine,
        m: f64,
        dt: f64,
        pot_slice: &[f64],
        target_values: &[Complex64],
    ) {
        let s = self.w.grid.size();
        multiply_pointwise(pot_slice, target_values, &mut self.scratch, s);
        if !self.started {
            std::mem::swap(&mut self.f_prev, &mut self.scratch);
            self.started = true;
            return;
        }
        let half = Complex64::new(0.0, -0.5 * dt);
        for (a, b) in self.w.values.iter_mut().zip(&self.f_prev) {
            *a += half * b;
        }
        free_propagate_inplace(&mut self.w, engine, dt, m);
        for (a, b) in self.w.values.iter_mut().zip(&self.scratch) {
            *a += half * b;
        }
        std::mem::swap(&mut self.f_prev, &mut self.scratch);
    }
}

/// Scan the Duhamel recursion for one potential and target, visiting
/// W(t_j) at every node.
pub fn duhamel_scan<F: FnMut(usize, &EnsembleField)>(
    v: &SpaceTimePotential,
    target: &dyn TimeTarget,
    engine: &SpectralEngine,
    m: f64,
    mut visit: F,
) -> Result<()> {
    let grid = target.grid();
    if v.grid != grid {
        return Err(CoreError::GridMismatch(
            "potential and target grids differ".into(),
        ));
    }
    if v.n_time != target.n_time() {
        return Err(CoreError::GridMismatch(format!(
            "potential has {} time nodes, target {}",
            v.n_time,
            target.n_time()
        )));
    }
    let s = grid.size();
    let n = target.n_realizations();
    let mut state = DuhamelState::new(grid, n);
    let mut tgt = vec![Complex64::default(); n * s];
    for j in 0..v.n_time {
        target.write_at(j, engine, &mut tgt);
        state.advance(engine, m, v.dt, v.at(j), &tgt);
        state.w.time = j as f64 * v.dt;
        visit(j, &state.w);
    }
    Ok(())
}

/// W_V applied to a target history, stored at every time node.
pub fn duhamel_wv(
    v: &SpaceTimePotential,
    target: &dyn TimeTarget,
    engine: &SpectralEngine,
    m: f64,
) -> Result<StoredHistory> {
    let mut fields = Vec::with_capacity(v.n_time);
    duhamel_scan(v, target, engine, m, |j, w| {
        let mut f = w.clone();
        f.time = j as f64 * v.dt;
        fields.push(f);
    })?;
    Ok(StoredHistory { fields })
}

/// Structured perturbation distribution g(x, xi), either a short sum of
/// separable terms or a dense tabulation (small grids only).
pub enum StructuredDistribution {
    Separable(Vec<SeparableTerm>),
    /// g[mode][gridpoint]
    Tabulated(Vec<Vec<f64>>),
}

pub struct SeparableTerm {
    /// spatial factor, one value per grid point
    pub spatial: Vec<f64>,
    /// momentum factor, one value per flat lattice mode
    pub momentum: Vec<f64>,
}

const TABULATED_FLOP_BUDGET: f64 = 2e9;

/// Z_g(w, x) = sum_k sqrt(dxi^d) g(x, xi_k) g_coef[w][k] e^{i xi_k . x}.
/// Shares the Wiener coefficients with the paired equilibrium.
pub fn sample_structured_perturbation(
    g: &StructuredDistribution,
    grid: &Grid,
    engine: &SpectralEngine,
    wiener: &WienerSample,
) -> Result<EnsembleField> {
    let s = grid.size();
    let n = wiener.n_realizations;
    let sqrt_meas = grid.dxi_measure().sqrt();
    let mut out = EnsembleField::zeros(*grid, n, 0.0);
    out.provenance = Some(*wiener);

    match g {
        StructuredDistribution::Separable(terms) => {
            for term in terms {
                if term.spatial.len() != s || term.momentum.len() != s {
                    return Err(CoreError::GridMismatch(
                        "separable term length != grid size".into(),
                    ));
                }
                out.values
                    .par_chunks_mut(s)
                    .enumerate()
                    .for_each(|(r, chunk)| {
                        let mut buf = vec![Complex64::default(); s];
                        for (k, c) in buf.iter_mut().enumerate() {
                            *c = term.momentum[k] * sqrt_meas * wiener.coefficient(r, k);
                        }
                        engine.synthesize(&mut buf);
                        for (j, c) in chunk.iter_mut().enumerate() {
                            *c += term.spatial[j] * buf[j];
                        }
                    });
            }
        }
        StructuredDistribution::Tabulated(table) => {
            if table.len() != s || table.iter().any(|row| row.len() != s) {
                return Err(CoreError::GridMismatch(
                    "tabulated g must be [mode][gridpoint] of grid size".into(),
                ));
            }
            let flops = (n as f64) * (s as f64) * (s as f64) * 8.0;
            if flops > TABULATED_FLOP_BUDGET {
                return Err(CoreError::ComplexityGuard {
                    estimated: flops,
                    budget: TABULATED_FLOP_BUDGET,
                });
            }
            let dx = grid.dx();
            out.values
                .par_chunks_mut(s)
                .enumerate()
                .for_each(|(r, chunk)| {
                    for (j, c) in chunk.iter_mut().enumerate() {
                        let idx = grid.unravel(j);
                        let x = [idx[0] as f64 * dx, idx[1] as f64 * dx, idx[2] as f64 * dx];
                        let mut acc = Complex64::default();
                        for k in 0..s {
                            let xi = grid.xi(k);
                            let phase = xi[0] * x[0] + xi[1] * x[1] + xi[2] * x[2];
                            acc += sqrt_meas
                                * table[k][j]
                                * wiener.coefficient(r, k)
                                * Complex64::from_polar(1.0, phase);
                        }
                        *c = acc;
                    }
                });
        }
    }
    out.validate(0)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn fermi_setup(dim: usize, n: usize, len: f64, nreal: usize) -> (MomentumDistribution, Grid, SpectralEngine, WienerSample) {
        let f = MomentumDistribution::fermi(1.0, 0.0, dim).unwrap();
        let grid = Grid::new(dim, n, len).unwrap();
        let engine = SpectralEngine::new(grid);
        let wiener = WienerSample::new(12345, nreal);
        (f, grid, engine, wiener)
    }

    #[test]
    fn isometry_and_kurtosis() {
        let (f, grid, engine, wiener) = fermi_setup(2, 32, 12.0, 512);
        let y = sample_equilibrium(&f, &grid, &engine, &wiener, 0.0, 0.3).unwrap();
        let target = lattice_f2_sum(&f, &grid);
        let m2 = y.mean_abs2();
        let avg2: f64 = m2.iter().sum::<f64>() / m2.len() as f64;
        let tol = 5.0 / (wiener.n_realizations as f64).sqrt();
        assert!((avg2 - target).abs() <= tol * target, "{avg2} vs {target}");
        // complex Gaussian fourth moment: E|Y|^4 / (E|Y|^2)^2 = 2
        let s = grid.size();
        let mut m4 = 0.0;
        for r in 0..y.n_realizations {
            for v in y.realization(r) {
                m4 += v.norm_sqr() * v.norm_sqr();
            }
        }
        m4 /= (y.n_realizations * s) as f64;
        let kurt = m4 / (avg2 * avg2);
        assert!((kurt - 2.0).abs() <= tol, "kurtosis {kurt}");
    }

    #[test]
    fn covariance_matches_kernel() {
        let (f, grid, engine, wiener) = fermi_setup(2, 32, 12.0, 2048);
        let y = sample_equilibrium(&f, &grid, &engine, &wiener, 0.0, 0.0).unwrap();
        let k = crate::profiles::build_kernel_h(&f).unwrap();
        let s = grid.size();
        let n = grid.n;
        // offset r = (dx*ox, dx*oy): average E(conj Y(x) Y(x+r)) over x
        for &(ox, oy) in &[(1usize, 0usize), (0, 2), (3, 1)] {
            let mut acc = Complex64::default();
            for r in 0..y.n_realizations {
                let vals = y.realization(r);
                for x0 in 0..n {
                    for x1 in 0..n {
                        let j = x0 * n + x1;
                        let js = ((x0 + ox) % n) * n + (x1 + oy) % n;
                        acc += vals[j].conj() * vals[js];
                    }
                }
            }
            let emp = acc / Complex64::new((y.n_realizations * s) as f64, 0.0);
            let dist = grid.dx() * ((ox * ox + oy * oy) as f64).sqrt();
            let expect = k.eval(dist);
            let tol = 5.0 / (y.n_realizations as f64).sqrt() * k.h0();
            assert!(
                (emp.re - expect).abs() <= tol && emp.im.abs() <= tol,
                "offset ({ox},{oy}): {emp} vs {expect}"
            );
        }
    }

    #[test]
    fn free_propagation_identity_and_composition() {
        let (f, grid, engine, wiener) = fermi_setup(2, 16, 8.0, 4);
        let y = sample_equilibrium(&f, &grid, &engine, &wiener, 0.0, 0.7).unwrap();
        // dt = 0 is bitwise identity
        let same = free_propagate(&y, &engine, 0.0, 0.7);
        assert_eq!(same.values, y.values);
        // S(a) S(b) == S(a+b)
        let a = free_propagate(&free_propagate(&y, &engine, 0.15, 0.7), &engine, 0.25, 0.7);
        let b = free_propagate(&y, &engine, 0.40, 0.7);
        let scale = y.values.iter().map(|v| v.norm()).fold(0.0, f64::max);
        for (u, v) in a.values.iter().zip(&b.values) {
            assert!((u - v).norm() <= 1e-12 * scale);
        }
        // round trip
        let rt = free_propagate(&free_propagate(&y, &engine, 0.3, 0.7), &engine, -0.3, 0.7);
        for (u, v) in rt.values.iter().zip(&y.values) {
            assert!((u - v).norm() <= 1e-12 * scale);
        }
        // unitarity
        let m0 = y.mass_per_realization();
        let m1 = free_propagate(&y, &engine, 0.9, 0.7).mass_per_realization();
        for (a, b) in m0.iter().zip(&m1) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn fubini_sampling_commutes_with_propagation() {
        let (f, grid, engine, wiener) = fermi_setup(2, 16, 8.0, 8);
        let m = 0.45;
        let dt = 0.37;
        let a = free_propagate(
            &sample_equilibrium(&f, &grid, &engine, &wiener, 0.0, m).unwrap(),
            &engine,
            dt,
            m,
        );
        let b = sample_equilibrium(&f, &grid, &engine, &wiener, dt, m).unwrap();
        let scale = b.values.iter().map(|v| v.norm()).fold(0.0, f64::max);
        for (u, v) in a.values.iter().zip(&b.values) {
            assert!((u - v).norm() <= 1e-11 * scale);
        }
    }

    #[test]
    fn transported_at_zero_is_massless_free() {
        let (f, grid, engine, wiener) = fermi_setup(2, 16, 8.0, 4);
        let y = sample_equilibrium(&f, &grid, &engine, &wiener, 0.0, 0.9).unwrap();
        let a = transported_propagate(&y, &engine, 0.21, [0.0; 3]).unwrap();
        let b = free_propagate(&y, &engine, 0.21, 0.0);
        let scale = y.values.iter().map(|v| v.norm()).fold(0.0, f64::max);
        for (u, v) in a.values.iter().zip(&b.values) {
            assert!((u - v).norm() <= 1e-12 * scale);
        }
    }

    /// max relative residual of the phase-commutation identity
    /// S(t-tau)[e^{-i tau(m+|xi|^2)+i x.xi} U] = e^{-i t(m+|xi|^2)+i x.xi} S_xi(t-tau) U
    pub fn commutator_residual(
        grid: &Grid,
        engine: &SpectralEngine,
        u: &EnsembleField,
        xi: [f64; 3],
        tau: f64,
        t: f64,
        m: f64,
    ) -> f64 {
        let xi2 = xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2];
        let dx = grid.dx();
        // left side: multiply by the phase at tau, free-propagate by t - tau
        let mut lhs = u.clone();
        for r in 0..lhs.n_realizations {
            let chunk = lhs.realization_mut(r);
            for (j, c) in chunk.iter_mut().enumerate() {
                let idx = grid.unravel(j);
                let xdot = (0..3).map(|a| idx[a] as f64 * dx * xi[a]).sum::<f64>();
                *c *= Complex64::from_polar(1.0, -tau * (m + xi2) + xdot);
            }
        }
        let lhs = free_propagate(&lhs, engine, t - tau, m);
        // right side: transported propagate, then the phase at t
        let mut rhs = transported_propagate(u, engine, t - tau, xi).unwrap();
        for r in 0..rhs.n_realizations {
            let chunk = rhs.realization_mut(r);
            for (j, c) in chunk.iter_mut().enumerate() {
                let idx = grid.unravel(j);
                let xdot = (0..3).map(|a| idx[a] as f64 * dx * xi[a]).sum::<f64>();
                *c *= Complex64::from_polar(1.0, -t * (m + xi2) + xdot);
            }
        }
        let scale = u.values.iter().map(|v| v.norm()).fold(0.0, f64::max);
        lhs.values
            .iter()
            .zip(&rhs.values)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
            / scale
    }

    /// Random band-limited ensemble: coefficients on |k|_inf <= n/4 only, so
    ///spectral shifts by a small lattice xi cannot wrap past Nyquist.
    pub fn band_limited_field(grid: &Grid, engine: &SpectralEngine, n_real: usize, seed: u64) -> EnsembleField {
        let wiener = WienerSample::new(seed, n_real);
        let mut u = EnsembleField::zeros(*grid, n_real, 0.0);
        for r in 0..n_real {
            let chunk = u.realization_mut(r);
            for (k, c) in chunk.iter_mut().enumerate() {
                let idx = grid.unravel(k);
                let inside = (0..grid.dim).all(|a| {
                    let si = grid.signed_index(idx[a]).unsigned_abs() as usize;
                    si <= grid.n / 4
                });
                if inside {
                    *c = wiener.coefficient(r, k);
                }
            }
            engine.synthesize(chunk);
        }
        u
    }

    #[test]
    fn phase_commutation_identity() {
        let grid = Grid::new(2, 16, 8.0).unwrap();
        let engine = SpectralEngine::new(grid);
        let u = band_limited_field(&grid, &engine, 2, 31);
        let dxi = grid.dxi();
        for (i, &(k0, k1)) in [(1i64, 0i64), (2, -1), (0, 2)].iter().enumerate() {
            let xi = [k0 as f64 * dxi, k1 as f64 * dxi, 0.0];
            let res = commutator_residual(&grid, &engine, &u, xi, 0.13 + 0.05 * i as f64, 0.41, 0.8);
            assert!(res <= 1e-11, "residual {res}");
        }
    }

    #[test]
    fn transported_bump_drifts_at_minus_two_xi() {
        let grid = Grid::new(2, 64, 16.0).unwrap();
        let engine = SpectralEngine::new(grid);
        let s = grid.size();
        let dx = grid.dx();
        let c0 = 8.0;
        let mut u = EnsembleField::zeros(grid, 1, 0.0);
        for j in 0..s {
            let idx = grid.unravel(j);
            let x = [idx[0] as f64 * dx, idx[1] as f64 * dx];
            let d2 = (x[0] - c0).powi(2) + (x[1] - c0).powi(2);
            u.values[j] = Complex64::new((-d2 / 1.5).exp(), 0.0);
        }
        let dxi = grid.dxi();
        let xi = [2.0 * dxi, -1.0 * dxi, 0.0];
        let dt = 0.4;
        let v = transported_propagate(&u, &engine, dt, xi).unwrap();
        let com = |f: &EnsembleField| -> [f64; 2] {
            let mut mx = 0.0;
            let mut my = 0.0;
            let mut mass = 0.0;
            for j in 0..s {
                let idx = grid.unravel(j);
                let w = f.values[j].norm_sqr();
                mx += w * idx[0] as f64 * dx;
                my += w * idx[1] as f64 * dx;
                mass += w;
            }
            [mx / mass, my / mass]
        };
        let before = com(&u);
        let after = com(&v);
        // group velocity of the multiplier e^{-i dt(|eta|^2 + 2 eta.xi)} is 2(eta + xi);
        // a real bump has <eta> = 0, so the center drifts by +2 xi dt
        let expect = [before[0] + 2.0 * xi[0] * dt, before[1] + 2.0 * xi[1] * dt];
        assert!((after[0] - expect[0]).abs() < dx, "{after:?} vs {expect:?}");
        assert!((after[1] - expect[1]).abs() < dx, "{after:?} vs {expect:?}");
    }

    #[test]
    fn duhamel_zero_potential_is_zero() {
        let (f, grid, engine, wiener) = fermi_setup(2, 16, 8.0, 4);
        let m = 0.2;
        let n_t = 9;
        let dt = 0.05;
        let y = EquilibriumHistory::new(&f, &grid, &wiener, n_t, dt, m).unwrap();
        let v = SpaceTimePotential::zeros(grid, n_t, dt);
        let w = duhamel_wv(&v, &y, &engine, m).unwrap();
        for f in &w.fields {
            assert!(f.values.iter().all(|z| z.norm() == 0.0));
        }
    }

    #[test]
    fn duhamel_constant_in_space_matches_phase_formula() {
        // V = V(t) uniform in x: W_V(Y)(t) = -i Y(t) int_0^t V, with the
        // integral realized by the same trapezoid rule.
        let (f, grid, engine, wiener) = fermi_setup(2, 16, 8.0, 8);
        let m = 0.6;
        let n_t = 21;
        let dt = 0.04;
        let profile: Vec<f64> = (0..n_t).map(|j| 0.8 + 0.3 * (j as f64 * 0.4).sin()).collect();
        let v = SpaceTimePotential::constant_in_space(grid, dt, &profile);
        let y = EquilibriumHistory::new(&f, &grid, &wiener, n_t, dt, m).unwrap();
        let w = duhamel_wv(&v, &y, &engine, m).unwrap();
        let mut integral = 0.0;
        let mut buf = vec![Complex64::default(); w.fields[0].values.len()];
        for j in 0..n_t {
            if j > 0 {
                integral += 0.5 * dt * (profile[j] + profile[j - 1]);
            }
            y.write_at(j, &engine, &mut buf);
            let factor = Complex64::new(0.0, -integral);
            let scale = buf.iter().map(|v| v.norm()).fold(0.0, f64::max) * integral.abs().max(1e-9);
            for (a, yb) in w.fields[j].values.iter().zip(&buf) {
                assert!((a - factor * yb).norm() <= 1e-11 * scale.max(1e-12), "node {j}");
            }
        }
    }

    #[test]
    fn duhamel_second_order_in_dt() {
        // halving dt reduces the deviation from a fine reference by ~4
        let (f, grid, engine, wiener) = fermi_setup(2, 16, 8.0, 4);
        let m = 0.3;
        let t_end = 0.64;
        let run = |steps: usize| -> EnsembleField {
            let n_t = steps + 1;
            let dt = t_end / steps as f64;
            let v = SpaceTimePotential::from_fn(grid, n_t, dt, |j, x| {
                let idx = grid.unravel(x);
                (j as f64 * dt * 2.1).cos() * (idx[0] as f64 * 0.3).sin() + 0.4
            });
            let y = EquilibriumHistory::new(&f, &grid, &wiener, n_t, dt, m).unwrap();
            let w = duhamel_wv(&v, &y, &engine, m).unwrap();
            w.fields.into_iter().last().unwrap()
        };
        let coarse = run(16);
        let half = run(32);
        let reference = run(256);
        let err = |a: &EnsembleField| -> f64 {
            a.values
                .iter()
                .zip(&reference.values)
                .map(|(x, y)| (x - y).norm_sqr())
                .sum::<f64>()
                .sqrt()
        };
        let ratio = err(&coarse) / err(&half);
        assert!((ratio - 4.0).abs() < 0.8, "ratio {ratio}");
    }

    #[test]
    fn duhamel_linearity() {
        let (f, grid, engine, wiener) = fermi_setup(2, 16, 8.0, 3);
        let m = 0.1;
        let n_t = 6;
        let dt = 0.07;
        let y = EquilibriumHistory::new(&f, &grid, &wiener, n_t, dt, m).unwrap();
        let v1 = SpaceTimePotential::from_fn(grid, n_t, dt, |j, x| (j + x) as f64 * 0.01);
        let v2 = SpaceTimePotential::from_fn(grid, n_t, dt, |j, x| ((j * 3 + x) as f64 * 0.02).sin());
        let mut v_sum = v1.clone();
        for (a, b) in v_sum.values.iter_mut().zip(&v2.values) {
            *a += b;
        }
        let w1 = duhamel_wv(&v1, &y, &engine, m).unwrap();
        let w2 = duhamel_wv(&v2, &y, &engine, m).unwrap();
        let ws = duhamel_wv(&v_sum, &y, &engine, m).unwrap();
        let scale = ws.fields.last().unwrap().values.iter().map(|v| v.norm()).fold(0.0, f64::max);
        for j in 0..n_t {
            for ((a, b), c) in w1.fields[j]
                .values
                .iter()
                .zip(&w2.fields[j].values)
                .zip(&ws.fields[j].values)
            {
                assert!((a + b - c).norm() <= 1e-12 * scale.max(1e-30));
            }
        }
    }

    #[test]
    fn structured_zero_and_proportional() {
        let (f, grid, engine, wiener) = fermi_setup(2, 16, 8.0, 6);
        let s = grid.size();
        // g = 0
        let z = sample_structured_perturbation(
            &StructuredDistribution::Separable(vec![SeparableTerm {
                spatial: vec![0.0; s],
                momentum: vec![0.0; s],
            }]),
            &grid,
            &engine,
            &wiener,
        )
        .unwrap();
        assert!(z.values.iter().all(|v| v.norm() == 0.0));
        // g(x, xi) = c f(xi): Z_g = c Y_0 with identical coefficients
        let c = 0.37;
        let momentum: Vec<f64> = (0..s).map(|k| c * f.f(grid.xi_abs2(k).sqrt())).collect();
        let zg = sample_structured_perturbation(
            &StructuredDistribution::Separable(vec![SeparableTerm {
                spatial: vec![1.0; s],
                momentum,
            }]),
            &grid,
            &engine,
            &wiener,
        )
        .unwrap();
        let y0 = sample_equilibrium(&f, &grid, &engine, &wiener, 0.0, 0.0).unwrap();
        let scale = y0.values.iter().map(|v| v.norm()).fold(0.0, f64::max);
        for (a, b) in zg.values.iter().zip(&y0.values) {
            assert!((a - c * b).norm() <= 1e-13 * scale);
        }
    }

    #[test]
    fn structured_correlation_formula() {
        // E(conj(Y_0)(x) Z_g(y)) = sum_k e^{i xi_k.(y-x)} g(y, xi_k) f(xi_k) dxi
        let (f, grid, engine, _) = fermi_setup(2, 8, 4.0, 0);
        let wiener = WienerSample::new(777, 8192);
        let s = grid.size();
        let dx = grid.dx();
        // separable g: bump(x) * gaussian(xi)
        let spatial: Vec<f64> = (0..s)
            .map(|j| {
                let idx = grid.unravel(j);
                (-((idx[0] as f64 * dx - 3.0).powi(2) + (idx[1] as f64 * dx - 3.0).powi(2)) / 2.0)
                    .exp()
            })
            .collect();
        let momentum: Vec<f64> = (0..s).map(|k| (-grid.xi_abs2(k) / 2.0).exp()).collect();
        let zg = sample_structured_perturbation(
            &StructuredDistribution::Separable(vec![SeparableTerm {
                spatial: spatial.clone(),
                momentum: momentum.clone(),
            }]),
            &grid,
            &engine,
            &wiener,
        )
        .unwrap();
        let y0 = sample_equilibrium(&f, &grid, &engine, &wiener, 0.0, 0.0).unwrap();
        let cov = y0.mean_conj_product(&zg).unwrap();
        // same-point correlation (x = y): expectation = g(x, xi) f(xi) summed
        let meas = grid.dxi_measure();
        for &j in &[0usize, 13, 40] {
            let mut expect = Complex64::default();
            for k in 0..s {
                expect += momentum[k] * spatial[j] * f.f(grid.xi_abs2(k).sqrt()) * meas;
            }
            let tol = 5.0 / (wiener.n_realizations as f64).sqrt() * y0.mean_abs2()[j].max(1e-12);
            assert!((cov[j] - expect).norm() <= tol, "x {j}: {} vs {expect}", cov[j]);
        }
    }

    #[test]
    fn nyquist_guard_fires() {
        // hot profile on a coarse narrow box: f^2 at the lattice edge is large
        let f = MomentumDistribution::fermi(50.0, 0.0, 2).unwrap();
        let grid = Grid::new(2, 8, 16.0).unwrap();
        let engine = SpectralEngine::new(grid);
        let wiener = WienerSample::new(1, 2);
        assert!(matches!(
            sample_equilibrium(&f, &grid, &engine, &wiener, 0.0, 0.0),
            Err(CoreError::NyquistUnderresolved { .. })
        ));
    }
}
