//! Ensemble time-stepping of the full Hartree flow, the Picard fixed-point
//! solver for the (Z, V) system, and scattering extraction.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{ensemble_spacetime_norm, potential_spacetime_norm, NormSpec};
use crate::error::{CoreError, Result};
use crate::field::{
    free_propagate, lattice_f2_sum, DuhamelState, EnsembleField, EquilibriumHistory, FreeHistory,
    SpaceTimePotential, StoredHistory, TimeTarget,
};
use crate::grid::{Grid, SpectralEngine};
use crate::profiles::{MomentumDistribution, PairKernel, PairPotential};
use crate::response::{invert_id_minus_l2, MarginReport, ResponseSymbol};
use crate::wiener::WienerSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelfConsistency {
    /// potential estimated once at the start of each step
    Frozen,
    /// potential re-estimated from the half-step ensemble
    Midpoint,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvolutionConfig {
    pub dt: f64,
    pub steps: usize,
    pub mode: SelfConsistency,
    /// store X and Y snapshots every this many steps (0 = never)
    pub store_every: usize,
    /// allowed number of box wraps of the fastest perturbation wave
    pub box_guard_factor: f64,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        EvolutionConfig {
            dt: 0.01,
            steps: 100,
            mode: SelfConsistency::Midpoint,
            store_every: 0,
            box_guard_factor: 1.0,
        }
    }
}

pub struct Trajectory {
    /// empirical potential w * (E|X|^2 - E|Y|^2) recorded at every time node
    pub v_emp: SpaceTimePotential,
    /// max relative per-step drift of any realization's L^2 mass
    pub mass_drift_max: f64,
    /// estimated box wraps of the fastest perturbation wave
    pub wrap_risk: f64,
    /// (step, X, Y) snapshots
    pub snapshots: Vec<(usize, EnsembleField, EnsembleField)>,
    pub final_x: EnsembleField,
    pub final_y: EnsembleField,
}

/// Spectral radius carrying the bulk of the perturbation X0 - Y0; zero for an
/// unperturbed ensemble.
fn perturbation_radius(x0: &EnsembleField, y0: &EnsembleField, engine: &SpectralEngine) -> f64 {
    let grid = x0.grid;
    let s = grid.size();
    let mut diff = x0.clone();
    for (a, b) in diff.values.iter_mut().zip(&y0.values) {
        *a -= b;
    }
    let mut spectra = diff.values;
    spectra.par_chunks_mut(s).for_each(|chunk| {
        engine.coefficients(chunk);
    });
    let mut mass = vec![0.0f64; s];
    for r in 0..x0.n_realizations {
        for k in 0..s {
            mass[k] += spectra[r * s + k].norm_sqr();
        }
    }
    let total: f64 = mass.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let mut radius = 0.0f64;
    for k in 0..s {
        if mass[k] > 1e-8 * total {
            radius = radius.max(grid.xi_abs2(k).sqrt());
        }
    }
    radius
}

fn half_kinetic(field: &mut EnsembleField, engine: &SpectralEngine, dt: f64) {
    let grid = field.grid;
    let s = grid.size();
    let mult: Vec<Complex64> = (0..s)
        .map(|k| Complex64::from_polar(1.0, -0.5 * dt * grid.xi_abs2(k)))
        .collect();
    field.values.par_chunks_mut(s).for_each(|chunk| {
        engine.forward(chunk);
        for (c, w) in chunk.iter_mut().zip(&mult) {
            *c *= *w;
        }
        engine.inverse(chunk);
    });
}

fn apply_phase(field: &mut EnsembleField, phi: &[f64], dt: f64) {
    let s = field.grid.size();
    field.values.par_chunks_mut(s).for_each(|chunk| {
        for (c, &p) in chunk.iter_mut().zip(phi) {
            *c *= Complex64::from_polar(1.0, -dt * p);
        }
    });
}

/// w * (E|X|^2 - E|Y|^2) by the coupled-difference estimator; exactly zero
/// when the two ensembles are bitwise equal.
fn coupled_difference(
    x: &EnsembleField,
    y: &EnsembleField,
    w_hat_tab: &[f64],
    engine: &SpectralEngine,
) -> Vec<f64> {
    let s = x.grid.size();
    let mx = x.mean_abs2();
    let my = y.mean_abs2();
    let mut buf: Vec<Complex64> = (0..s).map(|j| Complex64::new(mx[j] - my[j], 0.0)).collect();
    engine.forward(&mut buf);
    for (b, w) in buf.iter_mut().zip(w_hat_tab) {
        *b *= *w;
    }
    engine.inverse(&mut buf);
    buf.into_iter().map(|z| z.re).collect()
}

/// Strang split-step evolution of the Hartree flow for the ensemble X paired
/// with the equilibrium Y (same Wiener sample). Both ensembles march through
/// identical numerical operations; the potential is
/// Phi = w * (E|X|^2 - E|Y|^2) + m with m = w_hat(0) sum f^2 dxi exact, so an
/// unperturbed ensemble stays bitwise equal to its equilibrium.
pub fn evolve_hartree<W: Fn(f64) -> f64>(
    x0: &EnsembleField,
    y0: &EnsembleField,
    w_hat: W,
    m: f64,
    cfg: &EvolutionConfig,
    engine: &SpectralEngine,
) -> Result<Trajectory> {
    x0.check_same_shape(y0)?;
    let grid = x0.grid;
    let s = grid.size();
    let dt = cfg.dt;
    let n_t = cfg.steps + 1;

    let radius = perturbation_radius(x0, y0, engine);
    let travel = 2.0 * radius * cfg.steps as f64 * dt;
    let wrap_risk = travel / grid.len;
    if wrap_risk > cfg.box_guard_factor {
        return Err(CoreError::BoxGuardViolated {
            travel,
            allowed: cfg.box_guard_factor * grid.len,
        });
    }

    let w_hat_tab: Vec<f64> = (0..s).map(|k| w_hat(grid.xi_abs2(k).sqrt())).collect();
    let mut x = x0.clone();
    let mut y = y0.clone();
    let mut v_emp = SpaceTimePotential::zeros(grid, n_t, dt);
    let mut snapshots = Vec::new();
    let mut mass_drift_max = 0.0f64;
    let mut mass_prev = x.mass_per_realization();
    let phi_y: Vec<f64> = vec![m; s];

    for step in 0..=cfg.steps {
        // record the node-time potential estimate
        let d = coupled_difference(&x, &y, &w_hat_tab, engine);
        v_emp.at_mut(step).copy_from_slice(&d);
        if cfg.store_every > 0 && step % cfg.store_every == 0 {
            snapshots.push((step, x.clone(), y.clone()));
        }
        if step == cfg.steps {
            break;
        }

        match cfg.mode {
            SelfConsistency::Frozen => {
                let phi_x: Vec<f64> = d.iter().map(|&v| v + m).collect();
                half_kinetic(&mut x, engine, dt);
                half_kinetic(&mut y, engine, dt);
                apply_phase(&mut x, &phi_x, dt);
                apply_phase(&mut y, &phi_y, dt);
                half_kinetic(&mut x, engine, dt);
                half_kinetic(&mut y, engine, dt);
            }
            SelfConsistency::Midpoint => {
                half_kinetic(&mut x, engine, dt);
                half_kinetic(&mut y, engine, dt);
                let dmid = coupled_difference(&x, &y, &w_hat_tab, engine);
                let phi_x: Vec<f64> = dmid.iter().map(|&v| v + m).collect();
                apply_phase(&mut x, &phi_x, dt);
                apply_phase(&mut y, &phi_y, dt);
                half_kinetic(&mut x, engine, dt);
                half_kinetic(&mut y, engine, dt);
            }
        }
        x.time += dt;
        y.time += dt;
        x.validate(step + 1)?;

        let mass = x.mass_per_realization();
        for (a, b) in mass.iter().zip(&mass_prev) {
            let drift = (a - b).abs() / b.max(1e-300);
            mass_drift_max = mass_drift_max.max(drift);
        }
        mass_prev = mass;
    }

    Ok(Trajectory {
        v_emp,
        mass_drift_max,
        wrap_risk,
        snapshots,
        final_x: x,
        final_y: y,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PicardConfig {
    pub n_time: usize,
    pub dt: f64,
    /// relative residual tolerance in the Theta norms
    pub tol: f64,
    pub max_iter: usize,
    /// include the dimension-2 cubic terms and third-order sources
    pub cubic: bool,
    /// drop all Q terms (closed linear system)
    pub linear_only: bool,
    pub margin_threshold: f64,
}

impl Default for PicardConfig {
    fn default() -> Self {
        PicardConfig {
            n_time: 33,
            dt: 0.02,
            tol: 1e-8,
            max_iter: 16,
            cubic: false,
            linear_only: false,
            margin_threshold: crate::response::DEFAULT_MARGIN_THRESHOLD,
        }
    }
}

pub struct SolverContext<'a> {
    pub f: &'a MomentumDistribution,
    pub w: &'a PairPotential,
    pub kernel: &'a PairKernel,
    pub symbol: &'a ResponseSymbol,
    pub grid: Grid,
    pub engine: &'a SpectralEngine,
    pub wiener: WienerSample,
    /// m = w_hat(0) sum f^2 dxi
    pub m: f64,
}

impl<'a> SolverContext<'a> {
    pub fn mass_shift(f: &MomentumDistribution, w: &PairPotential, grid: &Grid) -> f64 {
        w.w_hat(0.0, grid.dim) * lattice_f2_sum(f, grid)
    }
}

pub struct FixedPointState {
    pub iterations: usize,
    pub z: StoredHistory,
    pub v: SpaceTimePotential,
    /// per iterate: (Theta_Z residual, Theta_V residual), both relative
    pub residuals: Vec<(f64, f64)>,
    /// geometric mean of consecutive residual ratios over the recorded tail
    pub contraction: Option<f64>,
    pub margin: MarginReport,
    pub converged: bool,
}

/// Theta_V = max(L^2_{t,x}, L^{5/2}_{t,x}).
fn theta_v_norm(v: &SpaceTimePotential, engine: &SpectralEngine) -> Result<f64> {
    let a = potential_spacetime_norm(v, &NormSpec::space_time(2.0, 2.0), engine)?;
    let b = potential_spacetime_norm(v, &NormSpec::space_time(2.5, 2.5), engine)?;
    Ok(a.max(b))
}

/// Theta_Z: d=3 max(L^inf_t L^2_{x,omega}, L^{10/3}_t W^{1/2,10/3}_x L^2_omega);
/// d=2 max(L^inf_t L^2_{x,omega}, L^4_{t,x} L^2_omega).
fn theta_z_norm(z: &[EnsembleField], dt: f64, dim: usize, engine: &SpectralEngine) -> Result<f64> {
    let sup = ensemble_spacetime_norm(
        z,
        &NormSpec {
            p: f64::INFINITY,
            q: 2.0,
            s: 0.0,
            omega_inside: true,
        },
        dt,
        engine,
    )?;
    let dispersive = if dim == 3 {
        ensemble_spacetime_norm(
            z,
            &NormSpec {
                p: 10.0 / 3.0,
                q: 10.0 / 3.0,
                s: 0.5,
                omega_inside: true,
            },
            dt,
            engine,
        )?
    } else {
        ensemble_spacetime_norm(
            z,
            &NormSpec {
                p: 4.0,
                q: 4.0,
                s: 0.0,
                omega_inside: true,
            },
            dt,
            engine,
        )?
    };
    Ok(sup.max(dispersive))
}

fn accumulate_two_re(out: &mut [f64], a: &[Complex64], b: &[Complex64], n: usize) {
    let s = out.len();
    out.par_iter_mut().enumerate().for_each(|(x, o)| {
        let mut acc = 0.0;
        for r in 0..n {
            let ar = a[r * s + x];
            let br = b[r * s + x];
            acc += ar.re * br.re + ar.im * br.im;
        }
        *o += 2.0 * acc / n as f64;
    });
}

fn accumulate_abs2(out: &mut [f64], a: &[Complex64], n: usize) {
    let s = out.len();
    out.par_iter_mut().enumerate().for_each(|(x, o)| {
        let mut acc = 0.0;
        for r in 0..n {
            acc += a[r * s + x].norm_sqr();
        }
        *o += acc / n as f64;
    });
}

/// Solve the fixed point (Z, V) = (Id - L)^{-1} [ C_0 + Q(Z, w*V) ] by Picard
/// iteration from (0, 0). The Z update and every ensemble average are
/// assembled in one streamed time loop per iterate.
pub fn picard_fixed_point(
    ctx: &SolverContext,
    z0: &EnsembleField,
    cfg: &PicardConfig,
) -> Result<FixedPointState> {
    let grid = ctx.grid;
    if z0.grid != grid || z0.n_realizations != ctx.wiener.n_realizations {
        return Err(CoreError::GridMismatch("Z0 does not match solver context".into()));
    }
    if cfg.cubic && grid.dim != 2 {
        return Err(CoreError::InvalidParameter(
            "cubic fixed point is the dimension-2 system".into(),
        ));
    }
    let s = grid.size();
    let n = ctx.wiener.n_realizations;
    let n_t = cfg.n_time;
    let dt = cfg.dt;
    let m = ctx.m;
    let engine = ctx.engine;
    let w_hat = {
        let w = ctx.w.clone();
        let dim = grid.dim;
        move |xi: f64| w.w_hat(xi, dim)
    };

    let y_hist = EquilibriumHistory::new(ctx.f, &grid, &ctx.wiener, n_t, dt, m)?;
    let sz0_hist = FreeHistory::new(z0, engine, n_t, dt, m);

    // C_0 potential source 2 Re E(conj(Y) S(t) Z_0), iteration independent
    let mut c0 = SpaceTimePotential::zeros(grid, n_t, dt);
    {
        let mut y_buf = vec![Complex64::default(); n * s];
        let mut z_buf = vec![Complex64::default(); n * s];
        for j in 0..n_t {
            y_hist.write_at(j, engine, &mut y_buf);
            sz0_hist.write_at(j, engine, &mut z_buf);
            accumulate_two_re(c0.at_mut(j), &y_buf, &z_buf, n);
        }
    }

    let zeros_hist = || StoredHistory {
        fields: (0..n_t)
            .map(|j| {
                let mut f = EnsembleField::zeros(grid, n, j as f64 * dt);
                f.provenance = Some(ctx.wiener);
                f
            })
            .collect(),
    };

    let mut z_cur = zeros_hist();
    let mut v_cur = SpaceTimePotential::zeros(grid, n_t, dt);
    let mut residuals: Vec<(f64, f64)> = Vec::new();
    let mut margin_report: Option<MarginReport> = None;
    let mut converged = false;
    let mut iterations = 0;

    for it in 0..cfg.max_iter {
        iterations = it + 1;
        let v_prime = v_cur.convolve_w(engine, &w_hat);

        let mut z_next = zeros_hist();
        let mut source = c0.clone();

        let mut y_buf = vec![Complex64::default(); n * s];
        let mut sz0_buf = vec![Complex64::default(); n * s];
        let mut s_wy = DuhamelState::new(grid, n); // W_{V'}(Y)
        let mut s_wwy = DuhamelState::new(grid, n); // W_{V'}^2(Y)
        let mut s_wz = DuhamelState::new(grid, n); // W_{V'}(Z_k)
        let mut s_wsz0 = if cfg.cubic {
            Some(DuhamelState::new(grid, n)) // W_{V'}(S Z_0)
        } else {
            None
        };
        let mut s_www = if cfg.cubic {
            Some(DuhamelState::new(grid, n)) // W_{V'}^3(Y)
        } else {
            None
        };
        let mut s_wwz = if cfg.cubic {
            Some(DuhamelState::new(grid, n)) // W_{V'}^2(Z_k)
        } else {
            None
        };

        for j in 0..n_t {
            y_hist.write_at(j, engine, &mut y_buf);
            sz0_hist.write_at(j, engine, &mut sz0_buf);
            let z_j = &z_cur.fields[j];

            s_wy.advance(engine, m, dt, v_prime.at(j), &y_buf);
            s_wwy.advance(engine, m, dt, v_prime.at(j), &s_wy.w.values);
            s_wz.advance(engine, m, dt, v_prime.at(j), &z_j.values);
            if let Some(st) = s_wsz0.as_mut() {
                st.advance(engine, m, dt, v_prime.at(j), &sz0_buf);
            }
            if let Some(st) = s_www.as_mut() {
                st.advance(engine, m, dt, v_prime.at(j), &s_wwy.w.values);
            }
            if let Some(st) = s_wwz.as_mut() {
                st.advance(engine, m, dt, v_prime.at(j), &s_wz.w.values);
            }

            // Z_{k+1}(t_j) = S(t_j) Z_0 + W^2(Y) + W(Z_k); the closed linear
            // system keeps Z = S(t) Z_0 only
            {
                let zj = &mut z_next.fields[j];
                zj.values.copy_from_slice(&sz0_buf);
                if !cfg.linear_only {
                    for ((a, b), c) in zj
                        .values
                        .iter_mut()
                        .zip(&s_wwy.w.values)
                        .zip(&s_wz.w.values)
                    {
                        *a += b + c;
                    }
                }
            }

            if !cfg.linear_only {
                let slice = source.at_mut(j);
                // E|Z_k|^2
                accumulate_abs2(slice, &z_j.values, n);
                // Q2 diagonal: E|W(Y)|^2 + 2 Re E(conj(Y) W^2(Y))
                accumulate_abs2(slice, &s_wy.w.values, n);
                accumulate_two_re(slice, &y_buf, &s_wwy.w.values, n);
                if cfg.cubic {
                    // third-order source 2 Re E(conj(W(Y)) S Z_0 + conj(Y) W(S Z_0))
                    accumulate_two_re(slice, &s_wy.w.values, &sz0_buf, n);
                    accumulate_two_re(slice, &y_buf, &s_wsz0.as_ref().unwrap().w.values, n);
                    // C1(V) = 2 Re E(conj(W(Y)) W^2(Y) + conj(Y) W^3(Y))
                    accumulate_two_re(slice, &s_wy.w.values, &s_wwy.w.values, n);
                    accumulate_two_re(slice, &y_buf, &s_www.as_ref().unwrap().w.values, n);
                    // C2(Z, V) = 2 Re E(conj(W(Y)) W(Z) + conj(Y) W^2(Z))
                    accumulate_two_re(slice, &s_wy.w.values, &s_wz.w.values, n);
                    accumulate_two_re(slice, &y_buf, &s_wwz.as_ref().unwrap().w.values, n);
                } else {
                    // Q1(Z_k, V') = 2 Re E(conj(W(Y)) Z + conj(Y) W(Z))
                    accumulate_two_re(slice, &s_wy.w.values, &z_j.values, n);
                    accumulate_two_re(slice, &y_buf, &s_wz.w.values, n);
                }
            }
        }

        let (v_next, rep) = invert_id_minus_l2(
            &source,
            &w_hat,
            ctx.kernel,
            engine,
            ctx.symbol,
            cfg.margin_threshold,
        )?;
        margin_report = Some(rep);

        // residuals in the discrete Theta norms, relative
        let mut dv = v_next.clone();
        for (a, b) in dv.values.iter_mut().zip(&v_cur.values) {
            *a -= b;
        }
        let v_scale = theta_v_norm(&v_next, engine)?.max(1e-300);
        let res_v = theta_v_norm(&dv, engine)? / v_scale;

        let dz: Vec<EnsembleField> = (0..n_t)
            .map(|j| {
                let mut d = z_next.fields[j].clone();
                for (a, b) in d.values.iter_mut().zip(&z_cur.fields[j].values) {
                    *a -= b;
                }
                d
            })
            .collect();
        let z_scale = theta_z_norm(&z_next.fields, dt, grid.dim, engine)?.max(1e-300);
        let res_z = theta_z_norm(&dz, dt, grid.dim, engine)? / z_scale;

        residuals.push((res_z, res_v));
        z_cur = z_next;
        v_cur = v_next;

        let total = res_z.max(res_v);
        if total < cfg.tol {
            converged = true;
            break;
        }
        // stall detection: residual ratio >= 1 over three consecutive iterates
        let k = residuals.len();
        if k >= 4 {
            let bad = (k - 3..k).all(|i| {
                let prev = residuals[i - 1].0.max(residuals[i - 1].1);
                let cur = residuals[i].0.max(residuals[i].1);
                cur >= prev
            });
            if bad {
                return Err(CoreError::NoContraction { consecutive: 3 });
            }
        }
    }

    let contraction = if residuals.len() >= 2 {
        let mut ratios = Vec::new();
        for i in 1..residuals.len() {
            let prev = residuals[i - 1].0.max(residuals[i - 1].1);
            let cur = residuals[i].0.max(residuals[i].1);
            if prev > 0.0 && cur > 0.0 {
                ratios.push(cur / prev);
            }
        }
        if ratios.is_empty() {
            None
        } else {
            Some(ratios.iter().product::<f64>().powf(1.0 / ratios.len() as f64))
        }
    } else {
        None
    };

    Ok(FixedPointState {
        iterations,
        z: z_cur,
        v: v_cur,
        residuals,
        contraction,
        margin: margin_report.expect("at least one iterate"),
        converged,
    })
}

/// The Appendix system for dimension 2: third-order fixed point with the
/// cubic terms enabled.
pub fn picard_dim2_cubic(
    ctx: &SolverContext,
    z0: &EnsembleField,
    cfg: &PicardConfig,
) -> Result<FixedPointState> {
    let mut cfg = cfg.clone();
    cfg.cubic = true;
    picard_fixed_point(ctx, z0, &cfg)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScatteringReport {
    pub sample_times: Vec<f64>,
    /// || S(-t_i) Z(t_i) - S(-t_{i+1}) Z(t_{i+1}) ||_{L^2_omega H^{1/2}}
    pub cauchy_differences: Vec<f64>,
    /// || S(-t) W_V(Y)(t) - profile at the last sample ||_{L^3_x L^2_omega}
    pub wvy_profile_residuals: Vec<f64>,
    /// norm of the extracted free profile Z_+
    pub zplus_norm: f64,
}

/// Back-propagate the perturbation history at sampled times and report the
/// Cauchy trends of the free profiles.
pub fn extract_scattering(
    ctx: &SolverContext,
    state: &FixedPointState,
    sample_times: &[usize],
) -> Result<(ScatteringReport, EnsembleField)> {
    let grid = ctx.grid;
    let engine = ctx.engine;
    let dt = state.v.dt;
    let m = ctx.m;

    // back-propagated Z profiles
    let profiles: Vec<EnsembleField> = sample_times
        .iter()
        .map(|&j| {
            let t = j as f64 * dt;
            free_propagate(&state.z.fields[j], engine, -t, m)
        })
        .collect();
    let spec_h12 = NormSpec {
        p: f64::INFINITY,
        q: 2.0,
        s: 0.5,
        omega_inside: true,
    };
    let mut cauchy = Vec::new();
    for pair in profiles.windows(2) {
        let mut d = pair[1].clone();
        for (a, b) in d.values.iter_mut().zip(&pair[0].values) {
            *a -= b;
        }
        cauchy.push(ensemble_spacetime_norm(&[d], &spec_h12, 1.0, engine)?);
    }
    let zplus = profiles.last().unwrap().clone();
    let zplus_norm = ensemble_spacetime_norm(&[zplus.clone()], &spec_h12, 1.0, engine)?;

    // W_V(Y) profile trend in L^3_x L^2_omega
    let v_prime = state.v.convolve_w(engine, {
        let w = ctx.w.clone();
        let dim = grid.dim;
        move |xi: f64| w.w_hat(xi, dim)
    });
    let y_hist = EquilibriumHistory::new(ctx.f, &grid, &ctx.wiener, state.v.n_time, dt, m)?;
    let mut wvy_profiles: Vec<Option<EnsembleField>> = vec![None; sample_times.len()];
    crate::field::duhamel_scan(&v_prime, &y_hist, engine, m, |j, w| {
        if let Some(pos) = sample_times.iter().position(|&jt| jt == j) {
            let t = j as f64 * dt;
            wvy_profiles[pos] = Some(free_propagate(w, engine, -t, m));
        }
    })?;
    let wvy: Vec<EnsembleField> = wvy_profiles.into_iter().map(|o| o.unwrap()).collect();
    let spec_l3 = NormSpec {
        p: f64::INFINITY,
        q: 3.0,
        s: 0.0,
        omega_inside: true,
    };
    let last = wvy.last().unwrap().clone();
    let mut wvy_res = Vec::new();
    for prof in &wvy {
        let mut d = prof.clone();
        for (a, b) in d.values.iter_mut().zip(&last.values) {
            *a -= b;
        }
        wvy_res.push(ensemble_spacetime_norm(&[d], &spec_l3, 1.0, engine)?);
    }

    Ok((
        ScatteringReport {
            sample_times: sample_times.iter().map(|&j| j as f64 * dt).collect(),
            cauchy_differences: cauchy,
            wvy_profile_residuals: wvy_res,
            zplus_norm,
        },
        zplus,
    ))
}

/// Assemble the density-matrix scattering inputs from a solved fixed point:
/// truncated coefficients of X(t) = Y + W_{V'}(Y) + Z at the sampled times,
/// the paired Y_0 and Z_+ coefficients, and the primed potential for the
/// wave operator.
pub fn assemble_corollary_input<'a>(
    ctx: &'a SolverContext<'a>,
    state: &FixedPointState,
    zplus: &EnsembleField,
    samples: &[usize],
    xi_cut: f64,
) -> Result<crate::diagnostics::CorollaryInput<'a>> {
    use crate::diagnostics::{truncated_coefficients, truncated_modes};
    let grid = ctx.grid;
    let engine = ctx.engine;
    let modes = truncated_modes(&grid, xi_cut)?;
    let dt = state.v.dt;
    let w_hat = {
        let w = ctx.w.clone();
        let dim = grid.dim;
        move |xi: f64| w.w_hat(xi, dim)
    };
    let v_prime = state.v.convolve_w(engine, &w_hat);
    let y_hist = EquilibriumHistory::new(ctx.f, &grid, &ctx.wiener, state.v.n_time, dt, ctx.m)?;
    let s = grid.size();
    let n = ctx.wiener.n_realizations;
    let mut y_buf = vec![Complex64::default(); n * s];
    let mut x_coeffs = Vec::with_capacity(samples.len());
    // W_{V'}(Y) visited at the sampled nodes only
    let mut wvy_at: Vec<Option<EnsembleField>> = vec![None; samples.len()];
    crate::field::duhamel_scan(&v_prime, &y_hist, engine, ctx.m, |j, w| {
        if let Some(pos) = samples.iter().position(|&jt| jt == j) {
            wvy_at[pos] = Some(w.clone());
        }
    })?;
    for (pos, &j) in samples.iter().enumerate() {
        y_hist.write_at(j, engine, &mut y_buf);
        let mut x = EnsembleField {
            grid,
            n_realizations: n,
            time: j as f64 * dt,
            values: y_buf.clone(),
            provenance: Some(ctx.wiener),
        };
        let wvy = wvy_at[pos].as_ref().expect("sampled node visited");
        for ((a, b), c) in x
            .values
            .iter_mut()
            .zip(&wvy.values)
            .zip(&state.z.fields[j].values)
        {
            *a += b + c;
        }
        x_coeffs.push(truncated_coefficients(&x, &modes, engine));
    }
    let y0 = crate::field::sample_equilibrium(ctx.f, &grid, engine, &ctx.wiener, 0.0, ctx.m)?;
    let y0_coeffs = truncated_coefficients(&y0, &modes, engine);
    let zplus_coeffs = truncated_coefficients(zplus, &modes, engine);
    Ok(crate::diagnostics::CorollaryInput {
        grid,
        modes,
        times: samples.iter().map(|&j| j as f64 * dt).collect(),
        x_coeffs,
        y0_coeffs,
        zplus_coeffs,
        v: v_prime,
        m: ctx.m,
        f: ctx.f,
    })
}
