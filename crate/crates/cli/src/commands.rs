//! Subcommand pipelines. Every run writes its artifacts plus a manifest into
//! the output directory; failures map to the documented exit codes.

use num_complex::Complex64;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{AppError, Result};
use crate::io::{diag, RunDir};
use hartree_core::diagnostics::{
    build_density_operator, corollary_check, schatten_norm, strichartz_admissible, GammaRef,
    NormSpec,
};
use hartree_core::field::{
    lattice_f2_sum, sample_equilibrium, sample_structured_perturbation, EnsembleField,
    SeparableTerm, SpaceTimePotential, StructuredDistribution,
};
use hartree_core::grid::{Grid, SpectralEngine};
use hartree_core::profiles::{build_kernel_h, check_hypotheses, MomentumDistribution, PairKernel, PairPotential};
use hartree_core::quadratic::{
    kernel_k_norms, q2_ensemble, q2_fourier, q2_fourier_j1, q2_fourier_j2, EnsembleContext,
};
use hartree_core::response::{compute_mf, epsilon_h, invertibility_margin, ResponseSymbol};
use hartree_core::solver::{
    evolve_hartree, extract_scattering, picard_fixed_point, EvolutionConfig, PicardConfig,
    SolverContext,
};
use hartree_core::wiener::WienerSample;

/// Everything the pipelines share, built once per invocation.
pub struct Lab {
    pub cfg: RunConfig,
    pub f: MomentumDistribution,
    pub w: PairPotential,
    pub grid: Grid,
    pub engine: SpectralEngine,
    pub wiener: WienerSample,
    pub m: f64,
}

impl Lab {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        let f = cfg.momentum_distribution()?;
        let w = cfg.pair_potential()?;
        let grid = Grid::new(cfg.profile.dim, cfg.grid.n, cfg.grid.box_length)?;
        let engine = SpectralEngine::new(grid);
        let wiener = WienerSample::new(cfg.ensemble.seed, cfg.ensemble.n_realizations);
        let m = SolverContext::mass_shift(&f, &w, &grid);
        Ok(Lab {
            cfg,
            f,
            w,
            grid,
            engine,
            wiener,
            m,
        })
    }

    pub fn kernel(&self) -> Result<PairKernel> {
        Ok(build_kernel_h(&self.f)?)
    }

    pub fn symbol(&self, kernel: &PairKernel) -> Result<ResponseSymbol> {
        let r = &self.cfg.response;
        let omega: Vec<f64> = (0..r.omega_nodes)
            .map(|i| r.omega_max * i as f64 / (r.omega_nodes - 1).max(1) as f64)
            .collect();
        let xi: Vec<f64> = (0..r.xi_nodes)
            .map(|i| r.xi_max * (i as f64 + 0.5) / r.xi_nodes as f64)
            .collect();
        Ok(compute_mf(kernel, &omega, &xi)?)
    }

    pub fn w_hat(&self) -> impl Fn(f64) -> f64 + Sync + Clone + '_ {
        let w = self.w.clone();
        let dim = self.grid.dim;
        move |xi: f64| w.w_hat(xi, dim)
    }

    pub fn perturbation(&self) -> Result<EnsembleField> {
        let p = &self.cfg.perturbation;
        match p.kind.as_str() {
            "none" => Ok(EnsembleField::zeros(
                self.grid,
                self.wiener.n_realizations,
                0.0,
            )),
            "gaussian_bump" => {
                let s = self.grid.size();
                let dx = self.grid.dx();
                let center = self.grid.len / 2.0;
                let spatial: Vec<f64> = (0..s)
                    .map(|j| {
                        let idx = self.grid.unravel(j);
                        let mut d2 = 0.0;
                        for a in 0..self.grid.dim {
                            // periodic distance to the box center
                            let mut d = (idx[a] as f64 * dx - center).abs();
                            d = d.min(self.grid.len - d);
                            d2 += d * d;
                        }
                        (-d2 / (p.width * p.width)).exp()
                    })
                    .collect();
                let mw = p.momentum_width;
                let momentum: Vec<f64> = (0..s)
                    .map(|k| p.amplitude * (-self.grid.xi_abs2(k) * mw * mw / 2.0).exp())
                    .collect();
                Ok(sample_structured_perturbation(
                    &StructuredDistribution::Separable(vec![SeparableTerm { spatial, momentum }]),
                    &self.grid,
                    &self.engine,
                    &self.wiener,
                )?)
            }
            other => Err(AppError::Config(format!("unknown perturbation kind '{other}'"))),
        }
    }

    pub fn xi_cut(&self) -> f64 {
        (self.grid.n as f64 / 2.0 - 1.0) * self.grid.dxi() * self.cfg.diagnostics.xi_cut_factor
    }

    pub fn gamma_ref(&self) -> Result<GammaRef> {
        match self.cfg.diagnostics.gamma_ref.as_str() {
            "empirical" => Ok(GammaRef::Empirical),
            "multiplier" => Ok(GammaRef::Multiplier),
            other => Err(AppError::Config(format!("unknown gamma_ref '{other}'"))),
        }
    }
}

#[derive(Serialize)]
struct EpsilonBlock {
    value: f64,
    stabilized: bool,
    box_maxima: Vec<f64>,
}

pub fn check_hypotheses_cmd(lab: &Lab, dir: &mut RunDir) -> Result<i32> {
    let kernel = lab.kernel()?;
    let rows: Vec<Vec<f64>> = kernel.r.iter().zip(&kernel.h).map(|(r, h)| vec![*r, *h]).collect();
    dir.write_csv("kernel.csv", "r,h", &rows)?;
    let eps = epsilon_h(&kernel);
    let report = check_hypotheses(&lab.f, &lab.w, &kernel, eps.value);
    #[derive(Serialize)]
    struct Out<'a> {
        report: &'a hartree_core::profiles::HypothesisReport,
        eps_h: EpsilonBlock,
        kernel_i0: f64,
        kernel_i1: f64,
        kernel_i_reg: f64,
        kernel_c1: f64,
        kernel_c2: f64,
    }
    dir.write_json(
        "hypotheses.json",
        &Out {
            report: &report,
            eps_h: EpsilonBlock {
                value: eps.value,
                stabilized: eps.stabilized,
                box_maxima: eps.box_maxima.clone(),
            },
            kernel_i0: kernel.i0,
            kernel_i1: kernel.i1,
            kernel_i_reg: kernel.i_reg,
            kernel_c1: kernel.c1,
            kernel_c2: kernel.c2,
        },
    )?;
    if report.pass {
        Ok(0)
    } else {
        diag("hypothesis check failed; see hypotheses.json");
        Ok(2)
    }
}

pub fn sample_equilibrium_cmd(lab: &Lab, dir: &mut RunDir) -> Result<i32> {
    let kernel = lab.kernel()?;
    let y = sample_equilibrium(&lab.f, &lab.grid, &lab.engine, &lab.wiener, 0.0, lab.m)?;
    dir.write_field("equilibrium", &y)?;

    let target = lattice_f2_sum(&lab.f, &lab.grid);
    let m2 = y.mean_abs2();
    let avg2: f64 = m2.iter().sum::<f64>() / m2.len() as f64;
    let s = lab.grid.size();
    let mut m4 = 0.0;
    for r in 0..y.n_realizations {
        for v in y.realization(r) {
            m4 += v.norm_sqr() * v.norm_sqr();
        }
    }
    m4 /= (y.n_realizations * s) as f64;

    // covariance slice along the first axis
    let n = lab.grid.n;
    let mut rows = Vec::new();
    for off in 0..n / 2 {
        let mut acc = Complex64::default();
        for r in 0..y.n_realizations {
            let vals = y.realization(r);
            for j in 0..s {
                let idx = lab.grid.unravel(j);
                let mut idx2 = idx;
                idx2[0] = (idx[0] + off) % n;
                let mut flat2 = 0usize;
                for a in 0..lab.grid.dim {
                    flat2 = flat2 * n + idx2[a];
                }
                acc += vals[j].conj() * vals[flat2];
            }
        }
        let emp = acc / Complex64::new((y.n_realizations * s) as f64, 0.0);
        let dist = off as f64 * lab.grid.dx();
        rows.push(vec![dist, emp.re, emp.im, kernel.eval(dist)]);
    }
    dir.write_csv("covariance.csv", "offset,empirical_re,empirical_im,kernel_h", &rows)?;

    #[derive(Serialize)]
    struct Stats {
        lattice_target: f64,
        empirical_mean_sq: f64,
        isometry_deviation: f64,
        kurtosis: f64,
        mc_tolerance: f64,
        n_realizations: usize,
    }
    let mc = 5.0 / (y.n_realizations as f64).sqrt();
    dir.write_json(
        "equilibrium_stats.json",
        &Stats {
            lattice_target: target,
            empirical_mean_sq: avg2,
            isometry_deviation: (avg2 - target).abs() / target,
            kurtosis: m4 / (avg2 * avg2),
            mc_tolerance: mc,
            n_realizations: y.n_realizations,
        },
    )?;
    Ok(0)
}

pub fn response_map_cmd(lab: &Lab, dir: &mut RunDir) -> Result<i32> {
    let kernel = lab.kernel()?;
    let symbol = lab.symbol(&kernel)?;
    let mut rows = Vec::new();
    for (io, &om) in symbol.omega.iter().enumerate() {
        for (ix, &xi) in symbol.xi.iter().enumerate() {
            let v = symbol.value(io, ix);
            rows.push(vec![om, xi, v.re, v.im, symbol.errors[io * symbol.xi.len() + ix]]);
        }
    }
    dir.write_csv("response_symbol.csv", "omega,xi,re_mf,im_mf,err", &rows)?;
    let margin = invertibility_margin(&symbol, lab.w_hat(), lab.cfg.fixed_point.margin_threshold);
    dir.write_json("margin.json", &margin)?;
    if margin.pass {
        Ok(0)
    } else {
        diag(&format!(
            "resonant symbol: margin {:.3e} below threshold {:.3e}",
            margin.margin, margin.threshold
        ));
        Ok(2)
    }
}

fn smooth_test_potential(grid: Grid, n_t: usize, dt: f64, amp: f64, seed: u64) -> SpaceTimePotential {
    let s = grid.size();
    let engine = SpectralEngine::new(grid);
    let mut v = SpaceTimePotential::zeros(grid, n_t, dt);
    for j in 0..n_t {
        let mut coeffs = vec![Complex64::default(); s];
        for k in 0..s {
            let idx = grid.unravel(k);
            let within = (0..grid.dim).all(|a| grid.signed_index(idx[a]).unsigned_abs() <= 2);
            if !within {
                continue;
            }
            let kk: Vec<i64> = (0..grid.dim).map(|a| grid.signed_index(idx[a])).collect();
            let t = j as f64 * dt;
            let phase = (seed as f64 * 0.137
                + kk[0] as f64 * 1.3
                + kk.get(1).copied().unwrap_or(0) as f64 * 0.7
                + t * 2.2)
                .sin();
            coeffs[k] = Complex64::new(phase, 0.0);
        }
        let mut buf = coeffs;
        engine.synthesize(&mut buf);
        for (o, z) in v.at_mut(j).iter_mut().zip(&buf) {
            *o = amp * z.re;
        }
    }
    v
}

pub fn q2_verify_cmd(lab: &Lab, dir: &mut RunDir) -> Result<i32> {
    let kernel = lab.kernel()?;
    let fp = &lab.cfg.fixed_point;
    let n_t = fp.n_time;
    let dt = fp.dt;
    let ctx = EnsembleContext {
        f: &lab.f,
        grid: lab.grid,
        engine: &lab.engine,
        wiener: lab.wiener,
        m: lab.m,
        n_time: n_t,
        dt,
    };
    let amp = lab.cfg.perturbation.amplitude.max(0.1);
    let u = smooth_test_potential(lab.grid, n_t, dt, amp, 11);
    let v = smooth_test_potential(lab.grid, n_t, dt, 0.8 * amp, 23);
    let eval_times: Vec<usize> = vec![n_t / 2, n_t - 1];

    let ens = q2_ensemble(&ctx, &u, &v)?;
    let four = q2_fourier(&u, &v, &kernel, &lab.engine, &eval_times)?;
    let j1 = q2_fourier_j1(&u, &v, &kernel, &lab.engine, &eval_times)?;
    let j2a = q2_fourier_j2(&u, &v, &kernel, &lab.engine, &eval_times)?;
    let j2b = q2_fourier_j2(&v, &u, &kernel, &lab.engine, &eval_times)?;

    let s = lab.grid.size();
    let mut rows = Vec::new();
    let mut pass = true;
    let mc_tol = 5.0 / (lab.wiener.n_realizations as f64).sqrt();
    for &jt in &eval_times {
        let mut diff_sq = 0.0;
        let mut scale_sq = 0.0;
        let mut trig_dev = 0.0f64;
        for x in 0..s {
            diff_sq += (ens.at(jt)[x] - four.at(jt)[x]).powi(2);
            scale_sq += j1.at(jt)[x].powi(2) + j2a.at(jt)[x].powi(2) + j2b.at(jt)[x].powi(2);
            let sum = j1.at(jt)[x] + j2a.at(jt)[x] + j2b.at(jt)[x];
            trig_dev = trig_dev.max((four.at(jt)[x] - sum).abs());
        }
        let rel = (diff_sq / scale_sq.max(1e-300)).sqrt();
        let trig_rel = trig_dev / scale_sq.sqrt().max(1e-300);
        pass &= rel <= mc_tol && trig_rel <= 1e-10;
        rows.push(vec![jt as f64 * dt, rel, mc_tol, trig_rel]);
    }
    dir.write_csv(
        "q2_verify.csv",
        "time,ensemble_vs_fourier_rel,mc_tolerance,trig_identity_rel",
        &rows,
    )?;
    // bilinear-bound diagnostic: ||Q2(U,V)||_{Theta_V} against ||U|| ||V||
    let theta = |x: &SpaceTimePotential| -> Result<f64> {
        let a = hartree_core::diagnostics::potential_spacetime_norm(
            x,
            &NormSpec::space_time(2.0, 2.0),
            &lab.engine,
        )?;
        let b = hartree_core::diagnostics::potential_spacetime_norm(
            x,
            &NormSpec::space_time(2.5, 2.5),
            &lab.engine,
        )?;
        Ok(a.max(b))
    };
    let bilinear_ratio = theta(&ens)? / (theta(&u)? * theta(&v)?).max(1e-300);
    #[derive(Serialize)]
    struct Out {
        pass: bool,
        mc_tolerance: f64,
        /// ||Q2(U,V)||_{Theta_V} / (||U||_{Theta_V} ||V||_{Theta_V})
        bilinear_bound_ratio: f64,
    }
    dir.write_json(
        "q2_verify.json",
        &Out {
            pass,
            mc_tolerance: mc_tol,
            bilinear_bound_ratio: bilinear_ratio,
        },
    )?;
    Ok(if pass { 0 } else { 2 })
}

pub fn kernel_bound_cmd(lab: &Lab, dir: &mut RunDir) -> Result<i32> {
    let kernel = lab.kernel()?;
    let kb = &lab.cfg.kernel_bound;
    let mut rows = Vec::new();
    let mut violation = false;
    #[derive(Serialize)]
    struct Slopes {
        p1_slope: f64,
        p2_slope: f64,
        max_norm_over_bound: f64,
    }
    let mut slopes = [0.0f64; 2];
    let mut max_ratio = 0.0f64;
    for (pi, &p) in [1u32, 2].iter().enumerate() {
        let mut pts = Vec::new();
        for &lam in &kb.lambdas {
            let eta = [lam * kb.eta_scale, 0.0, 0.0];
            let eta2 = [0.0, kb.eta_scale, 0.0];
            let sample = kernel_k_norms(eta, eta2, &kernel, p)?;
            let ratio = sample.norm_sq / sample.bound;
            max_ratio = max_ratio.max(ratio);
            violation |= sample.norm_sq > sample.bound * (1.0 + 1e-9);
            rows.push(vec![p as f64, lam, sample.norm_sq, sample.bound, ratio]);
            pts.push((lam.ln(), sample.norm_sq.ln()));
        }
        let k = pts.len() as f64;
        let sx: f64 = pts.iter().map(|q| q.0).sum();
        let sy: f64 = pts.iter().map(|q| q.1).sum();
        let sxx: f64 = pts.iter().map(|q| q.0 * q.0).sum();
        let sxy: f64 = pts.iter().map(|q| q.0 * q.1).sum();
        slopes[pi] = (k * sxy - sx * sy) / (k * sxx - sx * sx);
    }
    dir.write_csv("kernel_bound.csv", "p,lambda,norm_sq,bound,ratio", &rows)?;
    // tabulation of the first family member for inspection
    let sample = kernel_k_norms(
        [kb.lambdas[0] * kb.eta_scale, 0.0, 0.0],
        [0.0, kb.eta_scale, 0.0],
        &kernel,
        2,
    )?;
    let mut krows = Vec::new();
    for (it, &t) in sample.t_nodes.iter().enumerate() {
        for (is, &s) in sample.s_nodes.iter().enumerate() {
            krows.push(vec![t, s, sample.values[it * sample.s_nodes.len() + is]]);
        }
    }
    dir.write_csv("kernel_sample.csv", "t,s,K", &krows)?;
    dir.write_json(
        "kernel_bound.json",
        &Slopes {
            p1_slope: slopes[0],
            p2_slope: slopes[1],
            max_norm_over_bound: max_ratio,
        },
    )?;
    Ok(if violation { 2 } else { 0 })
}

pub fn evolve_cmd(lab: &Lab, dir: &mut RunDir) -> Result<i32> {
    let y0 = sample_equilibrium(&lab.f, &lab.grid, &lab.engine, &lab.wiener, 0.0, lab.m)?;
    let z0 = lab.perturbation()?;
    let mut x0 = y0.clone();
    x0.axpy(Complex64::new(1.0, 0.0), &z0);
    let cfg = EvolutionConfig {
        dt: lab.cfg.evolution.dt,
        steps: lab.cfg.evolution.steps,
        mode: lab.cfg.self_consistency()?,
        store_every: lab.cfg.evolution.store_every,
        box_guard_factor: lab.cfg.evolution.box_guard_factor,
    };
    let traj = evolve_hartree(&x0, &y0, lab.w_hat(), lab.m, &cfg, &lab.engine)?;

    let s = lab.grid.size();
    let meas = lab.grid.dx_measure();
    let mut rows = Vec::new();
    for j in 0..traj.v_emp.n_time {
        let slice = traj.v_emp.at(j);
        let l2 = (slice.iter().map(|v| v * v).sum::<f64>() * meas).sqrt();
        let mx = slice.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        rows.push(vec![j as f64 * cfg.dt, l2, mx]);
    }
    dir.write_csv("v_emp_series.csv", "time,l2_norm,max_abs", &rows)?;
    dir.write_field("final_x", &traj.final_x)?;
    for (step, x, _y) in &traj.snapshots {
        dir.write_field(&format!("checkpoints/x_{step:06}"), x)?;
    }

    let stationary = lab.cfg.perturbation.kind == "none";
    #[derive(Serialize)]
    struct Out {
        mass_drift_max: f64,
        wrap_risk: f64,
        stationary_run: bool,
        max_v_emp: f64,
        exact_stationarity: bool,
        grid_points: usize,
    }
    let max_v = traj.v_emp.max_abs();
    dir.write_json(
        "evolve_report.json",
        &Out {
            mass_drift_max: traj.mass_drift_max,
            wrap_risk: traj.wrap_risk,
            stationary_run: stationary,
            max_v_emp: max_v,
            exact_stationarity: stationary && max_v == 0.0,
            grid_points: s,
        },
    )?;
    Ok(0)
}

fn build_solver_parts(lab: &Lab) -> Result<(PairKernel, ResponseSymbol)> {
    let kernel = lab.kernel()?;
    let symbol = lab.symbol(&kernel)?;
    Ok((kernel, symbol))
}

pub fn fixed_point_cmd(lab: &Lab, dir: &mut RunDir) -> Result<i32> {
    let (kernel, symbol) = build_solver_parts(lab)?;
    let ctx = SolverContext {
        f: &lab.f,
        w: &lab.w,
        kernel: &kernel,
        symbol: &symbol,
        grid: lab.grid,
        engine: &lab.engine,
        wiener: lab.wiener,
        m: lab.m,
    };
    let z0 = lab.perturbation()?;
    let fp = &lab.cfg.fixed_point;
    let cfg = PicardConfig {
        n_time: fp.n_time,
        dt: fp.dt,
        tol: fp.tol,
        max_iter: fp.max_iter,
        cubic: fp.cubic,
        linear_only: fp.linear_only,
        margin_threshold: fp.margin_threshold,
    };
    let state = picard_fixed_point(&ctx, &z0, &cfg)?;
    let rows: Vec<Vec<f64>> = state
        .residuals
        .iter()
        .enumerate()
        .map(|(i, (rz, rv))| vec![(i + 1) as f64, *rz, *rv])
        .collect();
    dir.write_csv("residuals.csv", "iteration,res_z,res_v", &rows)?;
    let meas = lab.grid.dx_measure();
    let vrows: Vec<Vec<f64>> = (0..state.v.n_time)
        .map(|j| {
            let slice = state.v.at(j);
            vec![
                j as f64 * fp.dt,
                (slice.iter().map(|v| v * v).sum::<f64>() * meas).sqrt(),
            ]
        })
        .collect();
    dir.write_csv("v_series.csv", "time,l2_norm", &vrows)?;
    #[derive(Serialize)]
    struct Out {
        iterations: usize,
        converged: bool,
        contraction: Option<f64>,
        margin: f64,
    }
    dir.write_json(
        "fixed_point.json",
        &Out {
            iterations: state.iterations,
            converged: state.converged,
            contraction: state.contraction,
            margin: state.margin.margin,
        },
    )?;
    Ok(0)
}

fn spread_samples(n_time: usize, count: usize) -> Vec<usize> {
    let count = count.clamp(3, n_time);
    (0..count)
        .map(|i| {
            let frac = 0.2 + 0.8 * i as f64 / (count - 1) as f64;
            ((n_time - 1) as f64 * frac).round() as usize
        })
        .collect()
}

pub fn scatter_report_cmd(lab: &Lab, dir: &mut RunDir) -> Result<i32> {
    let (kernel, symbol) = build_solver_parts(lab)?;
    let ctx = SolverContext {
        f: &lab.f,
        w: &lab.w,
        kernel: &kernel,
        symbol: &symbol,
        grid: lab.grid,
        engine: &lab.engine,
        wiener: lab.wiener,
        m: lab.m,
    };
    let z0 = lab.perturbation()?;
    let fp = &lab.cfg.fixed_point;
    let cfg = PicardConfig {
        n_time: fp.n_time,
        dt: fp.dt,
        tol: fp.tol,
        max_iter: fp.max_iter,
        cubic: fp.cubic,
        linear_only: fp.linear_only,
        margin_threshold: fp.margin_threshold,
    };
    let state = picard_fixed_point(&ctx, &z0, &cfg)?;
    let samples = spread_samples(fp.n_time, lab.cfg.diagnostics.sample_times);
    let (report, zplus) = extract_scattering(&ctx, &state, &samples)?;
    dir.write_field("z_plus", &zplus)?;
    let rows: Vec<Vec<f64>> = report
        .sample_times
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            vec![
                t,
                report.cauchy_differences.get(i).copied().unwrap_or(f64::NAN),
                report.wvy_profile_residuals[i],
            ]
        })
        .collect();
    dir.write_csv("scattering_trends.csv", "time,cauchy_difference,wvy_residual", &rows)?;
    dir.write_json("scattering.json", &report)?;
    Ok(0)
}

pub fn norms_cmd(lab: &Lab, dir: &mut RunDir) -> Result<i32> {
    let z0 = lab.perturbation()?;
    let fp = &lab.cfg.fixed_point;
    let n_t = fp.n_time.min(17);
    let history: Vec<EnsembleField> = (0..n_t)
        .map(|j| hartree_core::field::free_propagate(&z0, &lab.engine, j as f64 * fp.dt, lab.m))
        .collect();
    let dim = lab.grid.dim;
    let specs: Vec<(&str, NormSpec)> = vec![
        (
            "Linf_t_L2",
            NormSpec {
                p: f64::INFINITY,
                q: 2.0,
                s: 0.0,
                omega_inside: true,
            },
        ),
        (
            "dispersive",
            if dim == 3 {
                NormSpec {
                    p: 10.0 / 3.0,
                    q: 10.0 / 3.0,
                    s: 0.5,
                    omega_inside: true,
                }
            } else {
                NormSpec {
                    p: 4.0,
                    q: 4.0,
                    s: 0.0,
                    omega_inside: true,
                }
            },
        ),
        (
            "H_half",
            NormSpec {
                p: f64::INFINITY,
                q: 2.0,
                s: 0.5,
                omega_inside: true,
            },
        ),
    ];
    #[derive(Serialize)]
    struct NormOut {
        name: String,
        p: f64,
        q: f64,
        s: f64,
        value: f64,
        admissible: bool,
    }
    let mut out = Vec::new();
    for (name, spec) in specs {
        let v = hartree_core::diagnostics::ensemble_spacetime_norm(&history, &spec, fp.dt, &lab.engine)?;
        out.push(NormOut {
            name: name.into(),
            p: spec.p,
            q: spec.q,
            s: spec.s,
            value: v,
            admissible: strichartz_admissible(spec.p, spec.q, spec.s, dim),
        });
    }
    dir.write_json("norms.json", &out)?;
    Ok(0)
}

pub fn density_cmd(lab: &Lab, dir: &mut RunDir) -> Result<i32> {
    let y = sample_equilibrium(&lab.f, &lab.grid, &lab.engine, &lab.wiener, 0.0, lab.m)?;
    let op = build_density_operator(&y, lab.xi_cut(), &lab.engine)?;
    let dim = op.modes.len();
    let mut max_off = 0.0f64;
    let mut max_herm = 0.0f64;
    let mut diag_rows = Vec::new();
    let mut max_diag_dev = 0.0f64;
    for a in 0..dim {
        let f2 = lab.f.f2(op.xi_abs[a]);
        let d = op.matrix[(a, a)].re;
        max_diag_dev = max_diag_dev.max((d - f2).abs());
        diag_rows.push(vec![op.xi_abs[a], f2, d]);
        for b in 0..dim {
            if a != b {
                max_off = max_off.max(op.matrix[(a, b)].norm());
            }
            max_herm = max_herm.max((op.matrix[(a, b)] - op.matrix[(b, a)].conj()).norm());
        }
    }
    diag_rows.sort_by(|x, y| x[0].partial_cmp(&y[0]).unwrap());
    dir.write_csv("density_diagonal.csv", "xi,f_squared,gamma_diag", &diag_rows)?;

    let eig = op.matrix.clone().symmetric_eigen();
    let min_eig = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    let trace: f64 = (0..dim).map(|a| op.matrix[(a, a)].re).sum();

    let p_cfg = lab.cfg.diagnostics.schatten_p;
    let s_cfg = lab.cfg.diagnostics.schatten_s;
    #[derive(Serialize)]
    struct Out {
        modes: usize,
        xi_cut: f64,
        normalization: f64,
        max_offdiagonal: f64,
        max_diag_dev_from_f2: f64,
        hermiticity_residual: f64,
        min_eigenvalue: f64,
        trace: f64,
        mc_tolerance: f64,
        schatten_1: f64,
        schatten_2: f64,
        schatten_cfg_p: f64,
        schatten_cfg_value: f64,
    }
    dir.write_json(
        "density.json",
        &Out {
            modes: dim,
            xi_cut: lab.xi_cut(),
            normalization: op.normalization,
            max_offdiagonal: max_off,
            max_diag_dev_from_f2: max_diag_dev,
            hermiticity_residual: max_herm,
            min_eigenvalue: min_eig,
            trace,
            mc_tolerance: 5.0 / (lab.wiener.n_realizations as f64).sqrt(),
            schatten_1: schatten_norm(&op, 1.0, s_cfg)?,
            schatten_2: schatten_norm(&op, 2.0, s_cfg)?,
            schatten_cfg_p: p_cfg,
            schatten_cfg_value: schatten_norm(&op, p_cfg, s_cfg)?,
        },
    )?;
    Ok(0)
}

pub fn corollary_check_cmd(lab: &Lab, dir: &mut RunDir) -> Result<i32> {
    let (kernel, symbol) = build_solver_parts(lab)?;
    let ctx = SolverContext {
        f: &lab.f,
        w: &lab.w,
        kernel: &kernel,
        symbol: &symbol,
        grid: lab.grid,
        engine: &lab.engine,
        wiener: lab.wiener,
        m: lab.m,
    };
    let z0 = lab.perturbation()?;
    let fp = &lab.cfg.fixed_point;
    let cfg = PicardConfig {
        n_time: fp.n_time,
        dt: fp.dt,
        tol: fp.tol,
        max_iter: fp.max_iter,
        cubic: false,
        linear_only: true,
        margin_threshold: fp.margin_threshold,
    };
    let state = picard_fixed_point(&ctx, &z0, &cfg)?;
    let samples = spread_samples(fp.n_time, lab.cfg.diagnostics.sample_times);
    let (_, zplus) = extract_scattering(&ctx, &state, &samples)?;

    let input =
        hartree_core::solver::assemble_corollary_input(&ctx, &state, &zplus, &samples, lab.xi_cut())?;
    let p = lab.cfg.diagnostics.schatten_p;
    let s = lab.cfg.diagnostics.schatten_s;
    let report = corollary_check(&input, p, s, lab.gamma_ref()?, &lab.engine)?;

    // cutoff stability of the gamma_plus norm
    let xi2 = (2.0 * lab.xi_cut()).min((lab.grid.n as f64 / 2.0 - 1.0) * lab.grid.dxi());
    let input2 =
        hartree_core::solver::assemble_corollary_input(&ctx, &state, &zplus, &samples[..1], xi2)?;
    let report2 = corollary_check(&input2, p, s, lab.gamma_ref()?, &lab.engine)?;

    let rows: Vec<Vec<f64>> = report
        .times
        .iter()
        .zip(&report.residuals)
        .map(|(&t, &r)| vec![t, r])
        .collect();
    dir.write_csv("corollary_residuals.csv", "time,residual", &rows)?;
    #[derive(Serialize)]
    struct Out {
        report: hartree_core::diagnostics::CorollaryReport,
        gamma_plus_norm_doubled_cut: f64,
        cutoff_stability: f64,
    }
    let stability = (report2.gamma_plus_norm - report.gamma_plus_norm).abs()
        / report.gamma_plus_norm.max(1e-300);
    dir.write_json(
        "corollary.json",
        &Out {
            report,
            gamma_plus_norm_doubled_cut: report2.gamma_plus_norm,
            cutoff_stability: stability,
        },
    )?;
    Ok(0)
}


