//! Momentum distributions f, interaction potentials w, the pair kernel
//! h = Fourier transform of f^2, and the hypothesis checker.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::quad::{bessel_j0, simpson, simpson_refined, trapezoid_tab};

/// Surface measure of the unit sphere in R^d, d = 2 or 3.
fn sphere_measure(dim: usize) -> f64 {
    match dim {
        2 => 2.0 * std::f64::consts::PI,
        3 => 4.0 * std::f64::consts::PI,
        _ => panic!("sphere_measure: dim {dim}"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileKind {
    Fermi,
    Bose,
    Bessel,
    Gaussian,
    Tabulated,
}

/// Radial momentum distribution f >= 0 with evaluators for f, f^2 and d_r f.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentumDistribution {
    pub kind: ProfileKind,
    /// Temperature for thermal kinds; width^2 for the gaussian kind.
    pub temperature: f64,
    /// Chemical potential (fermi/bose).
    pub mu: f64,
    /// Decay exponent for the bessel kind.
    pub alpha: f64,
    pub dim: usize,
    /// Radial cutoff beyond which f^2 is treated as zero.
    pub r_max: f64,
    /// Overall factor on f^2 (used by scaling checks).
    pub amplitude: f64,
    /// Tabulated (r, f^2) samples for the tabulated kind.
    table: Option<(Vec<f64>, Vec<f64>)>,
}

impl MomentumDistribution {
    fn finish(mut self) -> Result<Self> {
        if !(2..=3).contains(&self.dim) {
            return Err(CoreError::InvalidParameter(format!(
                "momentum distribution dim {} not in 2..=3",
                self.dim
            )));
        }
        self.r_max = self.compute_r_max();
        Ok(self)
    }

    pub fn fermi(temperature: f64, mu: f64, dim: usize) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(CoreError::InvalidParameter(
                "fermi profile needs T > 0".into(),
            ));
        }
        MomentumDistribution {
            kind: ProfileKind::Fermi,
            temperature,
            mu,
            alpha: 0.0,
            dim,
            r_max: 0.0,
            amplitude: 1.0,
            table: None,
        }
        .finish()
    }

    /// Bose profile; requires mu <= -1e-6 to stay away from the pole.
    pub fn bose(temperature: f64, mu: f64, dim: usize) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(CoreError::InvalidParameter("bose profile needs T > 0".into()));
        }
        if mu > -1e-6 {
            return Err(CoreError::InvalidParameter(format!(
                "bose profile needs mu <= -1e-6, got {mu}"
            )));
        }
        MomentumDistribution {
            kind: ProfileKind::Bose,
            temperature,
            mu,
            alpha: 0.0,
            dim,
            r_max: 0.0,
            amplitude: 1.0,
            table: None,
        }
        .finish()
    }

    /// Bessel-potential profile f^2 = <r>^{-alpha}.
    pub fn bessel(alpha: f64, dim: usize) -> Result<Self> {
        if alpha <= dim as f64 + 1.0 {
            return Err(CoreError::InvalidParameter(format!(
                "bessel profile needs alpha > dim + 1, got {alpha}"
            )));
        }
        MomentumDistribution {
            kind: ProfileKind::Bessel,
            temperature: 0.0,
            mu: 0.0,
            alpha,
            dim,
            r_max: 0.0,
            amplitude: 1.0,
            table: None,
        }
        .finish()
    }

    /// Gaussian profile f^2 = e^{-r^2 / T}.
    pub fn gaussian(temperature: f64, dim: usize) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(CoreError::InvalidParameter(
                "gaussian profile needs width > 0".into(),
            ));
        }
        MomentumDistribution {
            kind: ProfileKind::Gaussian,
            temperature,
            mu: 0.0,
            alpha: 0.0,
            dim,
            r_max: 0.0,
            amplitude: 1.0,
            table: None,
        }
        .finish()
    }

    /// Tabulated f^2 samples on an increasing radial grid; linear interpolation.
    pub fn tabulated(r: Vec<f64>, f2: Vec<f64>, dim: usize) -> Result<Self> {
        if r.len() != f2.len() || r.len() < 2 {
            return Err(CoreError::InvalidParameter(
                "tabulated profile needs matching r/f2 with >= 2 nodes".into(),
            ));
        }
        MomentumDistribution {
            kind: ProfileKind::Tabulated,
            temperature: 0.0,
            mu: 0.0,
            alpha: 0.0,
            dim,
            r_max: 0.0,
            amplitude: 1.0,
            table: Some((r, f2)),
        }
        .finish()
    }

    /// Same distribution with f^2 multiplied by `lambda`.
    pub fn scaled(&self, lambda: f64) -> Self {
        let mut out = self.clone();
        out.amplitude *= lambda;
        out
    }

    fn raw_f2(&self, r: f64) -> f64 {
        match self.kind {
            ProfileKind::Fermi => 1.0 / (((r * r - self.mu) / self.temperature).exp() + 1.0),
            ProfileKind::Bose => 1.0 / (((r * r - self.mu) / self.temperature).exp() - 1.0),
            ProfileKind::Bessel => (1.0 + r * r).powf(-self.alpha / 2.0),
            ProfileKind::Gaussian => (-r * r / self.temperature).exp(),
            ProfileKind::Tabulated => {
                let (xs, ys) = self.table.as_ref().unwrap();
                interp_linear(xs, ys, r)
            }
        }
    }

    /// f^2(r), clamped to the radial cutoff.
    pub fn f2(&self, r: f64) -> f64 {
        if r > self.r_max {
            return 0.0;
        }
        self.amplitude * self.raw_f2(r)
    }

    /// f(r) = sqrt(f^2).
    pub fn f(&self, r: f64) -> f64 {
        self.f2(r).max(0.0).sqrt()
    }

    /// d f^2 / dr, analytic for the closed-form kinds.
    pub fn df2_dr(&self, r: f64) -> f64 {
        if r > self.r_max {
            return 0.0;
        }
        let v = match self.kind {
            ProfileKind::Fermi => {
                let e = ((r * r - self.mu) / self.temperature).exp();
                -(2.0 * r / self.temperature) * e / ((e + 1.0) * (e + 1.0))
            }
            ProfileKind::Bose => {
                let e = ((r * r - self.mu) / self.temperature).exp();
                -(2.0 * r / self.temperature) * e / ((e - 1.0) * (e - 1.0))
            }
            ProfileKind::Bessel => -self.alpha * r * (1.0 + r * r).powf(-self.alpha / 2.0 - 1.0),
            ProfileKind::Gaussian => -(2.0 * r / self.temperature) * (-r * r / self.temperature).exp(),
            ProfileKind::Tabulated => {
                let (xs, ys) = self.table.as_ref().unwrap();
                interp_derivative(xs, ys, r)
            }
        };
        self.amplitude * v
    }

    /// d f / dr = (d f^2/dr) / (2 f).
    pub fn df_dr(&self, r: f64) -> f64 {
        let f = self.f(r);
        if f <= 0.0 {
            return 0.0;
        }
        self.df2_dr(r) / (2.0 * f)
    }

    fn compute_r_max(&self) -> f64 {
        if let Some((xs, _)) = &self.table {
            return *xs.last().unwrap();
        }
        let mut r = 4.0f64;
        for _ in 0..40 {
            if self.raw_f2(r) * r.powi(self.dim as i32) < 1e-12 {
                return r;
            }
            r *= 1.5;
        }
        r
    }

    /// Lattice Riemann sum target int f^2 = S_{d-1} int r^{d-1} f^2 dr.
    pub fn total_f2(&self) -> f64 {
        let g = |r: f64| r.powi(self.dim as i32 - 1) * self.f2(r);
        sphere_measure(self.dim) * simpson_refined(&g, 0.0, self.r_max, 512, 1e-10, 14).0
    }
}

fn interp_linear(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if x <= xs[0] {
        return ys[0];
    }
    if x >= *xs.last().unwrap() {
        return *ys.last().unwrap();
    }
    let i = xs.partition_point(|&v| v < x).max(1);
    let (x0, x1) = (xs[i - 1], xs[i]);
    let (y0, y1) = (ys[i - 1], ys[i]);
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

fn interp_derivative(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if x <= xs[0] || x >= *xs.last().unwrap() {
        return 0.0;
    }
    let i = xs.partition_point(|&v| v < x).max(1);
    // derivative of sqrt branch handled by caller; this is d(f^2)/dr of the interpolant
    (ys[i] - ys[i - 1]) / (xs[i] - xs[i - 1])
}

/// Pair interaction: signed Dirac mass at the origin plus an optional
/// radial integrable density.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairPotential {
    /// Coefficient of the Dirac mass at 0.
    pub atom_weight: f64,
    pub density: Option<RadialDensity>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RadialDensity {
    /// amplitude * e^{-|x|^2 / width^2}
    Gaussian { amplitude: f64, width: f64 },
}

impl PairPotential {
    pub fn dirac(weight: f64) -> Self {
        PairPotential {
            atom_weight: weight,
            density: None,
        }
    }

    pub fn with_density(weight: f64, density: RadialDensity) -> Self {
        PairPotential {
            atom_weight: weight,
            density: Some(density),
        }
    }

    /// Fourier transform of the measure at radial frequency |xi|; real and continuous.
    pub fn w_hat(&self, xi_abs: f64, dim: usize) -> f64 {
        let mut v = self.atom_weight;
        if let Some(RadialDensity::Gaussian { amplitude, width }) = &self.density {
            let s = width;
            v += amplitude
                * (s * std::f64::consts::PI.sqrt()).powi(dim as i32)
                * (-s * s * xi_abs * xi_abs / 4.0).exp();
        }
        v
    }

    /// Total variation of the density part, int |density|.
    pub fn density_mass(&self, dim: usize) -> f64 {
        match &self.density {
            None => 0.0,
            Some(RadialDensity::Gaussian { amplitude, width }) => {
                amplitude.abs() * (width * std::f64::consts::PI.sqrt()).powi(dim as i32)
            }
        }
    }

    /// sup over xi of the negative part of w_hat.
    pub fn w_hat_neg_sup(&self, dim: usize) -> f64 {
        let mut sup = (-self.atom_weight).max(0.0); // xi -> infinity limit
        if self.density.is_some() {
            let width = match self.density.as_ref().unwrap() {
                RadialDensity::Gaussian { width, .. } => *width,
            };
            let xi_max = 20.0 / width;
            for i in 0..=2048 {
                let xi = xi_max * i as f64 / 2048.0;
                sup = sup.max((-self.w_hat(xi, dim)).max(0.0));
            }
        }
        sup
    }
}

/// Tabulated pair kernel h (Fourier transform of f^2) with cached functionals.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairKernel {
    pub dim: usize,
    /// Radial nodes, log-spaced on [r_min, 1], linear beyond; r[0] = 0.
    pub r: Vec<f64>,
    pub h: Vec<f64>,
    pub dh: Vec<f64>,
    pub d2h: Vec<f64>,
    /// int_0^inf |h| dr
    pub i0: f64,
    /// int_0^inf r |h| dr
    pub i1: f64,
    /// int_0^inf (|h'|/r + |h''|) dr
    pub i_reg: f64,
    /// C_1(h), C_2(h); NaN when the 2D quadrature did not converge
    /// (heavy-tailed kernels).
    pub c1: f64,
    pub c2: f64,
    /// Quadrature error estimate for the tabulation (relative to max |h|).
    pub quad_error: f64,
    /// Whether |h| decayed below 1e-10 of its peak inside the tabulated range.
    pub tail_resolved: bool,
}

impl PairKernel {
    /// Linear interpolation of h; zero beyond the tabulated range.
    #[inline]
    pub fn eval(&self, r: f64) -> f64 {
        let r = r.abs();
        let last = *self.r.last().unwrap();
        if r >= last {
            return 0.0;
        }
        let i = self.r.partition_point(|&v| v < r).max(1);
        let (x0, x1) = (self.r[i - 1], self.r[i]);
        let (y0, y1) = (self.h[i - 1], self.h[i]);
        y0 + (y1 - y0) * (r - x0) / (x1 - x0)
    }

    pub fn h0(&self) -> f64 {
        self.h[0]
    }

    /// Support radius of the tabulation.
    pub fn r_end(&self) -> f64 {
        *self.r.last().unwrap()
    }

    pub fn max_abs(&self) -> f64 {
        self.h.iter().fold(0.0f64, |a, &b| a.max(b.abs()))
    }
}

/// Radial Fourier transform of f^2 at radius `r`.
///
/// dim 3: h(r) = (4 pi / r) int rho sin(r rho) f^2(rho) drho
/// dim 2: h(r) = 2 pi int rho J0(r rho) f^2(rho) drho
fn radial_transform(f: &MomentumDistribution, r: f64, panels: usize) -> f64 {
    let rm = f.r_max;
    match f.dim {
        3 => {
            if r < 1e-300 {
                let g = |rho: f64| rho * rho * f.f2(rho);
                4.0 * std::f64::consts::PI * simpson(&g, 0.0, rm, panels)
            } else {
                let g = |rho: f64| rho * (r * rho).sin() * f.f2(rho);
                4.0 * std::f64::consts::PI / r * simpson(&g, 0.0, rm, panels)
            }
        }
        2 => {
            let g = |rho: f64| rho * bessel_j0(r * rho) * f.f2(rho);
            2.0 * std::f64::consts::PI * simpson(&g, 0.0, rm, panels)
        }
        d => panic!("radial_transform: dim {d}"),
    }
}

fn oscillation_panels(r: f64, r_max: f64) -> usize {
    let osc = r * r_max / (2.0 * std::f64::consts::PI);
    (4096usize).max((24.0 * osc).ceil() as usize)
}

/// Build the pair kernel by radial Fourier transform of f^2.
pub fn build_kernel_h(f: &MomentumDistribution) -> Result<PairKernel> {
    // integrability: the cutoff construction guarantees a small tail, but a
    // tabulated profile may be truncated while still heavy
    let tail = f.f2(f.r_max * 0.999) * f.r_max.powi(f.dim as i32);
    if tail > 1e-6 {
        return Err(CoreError::NonIntegrable {
            dim: f.dim,
            estimate: tail,
        });
    }

    let h0 = radial_transform(f, 0.0, 8192);
    let scale = h0.abs().max(1e-300);

    // decide the tabulation extent from coarse probes
    let mut r_end = 8.0f64;
    let mut probes_ok = 0;
    let mut tail_resolved = false;
    while r_end < 512.0 {
        let v = radial_transform(f, r_end, oscillation_panels(r_end, f.r_max));
        if v.abs() < 1e-10 * scale {
            probes_ok += 1;
            if probes_ok >= 2 {
                tail_resolved = true;
                break;
            }
        } else {
            probes_ok = 0;
        }
        r_end *= 2.0;
    }

    // log-spaced nodes on [r_min, 1], linear beyond; r = 0 prepended
    let n_log = 2047usize;
    let n_lin = 2048usize;
    let r_min = 1e-4f64;
    let mut nodes = Vec::with_capacity(1 + n_log + n_lin);
    nodes.push(0.0);
    for i in 0..n_log {
        let t = i as f64 / (n_log - 1) as f64;
        nodes.push(r_min * (1.0 / r_min).powf(t));
    }
    for i in 1..=n_lin {
        nodes.push(1.0 + (r_end - 1.0) * i as f64 / n_lin as f64);
    }

    let h: Vec<f64> = nodes
        .par_iter()
        .map(|&r| radial_transform(f, r, oscillation_panels(r, f.r_max)))
        .collect();

    // quadrature error estimate: doubled panels on a handful of probe nodes
    let mut quad_error = 0.0f64;
    for pi in 0..8 {
        let idx = pi * (nodes.len() - 1) / 7;
        let r = nodes[idx];
        let fine = radial_transform(f, r, 2 * oscillation_panels(r, f.r_max));
        quad_error = quad_error.max((fine - h[idx]).abs() / scale);
    }
    if quad_error > 1e-6 {
        return Err(CoreError::QuadratureFailure {
            context: "pair kernel radial transform",
            estimate: quad_error,
            tolerance: 1e-6,
        });
    }

    // derivatives on the non-uniform grid
    let m = nodes.len();
    let mut dh = vec![0.0; m];
    let mut d2h = vec![0.0; m];
    for i in 1..m - 1 {
        let dp = nodes[i + 1] - nodes[i];
        let dm = nodes[i] - nodes[i - 1];
        let denom = dp * dm * (dp + dm);
        dh[i] = (h[i + 1] * dm * dm - h[i - 1] * dp * dp + h[i] * (dp * dp - dm * dm)) / denom;
        d2h[i] = 2.0 * (h[i + 1] * dm + h[i - 1] * dp - h[i] * (dp + dm)) / denom;
    }
    dh[0] = 0.0; // h is even and smooth at the origin
    d2h[0] = d2h[1];
    dh[m - 1] = dh[m - 2];
    d2h[m - 1] = d2h[m - 2];

    let abs_h: Vec<f64> = h.iter().map(|v| v.abs()).collect();
    let r_abs_h: Vec<f64> = nodes.iter().zip(&abs_h).map(|(r, a)| r * a).collect();
    let i0 = trapezoid_tab(&nodes, &abs_h);
    let i1 = trapezoid_tab(&nodes, &r_abs_h);
    let reg: Vec<f64> = (0..m)
        .map(|i| {
            let ratio = if nodes[i] > 0.0 {
                dh[i].abs() / nodes[i]
            } else {
                d2h[0].abs()
            };
            ratio + d2h[i].abs()
        })
        .collect();
    let i_reg = trapezoid_tab(&nodes, &reg);

    let mut kernel = PairKernel {
        dim: f.dim,
        r: nodes,
        h,
        dh,
        d2h,
        i0,
        i1,
        i_reg,
        c1: 0.0,
        c2: 0.0,
        quad_error,
        tail_resolved,
    };
    kernel.c1 = kernel_integrals(&kernel, 1).unwrap_or(f64::NAN);
    kernel.c2 = kernel_integrals(&kernel, 2).unwrap_or(f64::NAN);
    Ok(kernel)
}

/// The two-dimensional functional
/// C_p(h) = int dv ( int du |u|^{1/p - 1/2} |h|^p(sqrt(u^2+v^2)) )^{2/p}
/// over (u, v) in R^2, computed by symmetry on the first quadrant.
pub fn kernel_integrals(h: &PairKernel, p: u32) -> Result<f64> {
    if p != 1 && p != 2 {
        return Err(CoreError::InvalidParameter(format!("C_p needs p in {{1,2}}, got {p}")));
    }
    let r_end = h.r_end();
    let exponent = 1.0 / p as f64 - 0.5;
    let pf = p as f64;

    let compute = |nodes: usize| -> f64 {
        let nv = nodes;
        let nu = nodes;
        let mut outer = Vec::with_capacity(nv + 1);
        let vs: Vec<f64> = (0..=nv).map(|i| r_end * i as f64 / nv as f64).collect();
        for &v in &vs {
            // inner integral over u >= 0; for p = 1 the substitution u = z^2
            // removes the sqrt(u) kink at the origin
            let val = if p == 1 {
                let inner = |z: f64| -> f64 {
                    let u = z * z;
                    let rr = (u * u + v * v).sqrt();
                    2.0 * z * z * h.eval(rr).abs()
                };
                2.0 * simpson(&inner, 0.0, r_end.sqrt(), nu)
            } else {
                let inner = |u: f64| -> f64 {
                    let rr = (u * u + v * v).sqrt();
                    let hv = h.eval(rr).abs().powf(pf);
                    u.abs().powf(exponent) * hv
                };
                2.0 * simpson(&inner, 0.0, r_end, nu)
            };
            outer.push(val.max(0.0).powf(2.0 / pf));
        }
        // 2x for v < 0 by symmetry
        2.0 * trapezoid_tab(&vs, &outer)
    };

    let coarse = compute(1024);
    let fine = compute(2048);
    let err = (fine - coarse).abs() / 3.0;
    if err > 1e-3 * (1.0 + fine.abs()) {
        return Err(CoreError::QuadratureFailure {
            context: "C_p kernel integral",
            estimate: err,
            tolerance: 1e-3 * (1.0 + fine.abs()),
        });
    }
    Ok(fine)
}

/// One hypothesis line of the checker report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HypothesisEntry {
    pub name: String,
    pub pass: bool,
    /// Distance to the failure boundary in the condition's own units.
    pub margin: f64,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HypothesisReport {
    pub entries: Vec<HypothesisEntry>,
    pub pass: bool,
    /// Number of radial tabulation nodes the pointwise checks were run on.
    pub node_resolution: usize,
}

impl HypothesisReport {
    pub fn entry(&self, name: &str) -> Option<&HypothesisEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// Verify every hypothesis on (f, w); failures are report entries, never errors.
///
/// `eps_h` is the low-frequency response constant produced by the
/// linear-response module for this kernel.
pub fn check_hypotheses(
    f: &MomentumDistribution,
    w: &PairPotential,
    kernel: &PairKernel,
    eps_h: f64,
) -> HypothesisReport {
    let n_probe = 2048usize;
    let rs: Vec<f64> = (0..n_probe)
        .map(|i| f.r_max * (i as f64 + 0.5) / n_probe as f64)
        .collect();

    let mut entries = Vec::new();

    // f > 0, bounded
    let mut min_f2 = f64::INFINITY;
    let mut max_f2 = 0.0f64;
    for &r in &rs {
        let v = f.f2(r);
        min_f2 = min_f2.min(v);
        max_f2 = max_f2.max(v);
    }
    entries.push(HypothesisEntry {
        name: "positivity".into(),
        pass: min_f2 > 0.0 && max_f2.is_finite(),
        margin: min_f2,
        detail: format!("min f^2 on nodes = {min_f2:.3e}, max = {max_f2:.3e}"),
    });

    // C^1: closed forms are smooth; tabulations must be jump-free in value and slope
    let c1 = match f.kind {
        ProfileKind::Tabulated => {
            let mut max_jump = 0.0f64;
            for pair in rs.windows(2) {
                let j = (f.f2(pair[1]) - f.f2(pair[0])).abs();
                max_jump = max_jump.max(j);
            }
            let pass = max_jump < 0.05 * max_f2.max(1e-300);
            HypothesisEntry {
                name: "c1_smoothness".into(),
                pass,
                margin: 0.05 * max_f2 - max_jump,
                detail: format!("max f^2 jump between probe nodes = {max_jump:.3e}"),
            }
        }
        _ => HypothesisEntry {
            name: "c1_smoothness".into(),
            pass: true,
            margin: 1.0,
            detail: "closed-form profile, C^1 by construction".into(),
        },
    };
    entries.push(c1);

    // strict radial decrease
    let max_df = rs.iter().map(|&r| f.df_dr(r)).fold(f64::NEG_INFINITY, f64::max);
    entries.push(HypothesisEntry {
        name: "strict_decrease".into(),
        pass: max_df < 0.0,
        margin: -max_df,
        detail: format!("max d_r f over nodes = {max_df:.3e}"),
    });

    // moment conditions
    let sd = sphere_measure(f.dim);
    let g1 = |r: f64| (1.0 + r * r).sqrt() * f.f2(r) * r.powi(f.dim as i32 - 1);
    let m1 = sd * simpson_refined(&g1, 0.0, f.r_max, 512, 1e-9, 12).0;
    let tail1 = (1.0 + f.r_max * f.r_max).sqrt() * f.f2(f.r_max * 0.999) * f.r_max.powi(f.dim as i32);
    entries.push(HypothesisEntry {
        name: "moment_weighted_mass".into(),
        pass: m1.is_finite() && tail1 < 1e-6 * m1.max(1e-300),
        margin: 1e-6 * m1 - tail1,
        detail: format!("int <xi> f^2 = {m1:.6e}, tail estimate {tail1:.3e}"),
    });

    let g2 = |r: f64| {
        if r <= 0.0 {
            0.0
        } else {
            r.powi(f.dim as i32 - 2) * (f.f(r) * f.df_dr(r)).abs()
        }
    };
    let m2 = sd * simpson_refined(&g2, 1e-9, f.r_max, 512, 1e-9, 12).0;
    let tail2 = f.r_max.powi(f.dim as i32 - 1) * (f.f(f.r_max * 0.999) * f.df_dr(f.r_max * 0.999)).abs();
    entries.push(HypothesisEntry {
        name: "moment_gradient".into(),
        pass: m2.is_finite() && tail2 < 1e-6 * m2.max(1e-300),
        margin: 1e-6 * m2 - tail2,
        detail: format!("int |xi|^-1 |f grad f| = {m2:.6e}, tail estimate {tail2:.3e}"),
    });

    // kernel integrability
    let h_scale = kernel.max_abs().max(1e-300);
    let h_tail = kernel.h.last().unwrap().abs() / h_scale;
    entries.push(HypothesisEntry {
        name: "h_integrable".into(),
        pass: kernel.i0.is_finite() && kernel.i1.is_finite() && h_tail < 1e-8,
        margin: 1e-8 - h_tail,
        detail: format!(
            "I0 = {:.6e}, I1 = {:.6e}, |h| at r_end / max = {h_tail:.3e}",
            kernel.i0, kernel.i1
        ),
    });

    let reg_entry = HypothesisEntry {
        name: "h_regularity".into(),
        pass: kernel.i_reg.is_finite(),
        margin: if kernel.i_reg.is_finite() { 1.0 } else { -1.0 },
        detail: format!("int (|h'|/r + |h''|) = {:.6e}", kernel.i_reg),
    };
    let reg_required = f.dim == 3;
    entries.push(reg_entry);

    // interaction smallness conditions
    let neg = w.w_hat_neg_sup(f.dim);
    let cond1 = neg * kernel.i1;
    entries.push(HypothesisEntry {
        name: "w_negative_part".into(),
        pass: cond1 < 2.0,
        margin: 2.0 - cond1,
        detail: format!("||(w_hat)_-||_inf * int r|h| = {cond1:.6e} (must be < 2)"),
    });

    let w0p = w.w_hat(0.0, f.dim).max(0.0);
    let cond2 = w0p * eps_h;
    entries.push(HypothesisEntry {
        name: "w_positive_eps_h".into(),
        pass: cond2 < 1.0,
        margin: 1.0 - cond2,
        detail: format!("w_hat(0)_+ * eps_h = {cond2:.6e} (must be < 1)"),
    });

    let pass = entries.iter().all(|e| {
        if e.name == "h_regularity" && !reg_required {
            true
        } else {
            e.pass
        }
    });

    HypothesisReport {
        entries,
        pass,
        node_resolution: n_probe,
    }
}

/// Fourier transform of the interaction measure at a wavevector magnitude.
pub fn eval_w_hat(w: &PairPotential, xi_abs: f64, dim: usize) -> f64 {
    w.w_hat(xi_abs, dim)
}
