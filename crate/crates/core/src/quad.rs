//! Scalar quadrature helpers: composite/adaptive Simpson rules, oscillatory
//! radial transforms, and the exact Fourier integral of a piecewise-linear
//! tabulation (Filon-type rule used by the linear-response symbol).

use num_complex::Complex64;

/// Composite Simpson on `[a, b]` with `n` panels (`n` even, made even if not).
pub fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, n: usize) -> f64 {
    let n = if n % 2 == 0 { n.max(2) } else { n + 1 };
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

/// Composite Simpson refined by doubling until the Richardson estimate of the
/// error drops below `tol` (absolute + relative mix). Returns (value, error estimate).
pub fn simpson_refined<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    n0: usize,
    tol: f64,
    max_doublings: usize,
) -> (f64, f64) {
    let mut n = n0.max(8);
    let mut prev = simpson(f, a, b, n);
    for _ in 0..max_doublings {
        n *= 2;
        let cur = simpson(f, a, b, n);
        let err = (cur - prev).abs() / 15.0;
        if err <= tol * (1.0 + cur.abs()) {
            return (cur, err);
        }
        prev = cur;
    }
    let cur = simpson(f, a, b, 2 * n);
    ((cur), (cur - prev).abs() / 15.0)
}

/// Trapezoid rule over tabulated samples `(x_i, y_i)` with arbitrary spacing.
pub fn trapezoid_tab(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let mut acc = 0.0;
    for i in 1..x.len() {
        acc += 0.5 * (y[i] + y[i - 1]) * (x[i] - x[i - 1]);
    }
    acc
}

/// Bessel function of the first kind, order zero.
pub fn bessel_j0(x: f64) -> f64 {
    libm::j0(x)
}

/// Exact integral of the linear interpolant of `(s_i, h_i)` against
/// `e^{-i mu s}` over the tabulated range:
///
///   H(mu) = int_{s_0}^{s_last} h_lin(s) e^{-i mu s} ds.
///
/// Each segment is integrated in closed form; for |mu| (s1-s0) << 1 a series
/// branch avoids cancellation. This is the workhorse behind the
/// linear-response symbol, where the tabulation is the pair kernel h.
pub fn half_line_fourier(s: &[f64], h: &[f64], mu: f64) -> Complex64 {
    assert_eq!(s.len(), h.len());
    let mut acc = Complex64::new(0.0, 0.0);
    for i in 1..s.len() {
        let (s0, s1) = (s[i - 1], s[i]);
        let (h0, h1) = (h[i - 1], h[i]);
        let d = s1 - s0;
        if d <= 0.0 {
            continue;
        }
        let theta = mu * d;
        // int_0^d (h0 + (h1-h0) u/d) e^{-i mu (s0+u)} du
        //   = e^{-i mu s0} [ h0 I0 + (h1-h0)/d I1 ],
        // I0 = int_0^d e^{-i mu u} du, I1 = int_0^d u e^{-i mu u} du.
        let (i0, i1) = if theta.abs() < 1e-4 {
            // series in theta to O(theta^4) relative accuracy
            let t = Complex64::new(0.0, -theta);
            let d2 = d * d;
            let i0 = d * (1.0 + t / 2.0 + t * t / 6.0 + t * t * t / 24.0);
            let i1 = d2 * (0.5 + t / 3.0 + t * t / 8.0 + t * t * t / 30.0);
            (i0, i1)
        } else {
            // I0 = (1 - e^{-i theta}) / (i mu)
            // I1 = (e^{-i theta}(1 + i theta) - 1) / mu^2
            let e = Complex64::from_polar(1.0, -theta);
            let i0 = (Complex64::new(1.0, 0.0) - e) / Complex64::new(0.0, mu);
            let i1 = (e * Complex64::new(1.0, theta) - Complex64::new(1.0, 0.0))
                / Complex64::new(mu * mu, 0.0);
            (i0, i1)
        };
        let seg = Complex64::from_polar(1.0, -mu * s0) * (i0 * h0 + i1 * ((h1 - h0) / d));
        acc += seg;
    }
    acc
}
