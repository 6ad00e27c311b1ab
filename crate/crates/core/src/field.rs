//! Periodic grid fields on the unit torus and their spectral calculus.
//!
//! Every field lives on the uniform grid `x_i = i / n`, `i = 0..n`. Integrals use the
//! periodic trapezoid rule, which is exact for trigonometric polynomials of degree
//! below `n`.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TWO_PI: f64 = 2.0 * PI;

/// Cached forward/inverse FFT plans for one grid size.
pub struct Spectral {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Spectral {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Spectral").field("n", &self.n).finish()
    }
}

static PLANS: OnceLock<Mutex<HashMap<usize, Arc<Spectral>>>> = OnceLock::new();

impl Spectral {
    pub fn for_size(n: usize) -> Arc<Spectral> {
        let cache = PLANS.get_or_init(|| Mutex::new(HashMap::new()));
        let mut guard = cache.lock().expect("fft plan cache poisoned");
        guard
            .entry(n)
            .or_insert_with(|| {
                let mut planner = FftPlanner::new();
                Arc::new(Spectral {
                    n,
                    forward: planner.plan_fft_forward(n),
                    inverse: planner.plan_fft_inverse(n),
                })
            })
            .clone()
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Signed wavenumber of FFT bin `j`; the Nyquist bin of an even grid maps to `+n/2`.
    pub fn mode(&self, j: usize) -> i64 {
        if 2 * j <= self.n {
            j as i64
        } else {
            j as i64 - self.n as i64
        }
    }

    pub fn is_nyquist(&self, j: usize) -> bool {
        self.n % 2 == 0 && 2 * j == self.n
    }

    /// Unnormalized DFT `c_j = Σ_i f_i e^{-2πi ij/n}`.
    pub fn forward(&self, values: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward.process(&mut buf);
        buf
    }

    /// Inverse of [`Spectral::forward`], keeping the real part.
    pub fn inverse_real(&self, mut coeffs: Vec<Complex64>) -> Vec<f64> {
        self.inverse.process(&mut coeffs);
        let scale = 1.0 / self.n as f64;
        coeffs.into_iter().map(|c| c.re * scale).collect()
    }

    /// Applies a Fourier multiplier given as a function of (signed mode, is_nyquist).
    pub fn apply<F>(&self, values: &[f64], multiplier: F) -> Vec<f64>
    where
        F: Fn(i64, bool) -> Complex64,
    {
        let mut coeffs = self.forward(values);
        for (j, c) in coeffs.iter_mut().enumerate() {
            *c *= multiplier(self.mode(j), self.is_nyquist(j));
        }
        self.inverse_real(coeffs)
    }

    /// Spectral derivative of the given order. Odd derivatives drop the Nyquist mode.
    pub fn derivative(&self, values: &[f64], order: u32) -> Vec<f64> {
        if order == 0 {
            return values.to_vec();
        }
        self.apply(values, |m, nyq| {
            if nyq && order % 2 == 1 {
                return Complex64::new(0.0, 0.0);
            }
            Complex64::new(0.0, TWO_PI * m as f64).powu(order)
        })
    }

    /// Exact heat semigroup `e^{t ∂x²}`.
    pub fn heat(&self, values: &[f64], dt: f64) -> Vec<f64> {
        self.apply(values, |m, _| {
            let w = TWO_PI * m as f64;
            Complex64::new((-w * w * dt).exp(), 0.0)
        })
    }
}

/// Grid coordinate `i / n`.
#[inline]
pub fn grid_point(n: usize, i: usize) -> f64 {
    i as f64 / n as f64
}

/// Real-valued samples on the uniform periodic grid of `[0, 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridField1D {
    values: Vec<f64>,
}

impl GridField1D {
    pub fn zeros(n: usize) -> Self {
        Self { values: vec![0.0; n] }
    }

    pub fn constant(n: usize, value: f64) -> Self {
        Self { values: vec![value; n] }
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn from_fn(n: usize, f: impl Fn(f64) -> f64) -> Self {
        Self { values: (0..n).map(|i| f(grid_point(n, i))).collect() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dx(&self) -> f64 {
        1.0 / self.values.len() as f64
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn ensure_same_grid(&self, other: &GridField1D) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::GridMismatch { expected: self.len(), got: other.len() });
        }
        Ok(())
    }

    pub fn spectral(&self) -> Arc<Spectral> {
        Spectral::for_size(self.len())
    }

    /// `∫ f g dx` by the periodic trapezoid rule.
    pub fn inner(&self, other: &GridField1D) -> Result<f64> {
        self.ensure_same_grid(other)?;
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum::<f64>() * self.dx())
    }

    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.dx()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> GridField1D {
        GridField1D { values: self.values.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_with(&self, other: &GridField1D, f: impl Fn(f64, f64) -> f64) -> Result<GridField1D> {
        self.ensure_same_grid(other)?;
        Ok(GridField1D {
            values: self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &GridField1D) -> Result<GridField1D> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &GridField1D) -> Result<GridField1D> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &GridField1D) -> Result<GridField1D> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> GridField1D {
        self.map(|v| v * s)
    }

    pub fn derivative(&self, order: u32) -> GridField1D {
        GridField1D { values: self.spectral().derivative(&self.values, order) }
    }

    pub fn max_abs_diff(&self, other: &GridField1D) -> Result<f64> {
        self.ensure_same_grid(other)?;
        Ok(self.values.iter().zip(&other.values).fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Periodic cubic Lagrange interpolation at an arbitrary point.
    pub fn interpolate(&self, x: f64) -> f64 {
        periodic_cubic(&self.values, x)
    }
}

/// Periodic four-point Lagrange interpolation of grid samples at `x` (any real).
pub fn periodic_cubic(values: &[f64], x: f64) -> f64 {
    let n = values.len();
    let s = x.rem_euclid(1.0) * n as f64;
    let i = s.floor();
    let t = s - i;
    let i = i as isize;
    let at = |k: isize| values[(i + k).rem_euclid(n as isize) as usize];
    let (p0, p1, p2, p3) = (at(-1), at(0), at(1), at(2));
    let w0 = -t * (t - 1.0) * (t - 2.0) / 6.0;
    let w1 = (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0;
    let w2 = -(t + 1.0) * t * (t - 2.0) / 2.0;
    let w3 = (t + 1.0) * t * (t - 1.0) / 6.0;
    w0 * p0 + w1 * p1 + w2 * p2 + w3 * p3
}

/// Truncated real Fourier series
/// `n(x) = mean + Σ_k cos[k-1]·cos(2πkx) + sin[k-1]·sin(2πkx)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FourierSeries {
    #[serde(default)]
    pub mean: f64,
    #[serde(default)]
    pub cos: Vec<f64>,
    #[serde(default)]
    pub sin: Vec<f64>,
}

impl FourierSeries {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(mean: f64) -> Self {
        Self { mean, ..Self::default() }
    }

    /// `amplitude · sin(2π k x)`.
    pub fn sine(k: usize, amplitude: f64) -> Self {
        assert!(k >= 1);
        let mut sin = vec![0.0; k];
        sin[k - 1] = amplitude;
        Self { mean: 0.0, cos: Vec::new(), sin }
    }

    /// `amplitude · cos(2π k x)`.
    pub fn cosine(k: usize, amplitude: f64) -> Self {
        assert!(k >= 1);
        let mut cos = vec![0.0; k];
        cos[k - 1] = amplitude;
        Self { mean: 0.0, cos, sin: Vec::new() }
    }

    /// Highest wavenumber carrying a coefficient.
    pub fn bandwidth(&self) -> usize {
        self.cos.len().max(self.sin.len())
    }

    fn coeff(v: &[f64], k: usize) -> f64 {
        v.get(k - 1).copied().unwrap_or(0.0)
    }

    /// Derivative of the given order evaluated at `x`.
    pub fn eval_derivative(&self, x: f64, order: u32) -> f64 {
        let mut acc = if order == 0 { self.mean } else { 0.0 };
        for k in 1..=self.bandwidth() {
            let a = Self::coeff(&self.cos, k);
            let b = Self::coeff(&self.sin, k);
            if a == 0.0 && b == 0.0 {
                continue;
            }
            let w = TWO_PI * k as f64;
            let (s, c) = (w * x).sin_cos();
            // d^r/dx^r of (a cos + b sin) cycles through (c, -s, -c, s) times w^r.
            let (dc, ds) = match order % 4 {
                0 => (c, s),
                1 => (-s, c),
                2 => (-c, -s),
                _ => (s, -c),
            };
            acc += w.powi(order as i32) * (a * dc + b * ds);
        }
        acc
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.eval_derivative(x, 0)
    }

    pub fn sample(&self, n: usize) -> GridField1D {
        GridField1D::from_fn(n, |x| self.eval(x))
    }

    pub fn sample_derivative(&self, n: usize, order: u32) -> GridField1D {
        GridField1D::from_fn(n, |x| self.eval_derivative(x, order))
    }

    /// `self·alpha + other·beta`.
    pub fn combine(&self, alpha: f64, other: &FourierSeries, beta: f64) -> FourierSeries {
        let lin = |a: &[f64], b: &[f64]| {
            (0..a.len().max(b.len()))
                .map(|i| alpha * a.get(i).copied().unwrap_or(0.0) + beta * b.get(i).copied().unwrap_or(0.0))
                .collect::<Vec<_>>()
        };
        FourierSeries {
            mean: alpha * self.mean + beta * other.mean,
            cos: lin(&self.cos, &other.cos),
            sin: lin(&self.sin, &other.sin),
        }
    }

    pub fn scaled(&self, s: f64) -> FourierSeries {
        self.combine(s, &FourierSeries::zero(), 0.0)
    }

    /// Sup norm of values and first two derivatives, estimated on a fine sampling.
    pub fn sup_norm_c2(&self) -> f64 {
        let m = 64 * self.bandwidth().max(1);
        (0..m)
            .map(|i| {
                let x = i as f64 / m as f64;
                (0..=2).map(|r| self.eval_derivative(x, r).abs()).fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    }

    /// Sup norm of the values, estimated on a fine sampling.
    pub fn sup_norm(&self) -> f64 {
        let m = 64 * self.bandwidth().max(1);
        (0..m).map(|i| self.eval(i as f64 / m as f64).abs()).fold(0.0, f64::max)
    }
}

/// Phase-space grid: `nx` periodic points in x and `nv` points spanning `[-vmax, vmax]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseGrid {
    pub nx: usize,
    pub nv: usize,
    pub vmax: f64,
}

impl PhaseGrid {
    pub fn new(nx: usize, nv: usize, vmax: f64) -> Result<Self> {
        if nx < 8 || nv < 8 {
            return Err(Error::Invalid(format!("phase grid needs at least 8 points per axis, got {nx}x{nv}")));
        }
        if !(vmax > 0.0) || !vmax.is_finite() {
            return Err(Error::Invalid(format!("vmax must be positive, got {vmax}")));
        }
        Ok(Self { nx, nv, vmax })
    }

    pub fn dx(&self) -> f64 {
        1.0 / self.nx as f64
    }

    pub fn dv(&self) -> f64 {
        2.0 * self.vmax / (self.nv - 1) as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        grid_point(self.nx, i)
    }

    pub fn v(&self, j: usize) -> f64 {
        -self.vmax + j as f64 * self.dv()
    }

    /// Trapezoid weight in v (half weight at the two end points).
    pub fn v_weight(&self, j: usize) -> f64 {
        if j == 0 || j + 1 == self.nv {
            0.5 * self.dv()
        } else {
            self.dv()
        }
    }
}

/// Samples on a [`PhaseGrid`], stored row-major with x as the slow index.
#[derive(Clone, Debug, PartialEq)]
pub struct GridField2D {
    pub grid: PhaseGrid,
    values: Vec<f64>,
}

impl GridField2D {
    pub fn zeros(grid: PhaseGrid) -> Self {
        Self { grid, values: vec![0.0; grid.nx * grid.nv] }
    }

    pub fn from_fn(grid: PhaseGrid, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.nx * grid.nv);
        for i in 0..grid.nx {
            for j in 0..grid.nv {
                values.push(f(grid.x(i), grid.v(j)));
            }
        }
        Self { grid, values }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.grid.nv + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.grid.nv + j] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.grid.nv..(i + 1) * self.grid.nv]
    }

    /// `∬ f dx dv` with trapezoid weights.
    pub fn mass(&self) -> f64 {
        let g = self.grid;
        (0..g.nx)
            .map(|i| (0..g.nv).map(|j| self.get(i, j) * g.v_weight(j)).sum::<f64>())
            .sum::<f64>()
            * g.dx()
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Cubic Lagrange interpolation in v at row `i`; points outside `[-vmax, vmax]` read as zero.
    pub fn interpolate_v(&self, i: usize, v: f64) -> f64 {
        let g = self.grid;
        if v < -g.vmax || v > g.vmax {
            return 0.0;
        }
        let row = self.row(i);
        let s = (v + g.vmax) / g.dv();
        let k = (s.floor() as isize).clamp(0, g.nv as isize - 2);
        let t = s - k as f64;
        let at = |m: isize| {
            if m < 0 || m >= g.nv as isize {
                0.0
            } else {
                row[m as usize]
            }
        };
        let (p0, p1, p2, p3) = (at(k - 1), at(k), at(k + 1), at(k + 2));
        let w0 = -t * (t - 1.0) * (t - 2.0) / 6.0;
        let w1 = (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0;
        let w2 = -(t + 1.0) * t * (t - 2.0) / 2.0;
        let w3 = (t + 1.0) * t * (t - 1.0) / 6.0;
        w0 * p0 + w1 * p1 + w2 * p2 + w3 * p3
    }
}

/// Positive-frequency Fourier coefficients of a real field, `f(x) = Re[c₀ + 2Σ_k c_k e^{2πikx}]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Modes(pub Vec<Complex64>);

impl Modes {
    pub fn zeros(k: usize) -> Self {
        Self(vec![Complex64::new(0.0, 0.0); k + 1])
    }

    pub fn from_series(s: &FourierSeries, k: usize) -> Self {
        let mut c = Self::zeros(k.max(s.bandwidth()));
        c.0[0] = Complex64::new(s.mean, 0.0);
        for m in 1..=s.bandwidth() {
            let a = s.cos.get(m - 1).copied().unwrap_or(0.0);
            let b = s.sin.get(m - 1).copied().unwrap_or(0.0);
            c.0[m] = Complex64::new(0.5 * a, -0.5 * b);
        }
        c
    }

    /// Projection of grid samples onto modes `0..=k`.
    pub fn from_grid(f: &GridField1D, k: usize) -> Self {
        let n = f.len() as f64;
        let c = f.spectral().forward(f.values());
        Self(c.into_iter().take(k + 1).map(|z| z / n).collect())
    }

    pub fn cutoff(&self) -> usize {
        self.0.len() - 1
    }

    /// Highest index with a non-zero coefficient.
    pub fn effective_cutoff(&self) -> usize {
        self.0.iter().rposition(|c| c.norm_sqr() > 0.0).unwrap_or(0)
    }

    pub fn to_grid(&self, n: usize) -> GridField1D {
        let sp = Spectral::for_size(n);
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let nf = n as f64;
        buf[0] = Complex64::new(self.0[0].re * nf, 0.0);
        for k in 1..self.0.len().min((n + 1) / 2) {
            buf[k] = self.0[k] * nf;
            buf[n - k] = self.0[k].conj() * nf;
        }
        GridField1D::from_values(sp.inverse_real(buf))
    }

    /// Evaluation given powers `z^k = e^{2πikx}`.
    #[inline]
    pub fn eval_powers(&self, pw: &[Complex64]) -> f64 {
        let mut acc = 0.0;
        for k in 1..self.0.len() {
            let c = self.0[k];
            let z = pw[k];
            acc += c.re * z.re - c.im * z.im;
        }
        self.0[0].re + 2.0 * acc
    }

    pub fn eval(&self, x: f64) -> f64 {
        let mut pw = vec![Complex64::new(1.0, 0.0); self.0.len()];
        fill_powers(x, &mut pw);
        self.eval_powers(&pw)
    }

    pub fn combine(&self, alpha: f64, other: &Modes, beta: f64) -> Modes {
        let n = self.0.len().max(other.0.len());
        let zero = Complex64::new(0.0, 0.0);
        Modes(
            (0..n)
                .map(|k| self.0.get(k).copied().unwrap_or(zero) * alpha + other.0.get(k).copied().unwrap_or(zero) * beta)
                .collect(),
        )
    }

    /// Drops trailing coefficients below `rel_tol` times the largest one.
    pub fn trimmed(&self, rel_tol: f64) -> Modes {
        let peak = self.0.iter().map(|c| c.norm()).fold(0.0, f64::max);
        let len = self.0.iter().rposition(|c| c.norm() > rel_tol * peak).map_or(1, |i| i + 1);
        self.truncated(len)
    }

    pub fn truncated(&self, len: usize) -> Modes {
        Modes(self.0.iter().take(len).copied().collect())
    }
}

/// `pw[k] = e^{2πikx}`.
#[inline]
pub fn fill_powers(x: f64, pw: &mut [Complex64]) {
    let (s, c) = (TWO_PI * x).sin_cos();
    let z = Complex64::new(c, s);
    pw[0] = Complex64::new(1.0, 0.0);
    for k in 1..pw.len() {
        pw[k] = pw[k - 1] * z;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spectral_derivative_of_trig_polynomial_is_exact() {
        let s = FourierSeries { mean: 0.3, cos: vec![0.2, 0.0, -0.7], sin: vec![1.1, 0.4] };
        let f = s.sample(32);
        for order in 1..=3 {
            let d = f.derivative(order);
            let exact = s.sample_derivative(32, order);
            assert!(d.max_abs_diff(&exact).unwrap() < 1e-9 * (TWO_PI * 3.0).powi(order as i32));
        }
    }

    #[test]
    fn heat_multiplier_on_cosine() {
        let f = GridField1D::from_fn(16, |x| (TWO_PI * x).cos());
        let dt = 0.01;
        let g = f.spectral().heat(f.values(), dt);
        let decay = (-4.0 * PI * PI * dt).exp();
        for (i, v) in g.iter().enumerate() {
            assert!((v - decay * (TWO_PI * grid_point(16, i)).cos()).abs() < 1e-14);
        }
    }

    #[test]
    fn inner_product_of_sines_is_half() {
        let s = GridField1D::from_fn(24, |x| (TWO_PI * x).sin());
        assert!((s.inner(&s).unwrap() - 0.5).abs() < 1e-14);
    }

    #[test]
    fn grid_mismatch_is_reported() {
        let a = GridField1D::zeros(8);
        let b = GridField1D::zeros(16);
        assert!(matches!(a.inner(&b), Err(Error::GridMismatch { expected: 8, got: 16 })));
    }

    #[test]
    fn cubic_interpolation_reproduces_cubics_locally() {
        let f = GridField1D::from_fn(64, |x| (TWO_PI * x).sin());
        let x = 0.3141;
        assert!((f.interpolate(x) - (TWO_PI * x).sin()).abs() < 1e-5);
        assert!((f.interpolate(x + 3.0) - (TWO_PI * x).sin()).abs() < 1e-5);
    }

    #[test]
    fn series_combination_and_derivatives() {
        let a = FourierSeries::sine(1, 2.0);
        let b = FourierSeries::cosine(2, 1.0);
        let c = a.combine(0.5, &b, -1.0);
        let x = 0.17;
        let expect = (TWO_PI * x).sin() - (2.0 * TWO_PI * x).cos();
        assert!((c.eval(x) - expect).abs() < 1e-14);
        let d2 = c.eval_derivative(x, 2);
        let expect2 = -TWO_PI * TWO_PI * (TWO_PI * x).sin() + (2.0 * TWO_PI).powi(2) * (2.0 * TWO_PI * x).cos();
        assert!((d2 - expect2).abs() < 1e-10);
    }
}
