//! Auxiliary relaxation process, stationary weight `w̃`, first corrector, limiting generator
//! and the martingale-defect estimator.
//!
//! The auxiliary flow freezes `x` and relaxes velocities toward the exponentially weighted
//! driver average `w_t = ∫₀^t e^{−(t−s)} m_s ds`:
//! `g_t(f, n)(x, v) = e^t f(x, e^t[v − w_t(n)(x)])`.

use serde::{Deserialize, Serialize};

use crate::coefficients::{apply_ito_drift, Coefficients};
use crate::driver::{DriverSpec, JumpTrajectory};
use crate::error::{Error, Result};
use crate::field::{GridField1D, GridField2D};
use crate::kinetic::Moments;
use crate::rng::Stream;
use crate::stats::Moments4;

/// Burn-in of the `w̃` surrogate in units of the relaxation time `1/γ`.
pub const BURN_IN_GAPS: f64 = 20.0;

/// `g_t(x, v) = e^t f(x, e^t[v − w(x)])` by cubic interpolation in v.
///
/// Returns the flowed field and the number of reads that fell outside `[−V_max, V_max]`.
pub fn aux_flow(f: &GridField2D, w: &GridField1D, t: f64) -> Result<(GridField2D, usize)> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::NonFiniteTime(t));
    }
    let g = f.grid;
    if w.len() != g.nx {
        return Err(Error::GridMismatch { expected: g.nx, got: w.len() });
    }
    let scale = t.exp();
    let mut out = GridField2D::zeros(g);
    let mut outside = 0;
    for i in 0..g.nx {
        for j in 0..g.nv {
            let v = scale * (g.v(j) - w.values()[i]);
            if v.abs() > g.vmax {
                outside += 1;
            }
            out.set(i, j, scale * f.interpolate_v(i, v));
        }
    }
    Ok((out, outside))
}

/// Exact velocity moments of `g_t(f, n)` from those of `f`:
/// `ρ ↦ ρ`, `J ↦ wρ + e^{−t}J`, `K ↦ w²ρ + 2e^{−t}wJ + e^{−2t}K`.
pub fn aux_moments(m: &Moments, w: &GridField1D, t: f64) -> Result<Moments> {
    let d = (-t).exp();
    let j = w.mul(&m.rho)?.add(&m.j.scale(d))?;
    let k = w.mul(w)?.mul(&m.rho)?.add(&w.mul(&m.j)?.scale(2.0 * d))?.add(&m.k.scale(d * d))?;
    Ok(Moments { rho: m.rho.clone(), j, k })
}

/// `w_t = ∫₀^t e^{−(t−s)} m_s ds`, integrated exactly over the constant segments.
pub fn weight_w(path: &JumpTrajectory, driver: &DriverSpec, t: f64) -> Result<GridField1D> {
    if !(t >= 0.0) || t > path.horizon * (1.0 + 1e-12) {
        return Err(Error::NonFiniteTime(t));
    }
    let mut w = vec![0.0; driver.grid_len()];
    for (s0, s1, j) in path.segments() {
        if s0 >= t {
            break;
        }
        let s1 = s1.min(t);
        let c = (-(t - s1)).exp() - (-(t - s0)).exp();
        for (wi, n) in w.iter_mut().zip(driver.state(j).values()) {
            *wi += c * n;
        }
    }
    Ok(GridField1D::from_values(w))
}

/// Sample of `(w̃, m̃₀)`: the driver from a `ν`-draw, run for `burn_in`.
pub fn sample_wtilde(driver: &DriverSpec, burn_in: f64, rng: &mut Stream) -> Result<(GridField1D, usize)> {
    let gamma = driver.spectral_gap();
    if burn_in < BURN_IN_GAPS / gamma * (1.0 - 1e-12) {
        return Err(Error::Invalid(format!(
            "burn-in {burn_in} is shorter than {BURN_IN_GAPS}/γ = {}",
            BURN_IN_GAPS / gamma
        )));
    }
    let start = driver.draw_stationary(rng);
    let path = driver.sample_path(start, burn_in, rng)?;
    Ok((weight_w(&path, driver, burn_in)?, path.state_at(burn_in)))
}

/// Bias bound of the `w̃` surrogate, `C* e^{−burn_in}`.
pub fn wtilde_bias_bound(driver: &DriverSpec, burn_in: f64) -> f64 {
    driver.c_star() * (-burn_in).exp()
}

/// Outer function `Φ(r, s) = c + αr + βs + a r² + b rs + d s²`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outer {
    #[serde(default)]
    pub constant: f64,
    #[serde(default)]
    pub r: f64,
    #[serde(default)]
    pub s: f64,
    #[serde(default)]
    pub rr: f64,
    #[serde(default)]
    pub rs: f64,
    #[serde(default)]
    pub ss: f64,
}

impl Outer {
    pub fn linear() -> Self {
        Self { r: 1.0, ..Self::default() }
    }

    pub fn square() -> Self {
        Self { rr: 1.0, ..Self::default() }
    }

    pub fn value(&self, r: f64, s: f64) -> f64 {
        self.constant + self.r * r + self.s * s + self.rr * r * r + self.rs * r * s + self.ss * s * s
    }

    pub fn d_r(&self, r: f64, s: f64) -> f64 {
        self.r + 2.0 * self.rr * r + self.rs * s
    }

    pub fn d_s(&self, r: f64, s: f64) -> f64 {
        self.s + self.rs * r + 2.0 * self.ss * s
    }

    pub fn d_rr(&self) -> f64 {
        2.0 * self.rr
    }
}

/// `φ(f, u) = Φ(⟨ρ, ξ⟩, ⟨u, ζ⟩)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TestFunction {
    pub outer: Outer,
    pub xi: GridField1D,
    pub zeta: GridField1D,
}

impl TestFunction {
    pub fn new(outer: Outer, xi: GridField1D) -> Self {
        let n = xi.len();
        Self { outer, xi, zeta: GridField1D::zeros(n) }
    }

    pub fn args(&self, rho: &GridField1D, u: &GridField1D) -> Result<(f64, f64)> {
        Ok((rho.inner(&self.xi)?, u.inner(&self.zeta)?))
    }

    pub fn value(&self, rho: &GridField1D, u: &GridField1D) -> Result<f64> {
        let (r, s) = self.args(rho, u)?;
        Ok(self.outer.value(r, s))
    }
}

/// First corrector `φ₁ = ⟨J(f) − Ψ(n)ρ, ∂x ξ⟩ ∂₁Φ(⟨ρ, ξ⟩, ⟨u, ζ⟩)`.
pub fn corrector_phi1(moments: &Moments, u: &GridField1D, psi_n: &GridField1D, phi: &TestFunction) -> Result<f64> {
    let flux = moments.j.sub(&psi_n.mul(&moments.rho)?)?;
    let dxi = phi.xi.derivative(1);
    let (r, s) = phi.args(&moments.rho, u)?;
    Ok(flux.inner(&dxi)? * phi.outer.d_r(r, s))
}

/// Limiting generator on `φ = Φ(⟨ρ, ξ⟩, ⟨u, ζ⟩)`:
/// `⟨A^I ρ, ξ⟩∂₁Φ + ⟨∂x²u, ζ⟩∂₂Φ + ½∂₁²Φ ∬ k(x,y) ρ(x)ξ'(x) ρ(y)ξ'(y) dx dy`.
pub fn limiting_generator(rho: &GridField1D, u: &GridField1D, phi: &TestFunction, coeffs: &Coefficients) -> Result<f64> {
    let (r, s) = phi.args(rho, u)?;
    let o = &phi.outer;
    let mut out = 0.0;
    let dr = o.d_r(r, s);
    if dr != 0.0 {
        let drift = apply_ito_drift(rho, u, &coeffs.a, &coeffs.kernel, None)?;
        out += drift.inner(&phi.xi)? * dr;
    }
    let ds = o.d_s(r, s);
    if ds != 0.0 {
        out += u.derivative(2).inner(&phi.zeta)? * ds;
    }
    let drr = o.d_rr();
    if drr != 0.0 {
        out += 0.5 * drr * coeffs.quadratic_variation_rate(rho, &phi.xi)?;
    }
    Ok(out)
}

/// Recorded `(t, ρ_t, u_t)` along one run.
#[derive(Clone, Debug, PartialEq)]
pub struct PathPoint {
    pub t: f64,
    pub rho: GridField1D,
    pub u: GridField1D,
}

/// One run's `φ(ρ_t, u_t) − φ(ρ_s, u_s) − ∫_s^t Lφ dσ`, the integral by trapezoid over the recorded points.
pub fn defect_contribution(
    path: &[PathPoint],
    phi: &TestFunction,
    coeffs: &Coefficients,
    s: f64,
    t: f64,
) -> Result<f64> {
    const TOL: f64 = 1e-12;
    let window: Vec<&PathPoint> = path.iter().filter(|p| p.t >= s - TOL && p.t <= t + TOL).collect();
    let (first, last) = match (window.first(), window.last()) {
        (Some(f), Some(l)) if (f.t - s).abs() <= TOL && (l.t - t).abs() <= TOL => (*f, *l),
        _ => return Err(Error::Invalid(format!("run has no recorded states at both s = {s} and t = {t}"))),
    };
    let gens: Vec<f64> =
        window.iter().map(|p| limiting_generator(&p.rho, &p.u, phi, coeffs)).collect::<Result<_>>()?;
    let integral: f64 = window.windows(2).zip(gens.windows(2)).map(|(p, g)| 0.5 * (p[1].t - p[0].t) * (g[0] + g[1])).sum();
    Ok(phi.value(&last.rho, &last.u)? - phi.value(&first.rho, &first.u)? - integral)
}

/// Ensemble estimate of the martingale defect.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefectEstimate {
    pub value: f64,
    pub std_error: f64,
    pub runs: u64,
}

impl DefectEstimate {
    /// Requires the standard error to be at most `resolution`.
    pub fn from_moments(m: &Moments4, resolution: f64) -> Result<Self> {
        let se = m.std_error();
        if !(se <= resolution) {
            return Err(Error::InsufficientEnsemble { se, resolution });
        }
        Ok(Self { value: m.mean, std_error: se, runs: m.n })
    }
}

/// Mean and standard error of the defect over an ensemble of recorded runs.
pub fn martingale_defect(
    ensemble: &[Vec<PathPoint>],
    phi: &TestFunction,
    coeffs: &Coefficients,
    s: f64,
    t: f64,
    resolution: f64,
) -> Result<DefectEstimate> {
    let mut acc = Moments4::default();
    for path in ensemble {
        acc.push(defect_contribution(path, phi, coeffs, s, t)?);
    }
    DefectEstimate::from_moments(&acc, resolution)
}

/// Test functions for the mixing check of the auxiliary process.
#[derive(Clone, Debug, PartialEq)]
pub enum MixingObservable {
    /// `⟨J(f), ξ⟩`.
    Current(GridField1D),
    /// `⟨K(f), ξ⟩`.
    Energy(GridField1D),
    /// `⟨ξ₁(n)ρ, ξ₂(n)⟩` with one field per driver state.
    StatePair(Vec<GridField1D>, Vec<GridField1D>),
}

impl MixingObservable {
    pub fn eval(&self, m: &Moments, state: usize) -> Result<f64> {
        match self {
            Self::Current(xi) => m.j.inner(xi),
            Self::Energy(xi) => m.k.inner(xi),
            Self::StatePair(a, b) => a[state].mul(&m.rho)?.inner(&b[state]),
        }
    }

    /// Value under the invariant measure `ρ ⊗ δ_{w̃}` with `m̃₀ ~ ν`:
    /// `∫E[w̃]ρξ`, `∫E[w̃²]ρξ`, `Σ_j ν_j ⟨ξ₁^j ρ, ξ₂^j⟩`.
    pub fn invariant_value(&self, rho: &GridField1D, coeffs: &Coefficients) -> Result<f64> {
        let driver = &coeffs.driver;
        let nu = driver.stationary();
        match self {
            Self::Current(xi) => {
                let mut mean = GridField1D::zeros(rho.len());
                for (j, w) in nu.iter().enumerate() {
                    mean = mean.add(&driver.state(j).scale(*w))?;
                }
                mean.mul(rho)?.inner(xi)
            }
            Self::Energy(xi) => {
                let diag = GridField1D::from_values(coeffs.cross.k_ww.diagonal().iter().copied().collect());
                diag.mul(rho)?.inner(xi)
            }
            Self::StatePair(a, b) => {
                let mut acc = 0.0;
                for (j, w) in nu.iter().enumerate() {
                    acc += w * a[j].mul(rho)?.inner(&b[j])?;
                }
                Ok(acc)
            }
        }
    }
}

/// One sample of `ψ(g_t(f, n), m_t)` for each observable, the driver started at `start`.
pub fn mixing_sample(
    driver: &DriverSpec,
    f: &Moments,
    start: usize,
    t: f64,
    observables: &[MixingObservable],
    rng: &mut Stream,
) -> Result<Vec<f64>> {
    let path = driver.sample_path(start, t, rng)?;
    let w = weight_w(&path, driver, t)?;
    let g = aux_moments(f, &w, t)?;
    let state = path.state_at(t);
    observables.iter().map(|o| o.eval(&g, state)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::CoefficientOptions;
    use crate::field::{FourierSeries, PhaseGrid, TWO_PI};
    use crate::kinetic::moments;
    use crate::rng::substream;

    const N: usize = 32;

    fn s(x: f64) -> f64 {
        (TWO_PI * x).sin()
    }

    fn gaussian(v: f64, mean: f64, sd: f64) -> f64 {
        let z = (v - mean) / sd;
        (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
    }

    #[test]
    fn weight_of_constant_path_and_zero_time() {
        let d = DriverSpec::telegraph(0.5, 0.5, N).unwrap();
        let path = JumpTrajectory::constant(0, 3.0);
        assert_eq!(weight_w(&path, &d, 0.0).unwrap().max_abs(), 0.0);
        let w = weight_w(&path, &d, 2.0).unwrap();
        let want = d.state(0).scale(1.0 - (-2.0f64).exp());
        assert!(w.max_abs_diff(&want).unwrap() < 1e-15);
    }

    #[test]
    fn weight_piecewise_matches_fine_quadrature() {
        let d = DriverSpec::telegraph(0.7, 0.3, N).unwrap();
        let path = JumpTrajectory { jump_times: vec![0.3, 1.1, 1.15], state_indices: vec![0, 1, 0, 1], horizon: 2.0 };
        let t = 1.7;
        let w = weight_w(&path, &d, t).unwrap();
        let m = 170_000;
        let h = t / m as f64;
        let mut coef = [0.0; 2];
        for i in 0..m {
            let s = (i as f64 + 0.5) * h;
            coef[path.state_at(s)] += (-(t - s)).exp() * h;
        }
        let want = d.state(0).scale(coef[0]).add(&d.state(1).scale(coef[1])).unwrap();
        assert!(w.max_abs_diff(&want).unwrap() < 1e-9);
        assert!(w.max_abs() <= (1.0 - (-t).exp()) * d.c_star() + 1e-15);
    }

    #[test]
    fn aux_flow_identity_contraction_and_mass() {
        let grid = PhaseGrid::new(8, 401, 4.0).unwrap();
        let f = GridField2D::from_fn(grid, |x, v| (1.0 + 0.3 * s(x)) * gaussian(v, 0.2, 0.4));
        let zero = GridField1D::zeros(8);
        let (g0, _) = aux_flow(&f, &zero, 0.0).unwrap();
        assert!(g0.values().iter().zip(f.values()).all(|(a, b)| (a - b).abs() < 1e-12));
        let t = 0.5;
        let (g, _) = aux_flow(&f, &zero, t).unwrap();
        let e = t.exp();
        for i in 0..8 {
            for j in (0..401).step_by(37) {
                let v = grid.v(j);
                let want = e * (1.0 + 0.3 * s(grid.x(i))) * gaussian(e * v, 0.2, 0.4);
                assert!((g.get(i, j) - want).abs() < 1e-6, "{} vs {want}", g.get(i, j));
            }
        }
        let w = GridField1D::from_fn(8, |x| 0.3 * s(x));
        let (g, outside) = aux_flow(&f, &w, t).unwrap();
        assert!((g.mass() - f.mass()).abs() < 1e-8, "{} vs {}", g.mass(), f.mass());
        assert!(outside > 0);
        let exact = aux_moments(&moments(&f), &w, t).unwrap();
        let num = moments(&g);
        assert!(num.j.max_abs_diff(&exact.j).unwrap() < 1e-8);
        assert!(num.k.max_abs_diff(&exact.k).unwrap() < 1e-8);
    }

    #[test]
    fn wtilde_requires_burn_in_and_vanishes_for_zero_driver() {
        let d = DriverSpec::zero(N).unwrap();
        let mut rng = substream(1, 0, 2);
        let (w, j) = sample_wtilde(&d, 20.0, &mut rng).unwrap();
        assert_eq!(w.max_abs(), 0.0);
        assert_eq!(j, 0);
        let t = DriverSpec::telegraph(0.5, 0.5, N).unwrap();
        assert!(sample_wtilde(&t, 1.0, &mut rng).is_err());
    }

    #[test]
    fn corrector_cases() {
        let d = DriverSpec::telegraph(0.5, 0.5, N).unwrap();
        let psi = d.minv_i().unwrap();
        let rho = GridField1D::from_fn(N, |x| 1.0 + 0.2 * s(x));
        let j = GridField1D::from_fn(N, |x| 0.1 * (TWO_PI * x).cos());
        let m = Moments { rho: rho.clone(), j: j.clone(), k: GridField1D::zeros(N) };
        let u = GridField1D::zeros(N);
        let constant = TestFunction::new(Outer::linear(), GridField1D::constant(N, 1.0));
        assert!(corrector_phi1(&m, &u, &psi.values[0], &constant).unwrap().abs() < 1e-15);
        let still = Moments { rho: rho.clone(), j: GridField1D::zeros(N), k: GridField1D::zeros(N) };
        let xi = TestFunction::new(Outer::linear(), GridField1D::from_fn(N, s));
        assert_eq!(corrector_phi1(&still, &u, &GridField1D::zeros(N), &xi).unwrap(), 0.0);
        // Ψ(±n) = ∓n/(2p); with Φ = r² the corrector scales by 2⟨ρ, ξ⟩.
        let sq = TestFunction::new(Outer::square(), GridField1D::from_fn(N, s));
        let got = corrector_phi1(&m, &u, &psi.values[0], &sq).unwrap();
        let flux = j.add(&d.state(0).mul(&rho).unwrap()).unwrap();
        let want = flux.inner(&sq.xi.derivative(1)).unwrap() * 2.0 * rho.inner(&sq.xi).unwrap();
        assert!((got - want).abs() < 1e-14);
    }

    #[test]
    fn corrector_for_resampling_chain() {
        // P(n, n') = ν(n') gives Ψ = −n.
        let states = vec![FourierSeries::sine(1, 0.4), FourierSeries::sine(1, -0.2)];
        let p = nalgebra::DMatrix::from_row_slice(2, 2, &[1.0 / 3.0, 2.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0]);
        let d = DriverSpec::build(states, p, N).unwrap();
        let psi = d.minv_i().unwrap();
        let rho = GridField1D::from_fn(N, |x| 1.0 + 0.2 * (TWO_PI * x).cos());
        let m = Moments { rho: rho.clone(), j: GridField1D::from_fn(N, |x| 0.05 * s(x)), k: GridField1D::zeros(N) };
        let phi = TestFunction::new(Outer::linear(), GridField1D::from_fn(N, s));
        let u = GridField1D::zeros(N);
        for j in 0..2 {
            let got = corrector_phi1(&m, &u, &psi.values[j], &phi).unwrap();
            let want = m.j.add(&d.state(j).mul(&rho).unwrap()).unwrap().inner(&phi.xi.derivative(1)).unwrap();
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn generator_closed_forms() {
        let (c, p) = (0.5, 0.5);
        let co = Coefficients::compute(&DriverSpec::telegraph(c, p, N).unwrap(), &CoefficientOptions::default()).unwrap();
        let one = GridField1D::constant(N, 1.0);
        let u = GridField1D::zeros(N);
        let xi = GridField1D::from_fn(N, s);
        // Linear Φ: ⟨A^I 1, sin⟩ with A^I 1 = ∂x a + ¼∂x² k(x,x).
        let lin = TestFunction::new(Outer::linear(), xi.clone());
        let field = GridField1D::from_fn(N, |x| {
            let da = 4.0 * std::f64::consts::PI.powi(2) * c * c * (2.0 * TWO_PI * x).cos() / (1.0 + 2.0 * p);
            let d2k = (c * c / p) * 2.0 * TWO_PI * TWO_PI * (2.0 * TWO_PI * x).cos();
            da + 0.25 * d2k
        });
        let want = field.inner(&xi).unwrap();
        assert!((limiting_generator(&one, &u, &lin, &co).unwrap() - want).abs() < 1e-8);
        // Φ = r² at ρ = 1: only the quadratic-variation term, (c²/p)(∫ s s')²... = (c²/p)⟨s, 2π cos⟩² = 0.
        let sq = TestFunction::new(Outer::square(), xi.clone());
        let qv: f64 = {
            let h = 1.0 / N as f64;
            let f: Vec<f64> = (0..N).map(|i| (2.0 * std::f64::consts::PI) * (TWO_PI * i as f64 * h).cos()).collect();
            let mut acc = 0.0;
            for i in 0..N {
                for j in 0..N {
                    acc += co.kernel.values[(i, j)] * f[i] * f[j] * h * h;
                }
            }
            acc
        };
        assert!((limiting_generator(&one, &u, &sq, &co).unwrap() - qv).abs() < 1e-10);
        // ρ = 1 + 0.5 sin: ∬ k ρξ' ρξ' = (c²/p) (∫ s ρ ξ')², ∫ s(1 + 0.5 s) 2π cos = 0 by parity,
        // so use ξ = cos: ∫ s (1 + 0.5 s)(−2π s) = −2π(½) = −π.
        let rho = GridField1D::from_fn(N, |x| 1.0 + 0.5 * s(x));
        let cosq = TestFunction::new(Outer::square(), GridField1D::from_fn(N, |x| (TWO_PI * x).cos()));
        let r = rho.inner(&cosq.xi).unwrap();
        let drift = apply_ito_drift(&rho, &u, &co.a, &co.kernel, None).unwrap().inner(&cosq.xi).unwrap();
        let want = 2.0 * r * drift + (c * c / p) * std::f64::consts::PI.powi(2);
        assert!((limiting_generator(&rho, &u, &cosq, &co).unwrap() - want).abs() < 1e-9);
        // Zero driver, linear Φ, u = 0: L φ = 0.
        let z = Coefficients::compute(&DriverSpec::zero(N).unwrap(), &CoefficientOptions::default()).unwrap();
        assert_eq!(limiting_generator(&rho, &u, &lin, &z).unwrap(), 0.0);
    }

    #[test]
    fn constant_outer_has_zero_defect() {
        let co = Coefficients::compute(&DriverSpec::telegraph(0.5, 0.5, N).unwrap(), &CoefficientOptions::default()).unwrap();
        let phi = TestFunction::new(Outer { constant: 3.0, ..Outer::default() }, GridField1D::from_fn(N, s));
        let path: Vec<PathPoint> = (0..5)
            .map(|i| PathPoint {
                t: 0.1 * i as f64,
                rho: GridField1D::from_fn(N, |x| 1.0 + 0.1 * i as f64 * s(x)),
                u: GridField1D::zeros(N),
            })
            .collect();
        assert_eq!(defect_contribution(&path, &phi, &co, 0.0, 0.4).unwrap(), 0.0);
        let est = martingale_defect(&[path.clone(), path], &phi, &co, 0.0, 0.4, 1.0).unwrap();
        assert_eq!(est.value, 0.0);
        let mut m = Moments4::default();
        m.push(0.0);
        m.push(10.0);
        assert!(matches!(DefectEstimate::from_moments(&m, 0.1), Err(Error::InsufficientEnsemble { .. })));
    }

    #[test]
    fn auxiliary_process_mixes_to_invariant_values() {
        let d = DriverSpec::telegraph(0.6, 0.5, N).unwrap();
        let co = Coefficients::compute(&d, &CoefficientOptions::default()).unwrap();
        let rho = GridField1D::from_fn(N, |x| 1.0 + 0.4 * (TWO_PI * x).cos());
        let f = Moments { rho: rho.clone(), j: GridField1D::from_fn(N, |x| 0.3 * s(x)), k: GridField1D::constant(N, 0.5) };
        let cos2 = GridField1D::from_fn(N, |x| (2.0 * TWO_PI * x).cos());
        let obs = vec![
            MixingObservable::Current(GridField1D::from_fn(N, s)),
            MixingObservable::Energy(cos2.clone()),
            MixingObservable::StatePair(vec![cos2, GridField1D::from_fn(N, s)], vec![GridField1D::constant(N, 1.0), GridField1D::from_fn(N, s)]),
        ];
        let t = 10.0;
        let runs = 4000;
        let mut acc = vec![Moments4::default(); obs.len()];
        for r in 0..runs {
            let mut rng = substream(7, r, 2);
            let start = (r % 2) as usize;
            for (a, v) in acc.iter_mut().zip(mixing_sample(&d, &f, start, t, &obs, &mut rng).unwrap()) {
                a.push(v);
            }
        }
        for (a, o) in acc.iter().zip(&obs) {
            let want = o.invariant_value(&rho, &co).unwrap();
            assert!((a.mean - want).abs() < 4.0 * a.std_error() + 1e-3, "{} vs {want} ± {}", a.mean, a.std_error());
        }
    }
}
