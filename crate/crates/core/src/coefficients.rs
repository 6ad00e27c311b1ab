//! Coefficients of the limiting SPDE: drift `a`, covariance kernel `k`, the
//! Karhunen–Loève noise basis, the cross kernels of the auxiliary process, and the
//! drift operators `A^S`, `A^{I→S}` and `A^I`.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::driver::{CorrelationTable, DriverSpec, PoissonSolution};
use crate::error::{Error, Result};
use crate::field::{GridField1D, Spectral};
use crate::quadrature::TimeLattice;

const TAIL_TARGET: f64 = 1e-12;
const REVERSIBLE_TOL: f64 = 1e-8;
const IDENTITY_TOL: f64 = 1e-8;
const ASSEMBLY_TOL: f64 = 1e-6;
const CLAMP_RATIO: f64 = 1e-12;
const INDEFINITE_RATIO: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CoefficientOptions {
    /// Fraction of the kernel trace allowed to be dropped from the noise basis.
    pub energy_tol: f64,
    /// Gauss–Legendre points per panel.
    pub quad_order: usize,
    /// Absolute change below which panel doubling stops.
    pub quad_tol: f64,
    pub max_panels: usize,
}

impl Default for CoefficientOptions {
    fn default() -> Self {
        Self { energy_tol: 1e-10, quad_order: 16, quad_tol: 1e-13, max_panels: 4096 }
    }
}

/// `T_cut = −ln(1e−12·γ/C₀)/γ`, so the neglected tail `C₀e^{−γT}/γ` is below `1e−12`.
pub fn t_cut(gamma: f64, c0: f64) -> f64 {
    if c0 <= 0.0 {
        return 1.0;
    }
    (-(TAIL_TARGET * gamma / c0).ln() / gamma).max(1.0)
}

/// Correlation table at composite Gauss–Legendre nodes on `[0, T_cut]`.
pub fn quadrature_table(driver: &DriverSpec, panels: usize, order: usize) -> Result<CorrelationTable> {
    let gamma = driver.spectral_gap();
    if !(gamma > 0.0) {
        return Err(Error::NoSpectralGap(gamma));
    }
    let lattice = TimeLattice::composite(t_cut(gamma, driver.c0()), panels, order);
    driver.correlation_table_weighted(&lattice.nodes, &lattice.weights)
}

fn weighted_sum(table: &CorrelationTable, h: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let n = table.values.first().map_or(0, |m| m.nrows());
    let mut acc = DMatrix::zeros(n, n);
    for ((t, w), c) in table.times.iter().zip(&table.weights).zip(&table.values) {
        let s = w * h(*t);
        if s != 0.0 {
            acc += c * s;
        }
    }
    acc
}

fn check_gap(table: &CorrelationTable) -> Result<()> {
    if !(table.decay_rate > 0.0) {
        return Err(Error::NoSpectralGap(table.decay_rate));
    }
    Ok(())
}

/// Spectral derivative of each row of `m` (derivative in the second argument).
pub fn diff_second(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.ncols();
    let sp = Spectral::for_size(n);
    let mut out = DMatrix::zeros(m.nrows(), n);
    for r in 0..m.nrows() {
        let row: Vec<f64> = m.row(r).iter().copied().collect();
        for (c, v) in sp.derivative(&row, 1).into_iter().enumerate() {
            out[(r, c)] = v;
        }
    }
    out
}

/// Spectral derivative of each column of `m` (derivative in the first argument).
pub fn diff_first(m: &DMatrix<f64>) -> DMatrix<f64> {
    diff_second(&m.transpose()).transpose()
}

fn diagonal(m: &DMatrix<f64>) -> GridField1D {
    GridField1D::from_values((0..m.nrows()).map(|i| m[(i, i)]).collect())
}

/// Covariance kernel on the grid with its diagonal and full diagonal derivative.
#[derive(Clone, Debug)]
pub struct Kernel2D {
    pub values: DMatrix<f64>,
    pub diag: GridField1D,
    /// `(∂₁ + ∂₂)k` at `(x, x)`.
    pub diag_deriv: GridField1D,
}

impl Kernel2D {
    pub fn from_matrix(values: DMatrix<f64>) -> Self {
        let d = diff_first(&values) + diff_second(&values);
        Self { diag: diagonal(&values), diag_deriv: diagonal(&d), values }
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn asymmetry(&self) -> f64 {
        (&self.values - self.values.transpose()).amax()
    }

    /// Eigenvalues of the quadrature-weighted operator `k·Δx`, ascending.
    pub fn operator_eigenvalues(&self) -> Vec<f64> {
        let dx = 1.0 / self.len() as f64;
        let mut ev: Vec<f64> = SymmetricEigen::new(&self.values * dx).eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    /// `∬ k(x,y) f(x) g(y) dx dy`.
    pub fn bilinear(&self, f: &GridField1D, g: &GridField1D) -> Result<f64> {
        if f.len() != self.len() {
            return Err(Error::GridMismatch { expected: self.len(), got: f.len() });
        }
        if g.len() != self.len() {
            return Err(Error::GridMismatch { expected: self.len(), got: g.len() });
        }
        let dx = 1.0 / self.len() as f64;
        let fv = nalgebra::DVector::from_column_slice(f.values());
        let gv = nalgebra::DVector::from_column_slice(g.values());
        Ok(fv.dot(&(&self.values * gv)) * dx * dx)
    }
}

/// `k(x,y) = ∫₀^∞ [C(t,x,y) + C(t,y,x)] dt` by the table's quadrature.
pub fn kernel_k(table: &CorrelationTable) -> Result<Kernel2D> {
    check_gap(table)?;
    let i = weighted_sum(table, |_| 1.0);
    Ok(Kernel2D::from_matrix(&i + i.transpose()))
}

/// `diag(Xᵀ S Y)` for state-indexed matrices `X`, `Y` (rows = states) weighted by `ν`.
fn diag_correlation(nu: &[f64], x: &DMatrix<f64>, s: &DMatrix<f64>, y: &DMatrix<f64>) -> Vec<f64> {
    let sy = s * y;
    (0..x.ncols())
        .map(|i| (0..x.nrows()).map(|j| nu[j] * x[(j, i)] * sy[(j, i)]).sum())
        .collect()
}

/// Drift `a(x) = ½∫₀^∞ E[∂m̃₀(x)m̃_t(x) − m̃₀(x)∂m̃_t(x)]dt + ∫₀^∞ e^{−t}E[m̃₀(x)∂m̃_t(x)]dt`.
///
/// For a driver flagged reversible, the reduced form `∫₀^∞ e^{−t}E[m̃₀(x)∂m̃_t(x)]dt`
/// is also evaluated and must agree within `1e−8`.
pub fn drift_a(driver: &DriverSpec, table: &CorrelationTable) -> Result<GridField1D> {
    check_gap(table)?;
    let nu = driver.stationary();
    let n = driver.state_matrix();
    let d = driver.derivative_matrix();
    let len = driver.grid_len();
    let mut a = vec![0.0; len];
    let mut reduced = vec![0.0; len];
    for ((t, w), s) in table.times.iter().zip(&table.weights).zip(&table.semigroups) {
        if *w == 0.0 {
            continue;
        }
        let deriv_first = diag_correlation(nu, &d, s, &n);
        let deriv_second = diag_correlation(nu, &n, s, &d);
        let e = (-t).exp();
        for i in 0..len {
            a[i] += w * (0.5 * (deriv_first[i] - deriv_second[i]) + e * deriv_second[i]);
            reduced[i] += w * e * deriv_second[i];
        }
    }
    let a = GridField1D::from_values(a);
    if driver.is_reversible() {
        let gap = a.max_abs_diff(&GridField1D::from_values(reduced))?;
        if gap > REVERSIBLE_TOL {
            return Err(Error::ConsistencyFailure(format!(
                "reversible form of the drift differs from the general form by {gap:.3e}"
            )));
        }
    }
    Ok(a)
}

/// Kernels of the stationary auxiliary weight `w̃`.
#[derive(Clone, Debug)]
pub struct CrossKernels {
    /// `E[w̃(x)w̃(y)]`.
    pub k_ww: DMatrix<f64>,
    /// `E[w̃(x)Ψ(m̃₀)(y)]`.
    pub g: DMatrix<f64>,
    /// `E[w̃(x)m̃₀(y)] = ∫₀^∞ e^{−t}C(t,x,y)dt`.
    pub wm: DMatrix<f64>,
    /// `∂₂G(x,y)` at `y = x`, i.e. `E[∂xΨ(m̃₀)(x) w̃(x)]`.
    pub g_d2_diag: GridField1D,
    /// Largest residual of `E[m̃₀(x)Ψ(m̃₀)(y)] + E[w̃(x)m̃₀(y)] − G(x,y)`.
    pub poisson_identity_residual: f64,
}

impl CrossKernels {
    /// Largest residual of `K_ww − ½(G + Gᵀ) − ½k`.
    pub fn symmetrized_residual(&self, kernel: &Kernel2D) -> f64 {
        (&self.k_ww - (&self.g + self.g.transpose()) * 0.5 - &kernel.values * 0.5).amax()
    }
}

/// `K_ww = ½∫₀^∞e^{−t}[C + Cᵀ]dt`, `G = −∫₀^∞(1−e^{−t})C dt`, checked against `Ψ`.
pub fn cross_kernels(driver: &DriverSpec, table: &CorrelationTable, psi: &PoissonSolution) -> Result<CrossKernels> {
    check_gap(table)?;
    let wm = weighted_sum(table, |t| (-t).exp());
    let k_ww = (&wm + wm.transpose()) * 0.5;
    let g = weighted_sum(table, |t| -(1.0 - (-t).exp()));
    let nu = driver.stationary();
    let nmat = driver.state_matrix();
    let pmat = DMatrix::from_fn(psi.values.len(), driver.grid_len(), |j, i| psi.values[j].values()[i]);
    let weighted = DMatrix::from_fn(nmat.nrows(), nmat.ncols(), |j, i| nu[j] * nmat[(j, i)]);
    let m_psi = weighted.transpose() * pmat;
    let residual = (&m_psi + &wm - &g).amax();
    if residual > IDENTITY_TOL {
        return Err(Error::ConsistencyFailure(format!(
            "E[m Ψ] + E[w m] differs from G by {residual:.3e}"
        )));
    }
    Ok(CrossKernels { g_d2_diag: diagonal(&diff_second(&g)), k_ww, g, wm, poisson_identity_residual: residual })
}

/// Karhunen–Loève modes of the covariance operator.
#[derive(Clone, Debug, Serialize)]
pub struct NoiseBasis {
    pub modes: Vec<GridField1D>,
    pub eigenvalues: Vec<f64>,
    /// Retained share of the positive trace.
    pub retained_fraction: f64,
    /// Trace mass of the dropped positive eigenvalues (absolute).
    pub discarded_energy: f64,
}

impl NoiseBasis {
    pub fn empty() -> Self {
        Self { modes: Vec::new(), eigenvalues: Vec::new(), retained_fraction: 1.0, discarded_energy: 0.0 }
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    /// `Σ_k φ_k(x)φ_k(y)` on the grid.
    pub fn reconstruct(&self, n: usize) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(n, n);
        for m in &self.modes {
            let v = nalgebra::DVector::from_column_slice(m.values());
            out += &v * v.transpose();
        }
        out
    }

    /// `max_x Σ_k φ_k(x)²`.
    pub fn max_variance(&self) -> f64 {
        let n = self.modes.first().map_or(0, GridField1D::len);
        (0..n)
            .map(|i| self.modes.iter().map(|m| m.values()[i].powi(2)).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

/// Eigendecomposition of `k·Δx`; modes `φ_k = √λ_k e_k / √Δx` with the largest entry positive.
pub fn noise_basis(kernel: &Kernel2D, energy_tol: f64) -> Result<NoiseBasis> {
    let n = kernel.len();
    let dx = 1.0 / n as f64;
    let eig = SymmetricEigen::new(&kernel.values * dx);
    let lmax = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let lmin = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if lmax <= 0.0 {
        if lmin < 0.0 && lmin.abs() > 1e-300 && kernel.values.amax() > 0.0 {
            return Err(Error::IndefiniteKernel { min: lmin, max: lmax });
        }
        return Ok(NoiseBasis::empty());
    }
    if lmin < -INDEFINITE_RATIO * lmax {
        return Err(Error::IndefiniteKernel { min: lmin, max: lmax });
    }
    let mut order: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] > CLAMP_RATIO * lmax).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = order.iter().map(|&i| eig.eigenvalues[i]).sum();
    let mut basis = NoiseBasis::empty();
    let mut kept = 0.0;
    for &i in &order {
        if kept >= (1.0 - energy_tol) * total {
            break;
        }
        let lambda = eig.eigenvalues[i];
        let col = eig.eigenvectors.column(i);
        let pivot = col.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        let scale = sign * lambda.sqrt() / dx.sqrt();
        basis.modes.push(GridField1D::from_values(col.iter().map(|v| v * scale).collect()));
        basis.eigenvalues.push(lambda);
        kept += lambda;
    }
    basis.retained_fraction = kept / total;
    basis.discarded_energy = total - kept;
    Ok(basis)
}

/// `A^S ρ = ∂x[(a − u)ρ]`.
pub fn apply_strat_drift(rho: &GridField1D, u: &GridField1D, a: &GridField1D) -> Result<GridField1D> {
    let flux = a.sub(u)?.mul(rho)?;
    Ok(flux.derivative(1))
}

/// `A^{I→S} ρ = ½∂x²[k(x,x)ρ] − ¼∂x[(∂x k(x,x))ρ]`.
pub fn apply_ito_correction(rho: &GridField1D, kernel: &Kernel2D) -> Result<GridField1D> {
    let second = kernel.diag.mul(rho)?.derivative(2);
    let first = kernel.diag_deriv.mul(rho)?.derivative(1);
    second.scale(0.5).sub(&first.scale(0.25))
}

/// `A^I ρ = A^S ρ + A^{I→S} ρ`. With cross kernels, also assembles
/// `½∂x²[k(x,x)ρ] + ∂x[∂₂G(x,x)ρ] − ∂x[uρ]` and requires agreement within `1e−6`.
pub fn apply_ito_drift(
    rho: &GridField1D,
    u: &GridField1D,
    a: &GridField1D,
    kernel: &Kernel2D,
    cross: Option<&CrossKernels>,
) -> Result<GridField1D> {
    let out = apply_strat_drift(rho, u, a)?.add(&apply_ito_correction(rho, kernel)?)?;
    if let Some(cross) = cross {
        let alt = rewritten_ito_drift(rho, u, kernel, cross)?;
        let gap = out.max_abs_diff(&alt)?;
        if gap > ASSEMBLY_TOL {
            return Err(Error::ConsistencyFailure(format!("the two assemblies of A^I differ by {gap:.3e}")));
        }
    }
    Ok(out)
}

/// Independent assembly of `A^I ρ` through the cross kernel `G`.
pub fn rewritten_ito_drift(
    rho: &GridField1D,
    u: &GridField1D,
    kernel: &Kernel2D,
    cross: &CrossKernels,
) -> Result<GridField1D> {
    let diffusion = kernel.diag.mul(rho)?.derivative(2).scale(0.5);
    let corrector = cross.g_d2_diag.mul(rho)?.derivative(1);
    let transport = u.mul(rho)?.derivative(1);
    diffusion.add(&corrector)?.sub(&transport)
}

/// Everything the SPDE and the diagnostics need from a driver.
#[derive(Clone, Debug)]
pub struct Coefficients {
    pub driver: DriverSpec,
    pub psi: PoissonSolution,
    pub table: CorrelationTable,
    pub t_cut: f64,
    pub gamma: f64,
    pub kernel: Kernel2D,
    pub a: GridField1D,
    pub cross: CrossKernels,
    pub basis: NoiseBasis,
}

impl Coefficients {
    /// Runs the full pipeline, doubling quadrature panels until `k`, `a` and `K_ww` settle.
    pub fn compute(driver: &DriverSpec, opts: &CoefficientOptions) -> Result<Self> {
        let driver = if driver.is_centered() { driver.clone() } else { driver.centered() };
        let gamma = driver.spectral_gap();
        if !(gamma > 0.0) {
            return Err(Error::NoSpectralGap(gamma));
        }
        let tc = t_cut(gamma, driver.c0());
        let psi = driver.minv_i()?;
        let mut panels = (tc / 4.0).ceil().max(2.0) as usize;
        let mut prev: Option<(Kernel2D, GridField1D, CrossKernels)> = None;
        loop {
            let table = quadrature_table(&driver, panels, opts.quad_order)?;
            let kernel = kernel_k(&table)?;
            let a = drift_a(&driver, &table)?;
            let cross = cross_kernels(&driver, &table, &psi)?;
            let settled = prev.as_ref().is_some_and(|(pk, pa, pc)| {
                (&kernel.values - &pk.values).amax() < opts.quad_tol
                    && a.max_abs_diff(pa).unwrap_or(f64::INFINITY) < opts.quad_tol
                    && (&cross.k_ww - &pc.k_ww).amax() < opts.quad_tol
                    && (&cross.g - &pc.g).amax() < opts.quad_tol
            });
            if settled {
                let basis = noise_basis(&kernel, opts.energy_tol)?;
                return Ok(Self { driver, psi, table, t_cut: tc, gamma, kernel, a, cross, basis });
            }
            if panels * 2 > opts.max_panels {
                return Err(Error::ResolutionInsufficient(format!(
                    "time quadrature did not settle with {panels} panels"
                )));
            }
            prev = Some((kernel, a, cross));
            panels *= 2;
        }
    }

    pub fn grid_len(&self) -> usize {
        self.a.len()
    }

    /// `Σ_j ν_j ⟨n^j ρ, Ψ^j⟩`.
    pub fn stationary_state_psi(&self, rho: &GridField1D) -> Result<f64> {
        let nu = self.driver.stationary();
        let mut acc = 0.0;
        for (j, w) in nu.iter().enumerate() {
            acc += w * self.driver.state(j).mul(rho)?.inner(&self.psi.values[j])?;
        }
        Ok(acc)
    }

    /// Quadratic-variation density `∬ k(x,y) ρ(x)∂ξ(x) ρ(y)∂ξ(y) dx dy`.
    pub fn quadratic_variation_rate(&self, rho: &GridField1D, xi: &GridField1D) -> Result<f64> {
        let f = rho.mul(&xi.derivative(1))?;
        self.kernel.bilinear(&f, &f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::TWO_PI;

    const N: usize = 32;

    fn telegraph(c: f64, p: f64) -> Coefficients {
        Coefficients::compute(&DriverSpec::telegraph(c, p, N).unwrap(), &CoefficientOptions::default()).unwrap()
    }

    fn s(x: f64) -> f64 {
        (TWO_PI * x).sin()
    }

    #[test]
    fn telegraph_kernel_drift_and_cross_kernels() {
        for (c, p) in [(0.5, 0.5), (1.0, 0.2), (0.8, 0.9)] {
            let co = telegraph(c, p);
            let mut worst: f64 = 0.0;
            for i in 0..N {
                let x = i as f64 / N as f64;
                let a = std::f64::consts::PI * c * c * (2.0 * TWO_PI * x).sin() / (1.0 + 2.0 * p);
                worst = worst.max((co.a.values()[i] - a).abs());
                for j in 0..N {
                    let y = j as f64 / N as f64;
                    let k = c * c / p * s(x) * s(y);
                    let kww = c * c * s(x) * s(y) / (1.0 + 2.0 * p);
                    let g = -c * c * s(x) * s(y) * (1.0 / (2.0 * p) - 1.0 / (1.0 + 2.0 * p));
                    worst = worst.max((co.kernel.values[(i, j)] - k).abs());
                    worst = worst.max((co.cross.k_ww[(i, j)] - kww).abs());
                    worst = worst.max((co.cross.g[(i, j)] - g).abs());
                }
            }
            assert!(worst < 1e-10, "c={c} p={p} worst={worst}");
            assert!(co.cross.symmetrized_residual(&co.kernel) < 1e-10);
            assert_eq!(co.kernel.asymmetry(), 0.0);
        }
    }

    #[test]
    fn zero_driver_gives_zero_coefficients() {
        let co = Coefficients::compute(&DriverSpec::zero(N).unwrap(), &CoefficientOptions::default()).unwrap();
        assert_eq!(co.kernel.values.amax(), 0.0);
        assert_eq!(co.a.max_abs(), 0.0);
        assert_eq!(co.cross.g.amax(), 0.0);
        assert!(co.basis.is_empty());
    }

    #[test]
    fn constant_states_give_zero_drift() {
        let p = DMatrix::from_row_slice(2, 2, &[0.6, 0.4, 0.4, 0.6]);
        let states = vec![crate::field::FourierSeries::constant(1.0), crate::field::FourierSeries::constant(-1.0)];
        let d = DriverSpec::build(states, p, N).unwrap();
        let co = Coefficients::compute(&d, &CoefficientOptions::default()).unwrap();
        assert!(co.a.max_abs() < 1e-14);
    }

    #[test]
    fn telegraph_basis_is_single_scaled_sine() {
        let (c, p) = (0.5, 0.5);
        let co = telegraph(c, p);
        assert_eq!(co.basis.len(), 1);
        let expect = GridField1D::from_fn(N, |x| c / p.sqrt() * s(x));
        let m = &co.basis.modes[0];
        let err = m.max_abs_diff(&expect).unwrap().min(m.max_abs_diff(&expect.scale(-1.0)).unwrap());
        assert!(err < 1e-10);
        assert!((m.inner(m).unwrap() - co.basis.eigenvalues[0]).abs() < 1e-12);
    }

    #[test]
    fn rank_one_kernel_and_indefinite_rejection() {
        let phi = GridField1D::from_fn(16, |x| 1.0 + (TWO_PI * x).cos());
        let v = nalgebra::DVector::from_column_slice(phi.values());
        let k = Kernel2D::from_matrix(&v * v.transpose());
        let b = noise_basis(&k, 1e-10).unwrap();
        assert_eq!(b.len(), 1);
        assert!(b.modes[0].max_abs_diff(&phi).unwrap() < 1e-10);
        let neg = Kernel2D::from_matrix(-(&v * v.transpose()));
        assert!(matches!(noise_basis(&neg, 1e-10), Err(Error::IndefiniteKernel { .. })));
        let zero = Kernel2D::from_matrix(DMatrix::zeros(16, 16));
        assert!(noise_basis(&zero, 1e-10).unwrap().is_empty());
    }

    #[test]
    fn drift_operator_examples() {
        let n = 16;
        let zero = GridField1D::zeros(n);
        let one = GridField1D::constant(n, 1.0);
        let sine = GridField1D::from_fn(n, s);
        let out = apply_strat_drift(&sine, &zero, &one).unwrap();
        let expect = GridField1D::from_fn(n, |x| TWO_PI * (TWO_PI * x).cos());
        assert!(out.max_abs_diff(&expect).unwrap() < 1e-12);
        assert!(apply_strat_drift(&one, &one.scale(0.3), &one).unwrap().max_abs() < 1e-14);
        assert!(matches!(
            apply_strat_drift(&one, &GridField1D::zeros(8), &one),
            Err(Error::GridMismatch { .. })
        ));

        let kappa = Kernel2D::from_matrix(DMatrix::from_element(n, n, 0.7));
        let out = apply_ito_correction(&sine, &kappa).unwrap();
        assert!(out.max_abs_diff(&sine.derivative(2).scale(0.35)).unwrap() < 1e-11);
    }

    #[test]
    fn telegraph_ito_drift_of_constant_density() {
        let (c, p) = (0.5, 0.5);
        let co = telegraph(c, p);
        let one = GridField1D::constant(N, 1.0);
        let zero = GridField1D::zeros(N);
        let got = apply_ito_drift(&one, &zero, &co.a, &co.kernel, Some(&co.cross)).unwrap();
        // ∂x a + ¼∂x²[k(x,x)] with k(x,x) = (c²/p) sin²(2πx) = (c²/2p)(1 − cos 4πx).
        let w = 2.0 * TWO_PI;
        let expect = GridField1D::from_fn(N, |x| {
            std::f64::consts::PI * c * c * w * (w * x).cos() / (1.0 + 2.0 * p)
                + 0.25 * c * c / (2.0 * p) * w * w * (w * x).cos()
        });
        assert!(got.max_abs_diff(&expect).unwrap() < 1e-8);
    }

    #[test]
    fn nonreversible_driver_passes_all_identities() {
        let p = DMatrix::from_row_slice(3, 3, &[0.1, 0.6, 0.3, 0.2, 0.2, 0.6, 0.7, 0.1, 0.2]);
        let states = vec![
            crate::field::FourierSeries { mean: 0.1, cos: vec![0.3], sin: vec![0.2, -0.1] },
            crate::field::FourierSeries { mean: -0.2, cos: vec![-0.1, 0.2], sin: vec![0.4] },
            crate::field::FourierSeries { mean: 0.0, cos: vec![0.0], sin: vec![-0.3, 0.0, 0.1] },
        ];
        let d = DriverSpec::build(states, p, N).unwrap();
        let co = Coefficients::compute(&d, &CoefficientOptions::default()).unwrap();
        assert!(co.cross.symmetrized_residual(&co.kernel) < 1e-8);
        let ev = co.kernel.operator_eigenvalues();
        assert!(ev[0] >= -1e-10 * ev[ev.len() - 1]);
        // a = ∂₂G(x,x) + ¼ d/dx k(x,x).
        let alt = co.cross.g_d2_diag.add(&co.kernel.diag_deriv.scale(0.25)).unwrap();
        assert!(co.a.max_abs_diff(&alt).unwrap() < 1e-9);
    }
}
