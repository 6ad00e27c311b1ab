//! Solvers for the limiting stochastic conservation law
//!
//! ```text
//! dρ = ∂x[(a − u)ρ] dt + Σ_k ∂x[φ_k ρ] ∘ dβ_k,        ∂t u = ∂x² u,
//! ```
//!
//! with Itô form `dρ = A^I ρ dt + Σ_k ∂x(φ_k ρ) dβ_k`, `A^I ρ = ∂x[(a − u)ρ] + ½Σ_k ∂x(φ_k ∂x(φ_k ρ))`.
//!
//! Three schemes share one Brownian stream layout (one standard normal per mode per step):
//!
//! * `Flow`: push-forward of `ρ₀` by the stochastic flow `dX = −(a − u)(X) dt − Σ_k φ_k(X) ∘ dβ_k`,
//!   integrated by the Heun method. `ρ` is a weighted particle measure, projected onto Fourier
//!   modes `|k| ≤ K` for grid output.
//! * `ItoEm`: spectral Euler–Maruyama on the Itô form.
//! * `StratMidpoint`: spectral implicit midpoint rule on the Stratonovich form.
//!
//! Transport noise makes spectral Euler–Maruyama mean-square unstable in every Fourier mode
//! (mean-square amplification `1 + (λ_k dt)²/4` per step with `λ_k = (2πkφ)²`), and explicit
//! Stratonovich schemes are unstable path by path. The midpoint rule is stable but costs a dense
//! solve per step. The flow scheme has none of these restrictions and is the default.

use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::coefficients::{Coefficients, NoiseBasis};
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

use crate::field::{fill_powers, FourierSeries, GridField1D, Modes, Spectral, TWO_PI};
use crate::rng::Stream;

/// Stability constant of the grid schemes, `dt ≤ C_STAB Δx² / max k(x,x)`.
pub const C_STAB: f64 = 0.25;
/// Relative size below which Fourier coefficients of coefficient fields count as round-off.
const TRIM: f64 = 1e-13;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpdeScheme {
    #[default]
    Flow,
    ItoEm,
    StratMidpoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpdeConfig {
    pub nx: usize,
    pub dt: f64,
    pub horizon: f64,
    #[serde(default)]
    pub output_times: Vec<f64>,
    pub rho0: FourierSeries,
    #[serde(default)]
    pub u0: FourierSeries,
    #[serde(default)]
    pub scheme: SpdeScheme,
    /// Flow seeds; defaults to `4 nx`.
    #[serde(default)]
    pub seeds: Option<usize>,
    /// Highest Fourier mode of the flow projection; defaults to `nx / 3`.
    #[serde(default)]
    pub modes: Option<usize>,
}

impl SpdeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nx < 8 {
            return Err(Error::Invalid(format!("nx must be at least 8, got {}", self.nx)));
        }
        if !(self.dt > 0.0) || !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::Invalid("dt and horizon must be positive".into()));
        }
        if self.output_times.iter().any(|t| !(*t >= 0.0 && *t <= self.horizon)) {
            return Err(Error::Invalid("output times must lie in [0, horizon]".into()));
        }
        if self.output_times.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Invalid("output times must be sorted".into()));
        }
        let k = self.modes();
        if k == 0 || 2 * k >= self.nx {
            return Err(Error::Invalid(format!("mode cutoff {k} must lie in [1, nx/2)")));
        }
        if self.u0.bandwidth() > k || self.rho0.bandwidth() > k {
            return Err(Error::Invalid("initial data exceed the mode cutoff".into()));
        }
        if self.seeds == Some(0) {
            return Err(Error::Invalid("seeds must be positive".into()));
        }
        Ok(())
    }

    pub fn modes(&self) -> usize {
        self.modes.unwrap_or(self.nx / 3)
    }

    pub fn seeds(&self) -> usize {
        self.seeds.unwrap_or(4 * self.nx)
    }
}

/// Exact heat propagator `e^{dt ∂x²}`.
pub fn heat_propagate(u: &GridField1D, dt: f64) -> Result<GridField1D> {
    if !(dt >= 0.0) || !dt.is_finite() {
        return Err(Error::NonFiniteTime(dt));
    }
    Ok(GridField1D::from_values(u.spectral().heat(u.values(), dt)))
}

/// Largest step admitted by the grid schemes.
pub fn stability_bound(nx: usize, basis: &NoiseBasis) -> f64 {
    let dx = 1.0 / nx as f64;
    let kmax = basis.max_variance();
    if kmax > 0.0 {
        C_STAB * dx * dx / kmax
    } else {
        f64::INFINITY
    }
}

/// Grid state of the SPDE.
#[derive(Clone, Debug, PartialEq)]
pub struct SpdeState {
    pub rho: GridField1D,
    pub u: GridField1D,
    pub t: f64,
}

impl SpdeState {
    pub fn initial(cfg: &SpdeConfig) -> Self {
        Self { rho: cfg.rho0.sample(cfg.nx), u: cfg.u0.sample(cfg.nx), t: 0.0 }
    }
}

fn draw_increments(n: usize, dt: f64, rng: &mut Stream) -> Vec<f64> {
    let s = dt.sqrt();
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            s * z
        })
        .collect()
}

fn check_grid_step(state: &SpdeState, a: &GridField1D, basis: &NoiseBasis, dt: f64) -> Result<()> {
    state.rho.ensure_same_grid(a)?;
    state.rho.ensure_same_grid(&state.u)?;
    for m in &basis.modes {
        state.rho.ensure_same_grid(m)?;
    }
    if !(dt > 0.0) {
        return Err(Error::Invalid(format!("time step must be positive, got {dt}")));
    }
    let bound = stability_bound(state.rho.len(), basis);
    if dt > bound {
        return Err(Error::StabilityViolation { dt, bound });
    }
    Ok(())
}

fn d1(values: &[f64], sp: &Spectral) -> Vec<f64> {
    sp.derivative(values, 1)
}

/// `∂x[(a − u)ρ]` on raw grid values.
fn transport(rho: &[f64], b: &[f64], sp: &Spectral) -> Vec<f64> {
    let flux: Vec<f64> = rho.iter().zip(b).map(|(r, b)| r * b).collect();
    d1(&flux, sp)
}

/// `∂x(φ ρ)`.
fn noise_op(rho: &[f64], phi: &[f64], sp: &Spectral) -> Vec<f64> {
    let prod: Vec<f64> = rho.iter().zip(phi).map(|(r, p)| r * p).collect();
    d1(&prod, sp)
}

fn finish_step(state: &mut SpdeState, rho: Vec<f64>, dt: f64) -> Result<()> {
    if let Some(bad) = rho.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFiniteState(*bad));
    }
    state.rho = GridField1D::from_values(rho);
    state.u = heat_propagate(&state.u, dt)?;
    state.t += dt;
    Ok(())
}

/// One Euler–Maruyama step of the Itô form with the given Brownian increments.
pub fn spde_step_with(
    state: &mut SpdeState,
    a: &GridField1D,
    basis: &NoiseBasis,
    dt: f64,
    dbeta: &[f64],
) -> Result<()> {
    check_grid_step(state, a, basis, dt)?;
    let sp = state.rho.spectral();
    let rho = state.rho.values();
    let b: Vec<f64> = a.values().iter().zip(state.u.values()).map(|(a, u)| a - u).collect();
    let mut next = rho.to_vec();
    let drift = transport(rho, &b, &sp);
    for (n, d) in next.iter_mut().zip(&drift) {
        *n += dt * d;
    }
    for (phi, db) in basis.modes.iter().zip(dbeta) {
        let first = noise_op(rho, phi.values(), &sp);
        let second = noise_op(&first, phi.values(), &sp);
        for ((n, f), s) in next.iter_mut().zip(&first).zip(&second) {
            *n += 0.5 * dt * s + db * f;
        }
    }
    finish_step(state, next, dt)
}

/// One Euler–Maruyama step drawing one standard normal per mode from `rng`.
pub fn spde_step(state: &mut SpdeState, a: &GridField1D, basis: &NoiseBasis, dt: f64, rng: &mut Stream) -> Result<()> {
    let db = draw_increments(basis.len(), dt, rng);
    spde_step_with(state, a, basis, dt, &db)
}

/// Dense spectral first-derivative matrix on `n` points.
pub fn derivative_matrix(n: usize) -> DMatrix<f64> {
    let sp = Spectral::for_size(n);
    let mut d = DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[j] = 1.0;
        for (i, v) in sp.derivative(&e, 1).into_iter().enumerate() {
            d[(i, j)] = v;
        }
    }
    d
}

/// Operator matrices of the Stratonovich form: `D diag(a)` and `D diag(φ_k)`.
#[derive(Clone, Debug)]
pub struct StratOperators {
    pub deriv: DMatrix<f64>,
    pub drift: DMatrix<f64>,
    pub noise: Vec<DMatrix<f64>>,
}

impl StratOperators {
    pub fn new(a: &GridField1D, basis: &NoiseBasis) -> Self {
        let deriv = derivative_matrix(a.len());
        let scale_cols = |f: &GridField1D| {
            let mut m = deriv.clone();
            for (j, v) in f.values().iter().enumerate() {
                m.column_mut(j).scale_mut(*v);
            }
            m
        };
        let drift = scale_cols(a);
        let noise = basis.modes.iter().map(scale_cols).collect();
        Self { deriv, drift, noise }
    }
}

/// One implicit-midpoint step of the Stratonovich form,
/// `(I − ½M)ρ' = (I + ½M)ρ` with `M = dt D diag(a − u) + Σ_k Δβ_k D diag(φ_k)`, `u` at the midpoint.
pub fn strat_midpoint_step_with(
    state: &mut SpdeState,
    ops: &StratOperators,
    dt: f64,
    dbeta: &[f64],
) -> Result<()> {
    let n = state.rho.len();
    if ops.deriv.nrows() != n {
        return Err(Error::GridMismatch { expected: ops.deriv.nrows(), got: n });
    }
    if !(dt > 0.0) {
        return Err(Error::Invalid(format!("time step must be positive, got {dt}")));
    }
    let u_mid = heat_propagate(&state.u, 0.5 * dt)?;
    let mut m = &ops.drift * dt;
    for (j, u) in u_mid.values().iter().enumerate() {
        let mut col = m.column_mut(j);
        col.axpy(-dt * u, &ops.deriv.column(j), 1.0);
    }
    for (b, db) in ops.noise.iter().zip(dbeta) {
        m += b * *db;
    }
    let rho = DVector::from_column_slice(state.rho.values());
    let rhs = &rho + &m * &rho * 0.5;
    let lhs = DMatrix::identity(n, n) - m * 0.5;
    let next = lhs
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::ResolutionInsufficient("singular midpoint system".into()))?;
    finish_step(state, next.iter().copied().collect(), dt)
}

/// Coefficient fields as Fourier modes for off-grid evaluation.
#[derive(Clone, Debug)]
pub struct FlowFields {
    pub a: Modes,
    pub phi: Vec<Modes>,
    pub u0: Modes,
    len: usize,
}

impl FlowFields {
    pub fn new(a: &GridField1D, basis: &NoiseBasis, u0: &FourierSeries) -> Self {
        let k = (a.len() - 1) / 2;
        let a = Modes::from_grid(a, k).trimmed(TRIM);
        let phi: Vec<Modes> = basis.modes.iter().map(|p| Modes::from_grid(p, k).trimmed(TRIM)).collect();
        let u0 = Modes::from_series(u0, 0).trimmed(TRIM);
        let len = phi.iter().map(|m| m.0.len()).chain([a.0.len(), u0.0.len()]).max().unwrap_or(1);
        Self { a, phi, u0, len }
    }

    fn u_at(&self, t: f64) -> Modes {
        Modes(
            self.u0
                .0
                .iter()
                .enumerate()
                .map(|(k, c)| c * (-(TWO_PI * k as f64).powi(2) * t).exp())
                .collect(),
        )
    }
}

/// Weighted particles transported by the stochastic flow.
#[derive(Clone, Debug)]
pub struct FlowState {
    pub x: Vec<f64>,
    pub w: Vec<f64>,
    pub t: f64,
    pub nx: usize,
    pub cutoff: usize,
}

impl FlowState {
    /// Seeds on a uniform lattice with weights `ρ₀(x_i)/S`.
    pub fn initial(cfg: &SpdeConfig) -> Self {
        let s = cfg.seeds();
        let x: Vec<f64> = (0..s).map(|i| i as f64 / s as f64).collect();
        let w = x.iter().map(|&x| cfg.rho0.eval(x) / s as f64).collect();
        Self { x, w, t: 0.0, nx: cfg.nx, cutoff: cfg.modes() }
    }

    pub fn mass(&self) -> f64 {
        self.w.iter().sum()
    }

    /// `⟨ρ, g⟩ = Σ_i w_i g(X_i)`.
    pub fn pair(&self, g: &Modes) -> f64 {
        let mut pw = vec![Complex64::new(0.0, 0.0); g.0.len()];
        self.x
            .iter()
            .zip(&self.w)
            .map(|(&x, w)| {
                fill_powers(x, &mut pw);
                w * g.eval_powers(&pw)
            })
            .sum()
    }

    pub fn rho_modes(&self) -> Modes {
        let k = self.cutoff;
        let mut pw = vec![Complex64::new(0.0, 0.0); k + 1];
        let mut out = Modes::zeros(k);
        for (&x, &w) in self.x.iter().zip(&self.w) {
            fill_powers(x, &mut pw);
            for m in 0..=k {
                out.0[m] += pw[m].conj() * w;
            }
        }
        out
    }

    pub fn rho(&self) -> GridField1D {
        self.rho_modes().to_grid(self.nx)
    }
}

/// One Heun step of `dX = −(a − u)(X) dt − Σ_k φ_k(X) ∘ dβ_k`.
pub fn flow_step_with(state: &mut FlowState, fields: &FlowFields, dt: f64, dbeta: &[f64]) -> Result<()> {
    if !(dt > 0.0) {
        return Err(Error::Invalid(format!("time step must be positive, got {dt}")));
    }
    let u0 = fields.u_at(state.t);
    let u1 = fields.u_at(state.t + dt);
    let mut pw = vec![Complex64::new(0.0, 0.0); fields.len];
    let mut velocity = |x: f64, u: &Modes| -> f64 {
        fill_powers(x, &mut pw);
        let mut v = -(fields.a.eval_powers(&pw) - u.eval_powers(&pw)) * dt;
        for (phi, db) in fields.phi.iter().zip(dbeta) {
            v -= phi.eval_powers(&pw) * db;
        }
        v
    };
    for x in state.x.iter_mut() {
        let k0 = velocity(*x, &u0);
        let k1 = velocity(*x + k0, &u1);
        *x += 0.5 * (k0 + k1);
        if !x.is_finite() {
            return Err(Error::NonFiniteState(*x));
        }
        *x = x.rem_euclid(1.0);
    }
    state.t += dt;
    Ok(())
}

/// Recorded SPDE state at an output time.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpdeSnapshot {
    pub t: f64,
    pub rho: GridField1D,
    pub u: GridField1D,
    pub mass: f64,
    pub min_rho: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SpdeDiagnostics {
    pub steps: usize,
    pub max_mass_drift: f64,
    pub min_rho: f64,
    /// Finest scale the run resolves: `Δx` for grid schemes, the smallest seed gap at the horizon for the flow.
    pub resolved_scale: f64,
}

#[derive(Clone, Debug)]
pub struct SpdeRun {
    pub snapshots: Vec<SpdeSnapshot>,
    pub diagnostics: SpdeDiagnostics,
}

/// The SPDE state in whichever representation the scheme uses.
#[derive(Clone, Debug)]
pub enum SpdeSolution {
    Ito(SpdeState, NoiseBasis, GridField1D),
    Midpoint(SpdeState, Box<StratOperators>),
    Flow(FlowState, Box<FlowFields>),
}

impl SpdeSolution {
    pub fn initial(cfg: &SpdeConfig, coeffs: &Coefficients) -> Result<Self> {
        cfg.validate()?;
        if coeffs.grid_len() != cfg.nx {
            return Err(Error::GridMismatch { expected: cfg.nx, got: coeffs.grid_len() });
        }
        Ok(match cfg.scheme {
            SpdeScheme::Flow => {
                Self::Flow(FlowState::initial(cfg), Box::new(FlowFields::new(&coeffs.a, &coeffs.basis, &cfg.u0)))
            }
            SpdeScheme::ItoEm => Self::Ito(SpdeState::initial(cfg), coeffs.basis.clone(), coeffs.a.clone()),
            SpdeScheme::StratMidpoint => {
                Self::Midpoint(SpdeState::initial(cfg), Box::new(StratOperators::new(&coeffs.a, &coeffs.basis)))
            }
        })
    }

    pub fn t(&self) -> f64 {
        match self {
            Self::Ito(s, ..) | Self::Midpoint(s, _) => s.t,
            Self::Flow(s, _) => s.t,
        }
    }

    pub fn rho(&self) -> GridField1D {
        match self {
            Self::Ito(s, ..) | Self::Midpoint(s, _) => s.rho.clone(),
            Self::Flow(s, _) => s.rho(),
        }
    }

    pub fn mass(&self) -> f64 {
        match self {
            Self::Ito(s, ..) | Self::Midpoint(s, _) => s.rho.integral(),
            Self::Flow(s, _) => s.mass(),
        }
    }

    /// `⟨ρ, g⟩` for a band-limited `g`.
    pub fn pair(&self, g: &Modes) -> f64 {
        match self {
            Self::Ito(s, ..) | Self::Midpoint(s, _) => {
                let n = s.rho.len();
                s.rho.inner(&g.to_grid(n)).unwrap_or(f64::NAN)
            }
            Self::Flow(s, _) => s.pair(g),
        }
    }

    pub fn step(&mut self, dt: f64, dbeta: &[f64]) -> Result<()> {
        match self {
            Self::Flow(s, f) => flow_step_with(s, f, dt, dbeta),
            Self::Midpoint(s, ops) => strat_midpoint_step_with(s, ops, dt, dbeta),
            Self::Ito(s, basis, a) => spde_step_with(s, a, basis, dt, dbeta),
        }
    }

    fn snapshot(&self, cfg: &SpdeConfig) -> SpdeSnapshot {
        let t = self.t();
        let rho = self.rho();
        let u = match self {
            Self::Ito(s, ..) | Self::Midpoint(s, _) => s.u.clone(),
            Self::Flow(_, f) => f.u_at(t).to_grid(cfg.nx),
        };
        SpdeSnapshot { t, min_rho: rho.min(), mass: self.mass(), rho, u }
    }

    fn resolved_scale(&self) -> f64 {
        match self {
            Self::Ito(s, ..) | Self::Midpoint(s, _) => s.rho.dx(),
            Self::Flow(s, _) => {
                let mut x = s.x.clone();
                x.sort_by(f64::total_cmp);
                let wrap = x.first().map_or(1.0, |f| f + 1.0) - x.last().copied().unwrap_or(0.0);
                x.windows(2).map(|w| w[1] - w[0]).fold(wrap, f64::min)
            }
        }
    }
}

/// Step boundaries of a run: uniform steps of at most `dt` that land on every output time.
pub fn step_schedule(dt: f64, horizon: f64, output_times: &[f64]) -> Vec<f64> {
    let mut stops: Vec<f64> = output_times.iter().copied().chain([horizon]).collect();
    stops.sort_by(f64::total_cmp);
    stops.dedup();
    let mut out = vec![0.0];
    let mut t0 = 0.0;
    for s in stops {
        if s <= t0 {
            continue;
        }
        let n = ((s - t0) / dt - 1e-9).ceil().max(1.0) as usize;
        for i in 1..=n {
            out.push(if i == n { s } else { t0 + (s - t0) * i as f64 / n as f64 });
        }
        t0 = s;
    }
    out
}

/// Runs the configured scheme, calling `on_step` after every step with the current solution.
pub fn simulate_spde_observed(
    cfg: &SpdeConfig,
    coeffs: &Coefficients,
    rng: &mut Stream,
    mut on_step: impl FnMut(&SpdeSolution),
) -> Result<SpdeRun> {
    let mut sol = SpdeSolution::initial(cfg, coeffs)?;
    let schedule = step_schedule(cfg.dt, cfg.horizon, &cfg.output_times);
    let mass0 = sol.mass();
    let mut diag = SpdeDiagnostics { min_rho: f64::INFINITY, ..Default::default() };
    let mut snapshots = Vec::new();
    let mut next_out = 0;
    let record = |sol: &SpdeSolution, snaps: &mut Vec<SpdeSnapshot>, diag: &mut SpdeDiagnostics, next: &mut usize| {
        while *next < cfg.output_times.len() && (cfg.output_times[*next] - sol.t()).abs() <= 1e-12 {
            let snap = sol.snapshot(cfg);
            diag.min_rho = diag.min_rho.min(snap.min_rho);
            snaps.push(snap);
            *next += 1;
        }
    };
    on_step(&sol);
    record(&sol, &mut snapshots, &mut diag, &mut next_out);
    for w in schedule.windows(2) {
        let dt = w[1] - w[0];
        let db = draw_increments(coeffs.basis.len(), dt, rng);
        sol.step(dt, &db)?;
        diag.steps += 1;
        diag.max_mass_drift = diag.max_mass_drift.max((sol.mass() - mass0).abs());
        on_step(&sol);
        record(&sol, &mut snapshots, &mut diag, &mut next_out);
    }
    if snapshots.last().is_none_or(|s| s.t < cfg.horizon) {
        let snap = sol.snapshot(cfg);
        diag.min_rho = diag.min_rho.min(snap.min_rho);
        snapshots.push(snap);
    }
    diag.resolved_scale = sol.resolved_scale();
    Ok(SpdeRun { snapshots, diagnostics: diag })
}

pub fn simulate_spde(cfg: &SpdeConfig, coeffs: &Coefficients, rng: &mut Stream) -> Result<SpdeRun> {
    simulate_spde_observed(cfg, coeffs, rng, |_| {})
}

/// Adjoint of the Itô drift applied to `ξ`: `−(a − u)ξ' + ½k(x,x)ξ'' + ¼∂x k(x,x) ξ'`.
pub fn ito_drift_adjoint(coeffs: &Coefficients, u: &GridField1D, xi: &GridField1D) -> Result<GridField1D> {
    let d1 = xi.derivative(1);
    let d2 = xi.derivative(2);
    let b = coeffs.a.sub(u)?;
    let out = b.mul(&d1)?.scale(-1.0).add(&coeffs.kernel.diag.mul(&d2)?.scale(0.5))?;
    out.add(&coeffs.kernel.diag_deriv.mul(&d1)?.scale(0.25))
}

/// Martingale part and quadratic-variation integral of `⟨ρ_t, ξ⟩` along one run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct MartingaleSample {
    /// `⟨ρ_T, ξ⟩ − ⟨ρ₀, ξ⟩ − ∫₀^T ⟨ρ_s, (A^I)*ξ⟩ ds`.
    pub martingale: f64,
    /// `∫₀^T Σ_k ⟨ρ_s, φ_k ξ'⟩² ds`.
    pub quadratic_variation: f64,
    pub final_value: f64,
}

/// Runs one SPDE path and accumulates its martingale decomposition for the test function `ξ`.
///
/// Time integrals use the trapezoid rule over the steps.
pub fn martingale_sample(
    cfg: &SpdeConfig,
    coeffs: &Coefficients,
    xi: &GridField1D,
    rng: &mut Stream,
) -> Result<MartingaleSample> {
    let n = cfg.nx;
    let full = (n - 1) / 2;
    let to_modes = |f: &GridField1D| Modes::from_grid(f, full).trimmed(TRIM);
    let xi_m = to_modes(xi);
    let d1 = xi.derivative(1);
    let qv_fns: Vec<Modes> = coeffs.basis.modes.iter().map(|p| p.mul(&d1).map(|f| to_modes(&f))).collect::<Result<_>>()?;
    // (A^I)*ξ = base + u ξ', with u evolving by the heat flow.
    let base = to_modes(&ito_drift_adjoint(coeffs, &GridField1D::zeros(n), xi)?);
    let u0 = cfg.u0.sample(n);
    let moving = u0.max_abs() > 0.0;
    let mut prev: Option<(f64, f64, f64)> = None;
    let (mut drift, mut qv, mut first, mut last) = (0.0, 0.0, f64::NAN, f64::NAN);
    let mut err = None;
    simulate_spde_observed(cfg, coeffs, rng, |sol| {
        if err.is_some() {
            return;
        }
        let t = sol.t();
        let adj = if moving {
            match heat_propagate(&u0, t).and_then(|u| u.mul(&d1)) {
                Ok(g) => base.combine(1.0, &to_modes(&g), 1.0),
                Err(e) => {
                    err = Some(e);
                    return;
                }
            }
        } else {
            base.clone()
        };
        let gen = sol.pair(&adj);
        let q: f64 = qv_fns.iter().map(|g| sol.pair(g).powi(2)).sum();
        let value = sol.pair(&xi_m);
        if let Some((t0, g0, q0)) = prev {
            let h = t - t0;
            drift += 0.5 * h * (g0 + gen);
            qv += 0.5 * h * (q0 + q);
        } else {
            first = value;
        }
        last = value;
        prev = Some((t, gen, q));
    })?;
    if let Some(e) = err {
        return Err(e);
    }
    Ok(MartingaleSample { martingale: last - first - drift, quadratic_variation: qv, final_value: last })
}

/// Deterministic solve of `∂t ρ = A^I ρ` (the ensemble mean of the SPDE) by classical RK4.
pub fn drift_only(cfg: &SpdeConfig, coeffs: &Coefficients) -> Result<GridField1D> {
    cfg.validate()?;
    let n = cfg.nx;
    let kmax = coeffs.kernel.diag.max_abs();
    let w = TWO_PI * (n / 2) as f64;
    let rate = 0.5 * kmax * w * w + (coeffs.a.max_abs() + cfg.u0.sup_norm()) * w + 1.0;
    let dt = cfg.dt.min(2.0 / rate);
    let schedule = step_schedule(dt, cfg.horizon, &[]);
    let u0 = cfg.u0.sample(n);
    let rhs = |rho: &GridField1D, t: f64| -> Result<GridField1D> {
        let u = heat_propagate(&u0, t)?;
        crate::coefficients::apply_ito_drift(rho, &u, &coeffs.a, &coeffs.kernel, None)
    };
    let mut rho = cfg.rho0.sample(n);
    for s in schedule.windows(2) {
        let (t, h) = (s[0], s[1] - s[0]);
        let k1 = rhs(&rho, t)?;
        let k2 = rhs(&rho.add(&k1.scale(0.5 * h))?, t + 0.5 * h)?;
        let k3 = rhs(&rho.add(&k2.scale(0.5 * h))?, t + 0.5 * h)?;
        let k4 = rhs(&rho.add(&k3.scale(h))?, t + h)?;
        let incr = k1.add(&k2.scale(2.0))?.add(&k3.scale(2.0))?.add(&k4)?.scale(h / 6.0);
        rho = rho.add(&incr)?;
    }
    Ok(rho)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::CoefficientOptions;
    use crate::driver::DriverSpec;
    use crate::rng::substream;

    fn telegraph(n: usize) -> Coefficients {
        Coefficients::compute(&DriverSpec::telegraph(0.5, 0.5, n).unwrap(), &CoefficientOptions::default()).unwrap()
    }

    fn zero(n: usize) -> Coefficients {
        Coefficients::compute(&DriverSpec::zero(n).unwrap(), &CoefficientOptions::default()).unwrap()
    }

    fn config(nx: usize, scheme: SpdeScheme) -> SpdeConfig {
        let mut rho0 = FourierSeries::constant(1.0);
        rho0.cos = vec![0.3];
        rho0.sin = vec![0.2];
        SpdeConfig {
            nx,
            dt: 1e-3,
            horizon: 0.2,
            output_times: vec![0.0, 0.1, 0.2],
            rho0,
            u0: FourierSeries::zero(),
            scheme,
            seeds: None,
            modes: None,
        }
    }

    #[test]
    fn heat_multiplier() {
        let u = GridField1D::from_fn(32, |x| (TWO_PI * x).cos());
        let dt = 0.01;
        let v = heat_propagate(&u, dt).unwrap();
        let expect = (-TWO_PI * TWO_PI * dt).exp();
        for (i, x) in v.values().iter().enumerate() {
            let want = expect * (TWO_PI * i as f64 / 32.0).cos();
            assert!((x - want).abs() < 1e-14);
        }
        assert!(heat_propagate(&u, 0.0).unwrap().max_abs_diff(&u).unwrap() < 1e-15);
        let c = GridField1D::constant(32, 2.5);
        assert!(heat_propagate(&c, 1.0).unwrap().max_abs_diff(&c).unwrap() < 1e-14);
        assert!(heat_propagate(&u, -1.0).is_err());
    }

    #[test]
    fn empty_basis_constant_drift_is_exact_advection() {
        let n = 32;
        let basis = NoiseBasis::empty();
        let b = 0.7;
        let a = GridField1D::constant(n, b);
        let rho0 = |x: f64| 1.0 + 0.4 * (TWO_PI * x).sin() + 0.1 * (2.0 * TWO_PI * x).cos();
        let mut state = SpdeState { rho: GridField1D::from_fn(n, rho0), u: GridField1D::zeros(n), t: 0.0 };
        let mut still = state.clone();
        let zero_a = GridField1D::zeros(n);
        let dt = 1e-4;
        let steps = 2000;
        for _ in 0..steps {
            spde_step_with(&mut state, &a, &basis, dt, &[]).unwrap();
            spde_step_with(&mut still, &zero_a, &basis, dt, &[]).unwrap();
        }
        let t = dt * steps as f64;
        let exact = GridField1D::from_fn(n, |x| rho0(x + b * t));
        let err = state.rho.max_abs_diff(&exact).unwrap();
        // Euler in time: error ≈ ½ t (2πb k)² dt |ρ̂_k|.
        assert!(err < 0.02, "advection error {err}");
        assert!(still.rho.max_abs_diff(&GridField1D::from_fn(n, rho0)).unwrap() < 1e-14);
    }

    #[test]
    fn grid_schemes_conserve_mass_and_check_stability() {
        let n = 32;
        let co = telegraph(n);
        let bound = stability_bound(n, &co.basis);
        // max k(x,x) = c²/p = 0.5.
        assert!((bound - C_STAB / (n * n) as f64 / 0.5).abs() < 1e-12);
        let mut rng = substream(3, 0, 1);
        let mut state = SpdeState::initial(&config(n, SpdeScheme::ItoEm));
        let m0 = state.rho.integral();
        for _ in 0..1000 {
            spde_step(&mut state, &co.a, &co.basis, 0.5 * bound, &mut rng).unwrap();
        }
        assert!((state.rho.integral() - m0).abs() < 1e-13, "em mass {}", state.rho.integral() - m0);
        let mut state = SpdeState::initial(&config(n, SpdeScheme::StratMidpoint));
        let ops = StratOperators::new(&co.a, &co.basis);
        for _ in 0..1000 {
            let db = draw_increments(1, 0.5 * bound, &mut rng);
            strat_midpoint_step_with(&mut state, &ops, 0.5 * bound, &db).unwrap();
        }
        assert!((state.rho.integral() - m0).abs() < 1e-13, "midpoint mass {}", state.rho.integral() - m0);
        let err = spde_step(&mut state, &co.a, &co.basis, 2.0 * bound, &mut rng).unwrap_err();
        assert!(matches!(err, Error::StabilityViolation { .. }));
    }

    #[test]
    fn zero_basis_transport_by_heat_decaying_velocity() {
        // ∂t ρ = −∂x(uρ), u = A e^{−4π²t} sin 2πx: characteristics X' = u(X, t).
        let n = 64;
        let co = zero(n);
        let amp = 0.3;
        let mut cfg = config(n, SpdeScheme::Flow);
        cfg.u0 = FourierSeries::sine(1, amp);
        cfg.horizon = 0.1;
        cfg.dt = 2.5e-4;
        cfg.output_times = vec![];
        let xi = GridField1D::from_fn(n, |x| (TWO_PI * x).cos());
        let mut rng = substream(1, 0, 1);
        let run = simulate_spde(&cfg, &co, &mut rng).unwrap();
        let flow = run.snapshots.last().unwrap().rho.inner(&xi).unwrap();
        let mut grid_cfg = cfg.clone();
        grid_cfg.scheme = SpdeScheme::ItoEm;
        grid_cfg.dt = 1e-4;
        let grid = simulate_spde(&grid_cfg, &co, &mut rng).unwrap().snapshots.last().unwrap().rho.inner(&xi).unwrap();
        // Independent oracle: RK4 characteristics from many seeds.
        let m = 4000;
        let mut oracle = 0.0;
        for i in 0..m {
            let x0 = i as f64 / m as f64;
            let vel = |x: f64, t: f64| amp * (-TWO_PI * TWO_PI * t).exp() * (TWO_PI * x).sin();
            let (mut x, mut t, h) = (x0, 0.0, 1e-4);
            for _ in 0..1000 {
                let k1 = vel(x, t);
                let k2 = vel(x + 0.5 * h * k1, t + 0.5 * h);
                let k3 = vel(x + 0.5 * h * k2, t + 0.5 * h);
                let k4 = vel(x + h * k3, t + h);
                x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
                t += h;
            }
            oracle += cfg.rho0.eval(x0) * (TWO_PI * x).cos() / m as f64;
        }
        assert!((flow - oracle).abs() < 1e-6, "flow {flow} oracle {oracle}");
        assert!((grid - oracle).abs() < 1e-3, "grid {grid} oracle {oracle}");
    }

    #[test]
    fn flow_and_grid_schemes_agree_on_a_shared_path() {
        let n = 64;
        let co = telegraph(n);
        let xi = GridField1D::from_fn(n, |x| (TWO_PI * x).sin());
        let mut cfg = config(n, SpdeScheme::Flow);
        cfg.horizon = 0.05;
        cfg.output_times = vec![];
        let bound = stability_bound(n, &co.basis);
        let dt = bound / 4.0;
        let steps = (cfg.horizon / dt).ceil() as usize;
        let dt = cfg.horizon / steps as f64;
        let mut rng = substream(9, 0, 1);
        let db: Vec<Vec<f64>> = (0..steps).map(|_| draw_increments(1, dt, &mut rng)).collect();
        let mut flow = SpdeSolution::initial(&cfg, &co).unwrap();
        cfg.scheme = SpdeScheme::ItoEm;
        let mut em = SpdeSolution::initial(&cfg, &co).unwrap();
        cfg.scheme = SpdeScheme::StratMidpoint;
        let mut mid = SpdeSolution::initial(&cfg, &co).unwrap();
        for d in &db {
            flow.step(dt, d).unwrap();
            em.step(dt, d).unwrap();
            mid.step(dt, d).unwrap();
        }
        let f = flow.rho().inner(&xi).unwrap();
        let e = em.rho().inner(&xi).unwrap();
        let h = mid.rho().inner(&xi).unwrap();
        assert!((f - h).abs() < 2e-3, "flow {f} midpoint {h}");
        assert!((f - e).abs() < 2e-2, "flow {f} em {e}");
        assert!((flow.mass() - 1.0).abs() < 1e-13);
    }

    #[test]
    fn step_schedule_hits_outputs() {
        let s = step_schedule(0.3, 1.0, &[0.0, 0.5]);
        assert_eq!(s.first(), Some(&0.0));
        assert!(s.contains(&0.5));
        assert_eq!(s.last(), Some(&1.0));
        assert!(s.windows(2).all(|w| w[1] - w[0] <= 0.3 + 1e-12 && w[1] > w[0]));
    }

    #[test]
    fn drift_only_zero_driver_is_static() {
        let n = 32;
        let co = zero(n);
        let cfg = config(n, SpdeScheme::Flow);
        let rho = drift_only(&cfg, &co).unwrap();
        assert!(rho.max_abs_diff(&cfg.rho0.sample(n)).unwrap() < 1e-14);
    }
}
