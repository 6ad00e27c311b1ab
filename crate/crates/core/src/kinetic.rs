//! Path-wise solver for the rescaled kinetic–fluid system
//!
//! ```text
//! ∂t f + ε⁻¹ v ∂x f + ε⁻² ∂v[(m(x) + εu(x) − v) f] = 0,
//! ∂t u − ∂x² u = ∫ (v − εu) f dv,
//! ```
//!
//! driven by a finite-state jump process `m`.
//!
//! `f` is carried by weighted characteristics started at the nodes of a phase grid, so the
//! particle sums are quadrature rules for the exact push-forward of `f₀`. Each step is a
//! Strang splitting of the characteristic flow: half transport, exact relaxation toward
//! `c = m + εu`, half transport. Fields on the x-grid are band-limited projections of the
//! particle measure onto Fourier modes `|k| ≤ K`; `u` is advanced by the exact heat
//! multiplier plus a first-order exponential integrator for the source.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::driver::{DriverSpec, JumpTrajectory};
use crate::error::{Error, Result};
pub use crate::field::Modes;
use crate::field::{fill_powers, FourierSeries, GridField1D, GridField2D, PhaseGrid, TWO_PI};
use crate::rng::Stream;

/// Pre-renormalization mass drift beyond which a step is rejected.
const MASS_DRIFT_LIMIT: f64 = 1e-4;
/// Slack on the first-moment bound.
const MOMENT_SLACK: f64 = 1.1;
/// Initial nodes lighter than this fraction of the peak node weight are not seeded.
const NEGLIGIBLE_WEIGHT: f64 = 1e-15;

/// `f₀(x, v) = ρ₀(x) · N(v; v_mean, v_std²)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialDensity {
    pub rho0: FourierSeries,
    #[serde(default)]
    pub v_mean: f64,
    pub v_std: f64,
}

impl InitialDensity {
    pub fn density(&self, x: f64, v: f64) -> f64 {
        let z = (v - self.v_mean) / self.v_std;
        self.rho0.eval(x) * (-0.5 * z * z).exp() / (self.v_std * (2.0 * PI).sqrt())
    }

    /// Half-width in v that carries all but a negligible fraction of the Gaussian.
    pub fn v_support(&self) -> f64 {
        self.v_mean.abs() + 6.0 * self.v_std
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KineticConfig {
    pub epsilon: f64,
    pub nx: usize,
    pub nv: usize,
    /// Defaults to `2(C* + ‖u₀‖∞ + v-support of f₀)`.
    #[serde(default)]
    pub vmax: Option<f64>,
    pub dt_max: f64,
    pub horizon: f64,
    #[serde(default)]
    pub output_times: Vec<f64>,
    pub f0: InitialDensity,
    #[serde(default)]
    pub u0: FourierSeries,
    /// Keep `u ≡ u₀` instead of solving the heat equation.
    #[serde(default)]
    pub freeze_u: bool,
    /// Highest Fourier mode of the x-projection; defaults to `nx / 3`.
    #[serde(default)]
    pub modes: Option<usize>,
}

impl KineticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::Invalid(format!("epsilon must lie in (0, 1], got {}", self.epsilon)));
        }
        if !(self.dt_max > 0.0) || !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::Invalid("dt_max and horizon must be positive".into()));
        }
        if !(self.f0.v_std > 0.0) {
            return Err(Error::Invalid("f0.v_std must be positive".into()));
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
        if self.u0.bandwidth() > k || self.f0.rho0.bandwidth() > k {
            return Err(Error::Invalid("initial data exceed the mode cutoff".into()));
        }
        if self.f0.rho0.sample(4 * self.nx).min() < 0.0 {
            return Err(Error::Invalid("initial density rho0 must be non-negative".into()));
        }
        Ok(())
    }

    pub fn modes(&self) -> usize {
        self.modes.unwrap_or(self.nx / 3)
    }

    pub fn phase_grid(&self, c_star: f64) -> Result<PhaseGrid> {
        let vmax = self.vmax.unwrap_or(2.0 * (c_star + self.u0.sup_norm() + self.f0.v_support()));
        PhaseGrid::new(self.nx, self.nv, vmax)
    }
}

/// Velocity moments on the x-grid.
#[derive(Clone, Debug)]
pub struct Moments {
    pub rho: GridField1D,
    pub j: GridField1D,
    pub k: GridField1D,
}

/// Trapezoid-in-v moments `∫f dv`, `∫vf dv`, `∫v²f dv` of a phase-grid density.
pub fn moments(f: &GridField2D) -> Moments {
    let g = f.grid;
    let mut rho = vec![0.0; g.nx];
    let mut j = vec![0.0; g.nx];
    let mut k = vec![0.0; g.nx];
    for i in 0..g.nx {
        for (m, val) in f.row(i).iter().enumerate() {
            let (v, w) = (g.v(m), g.v_weight(m));
            rho[i] += w * val;
            j[i] += w * v * val;
            k[i] += w * v * v * val;
        }
    }
    Moments {
        rho: GridField1D::from_values(rho),
        j: GridField1D::from_values(j),
        k: GridField1D::from_values(k),
    }
}

/// Exponential-integrator factor `(1 − e^{−λh})/λ`, equal to `h` at `λ = 0`.
#[inline]
fn phi1(lambda: f64, h: f64) -> f64 {
    let z = lambda * h;
    if z.abs() < 1e-8 {
        h * (1.0 - 0.5 * z)
    } else {
        -(-z).exp_m1() / lambda
    }
}

#[inline]
fn heat_rate(k: usize) -> f64 {
    (TWO_PI * k as f64).powi(2)
}

/// Weighted characteristics of `f` together with the fluid velocity.
#[derive(Clone, Debug)]
pub struct KineticState {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub w: Vec<f64>,
    pub u: Modes,
    pub t: f64,
    pub driver_state: usize,
    pub epsilon: f64,
    pub nx: usize,
    pub grid: PhaseGrid,
    freeze_u: bool,
    powers: Vec<Complex64>,
}

/// Per-step bookkeeping.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StepReport {
    pub mass_drift: f64,
    pub max_shift_cells: f64,
}

impl KineticState {
    /// Particles at the phase-grid nodes with weights `f₀ Δx Δv`, normalized to mass 1.
    pub fn initial(cfg: &KineticConfig, c_star: f64, driver_state: usize) -> Result<Self> {
        cfg.validate()?;
        let grid = cfg.phase_grid(c_star)?;
        let mut x = Vec::with_capacity(grid.nx * grid.nv);
        let mut v = Vec::with_capacity(grid.nx * grid.nv);
        let mut w = Vec::with_capacity(grid.nx * grid.nv);
        let peak = cfg.f0.rho0.sup_norm() / (cfg.f0.v_std * (2.0 * PI).sqrt()) * grid.dx() * grid.dv();
        for i in 0..grid.nx {
            for j in 0..grid.nv {
                let weight = cfg.f0.density(grid.x(i), grid.v(j)) * grid.dx() * grid.v_weight(j);
                // Nodes deep in the Gaussian tail carry no representable mass.
                if weight > NEGLIGIBLE_WEIGHT * peak {
                    x.push(grid.x(i));
                    v.push(grid.v(j));
                    w.push(weight);
                }
            }
        }
        let total: f64 = w.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Invalid("initial density has zero mass".into()));
        }
        w.iter_mut().for_each(|m| *m /= total);
        let k = cfg.modes();
        Ok(Self {
            x,
            v,
            w,
            u: Modes::from_series(&cfg.u0, k),
            t: 0.0,
            driver_state,
            epsilon: cfg.epsilon,
            nx: cfg.nx,
            grid,
            freeze_u: cfg.freeze_u,
            powers: vec![Complex64::new(0.0, 0.0); k + 1],
        })
    }

    pub fn mode_cutoff(&self) -> usize {
        self.u.cutoff()
    }

    pub fn num_particles(&self) -> usize {
        self.x.len()
    }

    pub fn mass(&self) -> f64 {
        self.w.iter().sum()
    }

    /// `J̄(f) = ∬ |v| f dx dv`.
    pub fn abs_first_moment(&self) -> f64 {
        self.w.iter().zip(&self.v).map(|(w, v)| w * v.abs()).sum()
    }

    /// Weight carried by characteristics with `|v| > V_max`.
    pub fn escaped_mass(&self) -> f64 {
        self.w.iter().zip(&self.v).filter(|(_, v)| v.abs() > self.grid.vmax).map(|(w, _)| w).sum()
    }

    /// Fourier coefficients of `ρ`, `J`, `K` of the particle measure for modes `0..=K`.
    pub fn moment_modes(&self) -> (Modes, Modes, Modes) {
        let k = self.mode_cutoff();
        let mut pw = vec![Complex64::new(0.0, 0.0); k + 1];
        let (mut r, mut j, mut kk) = (Modes::zeros(k), Modes::zeros(k), Modes::zeros(k));
        for p in 0..self.x.len() {
            fill_powers(self.x[p], &mut pw);
            let (w, v) = (self.w[p], self.v[p]);
            for m in 0..=k {
                let z = pw[m].conj();
                r.0[m] += z * w;
                j.0[m] += z * (w * v);
                kk.0[m] += z * (w * v * v);
            }
        }
        (r, j, kk)
    }

    pub fn moments(&self) -> Moments {
        let (r, j, k) = self.moment_modes();
        Moments { rho: r.to_grid(self.nx), j: j.to_grid(self.nx), k: k.to_grid(self.nx) }
    }

    pub fn rho(&self) -> GridField1D {
        self.moment_modes().0.to_grid(self.nx)
    }

    pub fn u_grid(&self) -> GridField1D {
        self.u.to_grid(self.nx)
    }

    /// Source coefficients `ŝ_k = Σ_p w_p (V_p − ε u(X_p)) e^{−2πikX_p}` with `u` given by `u_modes`.
    fn source(&mut self, u_modes: &Modes, eps_u: f64) -> Modes {
        let k = self.mode_cutoff();
        let mut out = Modes::zeros(k);
        let pw = &mut self.powers;
        for p in 0..self.x.len() {
            fill_powers(self.x[p], pw);
            let s = self.w[p] * (self.v[p] - eps_u * u_modes.eval_powers(pw));
            for m in 0..=k {
                out.0[m] += pw[m].conj() * s;
            }
        }
        out
    }

    fn half_transport(&mut self, h: f64) -> f64 {
        let scale = h / self.epsilon;
        let mut vmax: f64 = 0.0;
        for (x, v) in self.x.iter_mut().zip(&self.v) {
            *x = (*x + scale * v).rem_euclid(1.0);
            vmax = vmax.max(v.abs());
        }
        vmax * scale * self.nx as f64
    }

    /// `V ← c(X) + e^{−dt/ε²}(V − c(X))` with `c` given by its modes.
    fn relax(&mut self, c: &Modes, dt: f64) {
        let decay = (-dt / (self.epsilon * self.epsilon)).exp();
        let len = c.effective_cutoff() + 1;
        let c = c.truncated(len);
        let mut pw = vec![Complex64::new(0.0, 0.0); len];
        for p in 0..self.x.len() {
            fill_powers(self.x[p], &mut pw);
            let target = c.eval_powers(&pw);
            self.v[p] = target + decay * (self.v[p] - target);
        }
    }

    fn check_cfl(&self, dt: f64) -> Result<()> {
        let vmax = self.v.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let cells = 0.5 * dt / self.epsilon * vmax * self.nx as f64;
        if cells > 0.5 * self.nx as f64 {
            return Err(Error::CflViolation { cells });
        }
        Ok(())
    }

    /// `c = m + εu` with `u` given by `u_modes`.
    fn forcing(&self, m: &Modes, u_modes: &Modes) -> Modes {
        m.combine(1.0, u_modes, self.epsilon)
    }

    fn transport_relax(&mut self, c: &Modes, dt: f64) -> Result<f64> {
        self.check_cfl(dt)?;
        let a = self.half_transport(0.5 * dt);
        self.relax(c, dt);
        let b = self.half_transport(0.5 * dt);
        Ok(a.max(b))
    }

    fn update_u(&mut self, source: &Modes, dt: f64) {
        for (k, (u, s)) in self.u.0.iter_mut().zip(&source.0).enumerate() {
            let l = heat_rate(k);
            *u = *u * (-l * dt).exp() + *s * phi1(l, dt);
        }
    }
}

/// One Strang step of length `dt` with the driver frozen in state `m`.
///
/// `next_jump` is the first driver jump after `state.t`; a step reaching past it is rejected.
pub fn kinetic_step(state: &mut KineticState, m: &Modes, dt: f64, next_jump: Option<f64>) -> Result<StepReport> {
    if !(dt > 0.0) {
        return Err(Error::Invalid(format!("time step must be positive, got {dt}")));
    }
    if let Some(j) = next_jump {
        let end = state.t + dt;
        if j > state.t && j < end && (end - j) > 1e-12 * end.max(1.0) {
            return Err(Error::JumpStraddled { start: state.t, end, jump: j });
        }
    }
    let mass_before = state.mass();
    let u_now = state.u.clone();
    let source = if state.freeze_u { None } else { Some(state.source(&u_now, state.epsilon)) };
    let c = state.forcing(m, &u_now);
    let shift = state.transport_relax(&c, dt)?;
    if let Some(s) = source {
        state.update_u(&s, dt);
    }
    state.t += dt;
    let mass_drift = (state.mass() - mass_before).abs();
    if mass_drift > MASS_DRIFT_LIMIT {
        return Err(Error::ResolutionInsufficient(format!("mass drift {mass_drift:.3e} in one step")));
    }
    Ok(StepReport { mass_drift, max_shift_cells: shift })
}

/// Recorded state at an output time.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub t: f64,
    pub rho: GridField1D,
    pub u: GridField1D,
    pub mass: f64,
    pub driver_state: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct KineticDiagnostics {
    pub steps: usize,
    pub jumps: usize,
    pub max_mass_error: f64,
    pub max_step_mass_drift: f64,
    /// Mass removed by clipping negative values (the particle scheme never produces any).
    pub clipped_mass: f64,
    /// Largest renormalization factor applied minus one (the particle scheme needs none).
    pub renormalization: f64,
    pub max_escaped_mass: f64,
    /// Largest `J̄(f_t) / (J̄(f₀) + C* + ε sup‖u‖∞)`.
    pub moment_bound_ratio: f64,
    pub moment_bound_violations: usize,
    pub max_u_sup: f64,
    /// Largest `‖u_t‖∞ / U(t)` against the a priori bound.
    pub u_bound_ratio: f64,
    pub u_bound_violations: usize,
}

/// A priori bound on `sup_{s≤t}‖u_s‖∞` from the mild form:
/// over sub-intervals of length `τ` with `2εK(τ) ≤ ½`, `K(τ) = τ + √(τ/π)`,
/// `U ← (U + K(τ)(J̄₀ + C*)) / (1 − 2εK(τ))`.
pub fn u_apriori_bound(t: f64, epsilon: f64, u0_sup: f64, jbar0: f64, c_star: f64) -> f64 {
    let kfun = |tau: f64| tau + (tau / PI).sqrt();
    // Largest τ with 2εK(τ) ≤ 1/2, by bisection on the increasing K.
    let target = 0.25 / epsilon;
    let (mut lo, mut hi) = (0.0, target.max(1.0));
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if kfun(mid) <= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let pieces = (t / lo).ceil().max(1.0) as usize;
    let tau = t / pieces as f64;
    let k = kfun(tau);
    let a = jbar0 + c_star;
    let mut u = u0_sup;
    for _ in 0..pieces {
        u = (u + k * a) / (1.0 - 2.0 * epsilon * k);
    }
    u
}

/// Output of [`simulate_kinetic`].
#[derive(Clone, Debug)]
pub struct KineticRun {
    pub snapshots: Vec<Snapshot>,
    pub diagnostics: KineticDiagnostics,
    /// Driver path in rescaled time.
    pub path: JumpTrajectory,
    pub final_state: KineticState,
}

/// Samples the driver from its stationary law and runs [`simulate_kinetic_path`].
pub fn simulate_kinetic(cfg: &KineticConfig, driver: &DriverSpec, rng: &mut Stream) -> Result<KineticRun> {
    let path = sample_rescaled_path(driver, cfg.epsilon, cfg.horizon, rng)?;
    simulate_kinetic_path(cfg, driver, &path)
}

/// Stationary start, unscaled jumps at rate 1 mapped to rescaled time by `ε²`.
pub fn sample_rescaled_path(driver: &DriverSpec, epsilon: f64, horizon: f64, rng: &mut Stream) -> Result<JumpTrajectory> {
    let start = driver.draw_stationary(rng);
    let eps2 = epsilon * epsilon;
    Ok(driver.sample_path(start, horizon / eps2, rng)?.rescaled(eps2))
}

/// Runs the kinetic system along a fixed driver path given in rescaled time.
pub fn simulate_kinetic_path(cfg: &KineticConfig, driver: &DriverSpec, path: &JumpTrajectory) -> Result<KineticRun> {
    let mut snapshots = Vec::with_capacity(cfg.output_times.len());
    let (diagnostics, final_state) = simulate_kinetic_observed(cfg, driver, path, |s| snapshots.push(s))?;
    Ok(KineticRun { snapshots, diagnostics, path: path.clone(), final_state })
}

/// As [`simulate_kinetic_path`], handing each snapshot to `observe` instead of storing it.
pub fn simulate_kinetic_observed(
    cfg: &KineticConfig,
    driver: &DriverSpec,
    path: &JumpTrajectory,
    mut observe: impl FnMut(Snapshot),
) -> Result<(KineticDiagnostics, KineticState)> {
    if path.horizon + 1e-12 < cfg.horizon {
        return Err(Error::Invalid("driver path is shorter than the horizon".into()));
    }
    let c_star = driver.c_star();
    let mut state = KineticState::initial(cfg, c_star, path.state_indices[0])?;
    let k = state.mode_cutoff();
    let forcing: Vec<Modes> = driver.series().iter().map(|s| Modes::from_series(s, k)).collect();
    let mut diag = KineticDiagnostics::default();
    let jbar0 = state.abs_first_moment();
    let u0_sup = cfg.u0.sup_norm();
    let mut u_sup_running = u0_sup;

    let mut stops: Vec<f64> = cfg.output_times.clone();
    stops.extend(path.jump_times.iter().copied().filter(|&t| t < cfg.horizon));
    stops.push(cfg.horizon);
    stops.sort_by(f64::total_cmp);
    stops.dedup_by(|a, b| (*a - *b).abs() <= 1e-14);

    let mut outputs = cfg.output_times.iter().peekable();
    let mut jump_iter = path.jump_times.iter().enumerate().peekable();

    let record = |state: &KineticState, diag: &mut KineticDiagnostics| {
        let rho = state.rho();
        let mass = rho.integral();
        diag.max_mass_error = diag.max_mass_error.max((mass - 1.0).abs());
        Snapshot { t: state.t, rho, u: state.u_grid(), mass, driver_state: state.driver_state }
    };

    for &stop in &stops {
        // Apply jumps occurring at the current time before stepping.
        while let Some(&(idx, &tj)) = jump_iter.peek() {
            if tj <= state.t + 1e-14 {
                state.driver_state = path.state_indices[idx + 1];
                diag.jumps += 1;
                jump_iter.next();
            } else {
                break;
            }
        }
        while let Some(&&to) = outputs.peek() {
            if to <= state.t + 1e-14 {
                observe(record(&state, &mut diag));
                outputs.next();
            } else {
                break;
            }
        }
        let span = stop - state.t;
        if span <= 1e-14 {
            continue;
        }
        let n = (span / cfg.dt_max).ceil().max(1.0) as usize;
        let h = span / n as f64;
        let next_jump = jump_iter.peek().map(|&(_, &t)| t);
        for i in 0..n {
            let dt = if i + 1 == n { stop - state.t } else { h };
            let current = state.driver_state;
            let report = kinetic_step(&mut state, &forcing[current], dt, next_jump)?;
            diag.steps += 1;
            diag.max_step_mass_drift = diag.max_step_mass_drift.max(report.mass_drift);
            let u_sup = if cfg.freeze_u { u0_sup } else { state.u_grid().max_abs() };
            u_sup_running = u_sup_running.max(u_sup);
            diag.max_u_sup = u_sup_running;
            let bound = jbar0 + c_star + state.epsilon * u_sup_running;
            let ratio = state.abs_first_moment() / bound;
            diag.moment_bound_ratio = diag.moment_bound_ratio.max(ratio);
            if ratio > MOMENT_SLACK {
                diag.moment_bound_violations += 1;
            }
            if !cfg.freeze_u {
                let ub = u_apriori_bound(state.t, state.epsilon, u0_sup, jbar0, c_star);
                let r = if ub > 0.0 { u_sup / ub } else if u_sup > 0.0 { f64::INFINITY } else { 0.0 };
                diag.u_bound_ratio = diag.u_bound_ratio.max(r);
                if r > 1.0 {
                    diag.u_bound_violations += 1;
                }
            }
            diag.max_escaped_mass = diag.max_escaped_mass.max(state.escaped_mass());
        }
        state.t = stop;
    }
    while let Some(&&to) = outputs.peek() {
        if to <= state.t + 1e-12 {
            observe(record(&state, &mut diag));
            outputs.next();
        } else {
            break;
        }
    }
    Ok((diag, state))
}

/// Fourier coefficients of the closed-form zero-forcing push-forward
/// `ρ_T(x) = ∫ f₀(x − εLv, v) dv`, `L = 1 − e^{−T/ε²}`, for a Gaussian-in-v `f₀`.
pub fn zero_forcing_modes(f0: &InitialDensity, epsilon: f64, t: f64, k: usize) -> Modes {
    let l = -(-t / (epsilon * epsilon)).exp_m1();
    let rho0 = Modes::from_series(&f0.rho0, k);
    Modes(
        rho0.0
            .iter()
            .enumerate()
            .map(|(m, c)| {
                let omega = TWO_PI * m as f64 * epsilon * l;
                let damp = (-0.5 * (omega * f0.v_std).powi(2)).exp();
                c * Complex64::from_polar(damp, -omega * f0.v_mean)
            })
            .collect(),
    )
}

/// Picard solution at `ε = 1`.
#[derive(Clone, Debug)]
pub struct PicardResult {
    pub times: Vec<f64>,
    /// `u` at every time node of the final iterate.
    pub u: Vec<Modes>,
    pub iterations: usize,
    /// `‖u^{n+1} − u^n‖_μ` per iteration.
    pub differences: Vec<f64>,
    pub mu: f64,
    pub final_state: KineticState,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PicardOptions {
    pub tolerance: f64,
    pub max_iters: usize,
    pub mu: f64,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self { tolerance: 1e-10, max_iters: 60, mu: 1.0 }
    }
}

/// Fixed-point iteration `f^{n+1} = f[m + u^n]`,
/// `u^{n+1}_t = S(t)u₀ + ∫₀^t S(t−s)[J(f^{n+1}_s) − ρ^{n+1}_s u^n_s] ds`, at `ε = 1`.
///
/// Characteristics use the forcing averaged over each time cell; the Duhamel integral is
/// the trapezoid rule in time on the same nodes. Convergence is measured in
/// `‖w‖_μ = sup_t e^{−μt}‖w_t‖∞`; `μ` doubles whenever the observed contraction factor
/// exceeds one half.
pub fn picard_solve(cfg: &KineticConfig, driver: &DriverSpec, path: &JumpTrajectory, opts: &PicardOptions) -> Result<PicardResult> {
    if cfg.epsilon != 1.0 {
        return Err(Error::Invalid("the Picard solver runs at epsilon = 1".into()));
    }
    let mut cfg = cfg.clone();
    cfg.freeze_u = false;
    let initial = KineticState::initial(&cfg, driver.c_star(), path.state_indices[0])?;
    let k = initial.mode_cutoff();
    let forcing: Vec<Modes> = driver.series().iter().map(|s| Modes::from_series(s, k)).collect();

    // Time nodes: uniform substeps between jumps.
    let mut stops: Vec<f64> = path.jump_times.iter().copied().filter(|&t| t < cfg.horizon).collect();
    stops.push(cfg.horizon);
    let mut times = vec![0.0];
    for &stop in &stops {
        let t0 = *times.last().unwrap();
        let span = stop - t0;
        if span <= 1e-14 {
            continue;
        }
        let n = (span / cfg.dt_max).ceil().max(1.0) as usize;
        for i in 1..=n {
            times.push(if i == n { stop } else { t0 + span * i as f64 / n as f64 });
        }
    }
    let u0 = Modes::from_series(&cfg.u0, k);
    let mut u_prev: Vec<Modes> = vec![u0.clone(); times.len()];
    let mut mu = opts.mu;
    let mut differences = Vec::new();
    let mut last_ratio_ok = true;
    for iter in 1..=opts.max_iters {
        let (u_next, state) = picard_sweep(&initial, &forcing, path, &times, &u_prev, &u0);
        let diff = |mu: f64| {
            times
                .iter()
                .zip(u_next.iter().zip(&u_prev))
                .map(|(t, (a, b))| (-mu * t).exp() * a.combine(1.0, b, -1.0).to_grid(cfg.nx).max_abs())
                .fold(0.0, f64::max)
        };
        let mut d = diff(mu);
        if let Some(&prev) = differences.last() {
            let prev: f64 = prev;
            if prev > 0.0 && d / prev > 0.5 && last_ratio_ok {
                mu *= 2.0;
                d = diff(mu);
                last_ratio_ok = false;
            } else {
                last_ratio_ok = true;
            }
        }
        differences.push(d);
        u_prev = u_next;
        if d < opts.tolerance {
            return Ok(PicardResult { times, u: u_prev, iterations: iter, differences, mu, final_state: state });
        }
    }
    Err(Error::NoConvergence { iters: opts.max_iters, last: *differences.last().unwrap_or(&f64::NAN) })
}

fn picard_sweep(
    initial: &KineticState,
    forcing: &[Modes],
    path: &JumpTrajectory,
    times: &[f64],
    u_prev: &[Modes],
    u0: &Modes,
) -> (Vec<Modes>, KineticState) {
    let mut state = initial.clone();
    let mut u_next = Vec::with_capacity(times.len());
    u_next.push(u0.clone());
    let mut src = state.source(&u_prev[0], 1.0);
    for i in 0..times.len() - 1 {
        let (t0, t1) = (times[i], times[i + 1]);
        let h = t1 - t0;
        let mid_state = path.state_at(0.5 * (t0 + t1));
        let u_mid = u_prev[i].combine(0.5, &u_prev[i + 1], 0.5);
        let c = forcing[mid_state].combine(1.0, &u_mid, 1.0);
        state.half_transport(0.5 * h);
        state.relax(&c, h);
        state.half_transport(0.5 * h);
        state.t = t1;
        let src_next = state.source(&u_prev[i + 1], 1.0);
        let prev = &u_next[i];
        let mut u = Modes::zeros(prev.cutoff());
        for k in 0..=prev.cutoff() {
            let decay = (-heat_rate(k) * h).exp();
            u.0[k] = prev.0[k] * decay + (src.0[k] * decay + src_next.0[k]) * (0.5 * h);
        }
        u_next.push(u);
        src = src_next;
    }
    (u_next, state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn base(eps: f64) -> KineticConfig {
        KineticConfig {
            epsilon: eps,
            nx: 32,
            nv: 32,
            vmax: None,
            dt_max: 1e-3,
            horizon: 0.1,
            output_times: vec![0.0, 0.05, 0.1],
            f0: InitialDensity { rho0: FourierSeries { mean: 1.0, cos: vec![0.3], sin: vec![0.2] }, v_mean: 0.0, v_std: 0.3 },
            u0: FourierSeries::zero(),
            freeze_u: false,
            modes: None,
        }
    }

    #[test]
    fn gaussian_grid_moments() {
        let g = PhaseGrid::new(8, 201, 10.0).unwrap();
        let f = GridField2D::from_fn(g, |_, v| (-0.5 * v * v).exp() / (2.0 * PI).sqrt());
        let m = moments(&f);
        for i in 0..8 {
            assert!((m.rho.values()[i] - 1.0).abs() < 1e-10);
            assert!(m.j.values()[i].abs() < 1e-12);
            assert!((m.k.values()[i] - 1.0).abs() < 1e-10);
        }
        let zero = moments(&GridField2D::zeros(g));
        assert_eq!(zero.rho.max_abs() + zero.j.max_abs() + zero.k.max_abs(), 0.0);
    }

    #[test]
    fn uniform_velocity_moments() {
        let g = PhaseGrid::new(16, 2001, 1.0).unwrap();
        let rho0 = |x: f64| 1.0 + 0.5 * (TWO_PI * x).cos();
        let f = GridField2D::from_fn(g, |x, _| 0.5 * rho0(x));
        let m = moments(&f);
        for i in 0..16 {
            let x = g.x(i);
            assert!(m.j.values()[i].abs() < 1e-12);
            assert!((m.k.values()[i] - rho0(x) / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn modes_round_trip() {
        let s = FourierSeries { mean: 0.4, cos: vec![0.1, 0.0, 0.3], sin: vec![-0.2, 0.5] };
        let m = Modes::from_series(&s, 5);
        let g = m.to_grid(32);
        assert!(g.max_abs_diff(&s.sample(32)).unwrap() < 1e-14);
        assert!((m.eval(0.37) - s.eval(0.37)).abs() < 1e-14);
        let back = Modes::from_grid(&g, 5);
        for (a, b) in back.0.iter().zip(&m.0) {
            assert!((a - b).norm() < 1e-15);
        }
    }

    #[test]
    fn initial_particles_carry_unit_mass_and_rho0() {
        let cfg = base(0.5);
        let st = KineticState::initial(&cfg, 0.0, 0).unwrap();
        assert!((st.mass() - 1.0).abs() < 1e-14);
        let rho = st.rho();
        assert!(rho.max_abs_diff(&cfg.f0.rho0.sample(32)).unwrap() < 1e-10);
    }

    #[test]
    fn relaxation_first_moment_is_exact() {
        let mut cfg = base(0.3);
        cfg.f0.rho0 = FourierSeries::constant(1.0);
        cfg.f0.v_mean = 0.4;
        let mut st = KineticState::initial(&cfg, 1.0, 0).unwrap();
        let c = 0.7;
        let dt = 0.013;
        let j0: f64 = st.w.iter().zip(&st.v).map(|(w, v)| w * v).sum();
        st.relax(&Modes::from_series(&FourierSeries::constant(c), 2), dt);
        let j1: f64 = st.w.iter().zip(&st.v).map(|(w, v)| w * v).sum();
        let e = (-dt / 0.09f64).exp();
        assert!((j1 - (e * j0 + (1.0 - e) * c)).abs() < 1e-13);
    }

    #[test]
    fn unforced_symmetric_start_stays_put() {
        let mut cfg = base(1.0);
        cfg.f0.v_std = 0.01;
        let driver = DriverSpec::zero(32).unwrap();
        let path = JumpTrajectory::constant(0, cfg.horizon);
        let run = simulate_kinetic_path(&cfg, &driver, &path).unwrap();
        let last = run.snapshots.last().unwrap();
        assert!(last.rho.max_abs_diff(&cfg.f0.rho0.sample(32)).unwrap() < 1e-3);
        assert!(run.diagnostics.max_mass_error < 1e-12);
    }

    #[test]
    fn jump_straddling_is_rejected() {
        let cfg = base(0.5);
        let mut st = KineticState::initial(&cfg, 0.0, 0).unwrap();
        let m = Modes::zeros(2);
        assert!(matches!(kinetic_step(&mut st, &m, 0.1, Some(0.05)), Err(Error::JumpStraddled { .. })));
        assert!(kinetic_step(&mut st, &m, 0.05, Some(0.05)).is_ok());
    }

    #[test]
    fn telegraph_run_conserves_mass_and_respects_bounds() {
        let mut cfg = base(0.3);
        cfg.horizon = 0.5;
        cfg.output_times = vec![0.0, 0.25, 0.5];
        let driver = DriverSpec::telegraph(0.5, 0.5, 32).unwrap();
        let mut rng = substream(11, 0, 0);
        let run = simulate_kinetic(&cfg, &driver, &mut rng).unwrap();
        assert_eq!(run.snapshots.len(), 3);
        let d = &run.diagnostics;
        assert!(d.max_mass_error < 1e-10, "{d:?}");
        assert_eq!(d.moment_bound_violations, 0);
        assert_eq!(d.u_bound_violations, 0);
        assert!(d.max_escaped_mass < 1e-8);
        assert!(d.jumps > 0);
    }

    #[test]
    fn zero_forcing_matches_push_forward() {
        let mut cfg = base(0.5);
        cfg.freeze_u = true;
        cfg.dt_max = 1e-3;
        cfg.horizon = 0.2;
        cfg.output_times = vec![0.2];
        let driver = DriverSpec::zero(32).unwrap();
        let path = JumpTrajectory::constant(0, cfg.horizon);
        let run = simulate_kinetic_path(&cfg, &driver, &path).unwrap();
        let exact = zero_forcing_modes(&cfg.f0, 0.5, 0.2, cfg.modes()).to_grid(32);
        assert!(run.snapshots[0].rho.max_abs_diff(&exact).unwrap() < 1e-4);
    }

    #[test]
    fn apriori_bound_grows_with_time() {
        let a = u_apriori_bound(0.1, 0.5, 0.0, 0.2, 0.5);
        let b = u_apriori_bound(1.0, 0.5, 0.0, 0.2, 0.5);
        assert!(a > 0.0 && b > a);
        assert_eq!(u_apriori_bound(0.0, 0.5, 0.3, 0.2, 0.5), 0.3);
    }

    #[test]
    fn picard_with_even_velocities_converges_at_once() {
        let mut cfg = base(1.0);
        cfg.f0.rho0 = FourierSeries::constant(1.0);
        cfg.horizon = 0.2;
        cfg.dt_max = 0.01;
        let driver = DriverSpec::zero(32).unwrap();
        let path = JumpTrajectory::constant(0, cfg.horizon);
        let res = picard_solve(&cfg, &driver, &path, &PicardOptions::default()).unwrap();
        assert_eq!(res.iterations, 1);
        assert!(res.u.iter().all(|m| m.to_grid(32).max_abs() < 1e-12));
    }
}
