//! Finite-state jump Markov driver: construction, semigroup, sampling, coupling,
//! stationary correlations and the Poisson solution `Ψ = M⁻¹I`.
//!
//! The driver jumps at the epochs of a rate-one Poisson clock. At each epoch the next
//! state is `T(n; U)`: the first index whose cumulative transition probability from `n`
//! exceeds a fresh uniform `U`. Its generator is `P − I`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{FourierSeries, GridField1D};
use crate::rng::Stream;

const ROW_SUM_TOL: f64 = 1e-10;
const CENTER_TOL: f64 = 1e-12;
const POISSON_TAIL: f64 = 1e-14;
/// Uniformization is applied directly up to this time; longer times use squaring.
const UNIFORMIZATION_SPAN: f64 = 32.0;

#[derive(Clone, Debug)]
pub struct DriverSpec {
    series: Vec<FourierSeries>,
    values: Vec<GridField1D>,
    derivs: Vec<GridField1D>,
    transition: DMatrix<f64>,
    stationary: Vec<f64>,
    centered: bool,
    reversible: bool,
}

impl DriverSpec {
    /// Validates `P`, computes `ν` and samples the states on an `n`-point grid.
    pub fn build(states: Vec<FourierSeries>, transition: DMatrix<f64>, n: usize) -> Result<Self> {
        let j = states.len();
        if j == 0 {
            return Err(Error::Invalid("driver needs at least one state".into()));
        }
        if transition.nrows() != j || transition.ncols() != j {
            return Err(Error::Invalid(format!(
                "transition matrix is {}x{} but there are {j} states",
                transition.nrows(),
                transition.ncols()
            )));
        }
        if n < 4 {
            return Err(Error::Invalid(format!("grid must have at least 4 points, got {n}")));
        }
        for (r, row) in transition.row_iter().enumerate() {
            if let Some(v) = row.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
                return Err(Error::NonStochasticMatrix(format!("entry {v} in row {r}")));
            }
            let s: f64 = row.sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::NonStochasticMatrix(format!("row {r} sums to {s}")));
            }
        }
        check_primitive(&transition)?;
        let stationary = stationary_law(&transition)?;
        let mut spec = Self {
            series: states,
            values: Vec::new(),
            derivs: Vec::new(),
            transition,
            stationary,
            centered: false,
            reversible: false,
        };
        spec.resample(n);
        spec.centered = spec.centering_defect() <= CENTER_TOL;
        Ok(spec)
    }

    /// Two-state symmetric preset with states `±c·sin(2πx)` and switch probability `p`.
    pub fn telegraph(c: f64, p: f64, n: usize) -> Result<Self> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::Invalid(format!("telegraph switch probability must lie in (0, 1], got {p}")));
        }
        let states = vec![FourierSeries::sine(1, c), FourierSeries::sine(1, -c)];
        let transition = DMatrix::from_row_slice(2, 2, &[1.0 - p, p, p, 1.0 - p]);
        Ok(Self::build(states, transition, n)?.with_reversible(true))
    }

    /// Single zero state: the unforced system.
    pub fn zero(n: usize) -> Result<Self> {
        Self::build(vec![FourierSeries::zero()], DMatrix::from_element(1, 1, 1.0), n)
    }

    /// Marks the stationary law as time-reversible (user assertion, not detected).
    pub fn with_reversible(mut self, reversible: bool) -> Self {
        self.reversible = reversible;
        self
    }

    fn resample(&mut self, n: usize) {
        self.values = self.series.iter().map(|s| s.sample(n)).collect();
        self.derivs = self.series.iter().map(|s| s.sample_derivative(n, 1)).collect();
    }

    /// Same driver sampled on a different grid.
    pub fn on_grid(&self, n: usize) -> Self {
        let mut out = self.clone();
        out.resample(n);
        out
    }

    /// `max_x |Σ_j ν_j n^j(x)|` on the grid.
    pub fn centering_defect(&self) -> f64 {
        let n = self.grid_len();
        (0..n)
            .map(|i| {
                self.stationary
                    .iter()
                    .zip(&self.values)
                    .map(|(w, f)| w * f.values()[i])
                    .sum::<f64>()
                    .abs()
            })
            .fold(0.0, f64::max)
    }

    /// Replaces each state by `n^j − Σ_l ν_l n^l`.
    pub fn centered(&self) -> Self {
        let mut mean = FourierSeries::zero();
        for (w, s) in self.stationary.iter().zip(&self.series) {
            mean = mean.combine(1.0, s, *w);
        }
        let mut out = self.clone();
        out.series = self.series.iter().map(|s| s.combine(1.0, &mean, -1.0)).collect();
        out.resample(self.grid_len());
        out.centered = true;
        out
    }

    pub fn num_states(&self) -> usize {
        self.series.len()
    }

    pub fn grid_len(&self) -> usize {
        self.values.first().map_or(0, GridField1D::len)
    }

    pub fn series(&self) -> &[FourierSeries] {
        &self.series
    }

    pub fn state(&self, j: usize) -> &GridField1D {
        &self.values[j]
    }

    pub fn state_derivative(&self, j: usize) -> &GridField1D {
        &self.derivs[j]
    }

    pub fn transition(&self) -> &DMatrix<f64> {
        &self.transition
    }

    pub fn stationary(&self) -> &[f64] {
        &self.stationary
    }

    pub fn is_centered(&self) -> bool {
        self.centered
    }

    pub fn is_reversible(&self) -> bool {
        self.reversible
    }

    pub fn jump_rate(&self) -> f64 {
        1.0
    }

    /// `C* = max_j ‖n^j‖∞`.
    pub fn c_star(&self) -> f64 {
        self.series.iter().map(FourierSeries::sup_norm).fold(0.0, f64::max)
    }

    /// `C₀ = max_j ‖n^j‖²∞`, the prefactor of the correlation decay bound.
    pub fn c0(&self) -> f64 {
        self.c_star().powi(2)
    }

    /// `‖n^j‖_E`: sup of values and first two derivatives.
    pub fn state_norm(&self, j: usize) -> f64 {
        self.series[j].sup_norm_c2()
    }

    /// `γ = 1 − max{|λ| : λ eigenvalue of P, λ ≠ 1}`; `1` for a single state.
    pub fn spectral_gap(&self) -> f64 {
        let j = self.num_states();
        if j == 1 {
            return 1.0;
        }
        let mut moduli: Vec<(f64, f64)> = self
            .transition
            .complex_eigenvalues()
            .iter()
            .map(|l| ((l.re - 1.0).hypot(l.im), l.norm()))
            .collect();
        // Drop the Perron eigenvalue (the one closest to 1).
        moduli.sort_by(|a, b| a.0.total_cmp(&b.0));
        let slem = moduli[1..].iter().map(|m| m.1).fold(0.0, f64::max);
        1.0 - slem
    }

    /// `e^{t(P−I)}` by uniformization with Poisson tail mass below `1e−14`.
    pub fn transition_semigroup(&self, t: f64) -> Result<DMatrix<f64>> {
        if !t.is_finite() || t < 0.0 {
            return Err(Error::NonFiniteTime(t));
        }
        let mut squarings = 0;
        let mut tau = t;
        while tau > UNIFORMIZATION_SPAN {
            tau *= 0.5;
            squarings += 1;
        }
        let mut s = uniformize(&self.transition, tau);
        for _ in 0..squarings {
            s = &s * &s;
        }
        Ok(s)
    }

    /// State matrix `N` with `N[j, i] = n^j(x_i)`.
    pub fn state_matrix(&self) -> DMatrix<f64> {
        stack_rows(&self.values)
    }

    pub fn derivative_matrix(&self) -> DMatrix<f64> {
        stack_rows(&self.derivs)
    }

    /// Draws an index from `ν` by inverse CDF.
    pub fn draw_stationary(&self, rng: &mut Stream) -> usize {
        inverse_cdf(self.stationary.iter().copied(), rng.random())
    }

    /// The jump function `T(n; U)`.
    pub fn jump(&self, from: usize, u: f64) -> usize {
        inverse_cdf(self.transition.row(from).iter().copied(), u)
    }

    /// Samples the driver on `[0, horizon]` in unscaled time.
    pub fn sample_path(&self, start: usize, horizon: f64, rng: &mut Stream) -> Result<JumpTrajectory> {
        check_horizon(horizon)?;
        if start >= self.num_states() {
            return Err(Error::Invalid(format!("start state {start} out of range")));
        }
        let mut jump_times = Vec::new();
        let mut states = vec![start];
        let mut t = 0.0;
        loop {
            let e: f64 = rng.sample(Exp1);
            t += e;
            if t > horizon {
                break;
            }
            let next = self.jump(*states.last().unwrap(), rng.random());
            jump_times.push(t);
            states.push(next);
        }
        Ok(JumpTrajectory { jump_times, state_indices: states, horizon })
    }

    /// Samples `(m*, m̃*)` on one shared clock: the companion starts from `ν`, both chains
    /// move with independent uniforms until they meet, then `m*` copies `m̃*`.
    pub fn coupled_sample(&self, start: usize, horizon: f64, rng: &mut Stream) -> Result<CoupledSample> {
        check_horizon(horizon)?;
        if start >= self.num_states() {
            return Err(Error::Invalid(format!("start state {start} out of range")));
        }
        let companion_start = self.draw_stationary(rng);
        let mut jump_times = Vec::new();
        let mut a = vec![start];
        let mut b = vec![companion_start];
        let mut meeting = (start == companion_start).then_some((0usize, 0.0));
        let mut t = 0.0;
        loop {
            let e: f64 = rng.sample(Exp1);
            t += e;
            if t > horizon {
                break;
            }
            let (xa, xb) = (*a.last().unwrap(), *b.last().unwrap());
            let nb = self.jump(xb, rng.random());
            let na = if meeting.is_some() { nb } else { self.jump(xa, rng.random()) };
            jump_times.push(t);
            a.push(na);
            b.push(nb);
            if meeting.is_none() && na == nb {
                meeting = Some((jump_times.len(), t));
            }
        }
        Ok(CoupledSample {
            primary: JumpTrajectory { jump_times: jump_times.clone(), state_indices: a, horizon },
            companion: JumpTrajectory { jump_times, state_indices: b, horizon },
            meeting_index: meeting.map(|m| m.0),
            meeting_time: meeting.map(|m| m.1),
        })
    }

    /// Stationary correlations `C(t, x, y) = Σ_j ν_j n^j(x) [e^{t(P−I)} N(·, y)]_j`.
    pub fn correlation_table(&self, times: &[f64]) -> Result<CorrelationTable> {
        let mut weights = vec![0.0; times.len()];
        for (i, w) in times.windows(2).enumerate() {
            weights[i] += 0.5 * (w[1] - w[0]);
            weights[i + 1] += 0.5 * (w[1] - w[0]);
        }
        self.correlation_table_weighted(times, &weights)
    }

    /// As [`DriverSpec::correlation_table`], attaching explicit quadrature weights to the nodes.
    pub fn correlation_table_weighted(&self, times: &[f64], weights: &[f64]) -> Result<CorrelationTable> {
        if weights.len() != times.len() {
            return Err(Error::Invalid("one quadrature weight per time node is required".into()));
        }
        if !self.centered {
            return Err(Error::NotCentered);
        }
        if times.first() != Some(&0.0) {
            return Err(Error::Invalid("correlation times must start at 0".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Invalid("correlation times must be strictly increasing".into()));
        }
        let n = self.state_matrix();
        let weighted = DMatrix::from_diagonal(&DVector::from_column_slice(&self.stationary)) * &n;
        let mut semigroups = Vec::with_capacity(times.len());
        let mut values = Vec::with_capacity(times.len());
        for &t in times {
            let s = self.transition_semigroup(t)?;
            values.push(weighted.transpose() * (&s * &n));
            semigroups.push(s);
        }
        Ok(CorrelationTable {
            times: times.to_vec(),
            weights: weights.to_vec(),
            values,
            semigroups,
            decay_rate: self.spectral_gap(),
            c0: self.c0(),
        })
    }

    /// Centered Poisson solution `Ψ` of `(P − I)Ψ = N`, `Σ_j ν_j Ψ^j = 0`.
    pub fn minv_i(&self) -> Result<PoissonSolution> {
        if !self.centered {
            return Err(Error::NotCentered);
        }
        let z = self.fundamental_matrix()?;
        // Ψ = −Z N with Z = (I − P + 1ν)⁻¹; exact on Fourier coefficients.
        let series: Vec<FourierSeries> = (0..self.num_states())
            .map(|j| {
                self.series
                    .iter()
                    .enumerate()
                    .fold(FourierSeries::zero(), |acc, (l, s)| acc.combine(1.0, s, -z[(j, l)]))
            })
            .collect();
        let n = self.grid_len();
        Ok(PoissonSolution {
            values: series.iter().map(|s| s.sample(n)).collect(),
            derivs: series.iter().map(|s| s.sample_derivative(n, 1)).collect(),
            series,
        })
    }

    /// `(I − P + 1ν)⁻¹`, failing when the matrix is numerically singular.
    pub fn fundamental_matrix(&self) -> Result<DMatrix<f64>> {
        let j = self.num_states();
        let nu = DMatrix::from_row_slice(1, j, &self.stationary);
        let a = DMatrix::identity(j, j) - &self.transition + DMatrix::from_element(j, 1, 1.0) * nu;
        let sv = a.clone().singular_values();
        let rcond = sv.min() / sv.max();
        if !(rcond > 1e-12) {
            return Err(Error::SingularBeyondKernel(rcond));
        }
        a.try_inverse().ok_or(Error::SingularBeyondKernel(rcond))
    }
}

fn check_horizon(h: f64) -> Result<()> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::NonFiniteTime(h));
    }
    Ok(())
}

fn stack_rows(fields: &[GridField1D]) -> DMatrix<f64> {
    let n = fields.first().map_or(0, GridField1D::len);
    DMatrix::from_fn(fields.len(), n, |j, i| fields[j].values()[i])
}

fn inverse_cdf(probs: impl Iterator<Item = f64>, u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (k, p) in probs.enumerate() {
        acc += p;
        if p > 0.0 {
            last = k;
        }
        if u < acc {
            return k;
        }
    }
    // Round-off left the cumulative sum below u; fall back to the last reachable state.
    last
}

/// Wielandt: a primitive `J×J` pattern has all entries of its `(J−1)²+1` power positive.
fn check_primitive(p: &DMatrix<f64>) -> Result<()> {
    let j = p.nrows();
    let pattern: Vec<Vec<bool>> = (0..j).map(|r| (0..j).map(|c| p[(r, c)] > 0.0).collect()).collect();
    let mul = |a: &Vec<Vec<bool>>, b: &Vec<Vec<bool>>| -> Vec<Vec<bool>> {
        (0..j).map(|r| (0..j).map(|c| (0..j).any(|k| a[r][k] && b[k][c])).collect()).collect()
    };
    let mut exp = (j - 1) * (j - 1) + 1;
    let mut base = pattern;
    let mut acc: Option<Vec<Vec<bool>>> = None;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = Some(match acc {
                None => base.clone(),
                Some(a) => mul(&a, &base),
            });
        }
        exp >>= 1;
        if exp > 0 {
            base = mul(&base, &base);
        }
    }
    let power = acc.expect("exponent is at least one");
    if let Some((r, c)) = (0..j).flat_map(|r| (0..j).map(move |c| (r, c))).find(|&(r, c)| !power[r][c]) {
        return Err(Error::ReducibleChain(format!(
            "entry ({r}, {c}) of P^{} is zero",
            (j - 1) * (j - 1) + 1
        )));
    }
    Ok(())
}

/// Solves `ν(P − I) = 0`, `Σν = 1` with the last balance equation replaced by normalization.
fn stationary_law(p: &DMatrix<f64>) -> Result<Vec<f64>> {
    let j = p.nrows();
    let mut a = p.transpose() - DMatrix::identity(j, j);
    let mut rhs = DVector::zeros(j);
    for c in 0..j {
        a[(j - 1, c)] = 1.0;
    }
    rhs[j - 1] = 1.0;
    let nu = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::ReducibleChain("stationary system is singular".into()))?;
    // Clean round-off below zero; the chain is primitive so every entry is positive.
    let nu: Vec<f64> = nu.iter().map(|v| v.max(0.0)).collect();
    let s: f64 = nu.iter().sum();
    Ok(nu.into_iter().map(|v| v / s).collect())
}

fn uniformize(p: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    let j = p.nrows();
    let mut power = DMatrix::identity(j, j);
    if t == 0.0 {
        return power;
    }
    let mut out = DMatrix::zeros(j, j);
    let ln_t = t.ln();
    let mut ln_w = -t;
    let mut k = 0usize;
    loop {
        out += &power * ln_w.exp();
        let next_ln_w = ln_w + ln_t - ((k + 1) as f64).ln();
        // Tail Σ_{i>k} w_i ≤ w_{k+1} / (1 − t/(k+2)) once k + 2 > t.
        if (k + 2) as f64 > t {
            let tail = next_ln_w.exp() / (1.0 - t / (k + 2) as f64);
            if tail < POISSON_TAIL {
                break;
            }
        }
        power = &power * p;
        ln_w = next_ln_w;
        k += 1;
    }
    out
}

/// Piecewise-constant càdlàg driver path in unscaled time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JumpTrajectory {
    pub jump_times: Vec<f64>,
    /// `state_indices[i]` is occupied on `[jump_times[i-1], jump_times[i])`; one longer than `jump_times`.
    pub state_indices: Vec<usize>,
    pub horizon: f64,
}

impl JumpTrajectory {
    pub fn constant(state: usize, horizon: f64) -> Self {
        Self { jump_times: Vec::new(), state_indices: vec![state], horizon }
    }

    pub fn state_at(&self, t: f64) -> usize {
        let k = self.jump_times.partition_point(|&s| s <= t);
        self.state_indices[k]
    }

    pub fn num_jumps(&self) -> usize {
        self.jump_times.len()
    }

    /// Constant segments `(start, end, state)` covering `[0, horizon]`.
    pub fn segments(&self) -> impl Iterator<Item = (f64, f64, usize)> + '_ {
        let n = self.jump_times.len();
        (0..=n).map(move |i| {
            let s = if i == 0 { 0.0 } else { self.jump_times[i - 1] };
            let e = if i == n { self.horizon } else { self.jump_times[i] };
            (s, e, self.state_indices[i])
        })
    }

    /// Same path with time multiplied by `scale` (e.g. `ε²` to reach rescaled time).
    pub fn rescaled(&self, scale: f64) -> Self {
        Self {
            jump_times: self.jump_times.iter().map(|t| t * scale).collect(),
            state_indices: self.state_indices.clone(),
            horizon: self.horizon * scale,
        }
    }

    /// Time spent in each state on `[0, horizon]`, divided by the horizon.
    pub fn occupation(&self, num_states: usize) -> Vec<f64> {
        let mut occ = vec![0.0; num_states];
        for (s, e, j) in self.segments() {
            occ[j] += e - s;
        }
        occ.iter_mut().for_each(|o| *o /= self.horizon);
        occ
    }
}

#[derive(Clone, Debug)]
pub struct CoupledSample {
    pub primary: JumpTrajectory,
    pub companion: JumpTrajectory,
    /// Number of clock epochs until the chains first agree (`0` if they start together).
    pub meeting_index: Option<usize>,
    pub meeting_time: Option<f64>,
}

/// Stationary two-point correlations on a time lattice.
#[derive(Clone, Debug)]
pub struct CorrelationTable {
    pub times: Vec<f64>,
    /// Quadrature weights attached to `times` (trapezoid unless built by the coefficient pipeline).
    pub weights: Vec<f64>,
    /// `values[i][(x, y)] = C(times[i], x, y)`.
    pub values: Vec<DMatrix<f64>>,
    /// `e^{t_i(P−I)}`, kept so derivative-weighted correlations reuse the same semigroups.
    pub semigroups: Vec<DMatrix<f64>>,
    pub decay_rate: f64,
    pub c0: f64,
}

impl CorrelationTable {
    /// Largest ratio `|C(t,x,y)| / (C₀ e^{−γt})` over the table.
    pub fn decay_bound_ratio(&self) -> f64 {
        self.times
            .iter()
            .zip(&self.values)
            .map(|(t, c)| {
                let bound = self.c0 * (-self.decay_rate * t).exp();
                if bound == 0.0 {
                    if c.amax() == 0.0 { 0.0 } else { f64::INFINITY }
                } else {
                    c.amax() / bound
                }
            })
            .fold(0.0, f64::max)
    }
}

/// `Ψ^j = M⁻¹I(n^j)` for every state, with exact derivatives.
#[derive(Clone, Debug)]
pub struct PoissonSolution {
    pub series: Vec<FourierSeries>,
    pub values: Vec<GridField1D>,
    pub derivs: Vec<GridField1D>,
}

impl PoissonSolution {
    /// `max_{j,x} |Σ_l (P − I)_{jl} Ψ^l(x) − n^j(x)|`.
    pub fn residual(&self, driver: &DriverSpec) -> f64 {
        let p = driver.transition();
        let j = driver.num_states();
        let n = driver.grid_len();
        let mut worst: f64 = 0.0;
        for r in 0..j {
            for i in 0..n {
                let lhs: f64 = (0..j).map(|l| p[(r, l)] * self.values[l].values()[i]).sum::<f64>()
                    - self.values[r].values()[i];
                worst = worst.max((lhs - driver.state(r).values()[i]).abs());
            }
        }
        worst
    }
}

/// Driver definition file (TOML). Either a `[telegraph]` table or explicit
/// `transition` rows plus `[[states]]` Fourier coefficients.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriverFile {
    #[serde(default)]
    pub telegraph: Option<TelegraphPreset>,
    #[serde(default)]
    pub transition: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub states: Option<Vec<FourierSeries>>,
    #[serde(default)]
    pub reversible: bool,
    /// Center the states under `ν` after construction (default true).
    #[serde(default = "default_true")]
    pub center: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TelegraphPreset {
    pub c: f64,
    pub p: f64,
}

impl DriverFile {
    pub fn telegraph(c: f64, p: f64) -> Self {
        Self { telegraph: Some(TelegraphPreset { c, p }), center: true, ..Self::default() }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("driver file: {e}")))
    }

    pub fn build(&self, n: usize) -> Result<DriverSpec> {
        let spec = match (&self.telegraph, &self.transition, &self.states) {
            (Some(t), None, None) => DriverSpec::telegraph(t.c, t.p, n)?,
            (None, Some(rows), Some(states)) => {
                let j = rows.len();
                if rows.iter().any(|r| r.len() != j) {
                    return Err(Error::Config("transition matrix must be square".into()));
                }
                let flat: Vec<f64> = rows.iter().flatten().copied().collect();
                DriverSpec::build(states.clone(), DMatrix::from_row_slice(j, j, &flat), n)?
                    .with_reversible(self.reversible)
            }
            _ => {
                return Err(Error::Config(
                    "driver file needs either [telegraph] or both `transition` and [[states]]".into(),
                ))
            }
        };
        Ok(if self.center && !spec.is_centered() { spec.centered() } else { spec })
    }
}
