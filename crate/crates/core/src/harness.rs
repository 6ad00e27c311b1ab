//! Run configuration, Monte Carlo ensembles, law summaries and the kinetic-vs-SPDE comparison.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::auxiliary::PathPoint;
use crate::coefficients::{CoefficientOptions, Coefficients};
use crate::driver::{DriverFile, DriverSpec};
use crate::error::{Error, Result};
use crate::field::{FourierSeries, GridField1D};
use crate::kinetic::{simulate_kinetic, InitialDensity, KineticConfig, KineticDiagnostics};
use crate::rng::{stream_id, substream, LANE_DRIVER, LANE_NOISE};
use crate::spde::{simulate_spde, SpdeConfig, SpdeDiagnostics, SpdeScheme};
use crate::stats::Moments4;

/// Environment variable overriding the worker count.
pub const WORKERS_ENV: &str = "KINSPRAY_WORKERS";

/// Key reference printed by `--help` and on configuration errors.
pub const CONFIG_HELP: &str = r#"Run configuration (TOML). Keys marked * are required.

  horizon*            final time T
  output_times        extra recording times in [0, T] (T is always recorded)
  u0                  initial u as a Fourier series {mean, cos = [..], sin = [..]}

  [driver]*           either telegraph = { c, p } or transition = [[..], ..] with [[driver.states]]
                      Fourier series; optional reversible (false), center (true)
  [grid]              nx (64), nv (64), vmax (default 2(C* + |u0| + 6 v_std + |v_mean|))
  [initial]*          rho0* Fourier series (non-negative), v_mean (0), v_std*
  [kinetic]           epsilons ([0.4, 0.2, 0.1]), dt_factor (0.1; dt = dt_factor * eps^2), modes (nx/3)
  [spde]              dt (2.5e-4), scheme ("flow" | "ito-em" | "strat-midpoint"), seeds (4 nx), modes (nx/3)
  [coefficients]      energy_tol (1e-10), quad_order (16), quad_tol (1e-13), max_panels (4096)
  [[observables]]     id and xi (Fourier series); default sin1 = sin 2pi x, cos1 = cos 2pi x, cos2 = cos 4pi x

Environment: KINSPRAY_WORKERS sets the worker count."#;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Model {
    Kinetic,
    Spde,
}

impl std::fmt::Display for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Kinetic => "kinetic",
            Self::Spde => "spde",
        })
    }
}

impl std::str::FromStr for Model {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kinetic" => Ok(Self::Kinetic),
            "spde" => Ok(Self::Spde),
            _ => Err(Error::Config(format!("unknown model {s:?} (expected kinetic or spde)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub nx: usize,
    pub nv: usize,
    pub vmax: Option<f64>,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { nx: 64, nv: 64, vmax: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KineticSection {
    pub epsilons: Vec<f64>,
    pub dt_factor: f64,
    pub modes: Option<usize>,
}

impl Default for KineticSection {
    fn default() -> Self {
        Self { epsilons: vec![0.4, 0.2, 0.1], dt_factor: 0.1, modes: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpdeSection {
    pub dt: f64,
    pub scheme: SpdeScheme,
    pub seeds: Option<usize>,
    pub modes: Option<usize>,
}

impl Default for SpdeSection {
    fn default() -> Self {
        Self { dt: 2.5e-4, scheme: SpdeScheme::Flow, seeds: None, modes: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoefficientSection {
    pub energy_tol: f64,
    pub quad_order: usize,
    pub quad_tol: f64,
    pub max_panels: usize,
}

impl Default for CoefficientSection {
    fn default() -> Self {
        let d = CoefficientOptions::default();
        Self { energy_tol: d.energy_tol, quad_order: d.quad_order, quad_tol: d.quad_tol, max_panels: d.max_panels }
    }
}

/// Named test function `ξ` for the observable `⟨ρ_T, ξ⟩`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Observable {
    pub id: String,
    pub xi: FourierSeries,
}

pub fn default_observables() -> Vec<Observable> {
    vec![
        Observable { id: "sin1".into(), xi: FourierSeries::sine(1, 1.0) },
        Observable { id: "cos1".into(), xi: FourierSeries::cosine(1, 1.0) },
        Observable { id: "cos2".into(), xi: FourierSeries::cosine(2, 1.0) },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub driver: DriverFile,
    #[serde(default)]
    pub grid: GridSection,
    pub horizon: f64,
    #[serde(default)]
    pub output_times: Vec<f64>,
    pub initial: InitialDensity,
    #[serde(default)]
    pub u0: FourierSeries,
    #[serde(default)]
    pub kinetic: KineticSection,
    #[serde(default)]
    pub spde: SpdeSection,
    #[serde(default)]
    pub coefficients: CoefficientSection,
    #[serde(default = "default_observables")]
    pub observables: Vec<Observable>,
}

impl RunConfig {
    /// Telegraph driver `c = 0.5, p = 0.5`, `T = 0.5`, `ρ₀ = 1 + 0.3 cos 2πx + 0.2 sin 2πx`.
    pub fn telegraph_preset() -> Self {
        Self {
            driver: DriverFile::telegraph(0.5, 0.5),
            grid: GridSection::default(),
            horizon: 0.5,
            output_times: Vec::new(),
            initial: InitialDensity {
                rho0: FourierSeries { mean: 1.0, cos: vec![0.3], sin: vec![0.2] },
                v_mean: 0.0,
                v_std: 0.3,
            },
            u0: FourierSeries::zero(),
            kinetic: KineticSection::default(),
            spde: SpdeSection::default(),
            coefficients: CoefficientSection::default(),
            observables: default_observables(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.observables.is_empty() {
            return Err(Error::Config("at least one observable is required".into()));
        }
        let mut ids: Vec<&str> = self.observables.iter().map(|o| o.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("observable ids must be unique".into()));
        }
        if self.kinetic.epsilons.is_empty() || !(self.kinetic.dt_factor > 0.0) {
            return Err(Error::Config("kinetic.epsilons must be non-empty and dt_factor positive".into()));
        }
        for &eps in &self.kinetic.epsilons {
            self.kinetic_config(eps).validate()?;
        }
        self.spde_config().validate()
    }

    /// Recording times: configured outputs plus the horizon.
    pub fn recording_times(&self) -> Vec<f64> {
        let mut t: Vec<f64> = self.output_times.iter().copied().filter(|&t| t < self.horizon).collect();
        t.sort_by(f64::total_cmp);
        t.dedup();
        t.push(self.horizon);
        t
    }

    pub fn kinetic_config(&self, epsilon: f64) -> KineticConfig {
        KineticConfig {
            epsilon,
            nx: self.grid.nx,
            nv: self.grid.nv,
            vmax: self.grid.vmax,
            dt_max: self.kinetic.dt_factor * epsilon * epsilon,
            horizon: self.horizon,
            output_times: self.recording_times(),
            f0: self.initial.clone(),
            u0: self.u0.clone(),
            freeze_u: false,
            modes: self.kinetic.modes,
        }
    }

    pub fn spde_config(&self) -> SpdeConfig {
        SpdeConfig {
            nx: self.grid.nx,
            dt: self.spde.dt,
            horizon: self.horizon,
            output_times: self.recording_times(),
            rho0: self.initial.rho0.clone(),
            u0: self.u0.clone(),
            scheme: self.spde.scheme,
            seeds: self.spde.seeds,
            modes: self.spde.modes,
        }
    }

    pub fn coefficient_options(&self) -> CoefficientOptions {
        let c = self.coefficients;
        CoefficientOptions { energy_tol: c.energy_tol, quad_order: c.quad_order, quad_tol: c.quad_tol, max_panels: c.max_panels }
    }

    pub fn build_driver(&self) -> Result<DriverSpec> {
        self.driver.build(self.grid.nx)
    }

    pub fn coefficients(&self) -> Result<Coefficients> {
        Coefficients::compute(&self.build_driver()?, &self.coefficient_options())
    }

    pub fn observable_ids(&self) -> Vec<String> {
        self.observables.iter().map(|o| o.id.clone()).collect()
    }

    pub fn observable_fields(&self) -> Vec<GridField1D> {
        self.observables.iter().map(|o| o.xi.sample(self.grid.nx)).collect()
    }

    /// SHA-256 of the canonical JSON form (object keys sorted), so key order in the file is irrelevant.
    pub fn digest(&self) -> String {
        let value = serde_json::to_value(self).expect("run config serializes");
        let canonical = serde_json::to_string(&value).expect("json value serializes");
        let hash = Sha256::digest(canonical.as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Ensemble execution options.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EnsembleOptions {
    /// Worker count; falls back to `KINSPRAY_WORKERS`, then to rayon's default.
    pub workers: Option<usize>,
    /// Give every run the substreams of run 0 (degenerate test mode).
    pub identical_streams: bool,
}

impl EnsembleOptions {
    pub fn resolved_workers(&self) -> Option<usize> {
        self.workers.or_else(|| std::env::var(WORKERS_ENV).ok().and_then(|v| v.parse().ok())).filter(|&n| n > 0)
    }
}

/// Everything recorded by one run.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub run: u64,
    pub path: Vec<PathPoint>,
    pub max_mass_error: f64,
    pub min_rho: f64,
    pub kinetic: Option<KineticDiagnostics>,
    pub spde: Option<SpdeDiagnostics>,
}

fn lane(model: Model) -> u8 {
    match model {
        Model::Kinetic => LANE_DRIVER,
        Model::Spde => LANE_NOISE,
    }
}

fn run_one(
    cfg: &RunConfig,
    model: Model,
    epsilon: Option<f64>,
    driver: &DriverSpec,
    coeffs: Option<&Coefficients>,
    master: u64,
    run: u64,
) -> Result<RunOutput> {
    let mut rng = substream(master, run, lane(model));
    let (path, max_mass_error, kinetic, spde) = match model {
        Model::Kinetic => {
            let eps = epsilon.ok_or_else(|| Error::Invalid("kinetic runs need an epsilon".into()))?;
            let out = simulate_kinetic(&cfg.kinetic_config(eps), driver, &mut rng)?;
            let pts: Vec<PathPoint> = out.snapshots.into_iter().map(|s| PathPoint { t: s.t, rho: s.rho, u: s.u }).collect();
            (pts, out.diagnostics.max_mass_error, Some(out.diagnostics), None)
        }
        Model::Spde => {
            let coeffs = coeffs.ok_or_else(|| Error::Invalid("spde runs need coefficients".into()))?;
            let out = simulate_spde(&cfg.spde_config(), coeffs, &mut rng)?;
            let m0 = cfg.initial.rho0.mean;
            let err = out.snapshots.iter().map(|s| (s.mass - m0).abs()).fold(0.0, f64::max);
            let pts: Vec<PathPoint> = out.snapshots.into_iter().map(|s| PathPoint { t: s.t, rho: s.rho, u: s.u }).collect();
            (pts, err, None, Some(out.diagnostics))
        }
    };
    let min_rho = path.iter().map(|p| p.rho.min()).fold(f64::INFINITY, f64::min);
    Ok(RunOutput { run, path, max_mass_error, min_rho, kinetic, spde })
}

/// Runs `runs` independent simulations and maps each through `f`, results in run order.
///
/// Run `r` draws from `substream(master, r, lane)` with lane 0 for kinetic driver paths and lane 1
/// for SPDE noise, so results do not depend on the worker count or scheduling.
pub fn map_runs<T: Send>(
    cfg: &RunConfig,
    model: Model,
    epsilon: Option<f64>,
    runs: u64,
    master: u64,
    opts: &EnsembleOptions,
    f: impl Fn(RunOutput) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let driver = cfg.build_driver()?;
    let coeffs = match model {
        Model::Spde => Some(Coefficients::compute(&driver, &cfg.coefficient_options())?),
        Model::Kinetic => None,
    };
    let body = || {
        (0..runs)
            .into_par_iter()
            .map(|r| {
                let seed_run = if opts.identical_streams { 0 } else { r };
                run_one(cfg, model, epsilon, &driver, coeffs.as_ref(), master, seed_run)
                    .map(|mut o| {
                        o.run = r;
                        o
                    })
                    .and_then(&f)
                    .map_err(|e| Error::RunFailed {
                        run: r as usize,
                        stream: stream_id(seed_run, lane(model)),
                        source: Box::new(e),
                    })
            })
            .collect::<Result<Vec<T>>>()
    };
    match opts.resolved_workers() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Invalid(format!("worker pool: {e}")))?
            .install(body),
        None => body(),
    }
}

/// Per-run observable values at the horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub model: Model,
    pub epsilon: Option<f64>,
    pub run: u64,
    pub stream: u64,
    pub values: Vec<f64>,
    pub max_mass_error: f64,
    pub min_rho: f64,
}

pub fn observe(path: &[PathPoint], fields: &[GridField1D]) -> Result<Vec<f64>> {
    let last = path.last().ok_or_else(|| Error::Invalid("run recorded no states".into()))?;
    fields.iter().map(|xi| last.rho.inner(xi)).collect()
}

/// Statistics of one observable in one ensemble.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservableStats {
    pub mean: f64,
    pub variance: f64,
    pub std_error: f64,
    pub variance_std_error: f64,
    pub moments: Moments4,
}

impl ObservableStats {
    pub fn from_moments(m: Moments4) -> Self {
        Self {
            mean: m.mean,
            variance: m.variance(),
            std_error: m.std_error(),
            variance_std_error: m.variance_std_error(),
            moments: m,
        }
    }
}

/// One ensemble: a model at one `ε` (kinetic) or the limit (spde).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleEntry {
    pub model: Model,
    pub epsilon: Option<f64>,
    pub runs: u64,
    pub stats: Vec<ObservableStats>,
}

impl EnsembleEntry {
    /// Pure fold of per-run values in run order.
    pub fn aggregate(model: Model, epsilon: Option<f64>, records: &[Vec<f64>]) -> Self {
        let k = records.first().map_or(0, Vec::len);
        let moments = records.iter().fold(vec![Moments4::default(); k], |mut acc, values| {
            for (m, &v) in acc.iter_mut().zip(values) {
                *m = m.merge(&Moments4::from_value(v));
            }
            acc
        });
        Self {
            model,
            epsilon,
            runs: records.len() as u64,
            stats: moments.into_iter().map(ObservableStats::from_moments).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub observables: Vec<String>,
    pub horizon: f64,
    pub master_seed: u64,
    pub config_digest: String,
    pub entries: Vec<EnsembleEntry>,
}

impl EnsembleSummary {
    pub fn new(cfg: &RunConfig, master_seed: u64, entries: Vec<EnsembleEntry>) -> Self {
        Self {
            observables: cfg.observable_ids(),
            horizon: cfg.horizon,
            master_seed,
            config_digest: cfg.digest(),
            entries,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn entries_of(&self, model: Model) -> impl Iterator<Item = &EnsembleEntry> {
        self.entries.iter().filter(move |e| e.model == model)
    }
}

/// Ensemble results with the per-run table.
#[derive(Clone, Debug)]
pub struct EnsembleResult {
    pub summary: EnsembleSummary,
    pub records: Vec<RunRecord>,
}

/// Runs the model (every configured `ε` for kinetic) and summarizes `⟨ρ_T, ξ_j⟩`.
pub fn run_ensemble(cfg: &RunConfig, model: Model, runs: u64, master: u64, opts: &EnsembleOptions) -> Result<EnsembleResult> {
    if runs < 2 {
        return Err(Error::Invalid(format!("an ensemble needs at least 2 runs, got {runs}")));
    }
    cfg.validate()?;
    let fields = cfg.observable_fields();
    let epsilons: Vec<Option<f64>> = match model {
        Model::Kinetic => cfg.kinetic.epsilons.iter().map(|&e| Some(e)).collect(),
        Model::Spde => vec![None],
    };
    let mut entries = Vec::new();
    let mut records = Vec::new();
    for eps in epsilons {
        let recs = map_runs(cfg, model, eps, runs, master, opts, |out| {
            let seed_run = if opts.identical_streams { 0 } else { out.run };
            Ok(RunRecord {
                model,
                epsilon: eps,
                run: out.run,
                stream: stream_id(seed_run, lane(model)),
                values: observe(&out.path, &fields)?,
                max_mass_error: out.max_mass_error,
                min_rho: out.min_rho,
            })
        })?;
        let values: Vec<Vec<f64>> = recs.iter().map(|r| r.values.clone()).collect();
        entries.push(EnsembleEntry::aggregate(model, eps, &values));
        records.extend(recs);
    }
    Ok(EnsembleResult { summary: EnsembleSummary::new(cfg, master, entries), records })
}

/// Per-run CSV: `model,epsilon,run,stream,<observable ids>,max_mass_error,min_rho`.
pub fn write_records_csv(path: &Path, ids: &[String], records: &[RunRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["model".to_string(), "epsilon".into(), "run".into(), "stream".into()];
    header.extend(ids.iter().cloned());
    header.extend(["max_mass_error".to_string(), "min_rho".into()]);
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.model.to_string(),
            r.epsilon.map_or(String::new(), |e| e.to_string()),
            r.run.to_string(),
            r.stream.to_string(),
        ];
        row.extend(r.values.iter().map(|v| format!("{v:.17e}")));
        row.push(format!("{:.17e}", r.max_mass_error));
        row.push(format!("{:.17e}", r.min_rho));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Trajectory CSV shared by kinetic and SPDE runs: `t,i,x,rho,u`.
pub fn write_path_csv(path: &Path, points: &[PathPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "i", "x", "rho", "u"])?;
    for p in points {
        let n = p.rho.len();
        for i in 0..n {
            w.write_record(&[
                format!("{}", p.t),
                i.to_string(),
                format!("{}", crate::field::grid_point(n, i)),
                format!("{:.17e}", p.rho.values()[i]),
                format!("{:.17e}", p.u.values()[i]),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Verdict thresholds for [`compare_laws`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Maximum `|z|` at the smallest `ε`.
    pub z_max: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { z_max: 3.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Statistic {
    Mean,
    Variance,
}

/// Discrepancy at one `ε`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discrepancy {
    pub epsilon: Option<f64>,
    pub difference: f64,
    pub pooled_std_error: f64,
    pub z: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatisticComparison {
    pub observable: String,
    pub statistic: Statistic,
    /// Ordered by decreasing `ε`.
    pub discrepancies: Vec<Discrepancy>,
    /// Least-squares slope of `|difference|` against `ε`; `None` with fewer than two `ε`.
    pub trend_slope: Option<f64>,
    pub within_tolerance: bool,
    pub trend_decreasing: bool,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub tolerances: Tolerances,
    pub comparisons: Vec<StatisticComparison>,
    pub pass: bool,
}

impl ComparisonReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn ls_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / sxx)
}

/// Compares each kinetic entry against the reference (first spde entry) per observable, in mean and variance.
///
/// A statistic passes when `|z|` at the smallest `ε` is within `z_max` and the discrepancy trend decreases
/// with `ε` (positive least-squares slope of `|difference|` against `ε`). A trend of pure noise, every `|z|`
/// within `z_max`, also counts as decreasing. `z_max ≤ 0` always fails.
pub fn compare_laws(kinetic: &EnsembleSummary, reference: &EnsembleSummary, tol: &Tolerances) -> Result<ComparisonReport> {
    if kinetic.observables != reference.observables {
        return Err(Error::ObservableMismatch(format!("{:?} vs {:?}", kinetic.observables, reference.observables)));
    }
    if (kinetic.horizon - reference.horizon).abs() > 1e-12 {
        return Err(Error::ObservableMismatch(format!("horizons {} vs {}", kinetic.horizon, reference.horizon)));
    }
    let reference_entry = reference
        .entries_of(Model::Spde)
        .next()
        .or_else(|| reference.entries.first())
        .ok_or_else(|| Error::ObservableMismatch("reference summary has no entries".into()))?;
    let mut candidates: Vec<&EnsembleEntry> = kinetic.entries.iter().filter(|e| e.model == Model::Kinetic).collect();
    if candidates.is_empty() {
        candidates = kinetic.entries.iter().collect();
    }
    candidates.sort_by(|a, b| b.epsilon.unwrap_or(0.0).total_cmp(&a.epsilon.unwrap_or(0.0)));
    if candidates.is_empty() {
        return Err(Error::ObservableMismatch("no entries to compare".into()));
    }
    let mut comparisons = Vec::new();
    for (j, id) in kinetic.observables.iter().enumerate() {
        for statistic in [Statistic::Mean, Statistic::Variance] {
            let pick = |s: &ObservableStats| match statistic {
                Statistic::Mean => (s.mean, s.std_error),
                Statistic::Variance => (s.variance, s.variance_std_error),
            };
            let (rv, rse) = pick(&reference_entry.stats[j]);
            let discrepancies: Vec<Discrepancy> = candidates
                .iter()
                .map(|e| {
                    let (v, se) = pick(&e.stats[j]);
                    let pooled = (se * se + rse * rse).sqrt();
                    let d = v - rv;
                    let z = if pooled > 0.0 {
                        d / pooled
                    } else if d == 0.0 {
                        0.0
                    } else {
                        f64::INFINITY.copysign(d)
                    };
                    Discrepancy { epsilon: e.epsilon, difference: d, pooled_std_error: pooled, z }
                })
                .collect();
            let eps: Vec<f64> = discrepancies.iter().map(|d| d.epsilon.unwrap_or(0.0)).collect();
            let abs: Vec<f64> = discrepancies.iter().map(|d| d.difference.abs()).collect();
            let trend_slope = ls_slope(&eps, &abs);
            let last = discrepancies.last().expect("non-empty");
            let within_tolerance = tol.z_max > 0.0 && last.z.abs() <= tol.z_max;
            let all_within = tol.z_max > 0.0 && discrepancies.iter().all(|d| d.z.abs() <= tol.z_max);
            let trend_decreasing = trend_slope.is_some_and(|s| s > 0.0) || all_within;
            comparisons.push(StatisticComparison {
                observable: id.clone(),
                statistic,
                discrepancies,
                trend_slope,
                within_tolerance,
                trend_decreasing,
                pass: within_tolerance && trend_decreasing,
            });
        }
    }
    let pass = tol.z_max > 0.0 && comparisons.iter().all(|c| c.pass);
    Ok(ComparisonReport { tolerances: *tol, comparisons, pass })
}

/// Driver summary printed by `driver-info`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DriverInfo {
    pub states: usize,
    pub stationary: Vec<f64>,
    pub spectral_gap: f64,
    pub jump_rate: f64,
    pub c_star: f64,
    pub centered: bool,
    pub reversible: bool,
    /// `max |P Ψ − Ψ − n|` on the grid.
    pub poisson_residual: f64,
    /// For a telegraph driver, `max |Ψ(n) + n/(2p)|`.
    pub telegraph_closed_form_error: Option<f64>,
}

impl DriverInfo {
    /// Residual tolerance of the `M⁻¹I` check.
    pub const TOL: f64 = 1e-10;

    pub fn pass(&self) -> bool {
        self.poisson_residual <= Self::TOL && self.telegraph_closed_form_error.is_none_or(|e| e <= Self::TOL)
    }
}

pub fn driver_info(file: &DriverFile, n: usize) -> Result<DriverInfo> {
    let d = file.build(n)?;
    let psi = d.minv_i()?;
    let telegraph_closed_form_error = file.telegraph.map(|t| {
        (0..d.num_states())
            .map(|j| psi.values[j].add(&d.state(j).scale(1.0 / (2.0 * t.p))).map_or(f64::INFINITY, |e| e.max_abs()))
            .fold(0.0, f64::max)
    });
    Ok(DriverInfo {
        states: d.num_states(),
        stationary: d.stationary().to_vec(),
        spectral_gap: d.spectral_gap(),
        jump_rate: d.jump_rate(),
        c_star: d.c_star(),
        centered: d.is_centered(),
        reversible: d.is_reversible(),
        poisson_residual: psi.residual(&d),
        telegraph_closed_form_error,
    })
}

/// Scalar facts about the coefficients, written to `coeffs.json`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoefficientReport {
    pub nx: usize,
    pub spectral_gap: f64,
    pub t_cut: f64,
    pub basis_eigenvalues: Vec<f64>,
    pub retained_fraction: f64,
    pub discarded_energy: f64,
    pub symmetrized_residual: f64,
    pub poisson_identity_residual: f64,
    pub max_kernel_diagonal: f64,
}

/// Writes `drift.csv` (`i,x,a,k_diag`), `kernel.csv` (`i,j,k`) and `basis.csv` (`i,x,phi_0,..`).
pub fn write_coefficients(dir: &Path, co: &Coefficients) -> Result<CoefficientReport> {
    let n = co.grid_len();
    let x = |i: usize| crate::field::grid_point(n, i);
    let mut w = csv::Writer::from_path(dir.join("drift.csv"))?;
    w.write_record(["i", "x", "a", "k_diag"])?;
    for i in 0..n {
        w.write_record(&[i.to_string(), x(i).to_string(), format!("{:.17e}", co.a.values()[i]), format!("{:.17e}", co.kernel.diag.values()[i])])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("kernel.csv"))?;
    w.write_record(["i", "j", "k"])?;
    for i in 0..n {
        for j in 0..n {
            w.write_record(&[i.to_string(), j.to_string(), format!("{:.17e}", co.kernel.values[(i, j)])])?;
        }
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("basis.csv"))?;
    let mut header = vec!["i".to_string(), "x".into()];
    header.extend((0..co.basis.len()).map(|k| format!("phi_{k}")));
    w.write_record(&header)?;
    for i in 0..n {
        let mut row = vec![i.to_string(), x(i).to_string()];
        row.extend(co.basis.modes.iter().map(|m| format!("{:.17e}", m.values()[i])));
        w.write_record(&row)?;
    }
    w.flush()?;
    let report = CoefficientReport {
        nx: n,
        spectral_gap: co.gamma,
        t_cut: co.t_cut,
        basis_eigenvalues: co.basis.eigenvalues.clone(),
        retained_fraction: co.basis.retained_fraction,
        discarded_energy: co.basis.discarded_energy,
        symmetrized_residual: co.cross.symmetrized_residual(&co.kernel),
        poisson_identity_residual: co.cross.poisson_identity_residual,
        max_kernel_diagonal: co.kernel.diag.max_abs(),
    };
    std::fs::write(dir.join("coeffs.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        let mut cfg = RunConfig::telegraph_preset();
        cfg.grid = GridSection { nx: 16, nv: 16, vmax: None };
        cfg.horizon = 0.05;
        cfg.kinetic.epsilons = vec![0.5];
        cfg.spde.dt = 1e-3;
        cfg
    }

    #[test]
    fn preset_round_trips_and_digest_ignores_key_order() {
        let cfg = RunConfig::telegraph_preset();
        let text = cfg.to_toml();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
        let a = "horizon = 0.5\n[driver]\ntelegraph = { c = 0.5, p = 0.5 }\n[initial]\nrho0 = { mean = 1.0 }\nv_std = 0.3\n";
        let b = "[initial]\nv_std = 0.3\nrho0 = { mean = 1.0 }\n[driver]\ntelegraph = { p = 0.5, c = 0.5 }\n";
        let b = format!("horizon = 0.5\n{b}");
        let (ca, cb) = (RunConfig::parse(a).unwrap(), RunConfig::parse(&b).unwrap());
        assert_eq!(ca.digest(), cb.digest());
        assert_ne!(ca.digest(), cfg.digest());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        let bad = "horizon = 0.5\nfoo = 1\n[driver]\ntelegraph = { c = 0.5, p = 0.5 }\n[initial]\nrho0 = { mean = 1.0 }\nv_std = 0.3\n";
        assert!(matches!(RunConfig::parse(bad), Err(Error::Config(_))));
        let mut cfg = RunConfig::telegraph_preset();
        cfg.observables.push(cfg.observables[0].clone());
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn identical_streams_give_zero_variance() {
        let opts = EnsembleOptions { workers: Some(2), identical_streams: true };
        let res = run_ensemble(&small(), Model::Kinetic, 2, 5, &opts).unwrap();
        for s in &res.summary.entries[0].stats {
            assert_eq!(s.variance, 0.0);
        }
    }

    #[test]
    fn ensembles_are_reproducible_across_worker_counts() {
        let cfg = small();
        let a = run_ensemble(&cfg, Model::Spde, 6, 9, &EnsembleOptions { workers: Some(1), ..Default::default() }).unwrap();
        let b = run_ensemble(&cfg, Model::Spde, 6, 9, &EnsembleOptions { workers: Some(3), ..Default::default() }).unwrap();
        assert_eq!(a.summary.to_json(), b.summary.to_json());
        assert!(a.summary.entries[0].stats[0].variance > 0.0);
    }

    #[test]
    fn zero_driver_spde_is_deterministic() {
        let mut cfg = small();
        cfg.driver = DriverFile { telegraph: Some(crate::driver::TelegraphPreset { c: 0.0, p: 0.5 }), center: true, ..Default::default() };
        let res = run_ensemble(&cfg, Model::Spde, 4, 1, &EnsembleOptions::default()).unwrap();
        let want: Vec<f64> = cfg.observable_fields().iter().map(|xi| cfg.initial.rho0.sample(16).inner(xi).unwrap()).collect();
        for (s, w) in res.summary.entries[0].stats.iter().zip(want) {
            assert!(s.variance < 1e-28);
            assert!((s.mean - w).abs() < 1e-12, "{} vs {w}", s.mean);
        }
    }

    fn entry(model: Model, eps: Option<f64>, means: &[f64], se: f64) -> EnsembleEntry {
        let stats = means
            .iter()
            .map(|&m| ObservableStats { mean: m, variance: 1.0, std_error: se, variance_std_error: se, moments: Moments4::default() })
            .collect();
        EnsembleEntry { model, epsilon: eps, runs: 100, stats }
    }

    fn summary(entries: Vec<EnsembleEntry>) -> EnsembleSummary {
        EnsembleSummary { observables: vec!["a".into()], horizon: 1.0, master_seed: 0, config_digest: String::new(), entries }
    }

    #[test]
    fn telegraph_driver_info_passes() {
        let info = driver_info(&DriverFile::telegraph(0.5, 0.5), 32).unwrap();
        assert_eq!(info.stationary, vec![0.5, 0.5]);
        assert!(info.pass(), "{info:?}");
        let co = RunConfig::telegraph_preset().coefficients().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let rep = write_coefficients(dir.path(), &co).unwrap();
        assert_eq!(rep.basis_eigenvalues.len(), 1);
        let kernel = std::fs::read_to_string(dir.path().join("kernel.csv")).unwrap();
        assert_eq!(kernel.lines().count(), 1 + 64 * 64);
    }

    #[test]
    fn comparison_verdicts() {
        let spde = summary(vec![entry(Model::Spde, None, &[0.0], 0.01)]);
        let shrinking = summary(vec![
            entry(Model::Kinetic, Some(0.4), &[0.4], 0.01),
            entry(Model::Kinetic, Some(0.2), &[0.2], 0.01),
            entry(Model::Kinetic, Some(0.1), &[0.01], 0.01),
        ]);
        let r = compare_laws(&shrinking, &spde, &Tolerances::default()).unwrap();
        assert!(r.pass);
        assert!(r.comparisons[0].trend_slope.unwrap() > 0.0);
        let growing = summary(vec![
            entry(Model::Kinetic, Some(0.4), &[0.0], 0.01),
            entry(Model::Kinetic, Some(0.1), &[0.5], 0.01),
        ]);
        assert!(!compare_laws(&growing, &spde, &Tolerances::default()).unwrap().pass);
        let same = summary(vec![entry(Model::Spde, None, &[0.0], 0.01)]);
        assert!(compare_laws(&same, &spde, &Tolerances::default()).unwrap().pass);
        assert!(!compare_laws(&same, &spde, &Tolerances { z_max: 0.0 }).unwrap().pass);
        let mut other = spde.clone();
        other.observables = vec!["b".into()];
        assert!(matches!(compare_laws(&shrinking, &other, &Tolerances::default()), Err(Error::ObservableMismatch(_))));
    }
}
