use kinspray::coefficients::{CoefficientOptions, Coefficients};
use kinspray::driver::DriverSpec;
use kinspray::field::{FourierSeries, GridField1D};
use kinspray::harness::{run_ensemble, EnsembleOptions, Model, RunConfig};
use kinspray::spde::{drift_only, spde_step_with, stability_bound, SpdeConfig, SpdeState};

/// With zero increments an Euler–Maruyama path is the ensemble mean of the scheme.
fn em_mean_path(co: &Coefficients, rho0: &FourierSeries, u0: &FourierSeries, horizon: f64, steps: usize) -> GridField1D {
    let n = co.grid_len();
    let mut state = SpdeState { rho: rho0.sample(n), u: u0.sample(n), t: 0.0 };
    let dt = horizon / steps as f64;
    let zeros = vec![0.0; co.basis.len()];
    for _ in 0..steps {
        spde_step_with(&mut state, &co.a, &co.basis, dt, &zeros).unwrap();
    }
    state.rho
}

#[test]
fn euler_maruyama_mean_is_first_order_in_dt() {
    let co = Coefficients::compute(&DriverSpec::telegraph(0.5, 0.5, 32).unwrap(), &CoefficientOptions::default()).unwrap();
    let rho0 = FourierSeries { mean: 1.0, cos: vec![0.3], sin: vec![0.2] };
    let u0 = FourierSeries::cosine(1, 0.2);
    let horizon = 0.1;
    let coarse = (horizon / (0.9 * stability_bound(32, &co.basis))).ceil() as usize;
    let reference = em_mean_path(&co, &rho0, &u0, horizon, 8 * coarse);
    let errors: Vec<f64> = [1, 2, 4]
        .iter()
        .map(|m| em_mean_path(&co, &rho0, &u0, horizon, m * coarse).max_abs_diff(&reference).unwrap())
        .collect();
    // First order against an h/8 reference: e(h) : e(h/2) : e(h/4) = 7 : 3 : 1.
    let r1 = errors[0] / errors[1];
    let r2 = errors[1] / errors[2];
    assert!((r1 / (7.0 / 3.0) - 1.0).abs() < 0.1, "errors {errors:?}");
    assert!((r2 / 3.0 - 1.0).abs() < 0.1, "errors {errors:?}");
}

#[test]
fn euler_maruyama_mean_tracks_the_mean_equation_while_resolved() {
    let co = Coefficients::compute(&DriverSpec::telegraph(0.5, 0.5, 32).unwrap(), &CoefficientOptions::default()).unwrap();
    let rho0 = FourierSeries { mean: 1.0, cos: vec![0.3], sin: vec![0.2] };
    let u0 = FourierSeries::cosine(1, 0.2);
    let horizon = 0.01;
    let em = em_mean_path(&co, &rho0, &u0, horizon, 1000);
    let cfg = SpdeConfig {
        nx: 32,
        dt: 1e-4,
        horizon,
        output_times: vec![],
        rho0,
        u0,
        scheme: Default::default(),
        seeds: None,
        modes: None,
    };
    let gap = em.max_abs_diff(&drift_only(&cfg, &co).unwrap()).unwrap();
    assert!(gap < 1e-4, "gap {gap}");
}

#[test]
fn flow_ensemble_mean_matches_resolved_mean_equation() {
    let cfg = RunConfig::telegraph_preset();
    let runs = 256;
    let res = run_ensemble(&cfg, Model::Spde, runs, 7, &EnsembleOptions::default()).unwrap();
    let entry = &res.summary.entries[0];

    let mut fine = cfg.clone();
    fine.grid.nx = 256;
    let co = fine.coefficients().unwrap();
    let rho = drift_only(&fine.spde_config(), &co).unwrap();
    for (obs, stats) in fine.observables.iter().zip(&entry.stats) {
        let expected = rho.inner(&obs.xi.sample(256)).unwrap();
        let z = (stats.mean - expected) / stats.std_error;
        assert!(z.abs() <= 3.0, "{}: mean {} vs {expected}, z {z:.2}", obs.id, stats.mean);
    }
}
