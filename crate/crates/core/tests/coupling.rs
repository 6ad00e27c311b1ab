use kinspray::driver::DriverSpec;
use kinspray::rng::{substream, LANE_AUX};
use kinspray::stats::Moments4;

/// The disagreement integral of the coupled chains equals the mean meeting epoch,
/// since each unit-rate clock epoch lasts one unit of time on average.
#[test]
fn disagreement_integral_equals_mean_meeting_epoch() {
    for (c, p) in [(0.5, 0.5), (0.8, 0.3)] {
        let d = DriverSpec::telegraph(c, p, 16).unwrap();
        let horizon = 200.0 / d.spectral_gap();
        let diffs: Vec<f64> = (0..20_000)
            .map(|r| {
                let s = d.coupled_sample(0, horizon, &mut substream(99, r, LANE_AUX)).unwrap();
                s.meeting_time.unwrap() - s.meeting_index.unwrap() as f64
            })
            .collect();
        let m = Moments4::from_slice(&diffs);
        assert!(m.mean.abs() <= 4.0 * m.std_error(), "p = {p}: mean {} se {}", m.mean, m.std_error());
    }
}
