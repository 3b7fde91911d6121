//! Temporal statistics of the synthetic fading generator against the
//! classical isotropic-scattering autocorrelation `J0(2π f_d τ)`.

use csi_llm_core::channel::{generate_synthetic_dataset, lag_autocorrelation};
use csi_llm_core::config::{ScenarioConfig, SpeedSpec};
use csi_llm_core::eval::{one_step_eval, EvalSettings, Predictor};

/// `J0(x) = (1/π) ∫_0^π cos(x sin θ) dθ` by composite Simpson.
fn bessel_j0(x: f64) -> f64 {
    let n = 2000;
    let h = std::f64::consts::PI / n as f64;
    let f = |t: f64| (x * t.sin()).cos();
    let mut s = f(0.0) + f(std::f64::consts::PI);
    for i in 1..n {
        s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0 / std::f64::consts::PI
}

fn scenario(speed: f64) -> ScenarioConfig {
    ScenarioConfig {
        n_tx: 2,
        n_rx: 2,
        n_prb: 2,
        n_steps: 4,
        ..ScenarioConfig::default()
    }
    .with_speed(SpeedSpec::Single(speed))
}

#[test]
fn quadrature_reference_points() {
    assert!((bessel_j0(0.0) - 1.0).abs() < 1e-12);
    // Tabulated J0(1) and the first zero 2.404825557695773.
    assert!((bessel_j0(1.0) - 0.765_197_686_557_966_6).abs() < 1e-12);
    assert!(bessel_j0(2.404_825_557_695_773).abs() < 1e-12);
}

#[test]
fn lag_one_correlation_follows_bessel_oracle() {
    for speed in [30.0, 60.0, 120.0] {
        let sc = scenario(speed);
        let ds = generate_synthetic_dataset(&sc, 1000).unwrap();
        let expected = bessel_j0(2.0 * std::f64::consts::PI * sc.doppler_hz(speed) * sc.tti_s);
        let got = lag_autocorrelation(&ds, 1);
        assert!(
            (got - expected).abs() < 0.05,
            "{speed} km/h: {got} vs J0 {expected}"
        );
    }
}

#[test]
fn thirty_kmh_oracle_value() {
    let sc = scenario(30.0);
    // (30/3.6)·2e9/2.998e8 = 55.597 Hz; the commonly quoted 55.56 Hz uses c = 3e8.
    assert!((sc.doppler_hz(30.0) - 30.0 / 3.6 * 2e9 / 2.998e8).abs() < 1e-9);
    assert!((sc.doppler_hz(30.0) - 55.56).abs() < 0.05);
    let x = 2.0 * std::f64::consts::PI * sc.doppler_hz(30.0) * sc.tti_s;
    assert!((bessel_j0(x) - 0.37).abs() < 0.01);
}

#[test]
fn slower_fading_ages_less_for_no_prediction() {
    let mut db = Vec::new();
    for speed in [30.0, 120.0] {
        let sc = ScenarioConfig {
            n_tx: 4,
            n_rx: 2,
            n_prb: 2,
            ..ScenarioConfig::default()
        }
        .with_speed(SpeedSpec::Single(speed));
        let ds = generate_synthetic_dataset(&sc, 400).unwrap();
        let grid = one_step_eval(
            &Predictor::<f32>::NoPrediction,
            &ds,
            &[1],
            16,
            &EvalSettings::new("x", 64),
        )
        .unwrap();
        db.push(grid.db(1).unwrap());
    }
    assert!(
        db[0] < db[1],
        "30 km/h {} dB vs 120 km/h {} dB",
        db[0],
        db[1]
    );
}
