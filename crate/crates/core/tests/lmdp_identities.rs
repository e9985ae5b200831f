//! Closed-form L-MDP quantities against independent estimates.

use nalgebra::DMatrix;
use pacmpdm::lmdp::{kl_control_cost, optimal_action, r_inv_from_noise, step_dynamics};
use pacmpdm::merging::{controlled_next, make_passive_sample, CostWeights, ThreeCarState};
use pacmpdm::LmdpModel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const MC_SAMPLES: usize = 100_000;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Log density of `N(mean, diag(var))` at `y`.
fn gaussian_log_pdf(y: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    y.iter()
        .zip(mean)
        .zip(var)
        .map(|((y, m), v)| -0.5 * ((y - m).powi(2) / v + (2.0 * std::f64::consts::PI * v).ln()))
        .sum()
}

/// `E_controlled[ln p_controlled - ln p_passive]` over one Euler step from the origin.
fn monte_carlo_kl(b: &DMatrix<f64>, u: &[f64], sigma: &[f64], dt: f64, rng: &mut ChaCha8Rng) -> f64 {
    let n = sigma.len();
    let shift: Vec<f64> = (0..n).map(|i| (0..u.len()).map(|j| b[(i, j)] * u[j]).sum::<f64>() * dt).collect();
    let var: Vec<f64> = sigma.iter().map(|s| s * s * dt).collect();
    let origin = vec![0.0; n];
    let mut acc = 0.0;
    for _ in 0..MC_SAMPLES {
        let y: Vec<f64> = (0..n).map(|i| shift[i] + var[i].sqrt() * normal(rng)).collect();
        acc += gaussian_log_pdf(&y, &shift, &var) - gaussian_log_pdf(&y, &origin, &var);
    }
    acc / MC_SAMPLES as f64
}

#[test]
fn scalar_kl_matches_monte_carlo() {
    let b = DMatrix::from_element(1, 1, 1.0);
    let sigma = [0.5];
    let closed = kl_control_cost(&[0.7], &r_inv_from_noise(&b, &sigma).unwrap(), 0.1).unwrap();
    let mc = monte_carlo_kl(&b, &[0.7], &sigma, 0.1, &mut ChaCha8Rng::seed_from_u64(0));
    println!("closed {closed:.5} monte carlo {mc:.5}");
    assert!((closed - mc).abs() <= 0.05 * closed);
}

/// Draws are redrawn until the closed form exceeds 0.2, where the relative
/// standard error of a 1e5-sample estimate is about 1%.
#[test]
fn random_kl_draws_match_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let dt = 0.1;
    let mut checked = 0;
    while checked < 10 {
        let n = rng.random_range(1..=3);
        let m = rng.random_range(1..=n);
        let b = DMatrix::from_fn(n, m, |i, j| if i == j { 1.0 } else { 0.5 * normal(&mut rng) });
        let sigma: Vec<f64> = (0..n).map(|_| rng.random_range(0.3..1.0)).collect();
        let u: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..3.0)).collect();
        let closed = kl_control_cost(&u, &r_inv_from_noise(&b, &sigma).unwrap(), dt).unwrap();
        if closed < 0.2 {
            continue;
        }
        let mc = monte_carlo_kl(&b, &u, &sigma, dt, &mut rng);
        println!("n {n} m {m} closed {closed:.4} monte carlo {mc:.4}");
        assert!((closed - mc).abs() <= 0.05 * closed, "closed {closed} mc {mc}");
        checked += 1;
    }
}

#[test]
fn r_inv_equals_explicit_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let n = rng.random_range(1..=5);
        let m = rng.random_range(1..=n);
        let b = DMatrix::from_fn(n, m, |_, _| normal(&mut rng));
        let sigma: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..2.0)).collect();
        let w = DMatrix::from_fn(n, n, |i, j| if i == j { sigma[i].powi(-2) } else { 0.0 });
        let expected = b.transpose() * w * &b;
        let got = r_inv_from_noise(&b, &sigma).unwrap();
        assert!((got - &expected).abs().max() <= 1e-12 * (1.0 + expected.abs().max()));
    }
}

/// Relative kinematics of the three-car system with noise on every component.
fn noisy_merge_model(dt: f64, sigma: Vec<f64>) -> LmdpModel {
    LmdpModel::new(pacmpdm::merging::input_gain(), dt, |_| 0.0)
        .unwrap()
        .with_noise(sigma)
        .unwrap()
        .with_drift(|x| vec![x[1], 0.0, x[3], 0.0])
}

#[test]
fn passive_samples_recover_controlled_transitions() {
    let dt = 0.1;
    let sigma = vec![0.05, 0.5, 0.05, 0.5];
    let model = noisy_merge_model(dt, sigma.clone());
    let w = CostWeights::default();
    let s = DMatrix::from_element(1, 1, 0.4);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut residual_sum = [0.0; 4];
    let mut residual_sq = [0.0; 4];
    let count = MC_SAMPLES;
    for _ in 0..count {
        let x = ThreeCarState::new(
            rng.random_range(-30.0..-5.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-25.0..5.0),
            rng.random_range(-3.0..3.0),
        )
        .unwrap();
        // gradient of a quadratic bowl centred on the gap midpoint
        let grad = [0.0, 0.0, 0.02 * x.midpoint_offset(), 0.3 * x.dv10];
        let u = optimal_action(&s, model.input_gain(), &grad).unwrap();
        let noise: Vec<f64> = (0..4).map(|_| normal(&mut rng)).collect();
        let recorded = ThreeCarState::from_slice(&step_dynamics(&model, &x.to_vec(), &u, &noise).unwrap()).unwrap();
        let sample = make_passive_sample(&x, &recorded, u[0], dt, &w).unwrap();
        let back = controlled_next(&sample, u[0], dt).unwrap();
        for (a, b) in back.to_array().iter().zip(recorded.to_array()) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
        let drift = [x.dv12, 0.0, x.dv10, 0.0];
        for i in 0..4 {
            let r = sample.x_next[i] - sample.x[i] - drift[i] * dt;
            residual_sum[i] += r;
            residual_sq[i] += r * r;
        }
    }
    for i in 0..4 {
        let mean = residual_sum[i] / count as f64;
        let var = residual_sq[i] / count as f64 - mean * mean;
        let expected = sigma[i] * sigma[i] * dt;
        assert!(mean.abs() <= 4.0 * (expected / count as f64).sqrt(), "component {i} mean {mean}");
        assert!((var - expected).abs() <= 0.05 * expected, "component {i} var {var} vs {expected}");
    }
}
