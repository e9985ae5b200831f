//! Finite-difference audits of every analytic gradient the learner uses.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::network::{
    central_difference, check_input_gradient, check_param_gradient, GradientReport, OutputActivation, ZNetwork,
};
use crate::pac::{actor_td, ActorGradient, QScaling, TransitionSample};

/// Step for every central difference.
pub const STEP: f64 = 1e-5;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
pub const DEFAULT_PROBES: usize = 100;
/// Denominator floor for the actor suite. `d` is of order one while `dd/dS`
/// scales with `|dV/dx|^2 dt`, so on flat probes the central difference
/// carries about `1e-11` of rounding; entries below this floor are compared
/// absolutely.
pub const ACTOR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub probes: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

/// Architectures probed: the merge and benchmark defaults plus a small
/// mixed one with the other output activation.
const SHAPES: [(&[usize], OutputActivation); 3] = [
    (&[4, 32, 32, 1], OutputActivation::ExpNegSoftplus),
    (&[1, 32, 1], OutputActivation::ExpNegSoftplus),
    (&[3, 7, 5, 1], OutputActivation::ExpNegTanh),
];

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// A seeded network with jittered parameters and a random standardization.
fn random_net(probe: usize, rng: &mut ChaCha8Rng) -> Result<ZNetwork> {
    let (sizes, act) = SHAPES[probe % SHAPES.len()];
    let mut net = ZNetwork::new(sizes, act, rng.random())?;
    for p in net.params_mut() {
        *p += 0.1 * normal(rng);
    }
    let n = sizes[0];
    let mean = (0..n).map(|_| normal(rng)).collect();
    let scale = (0..n).map(|_| rng.random_range(0.3..3.0)).collect();
    net.set_standardization(mean, scale)?;
    Ok(net)
}

fn random_input(net: &ZNetwork, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..net.input_dim()).map(|i| net.input_mean()[i] + net.input_scale()[i] * normal(rng)).collect()
}

fn worst(reports: impl IntoIterator<Item = Result<GradientReport>>) -> Result<f64> {
    let mut max = 0.0_f64;
    for r in reports {
        max = max.max(r?.max_rel_err);
    }
    Ok(max)
}

/// `dZ/dnu` against central differences.
pub fn network_params(probes: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::with_capacity(probes);
    for k in 0..probes {
        let net = random_net(k, &mut rng)?;
        let x = random_input(&net, &mut rng);
        reports.push(check_param_gradient(&net, &x, STEP));
    }
    Ok(SuiteReport { name: "network-params", probes, max_rel_err: worst(reports)?, tolerance: TOLERANCE })
}

/// `dZ/dx` against central differences.
pub fn network_input(probes: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    let mut reports = Vec::with_capacity(probes);
    for k in 0..probes {
        let net = random_net(k, &mut rng)?;
        let x = random_input(&net, &mut rng);
        reports.push(check_input_gradient(&net, &x, STEP));
    }
    Ok(SuiteReport { name: "network-input", probes, max_rel_err: worst(reports)?, tolerance: TOLERANCE })
}

/// `dV/dx` with `V = -ln Z` against differences of `-ln Z` directly.
pub fn value_gradient(probes: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
    let mut reports = Vec::with_capacity(probes);
    for k in 0..probes {
        let net = random_net(k, &mut rng)?;
        let x = random_input(&net, &mut rng);
        let (_, analytic) = net.log_value_grad_input(&x)?;
        let numeric = central_difference(|p| net.log_value(p), &x, STEP)?;
        reports.push(Ok(GradientReport::new(analytic, numeric)));
    }
    Ok(SuiteReport { name: "value-gradient", probes, max_rel_err: worst(reports)?, tolerance: TOLERANCE })
}

/// `dd/dS` of the actor TD error, entry by entry, for one- and
/// two-dimensional controls.
pub fn actor_control_scale(probes: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
    let dt = 0.1;
    let mut reports = Vec::with_capacity(probes);
    for k in 0..probes {
        let net = random_net(k, &mut rng)?;
        let n = net.input_dim();
        let m = if n >= 2 && k % 2 == 1 { 2 } else { 1 };
        let b = DMatrix::from_fn(n, m, |i, j| if i == j { 1.0 } else { 0.3 * normal(&mut rng) });
        let a = DMatrix::from_fn(m, m, |_, _| 0.3 * normal(&mut rng));
        let s_hat = &a * a.transpose() + DMatrix::identity(m, m) * rng.random_range(0.02..0.5);
        let x = random_input(&net, &mut rng);
        let x_next: Vec<f64> = x.iter().map(|v| v + 0.05 * normal(&mut rng)).collect();
        let sample = TransitionSample::new(x, x_next, rng.random_range(0.0..2.0))?;
        let v_avg = rng.random_range(0.0..0.5);
        let d_of =
            |s: &DMatrix<f64>| actor_td(&net, v_avg, s, &b, dt, QScaling::TimeStep, ActorGradient::Full, &sample);
        let analytic: Vec<f64> = d_of(&s_hat)?.grad_s.iter().copied().collect();
        let flat: Vec<f64> = s_hat.iter().copied().collect();
        let numeric = central_difference(|p| Ok(d_of(&DMatrix::from_column_slice(m, m, p))?.d), &flat, STEP)?;
        reports.push(Ok(GradientReport::with_floor(analytic, numeric, ACTOR_FLOOR)));
    }
    Ok(SuiteReport { name: "actor-control-scale", probes, max_rel_err: worst(reports)?, tolerance: TOLERANCE })
}

/// Every suite with `probes` random probes each.
pub fn run_all(probes: usize, seed: u64) -> Result<Vec<SuiteReport>> {
    Ok(vec![
        network_params(probes, seed)?,
        network_input(probes, seed)?,
        value_gradient(probes, seed)?,
        actor_control_scale(probes, seed)?,
    ])
}
