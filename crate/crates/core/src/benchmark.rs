//! One-dimensional benchmark: `A = 0`, `q = x^2`, constant noise, solved on a
//! grid. Provides passive datasets, oracle adapters and the comparison
//! measurements used to validate the learner.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lmdp::LmdpModel;
use crate::network::ValueFunction;
use crate::oracle::{solve_model, Grid, OracleSolution};
use crate::pac::{actor_td, ActorGradient, QScaling, TrainConfig, TransitionSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Benchmark1d {
    pub sigma: f64,
    pub dt: f64,
    pub lower: f64,
    pub upper: f64,
    pub cells: usize,
}

impl Default for Benchmark1d {
    fn default() -> Self {
        Self { sigma: 0.5, dt: 0.1, lower: -3.0, upper: 3.0, cells: 201 }
    }
}

impl Benchmark1d {
    pub fn model(&self) -> Result<LmdpModel> {
        Ok(LmdpModel::new(DMatrix::from_element(1, 1, 1.0), self.dt, |x| x[0] * x[0])?
            .with_noise(vec![self.sigma])?
            .with_drift(|_| vec![0.0]))
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::uniform_1d(self.lower, self.upper, self.cells)
    }

    pub fn with_cells(&self, cells: usize) -> Self {
        Self { cells, ..self.clone() }
    }

    pub fn solve(&self) -> Result<OracleSolution> {
        solve_model(&self.model()?, &self.grid()?)
    }

    /// `count` passive transitions with states uniform over the grid box.
    pub fn passive_samples(&self, count: usize, seed: u64) -> Result<Vec<TransitionSample>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let step = self.sigma * self.dt.sqrt();
        (0..count)
            .map(|_| {
                let x = rng.random_range(self.lower..=self.upper);
                let w: f64 = StandardNormal.sample(&mut rng);
                TransitionSample::new(vec![x], vec![x + step * w], x * x)
            })
            .collect()
    }

    /// Learner settings used for this benchmark.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            iterations: 200_000,
            batch_size: 128,
            seed,
            hidden_layers: vec![32],
            metrics_every: 1000,
            ..TrainConfig::default()
        }
    }
}

/// Interpolated oracle value function.
#[derive(Debug, Clone, Copy)]
pub struct OracleValue<'a> {
    pub solution: &'a OracleSolution,
    pub grid: &'a Grid,
}

impl ValueFunction for OracleValue<'_> {
    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.solution.value_at(self.grid, x))
    }

    fn value_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        if self.solution.grad_v.len() != self.grid.len() {
            return Err(Error::Argument("oracle solution has no gradient attached".into()));
        }
        Ok(self.solution.grad_v_at(self.grid, x))
    }
}

/// Root-mean-square difference between `V` and the oracle over the central
/// `fraction` of the grid, after shifting `V` so the median difference is zero.
pub fn anchored_rmse<V: ValueFunction + ?Sized>(
    value: &V,
    sol: &OracleSolution,
    grid: &Grid,
    fraction: f64,
) -> Result<f64> {
    let half = 0.5 * fraction;
    let mut diffs = Vec::new();
    for k in 0..grid.len() {
        let p = grid.point(k);
        let central = (0..grid.dim()).all(|d| {
            let mid = 0.5 * (grid.lower()[d] + grid.upper()[d]);
            let span = grid.upper()[d] - grid.lower()[d];
            (p[d] - mid).abs() <= half * span + 1e-9
        });
        if central {
            diffs.push(value.value(&p)? - sol.v[k]);
        }
    }
    if diffs.is_empty() {
        return Err(Error::Argument("no grid nodes in the central region".into()));
    }
    let shift = median(&diffs);
    Ok((diffs.iter().map(|d| (d - shift).powi(2)).sum::<f64>() / diffs.len() as f64).sqrt())
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Gauss-Hermite rule for expectations under a standard normal: `E[f(w)] ~ sum w_i f(t_i)`.
pub fn gauss_hermite(order: usize) -> (Vec<f64>, Vec<f64>) {
    let jacobi = DMatrix::from_fn(order, order, |i, j| {
        if i + 1 == j {
            (j as f64).sqrt()
        } else if j + 1 == i {
            (i as f64).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> =
        (0..order).map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2))).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Critic TD error `Z_avg Z(x) - min(1, exp(-q dt) Z(x'))` for a tabulated `Z`.
pub fn oracle_critic_error(sol: &OracleSolution, grid: &Grid, dt: f64, s: &TransitionSample) -> f64 {
    let target = ((-s.q * dt).exp() * sol.z_at(grid, &s.x_next)).min(1.0);
    sol.z_avg * sol.z_at(grid, &s.x) - target
}

/// Mean critic and actor TD errors with the exact solution substituted, and
/// the floors they are compared against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointReport {
    pub critic_mean_abs: f64,
    /// Mean absolute deviation of `e` from its conditional mean given `x`
    /// (pure transition noise).
    pub critic_noise_floor: f64,
    /// Mean absolute conditional mean of `e` (what remains once noise is integrated out).
    pub critic_bias: f64,
    /// Mean `|Z_coarse - Z_fine|` over the sample states.
    pub z_interpolation_error: f64,
    pub actor_mean: f64,
    pub actor_mean_abs: f64,
    pub actor_std_error: f64,
    /// Mean `|V_coarse - V_fine|` over the sample states.
    pub v_interpolation_error: f64,
    pub control_scale: f64,
}

impl FixedPointReport {
    /// Critic: the systematic part is within ten interpolation errors and the
    /// total within the noise floor plus that band.
    pub fn critic_within_floor(&self) -> bool {
        let band = 10.0 * self.z_interpolation_error;
        self.critic_bias <= band && self.critic_mean_abs <= self.critic_noise_floor + band
    }

    /// Actor: mean error within three standard errors plus ten interpolation errors.
    pub fn actor_within_floor(&self) -> bool {
        self.actor_mean.abs() <= 3.0 * self.actor_std_error + 10.0 * self.v_interpolation_error
    }
}

/// Measures the TD errors of the exact solution on `samples`. `fine` is the
/// same problem solved on a refined grid, used to size the interpolation error.
pub fn fixed_point_report(
    bench: &Benchmark1d,
    coarse: &OracleSolution,
    fine: &OracleSolution,
    fine_bench: &Benchmark1d,
    samples: &[TransitionSample],
    control_scale: f64,
) -> Result<FixedPointReport> {
    if samples.is_empty() {
        return Err(Error::Argument("fixed-point check needs samples".into()));
    }
    let grid = bench.grid()?;
    let fine_grid = fine_bench.grid()?;
    let model = bench.model()?;
    let dt = bench.dt;
    let (nodes, weights) = gauss_hermite(40);
    let step = bench.sigma * dt.sqrt();
    let oracle = OracleValue { solution: coarse, grid: &grid };
    let s_mat = DMatrix::from_element(1, 1, control_scale);
    let v_avg = -coarse.z_avg.ln();
    let n = samples.len() as f64;
    let mut r = FixedPointReport {
        critic_mean_abs: 0.0,
        critic_noise_floor: 0.0,
        critic_bias: 0.0,
        z_interpolation_error: 0.0,
        actor_mean: 0.0,
        actor_mean_abs: 0.0,
        actor_std_error: 0.0,
        v_interpolation_error: 0.0,
        control_scale,
    };
    let mut ds = Vec::with_capacity(samples.len());
    for s in samples {
        let e = oracle_critic_error(coarse, &grid, dt, s);
        let mut conditional = 0.0;
        for (t, w) in nodes.iter().zip(&weights) {
            let probe = TransitionSample { x: s.x.clone(), x_next: vec![s.x[0] + step * t], q: s.q };
            conditional += w * oracle_critic_error(coarse, &grid, dt, &probe);
        }
        r.critic_mean_abs += e.abs() / n;
        r.critic_noise_floor += (e - conditional).abs() / n;
        r.critic_bias += conditional.abs() / n;
        r.z_interpolation_error += (coarse.z_at(&grid, &s.x) - fine.z_at(&fine_grid, &s.x)).abs() / n;
        r.v_interpolation_error += (coarse.value_at(&grid, &s.x) - fine.value_at(&fine_grid, &s.x)).abs() / n;
        let d = actor_td(&oracle, v_avg, &s_mat, model.input_gain(), dt, QScaling::TimeStep, ActorGradient::Full, s)?.d;
        ds.push(d);
    }
    r.actor_mean = ds.iter().sum::<f64>() / n;
    r.actor_mean_abs = ds.iter().map(|d| d.abs()).sum::<f64>() / n;
    let var = ds.iter().map(|d| (d - r.actor_mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    r.actor_std_error = (var / n).sqrt();
    Ok(r)
}

/// Mean squared actor TD error of `value` at control scale `s`.
pub fn mean_actor_d2<V: ValueFunction + ?Sized>(
    value: &V,
    v_avg: f64,
    model: &LmdpModel,
    samples: &[TransitionSample],
    s: f64,
) -> Result<f64> {
    let s_mat = DMatrix::from_element(1, 1, s);
    let mut acc = 0.0;
    for sample in samples {
        let d = actor_td(
            value,
            v_avg,
            &s_mat,
            model.input_gain(),
            model.dt(),
            QScaling::TimeStep,
            ActorGradient::Full,
            sample,
        )?
        .d;
        acc += d * d;
    }
    Ok(acc / samples.len() as f64)
}

/// Scalar control scale minimizing mean `d^2` over `[lo, hi]`: coarse scan
/// followed by golden-section refinement.
pub fn scan_control_scale<V: ValueFunction + ?Sized>(
    value: &V,
    v_avg: f64,
    model: &LmdpModel,
    samples: &[TransitionSample],
    lo: f64,
    hi: f64,
) -> Result<f64> {
    if model.control_dim() != 1 {
        return Err(Error::Argument("control-scale scan is defined for scalar controls".into()));
    }
    let f = |s: f64| mean_actor_d2(value, v_avg, model, samples, s);
    let n = 60;
    let h = (hi - lo) / n as f64;
    let mut best = (lo, f(lo)?);
    for i in 1..=n {
        let s = lo + i as f64 * h;
        let v = f(s)?;
        if v < best.1 {
            best = (s, v);
        }
    }
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = ((best.0 - h).max(lo), (best.0 + h).min(hi));
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (f(c)?, f(d)?);
    while b - a > 1e-6 * (1.0 + best.0.abs()) {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d)?;
        }
    }
    Ok(0.5 * (a + b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_hermite_moments() {
        let (t, w) = gauss_hermite(20);
        let m = |p: i32| t.iter().zip(&w).map(|(t, w)| w * t.powi(p)).sum::<f64>();
        assert!((m(0) - 1.0).abs() < 1e-12);
        assert!(m(1).abs() < 1e-12);
        assert!((m(2) - 1.0).abs() < 1e-10);
        assert!((m(4) - 3.0).abs() < 1e-9);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn oracle_rmse_against_itself_is_zero() {
        let b = Benchmark1d { cells: 61, ..Default::default() };
        let sol = b.solve().unwrap();
        let g = b.grid().unwrap();
        let shifted = Shifted(OracleValue { solution: &sol, grid: &g }, 3.0);
        assert!(anchored_rmse(&shifted, &sol, &g, 0.8).unwrap() < 1e-12);
    }

    struct Shifted<'a>(OracleValue<'a>, f64);

    impl ValueFunction for Shifted<'_> {
        fn value(&self, x: &[f64]) -> Result<f64> {
            Ok(self.0.value(x)? + self.1)
        }
        fn value_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
            self.0.value_gradient(x)
        }
    }

    #[test]
    fn benchmark_matches_harmonic_ground_state() {
        // for q = x^2 and diffusion sigma^2/2 the ground-state cost rate is sigma / sqrt(2)
        let b = Benchmark1d::default();
        let sol = b.solve().unwrap();
        let rate = sol.cost_rate(b.dt);
        assert!((rate - 0.5 / 2f64.sqrt()).abs() / rate < 0.01, "rate {rate}");
    }

    #[test]
    fn samples_are_deterministic_and_in_range() {
        let b = Benchmark1d::default();
        let a = b.passive_samples(100, 9).unwrap();
        assert_eq!(a, b.passive_samples(100, 9).unwrap());
        assert!(a.iter().all(|s| s.x[0] >= -3.0 && s.x[0] <= 3.0 && s.q == s.x[0] * s.x[0]));
    }
}
