//! Grid eigenfunction solver.
//!
//! Discretizes a low-dimensional model, builds the passive transition kernel
//! and solves `Z_avg z = diag(exp(-q dt)) P z` for the principal pair by power
//! iteration. Used as ground truth for the learner.

use std::io::Write;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lmdp::{kl_control_cost, step_dynamics, LmdpModel};

/// Largest supported grid dimension.
pub const MAX_GRID_DIM: usize = 2;

/// Tensor grid of nodes, inclusive of both bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    lower: Vec<f64>,
    upper: Vec<f64>,
    counts: Vec<usize>,
}

impl Grid {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, counts: Vec<usize>) -> Result<Self> {
        let n = lower.len();
        if n == 0 || n > MAX_GRID_DIM || upper.len() != n || counts.len() != n {
            return Err(Error::Config(format!("grid must have 1..={MAX_GRID_DIM} consistent dimensions")));
        }
        for d in 0..n {
            if !(lower[d].is_finite() && upper[d].is_finite() && lower[d] < upper[d]) {
                return Err(Error::Config(format!("grid dimension {d} needs finite bounds with lower < upper")));
            }
            if counts[d] < 3 {
                return Err(Error::Config(format!("grid dimension {d} needs at least 3 points")));
            }
        }
        Ok(Self { lower, upper, counts })
    }

    pub fn uniform_1d(lower: f64, upper: f64, count: usize) -> Result<Self> {
        Self::new(vec![lower], vec![upper], vec![count])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn spacing(&self, d: usize) -> f64 {
        (self.upper[d] - self.lower[d]) / (self.counts[d] - 1) as f64
    }

    pub fn coordinate(&self, d: usize, i: usize) -> f64 {
        self.lower[d] + i as f64 * self.spacing(d)
    }

    /// Per-dimension indices of flat cell `k` (first dimension varies slowest).
    pub fn unflatten(&self, mut k: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for d in (0..self.dim()).rev() {
            idx[d] = k % self.counts[d];
            k /= self.counts[d];
        }
        idx
    }

    pub fn flatten(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.counts).fold(0, |acc, (i, c)| acc * c + i)
    }

    pub fn point(&self, k: usize) -> Vec<f64> {
        self.unflatten(k).iter().enumerate().map(|(d, &i)| self.coordinate(d, i)).collect()
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|k| self.point(k)).collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    /// Multilinear interpolation of a per-node field; `x` is clamped to the grid box.
    pub fn interpolate(&self, field: &[f64], x: &[f64]) -> f64 {
        let n = self.dim();
        let mut base = vec![0usize; n];
        let mut frac = vec![0.0; n];
        for d in 0..n {
            let t = ((x[d] - self.lower[d]) / self.spacing(d)).clamp(0.0, (self.counts[d] - 1) as f64);
            let i = (t.floor() as usize).min(self.counts[d] - 2);
            base[d] = i;
            frac[d] = t - i as f64;
        }
        let mut acc = 0.0;
        let mut idx = vec![0usize; n];
        for corner in 0..(1usize << n) {
            let mut w = 1.0;
            for d in 0..n {
                let up = (corner >> d) & 1 == 1;
                idx[d] = base[d] + up as usize;
                w *= if up { frac[d] } else { 1.0 - frac[d] };
            }
            if w != 0.0 {
                acc += w * field[self.flatten(&idx)];
            }
        }
        acc
    }

    /// Node-wise gradient of `field` by central differences (one-sided at edges).
    pub fn node_gradient(&self, field: &[f64]) -> Vec<Vec<f64>> {
        (0..self.len())
            .map(|k| {
                let idx = self.unflatten(k);
                (0..self.dim())
                    .map(|d| {
                        let h = self.spacing(d);
                        let mut lo = idx.clone();
                        let mut hi = idx.clone();
                        let mut span = 0.0;
                        if idx[d] > 0 {
                            lo[d] -= 1;
                            span += h;
                        }
                        if idx[d] + 1 < self.counts[d] {
                            hi[d] += 1;
                            span += h;
                        }
                        (field[self.flatten(&hi)] - field[self.flatten(&lo)]) / span
                    })
                    .collect()
            })
            .collect()
    }
}

/// Dense row-stochastic passive transition matrix over grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    size: usize,
    data: Vec<f64>,
}

impl Kernel {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.size..(i + 1) * self.size]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.size + j]
    }

    /// `y = diag(w) P z`.
    fn apply_weighted(&self, weights: &[f64], z: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = weights[i] * dot(self.row(i), z);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Passive one-step kernel: Gaussian densities at node coordinates around
/// `x + A(x) dt` with per-dimension std `sigma sqrt(dt)`, each row renormalized.
pub fn build_passive_kernel(model: &LmdpModel, grid: &Grid) -> Result<Kernel> {
    let sigma = model.noise_level().ok_or_else(|| Error::Config("passive kernel needs a noise level".into()))?;
    if !model.has_drift() {
        return Err(Error::Config("passive kernel needs a drift function".into()));
    }
    if model.state_dim() != grid.dim() {
        return Err(Error::Config("grid and model dimensions differ".into()));
    }
    if sigma.iter().any(|s| *s <= 0.0) {
        return Err(Error::Config("passive kernel needs strictly positive noise".into()));
    }
    let dt = model.dt();
    let std: Vec<f64> = sigma.iter().map(|s| s * dt.sqrt()).collect();
    let cell_volume: f64 = (0..grid.dim()).map(|d| grid.spacing(d)).product();
    let points = grid.points();
    let size = grid.len();
    let mut data = vec![0.0; size * size];
    for (i, xi) in points.iter().enumerate() {
        let drift = model.drift(xi)?;
        let mean: Vec<f64> = xi.iter().zip(&drift).map(|(x, a)| x + a * dt).collect();
        let row = &mut data[i * size..(i + 1) * size];
        let mut mass = 0.0;
        for (j, xj) in points.iter().enumerate() {
            let mut log_density = 0.0;
            for d in 0..grid.dim() {
                let r = (xj[d] - mean[d]) / std[d];
                log_density -= 0.5 * r * r + (std[d] * (2.0 * std::f64::consts::PI).sqrt()).ln();
            }
            let p = log_density.exp();
            row[j] = p;
            mass += p;
        }
        if !(mass * cell_volume > 1e-12) {
            return Err(Error::Config(format!(
                "kernel row {i} retains mass {:e}; the grid is too coarse or too narrow",
                mass * cell_volume
            )));
        }
        for p in row.iter_mut() {
            *p /= mass;
        }
    }
    Ok(Kernel { size, data })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerIterationOptions {
    pub eigenvalue_tol: f64,
    pub residual_tol: f64,
    pub max_iterations: usize,
}

impl Default for PowerIterationOptions {
    fn default() -> Self {
        Self { eigenvalue_tol: 1e-12, residual_tol: 1e-11, max_iterations: 100_000 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    /// Principal eigenvector, max-normalized to 1.
    pub z: Vec<f64>,
    pub z_avg: f64,
    pub v: Vec<f64>,
    /// Per-node optimal action; empty until [`OracleSolution::attach_policy`].
    pub policy: Vec<Vec<f64>>,
    /// Node-wise gradient of `v`.
    pub grad_v: Vec<Vec<f64>>,
    /// `max |M z - Z_avg z|` at termination.
    pub residual: f64,
    pub iterations: usize,
}

/// Principal eigenpair of `M = diag(exp(-q dt)) P` by power iteration.
pub fn solve_z(kernel: &Kernel, q: &[f64], dt: f64, opts: PowerIterationOptions) -> Result<OracleSolution> {
    let n = kernel.size();
    if q.len() != n {
        return Err(Error::Argument(format!("cost vector has {} entries, kernel has {n}", q.len())));
    }
    if let Some(i) = q.iter().position(|c| !(c.is_finite() && *c >= 0.0)) {
        return Err(Error::Argument(format!("cell {i} has invalid cost {}", q[i])));
    }
    if !(dt > 0.0) {
        return Err(Error::Argument("dt must be positive".into()));
    }
    let weights: Vec<f64> = q.iter().map(|c| (-c * dt).exp()).collect();
    let mut z = vec![1.0; n];
    let mut next = vec![0.0; n];
    let mut lambda = f64::NAN;
    let mut residual = f64::INFINITY;
    for it in 1..=opts.max_iterations {
        kernel.apply_weighted(&weights, &z, &mut next);
        let new_lambda = next.iter().cloned().fold(0.0, f64::max);
        if !(new_lambda > 0.0 && new_lambda.is_finite()) {
            return Err(Error::numeric("power iteration lost positivity"));
        }
        residual = next.iter().zip(&z).map(|(m, zi)| (m - new_lambda * zi).abs()).fold(0.0, f64::max);
        let converged = (new_lambda - lambda).abs() < opts.eigenvalue_tol && residual < opts.residual_tol;
        lambda = new_lambda;
        if converged {
            let v = z.iter().map(|zi| -zi.ln()).collect();
            return Ok(OracleSolution {
                z,
                z_avg: lambda,
                v,
                policy: Vec::new(),
                grad_v: Vec::new(),
                residual,
                iterations: it,
            });
        }
        for (zi, m) in z.iter_mut().zip(&next) {
            *zi = m / new_lambda;
        }
    }
    Err(Error::NoConvergence { iterations: opts.max_iterations, residual })
}

/// Builds the kernel and cost vector for `model` on `grid` and solves, with the policy attached.
pub fn solve_model(model: &LmdpModel, grid: &Grid) -> Result<OracleSolution> {
    let kernel = build_passive_kernel(model, grid)?;
    let q = grid.points().iter().map(|x| model.state_cost(x)).collect::<Result<Vec<_>>>()?;
    let mut sol = solve_z(&kernel, &q, model.dt(), PowerIterationOptions::default())?;
    sol.attach_policy(model, grid)?;
    Ok(sol)
}

/// `S = (B' diag(sigma)^-2 B)^-1`, the control scale implied by a known noise level.
pub fn control_scale_from_noise(model: &LmdpModel) -> Result<DMatrix<f64>> {
    model.r_inv()?.try_inverse().ok_or_else(|| Error::Singular("R^-1 is not invertible".into()))
}

impl OracleSolution {
    /// Fills `grad_v` and `policy = -S B' grad_v` with `S` from the known noise.
    pub fn attach_policy(&mut self, model: &LmdpModel, grid: &Grid) -> Result<()> {
        if grid.len() != self.v.len() {
            return Err(Error::Argument("solution and grid sizes differ".into()));
        }
        let s = control_scale_from_noise(model)?;
        self.grad_v = grid.node_gradient(&self.v);
        self.policy = self
            .grad_v
            .iter()
            .map(|g| crate::lmdp::optimal_action(&s, model.input_gain(), g))
            .collect::<Result<_>>()?;
        Ok(())
    }

    /// Average cost rate `-ln(Z_avg) / dt`.
    pub fn cost_rate(&self, dt: f64) -> f64 {
        -self.z_avg.ln() / dt
    }

    /// Interpolated `V` at an arbitrary point.
    pub fn value_at(&self, grid: &Grid, x: &[f64]) -> f64 {
        grid.interpolate(&self.v, x)
    }

    /// Interpolated `Z` at an arbitrary point.
    pub fn z_at(&self, grid: &Grid, x: &[f64]) -> f64 {
        grid.interpolate(&self.z, x)
    }

    /// Multilinear interpolation of the node gradients.
    pub fn grad_v_at(&self, grid: &Grid, x: &[f64]) -> Vec<f64> {
        (0..grid.dim())
            .map(|d| {
                let comp: Vec<f64> = self.grad_v.iter().map(|g| g[d]).collect();
                grid.interpolate(&comp, x)
            })
            .collect()
    }

    /// CSV with one row per node: coordinates, z, v, then policy components.
    pub fn write_csv<W: Write>(&self, grid: &Grid, out: &mut W) -> Result<()> {
        let m = self.policy.first().map_or(0, Vec::len);
        let mut header: Vec<String> = (0..grid.dim()).map(|d| format!("x{d}")).collect();
        header.push("z".into());
        header.push("v".into());
        header.extend((0..m).map(|j| format!("u{j}")));
        writeln!(out, "{}", header.join(","))?;
        for k in 0..grid.len() {
            let mut row: Vec<String> = grid.point(k).iter().map(|c| c.to_string()).collect();
            row.push(self.z[k].to_string());
            row.push(self.v[k].to_string());
            if let Some(u) = self.policy.get(k) {
                row.extend(u.iter().map(|c| c.to_string()));
            }
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeSettings {
    pub episodes: usize,
    /// Counted steps per episode.
    pub horizon: usize,
    /// Uncounted steps simulated first.
    pub burn_in: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostReport {
    /// Mean of `q dt + KL` per counted step.
    pub cost_per_step: f64,
    /// `cost_per_step / dt`.
    pub cost_rate: f64,
    pub steps: usize,
    pub truncated: usize,
    pub exit_rate: f64,
}

/// Simulates `policy` from `start` with paired per-episode noise streams and
/// returns the long-run average cost. Episodes that leave the grid are
/// truncated at the exit and counted.
pub fn simulate_average_cost<F>(
    model: &LmdpModel,
    grid: &Grid,
    start: &[f64],
    policy: F,
    settings: EpisodeSettings,
) -> Result<CostReport>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let r_inv = model.r_inv()?;
    let dt = model.dt();
    let n = model.state_dim();
    let mut total = 0.0;
    let mut steps = 0usize;
    let mut truncated = 0usize;
    for ep in 0..settings.episodes {
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
        rng.set_stream(ep as u64);
        let mut x = start.to_vec();
        for k in 0..settings.burn_in + settings.horizon {
            let u = policy(&x)?;
            let step_cost = model.state_cost(&x)? * dt + kl_control_cost(&u, &r_inv, dt)?;
            let noise: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            if k >= settings.burn_in {
                total += step_cost;
                steps += 1;
            }
            x = step_dynamics(model, &x, &u, &noise)?;
            if !grid.contains(&x) {
                truncated += 1;
                break;
            }
        }
    }
    if steps == 0 {
        return Err(Error::Config("no steps were simulated".into()));
    }
    let cost_per_step = total / steps as f64;
    Ok(CostReport {
        cost_per_step,
        cost_rate: cost_per_step / dt,
        steps,
        truncated,
        exit_rate: truncated as f64 / settings.episodes.max(1) as f64,
    })
}

/// Average cost of the oracle policy, started from the node of least value.
pub fn oracle_policy_and_cost(
    sol: &OracleSolution,
    model: &LmdpModel,
    grid: &Grid,
    settings: EpisodeSettings,
) -> Result<CostReport> {
    if sol.grad_v.len() != grid.len() {
        return Err(Error::Argument("solution has no policy attached for this grid".into()));
    }
    let s = control_scale_from_noise(model)?;
    let start = sol.least_value_point(grid);
    simulate_average_cost(
        model,
        grid,
        &start,
        |x| crate::lmdp::optimal_action(&s, model.input_gain(), &sol.grad_v_at(grid, x)),
        settings,
    )
}

impl OracleSolution {
    pub fn least_value_point(&self, grid: &Grid) -> Vec<f64> {
        let k = self.v.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).map_or(0, |(k, _)| k);
        grid.point(k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model_1d(sigma: f64, q: fn(&[f64]) -> f64) -> LmdpModel {
        LmdpModel::new(DMatrix::from_element(1, 1, 1.0), 0.1, q)
            .unwrap()
            .with_noise(vec![sigma])
            .unwrap()
            .with_drift(|x| vec![0.0; x.len()])
    }

    fn quadratic(x: &[f64]) -> f64 {
        x[0] * x[0]
    }

    #[test]
    fn grid_validation() {
        assert!(Grid::uniform_1d(0.0, 1.0, 2).is_err());
        assert!(Grid::uniform_1d(1.0, 1.0, 5).is_err());
        assert!(Grid::new(vec![0.0; 3], vec![1.0; 3], vec![3; 3]).is_err());
        let g = Grid::uniform_1d(-3.0, 3.0, 201).unwrap();
        assert_eq!(g.len(), 201);
        assert!((g.point(100)[0]).abs() < 1e-15);
        assert_eq!(g.point(200)[0], 3.0);
    }

    #[test]
    fn flatten_round_trip() {
        let g = Grid::new(vec![0.0, 0.0], vec![1.0, 2.0], vec![4, 5]).unwrap();
        for k in 0..g.len() {
            assert_eq!(g.flatten(&g.unflatten(k)), k);
        }
    }

    #[test]
    fn interpolation_is_exact_for_affine_fields() {
        let g = Grid::new(vec![-1.0, 0.0], vec![1.0, 2.0], vec![5, 7]).unwrap();
        let f: Vec<f64> = g.points().iter().map(|p| 2.0 * p[0] - 3.0 * p[1] + 0.5).collect();
        for x in [[0.13, 1.71], [-0.99, 0.02], [0.5, 1.0]] {
            let exact = 2.0 * x[0] - 3.0 * x[1] + 0.5;
            assert!((g.interpolate(&f, &x) - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn near_deterministic_kernel_is_identity() {
        let g = Grid::uniform_1d(-1.0, 1.0, 21).unwrap();
        let sigma = g.spacing(0) / 10.0 / 0.1f64.sqrt();
        let k = build_passive_kernel(&model_1d(sigma, quadratic), &g).unwrap();
        for i in 0..g.len() {
            assert!((k.get(i, i) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kernel_rows_are_stochastic() {
        let g = Grid::uniform_1d(-3.0, 3.0, 61).unwrap();
        let k = build_passive_kernel(&model_1d(0.5, quadratic), &g).unwrap();
        for i in 0..g.len() {
            assert!((k.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kernel_moments_match_dynamics() {
        // drift A(x) = -x, checked from the central node and an off-centre node
        let g = Grid::uniform_1d(-3.0, 3.0, 401).unwrap();
        let model = model_1d(0.5, quadratic).with_drift(|x| vec![-x[0]]);
        let k = build_passive_kernel(&model, &g).unwrap();
        let pts = g.points();
        for i in [200usize, 250] {
            let x = pts[i][0];
            let mean: f64 = (0..g.len()).map(|j| k.get(i, j) * pts[j][0]).sum();
            let var: f64 = (0..g.len()).map(|j| k.get(i, j) * (pts[j][0] - mean).powi(2)).sum();
            let expected_shift = -x * 0.1;
            if expected_shift != 0.0 {
                assert!(((mean - x) - expected_shift).abs() <= 0.02 * expected_shift.abs());
            } else {
                assert!((mean - x).abs() < 1e-12);
            }
            assert!((var - 0.025).abs() <= 0.02 * 0.025, "var {var}");
        }
    }

    #[test]
    fn narrow_grid_rejected() {
        // drift carries all mass far outside the grid
        let g = Grid::uniform_1d(-1.0, 1.0, 3).unwrap();
        let model = model_1d(0.1, quadratic).with_drift(|_| vec![100.0]);
        let err = build_passive_kernel(&model, &g);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn zero_cost_gives_unit_eigenvalue() {
        let g = Grid::uniform_1d(-3.0, 3.0, 101).unwrap();
        let k = build_passive_kernel(&model_1d(0.5, quadratic), &g).unwrap();
        let sol = solve_z(&k, &vec![0.0; g.len()], 0.1, PowerIterationOptions::default()).unwrap();
        assert!((sol.z_avg - 1.0).abs() < 1e-10);
        assert!(sol.z.iter().all(|z| (z - 1.0).abs() < 1e-10));
        assert!(sol.residual <= 1e-10);
    }

    #[test]
    fn constant_cost_gives_exponential_eigenvalue() {
        let g = Grid::uniform_1d(-3.0, 3.0, 101).unwrap();
        let k = build_passive_kernel(&model_1d(0.5, quadratic), &g).unwrap();
        let sol = solve_z(&k, &vec![0.7; g.len()], 0.1, PowerIterationOptions::default()).unwrap();
        assert!((sol.z_avg - (-0.07f64).exp()).abs() < 1e-10);
        assert!(sol.z.iter().all(|z| (z - 1.0).abs() < 1e-10));
    }

    #[test]
    fn benchmark_residual_against_dense_multiply() {
        let g = Grid::uniform_1d(-3.0, 3.0, 201).unwrap();
        let model = model_1d(0.5, quadratic);
        let sol = solve_model(&model, &g).unwrap();
        // independent dense product through nalgebra
        let k = build_passive_kernel(&model, &g).unwrap();
        let n = g.len();
        let p = DMatrix::from_fn(n, n, |i, j| k.get(i, j));
        let w = DMatrix::from_fn(n, n, |i, j| if i == j { (-g.point(i)[0].powi(2) * 0.1).exp() } else { 0.0 });
        let z = nalgebra::DVector::from_vec(sol.z.clone());
        let r = &w * &p * &z - &z * sol.z_avg;
        assert!(r.amax() <= 1e-10, "residual {}", r.amax());
        assert!(sol.z.iter().all(|z| *z > 0.0));
        assert!(sol.z_avg > 0.0 && sol.z_avg < 1.0);
    }

    #[test]
    fn refinement_is_stable() {
        let model = model_1d(0.5, quadratic);
        let coarse = solve_model(&model, &Grid::uniform_1d(-3.0, 3.0, 101).unwrap()).unwrap();
        let fine = solve_model(&model, &Grid::uniform_1d(-3.0, 3.0, 201).unwrap()).unwrap();
        assert!((coarse.z_avg - fine.z_avg).abs() / fine.z_avg < 0.01);
    }

    #[test]
    fn policy_points_downhill() {
        let g = Grid::uniform_1d(-3.0, 3.0, 201).unwrap();
        let sol = solve_model(&model_1d(0.5, quadratic), &g).unwrap();
        for (k, u) in sol.policy.iter().enumerate() {
            let x = g.point(k)[0];
            if x.abs() > 0.05 {
                assert!(u[0] * x < 0.0, "x = {x}, u = {}", u[0]);
            }
        }
    }

    #[test]
    fn zero_cost_simulation_is_free() {
        let g = Grid::uniform_1d(-3.0, 3.0, 61).unwrap();
        let model = model_1d(0.5, |_| 0.0);
        let sol = solve_model(&model, &g).unwrap();
        let settings = EpisodeSettings { episodes: 5, horizon: 100, burn_in: 0, seed: 1 };
        let r = oracle_policy_and_cost(&sol, &model, &g, settings).unwrap();
        assert!(r.cost_per_step < 1e-6);
    }

    #[test]
    fn csv_has_one_row_per_node() {
        let g = Grid::uniform_1d(-1.0, 1.0, 5).unwrap();
        let sol = solve_model(&model_1d(0.5, quadratic), &g).unwrap();
        let mut buf = Vec::new();
        sol.write_csv(&g, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert!(text.starts_with("x0,z,v,u0\n"));
    }
}
