//! Linearly-solvable MDP primitives.
//!
//! Dynamics follow the controlled diffusion
//!
//! ```text
//! x' = x + A(x) dt + B u dt + diag(sigma) dw,    dw ~ N(0, I dt)
//! ```
//!
//! where the control enters additively through a constant input gain `B`.
//! The action cost is the KL divergence between controlled and passive
//! transition densities, which for this Gaussian family is
//! `0.5 u' R^-1 u dt` with `R^-1 = B' diag(sigma)^-2 B`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type StateCostFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type DriftFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// Symmetry tolerance used when validating user supplied matrices.
const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Clone)]
pub struct LmdpModel {
    state_dim: usize,
    control_dim: usize,
    dt: f64,
    input_gain: DMatrix<f64>,
    noise_level: Option<Vec<f64>>,
    state_cost: StateCostFn,
    passive_drift: Option<DriftFn>,
}

impl fmt::Debug for LmdpModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LmdpModel")
            .field("state_dim", &self.state_dim)
            .field("control_dim", &self.control_dim)
            .field("dt", &self.dt)
            .field("input_gain", &self.input_gain)
            .field("noise_level", &self.noise_level)
            .field("has_drift", &self.passive_drift.is_some())
            .finish()
    }
}

impl LmdpModel {
    /// Builds a model from its input gain and state cost. `B` must be n x m
    /// with full column rank.
    pub fn new<F>(input_gain: DMatrix<f64>, dt: f64, state_cost: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Config(format!("time step must be positive, got {dt}")));
        }
        let (n, m) = input_gain.shape();
        if n == 0 || m == 0 {
            return Err(Error::Config("input gain must be non-empty".into()));
        }
        if m > n {
            return Err(Error::Config(format!("input gain is {n}x{m}; needs m <= n")));
        }
        if input_gain.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("input gain has non-finite entries".into()));
        }
        let sv = input_gain.clone().svd(false, false).singular_values;
        let smax = sv.max();
        let smin = sv.min();
        if smin <= smax * 1e-12 || smax == 0.0 {
            return Err(Error::Config("input gain must have full column rank".into()));
        }
        Ok(Self {
            state_dim: n,
            control_dim: m,
            dt,
            input_gain,
            noise_level: None,
            state_cost: Arc::new(state_cost),
            passive_drift: None,
        })
    }

    pub fn with_noise(mut self, sigma: Vec<f64>) -> Result<Self> {
        if sigma.len() != self.state_dim {
            return Err(Error::Config(format!(
                "noise level has {} entries, state has {}",
                sigma.len(),
                self.state_dim
            )));
        }
        if sigma.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::Config("noise levels must be finite and nonnegative".into()));
        }
        self.noise_level = Some(sigma);
        Ok(self)
    }

    pub fn with_drift<F>(mut self, drift: F) -> Self
    where
        F: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        self.passive_drift = Some(Arc::new(drift));
        self
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn input_gain(&self) -> &DMatrix<f64> {
        &self.input_gain
    }

    pub fn noise_level(&self) -> Option<&[f64]> {
        self.noise_level.as_deref()
    }

    pub fn has_drift(&self) -> bool {
        self.passive_drift.is_some()
    }

    /// State cost q(x). Non-finite or negative values are reported as errors
    /// since the cost handle is user supplied.
    pub fn state_cost(&self, x: &[f64]) -> Result<f64> {
        let q = (self.state_cost)(x);
        if !q.is_finite() {
            return Err(Error::numeric("state cost"));
        }
        if q < 0.0 {
            return Err(Error::Argument(format!("state cost must be nonnegative, got {q}")));
        }
        Ok(q)
    }

    pub fn drift(&self, x: &[f64]) -> Result<Vec<f64>> {
        let drift = self.passive_drift.as_ref().ok_or_else(|| Error::Config("model has no passive drift".into()))?;
        let a = drift(x);
        if a.len() != self.state_dim {
            return Err(Error::Config(format!("drift returned {} components, expected {}", a.len(), self.state_dim)));
        }
        Ok(a)
    }

    /// `R^-1 = B' diag(sigma)^-2 B` for this model's noise level.
    pub fn r_inv(&self) -> Result<DMatrix<f64>> {
        let sigma = self.noise_level.as_ref().ok_or_else(|| Error::Config("model has no noise level".into()))?;
        r_inv_from_noise(&self.input_gain, sigma)
    }
}

/// A value together with its exponential transform `z = exp(-v)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValuePair {
    pub v: f64,
    pub z: f64,
}

impl ValuePair {
    pub fn from_v(v: f64) -> Self {
        Self { v, z: z_from_v(v) }
    }

    pub fn from_z(z: f64) -> Result<Self> {
        Ok(Self { v: v_from_z(z)?, z })
    }
}

pub fn z_from_v(v: f64) -> f64 {
    (-v).exp()
}

pub fn v_from_z(z: f64) -> Result<f64> {
    if !(z > 0.0) || !z.is_finite() {
        return Err(Error::Argument(format!("z must be positive and finite, got {z}")));
    }
    Ok(-z.ln())
}

/// One Euler-Maruyama step. `noise` holds standard normal draws; the Brownian
/// increment is `noise * sqrt(dt)`.
pub fn step_dynamics(model: &LmdpModel, x: &[f64], u: &[f64], noise: &[f64]) -> Result<Vec<f64>> {
    let n = model.state_dim;
    let m = model.control_dim;
    if x.len() != n || noise.len() != n || u.len() != m {
        return Err(Error::Argument(format!(
            "step_dynamics expects x:{n}, u:{m}, noise:{n}; got {}, {}, {}",
            x.len(),
            u.len(),
            noise.len()
        )));
    }
    let sigma = model.noise_level.as_ref().ok_or_else(|| Error::Config("step_dynamics needs a noise level".into()))?;
    let a = model.drift(x)?;
    let dt = model.dt;
    let sq = dt.sqrt();
    let b = &model.input_gain;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut bu = 0.0;
        for j in 0..m {
            bu += b[(i, j)] * u[j];
        }
        let v = x[i] + a[i] * dt + bu * dt + sigma[i] * noise[i] * sq;
        if !v.is_finite() {
            return Err(Error::numeric_at("step_dynamics", i));
        }
        out.push(v);
    }
    Ok(out)
}

fn check_spd(mat: &DMatrix<f64>, what: &str) -> Result<()> {
    if !mat.is_square() {
        return Err(Error::Argument(format!("{what} must be square")));
    }
    let n = mat.nrows();
    for i in 0..n {
        for j in 0..i {
            let (a, b) = (mat[(i, j)], mat[(j, i)]);
            if (a - b).abs() > SYMMETRY_TOL * (1.0 + a.abs().max(b.abs())) {
                return Err(Error::Argument(format!("{what} is not symmetric")));
            }
        }
    }
    if mat.clone().cholesky().is_none() {
        return Err(Error::Argument(format!("{what} is not positive definite")));
    }
    Ok(())
}

/// KL control cost `0.5 u' R^-1 u dt`.
pub fn kl_control_cost(u: &[f64], r_inv: &DMatrix<f64>, dt: f64) -> Result<f64> {
    check_spd(r_inv, "R^-1")?;
    if u.len() != r_inv.nrows() {
        return Err(Error::Argument(format!(
            "action has {} entries, R^-1 is {}x{}",
            u.len(),
            r_inv.nrows(),
            r_inv.ncols()
        )));
    }
    Ok(quad_form(r_inv, u) * 0.5 * dt)
}

/// `u' M u` without validation; used on hot paths after a one-off check.
pub(crate) fn quad_form(mat: &DMatrix<f64>, u: &[f64]) -> f64 {
    let m = u.len();
    let mut acc = 0.0;
    for i in 0..m {
        for j in 0..m {
            acc += u[i] * mat[(i, j)] * u[j];
        }
    }
    acc
}

pub fn r_inv_from_noise(b: &DMatrix<f64>, sigma: &[f64]) -> Result<DMatrix<f64>> {
    let (n, m) = b.shape();
    if sigma.len() != n {
        return Err(Error::Argument(format!("sigma has {} entries, B has {n} rows", sigma.len())));
    }
    if let Some(i) = sigma.iter().position(|s| *s == 0.0) {
        return Err(Error::Singular(format!("noise level sigma[{i}] is zero")));
    }
    if sigma.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::Argument("noise levels must be positive".into()));
    }
    let w = DVector::from_iterator(n, sigma.iter().map(|s| 1.0 / (s * s)));
    let mut out = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            let mut acc = 0.0;
            for k in 0..n {
                acc += b[(k, i)] * w[k] * b[(k, j)];
            }
            out[(i, j)] = acc;
            out[(j, i)] = acc;
        }
    }
    Ok(out)
}

/// Optimal L-MDP action `-S B' dV/dx`.
pub fn optimal_action(s: &DMatrix<f64>, b: &DMatrix<f64>, grad_v: &[f64]) -> Result<Vec<f64>> {
    let (n, m) = b.shape();
    if s.shape() != (m, m) || grad_v.len() != n {
        return Err(Error::Argument(format!(
            "optimal_action: S is {:?}, B is {n}x{m}, grad has {}",
            s.shape(),
            grad_v.len()
        )));
    }
    let g = project_gradient(b, grad_v);
    Ok(apply_neg_s(s, &g))
}

/// `B' v` for an n-vector v.
pub(crate) fn project_gradient(b: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    let (n, m) = b.shape();
    (0..m).map(|j| (0..n).map(|i| b[(i, j)] * v[i]).sum()).collect()
}

/// `-S g`.
pub(crate) fn apply_neg_s(s: &DMatrix<f64>, g: &[f64]) -> Vec<f64> {
    let m = g.len();
    (0..m).map(|i| -(0..m).map(|j| s[(i, j)] * g[j]).sum::<f64>()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn scalar_model(dt: f64, sigma: f64) -> LmdpModel {
        LmdpModel::new(DMatrix::from_element(1, 1, 1.0), dt, |x| x[0] * x[0])
            .unwrap()
            .with_noise(vec![sigma])
            .unwrap()
            .with_drift(|x| vec![-x[0]])
    }

    #[test]
    fn fixed_point_of_zero_drift() {
        let model = LmdpModel::new(DMatrix::identity(2, 1), 0.1, |_| 0.0)
            .unwrap()
            .with_noise(vec![1.0, 1.0])
            .unwrap()
            .with_drift(|_| vec![0.0, 0.0]);
        let out = step_dynamics(&model, &[0.0, 0.0], &[0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn euler_step() {
        let model = scalar_model(0.1, 0.5);
        let out = step_dynamics(&model, &[2.0], &[0.0], &[0.0]).unwrap();
        assert!((out[0] - 1.8).abs() < 1e-15);
    }

    #[test]
    fn noise_covariance_matches_brownian_increment() {
        let model = LmdpModel::new(DMatrix::from_element(1, 1, 1.0), 0.1, |_| 0.0)
            .unwrap()
            .with_noise(vec![0.5])
            .unwrap()
            .with_drift(|_| vec![0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| {
                let xi: f64 = rng.sample(StandardNormal);
                step_dynamics(&model, &[0.0], &[0.0], &[xi]).unwrap()[0]
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var - 0.025).abs() / 0.025 < 0.05, "var = {var}");
    }

    #[test]
    fn step_requires_drift_and_noise() {
        let bare = LmdpModel::new(DMatrix::from_element(1, 1, 1.0), 0.1, |_| 0.0).unwrap();
        assert!(matches!(step_dynamics(&bare, &[0.0], &[0.0], &[0.0]), Err(Error::Config(_))));
        let noisy = bare.clone().with_noise(vec![1.0]).unwrap();
        assert!(matches!(step_dynamics(&noisy, &[0.0], &[0.0], &[0.0]), Err(Error::Config(_))));
    }

    #[test]
    fn non_finite_step_reports_component() {
        let model = LmdpModel::new(DMatrix::identity(2, 1), 0.1, |_| 0.0)
            .unwrap()
            .with_noise(vec![1.0, 1.0])
            .unwrap()
            .with_drift(|_| vec![0.0, f64::INFINITY]);
        match step_dynamics(&model, &[0.0, 0.0], &[0.0], &[0.0, 0.0]) {
            Err(Error::Numeric { index: Some(1), .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rank_deficient_gain_rejected() {
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(LmdpModel::new(b, 0.1, |_| 0.0).is_err());
        assert!(LmdpModel::new(DMatrix::from_element(1, 1, 1.0), 0.0, |_| 0.0).is_err());
    }

    #[test]
    fn kl_cost_values() {
        let r = DMatrix::from_element(1, 1, 1.0);
        assert_eq!(kl_control_cost(&[0.0], &r, 0.1).unwrap(), 0.0);
        assert!((kl_control_cost(&[1.0], &r, 0.1).unwrap() - 0.05).abs() < 1e-15);
        let not_pd = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(kl_control_cost(&[1.0, 0.0], &not_pd, 0.1), Err(Error::Argument(_))));
    }

    #[test]
    fn r_inv_examples() {
        let b = DMatrix::from_column_slice(4, 1, &[0.0, 0.0, 0.0, 1.0]);
        let r = r_inv_from_noise(&b, &[1.0, 1.0, 1.0, 0.5]).unwrap();
        assert!((r[(0, 0)] - 4.0).abs() < 1e-15);

        let r = r_inv_from_noise(&DMatrix::identity(2, 2), &[1.0, 2.0]).unwrap();
        assert_eq!(r, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.25]));

        assert!(matches!(r_inv_from_noise(&DMatrix::identity(2, 2), &[1.0, 0.0]), Err(Error::Singular(_))));
    }

    #[test]
    fn optimal_action_examples() {
        let b = DMatrix::from_column_slice(4, 1, &[0.0, 0.0, 0.0, 1.0]);
        let s = DMatrix::from_element(1, 1, 2.0);
        assert_eq!(optimal_action(&s, &b, &[0.0; 4]).unwrap(), vec![0.0]);
        assert_eq!(optimal_action(&s, &b, &[5.0, -1.0, 7.0, 3.0]).unwrap(), vec![-6.0]);
        assert!(optimal_action(&s, &b, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn value_pair_round_trip() {
        let p = ValuePair::from_v(3.5);
        let q = ValuePair::from_z(p.z).unwrap();
        assert!((q.v - 3.5).abs() < 1e-12);
        assert!(ValuePair::from_z(0.0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn kl_cost_is_even(u in prop::collection::vec(-10.0f64..10.0, 3), d in prop::collection::vec(0.1f64..5.0, 3)) {
                let r = DMatrix::from_diagonal(&DVector::from_vec(d));
                let neg: Vec<f64> = u.iter().map(|v| -v).collect();
                let a = kl_control_cost(&u, &r, 0.1).unwrap();
                let b = kl_control_cost(&neg, &r, 0.1).unwrap();
                prop_assert!(a >= 0.0);
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a));
            }

            #[test]
            fn z_v_round_trip(v in -20.0f64..20.0) {
                let back = v_from_z(z_from_v(v)).unwrap();
                prop_assert!((back - v).abs() <= 1e-12);
            }

            #[test]
            fn r_inv_symmetric_positive(entries in prop::collection::vec(-2.0f64..2.0, 8), sig in prop::collection::vec(0.1f64..2.0, 4)) {
                let b = DMatrix::from_column_slice(4, 2, &entries);
                let sv = b.clone().svd(false, false).singular_values;
                prop_assume!(sv.min() > 1e-3);
                let r = r_inv_from_noise(&b, &sig).unwrap();
                prop_assert!((r[(0, 1)] - r[(1, 0)]).abs() <= 1e-12);
                let eig = r.clone().symmetric_eigen().eigenvalues;
                prop_assert!(eig.iter().all(|e| *e > 0.0));
                // independent route: explicit matrix product
                let w = DMatrix::from_diagonal(&DVector::from_iterator(4, sig.iter().map(|s| 1.0 / (s * s))));
                let brute = b.transpose() * w * &b;
                prop_assert!((brute - r).abs().max() <= 1e-10);
            }

            #[test]
            fn control_enters_additively(x in -5.0f64..5.0, u in -3.0f64..3.0, xi in -3.0f64..3.0) {
                let model = scalar_model(0.1, 0.5);
                let a = step_dynamics(&model, &[x], &[u], &[xi]).unwrap()[0];
                let b = step_dynamics(&model, &[x], &[0.0], &[xi]).unwrap()[0];
                prop_assert!((a - b - u * 0.1).abs() <= 1e-12);
            }
        }
    }
}
