//! Freeway-merge domain: the three-car relative state, its state cost, the
//! input gain of the merging car and the passive-sample construction.
//!
//! Car-0 is the merging (ego) car, Car-1 the leader and Car-2 the follower of
//! the gap it targets. Positions are front bumpers along the road axis.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lmdp::LmdpModel;
use crate::pac::{TrainConfig, TransitionSample};

/// Plausibility bounds used when validating states.
pub const MAX_ABS_DISTANCE: f64 = 500.0;
pub const MAX_ABS_SPEED: f64 = 50.0;

/// Default time step (s).
pub const DEFAULT_DT: f64 = 0.1;

/// Minimum bumper-to-bumper clearance (m) to leader and follower at lane-change completion.
pub const MIN_MERGE_GAP: f64 = 2.0;
/// Largest speed difference (m/s) to the leader accepted at completion.
pub const MAX_MERGE_SPEED_DIFF: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThreeCarState {
    /// Follower position relative to leader (m); negative when the follower is behind.
    pub dx12: f64,
    /// Follower velocity relative to leader (m/s).
    pub dv12: f64,
    /// Ego position relative to leader (m).
    pub dx10: f64,
    /// Ego velocity relative to leader (m/s).
    pub dv10: f64,
}

impl ThreeCarState {
    pub const DIM: usize = 4;

    pub fn new(dx12: f64, dv12: f64, dx10: f64, dv10: f64) -> Result<Self> {
        let s = Self { dx12, dv12, dx10, dv10 };
        s.validate()?;
        Ok(s)
    }

    /// From absolute leader, follower and ego kinematics `(position, velocity)`.
    pub fn from_kinematics(leader: (f64, f64), follower: (f64, f64), ego: (f64, f64)) -> Self {
        Self {
            dx12: follower.0 - leader.0,
            dv12: follower.1 - leader.1,
            dx10: ego.0 - leader.0,
            dv10: ego.1 - leader.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.to_array();
        if let Some(i) = v.iter().position(|c| !c.is_finite()) {
            return Err(Error::numeric_at("three-car state", i));
        }
        if self.dx12.abs() > MAX_ABS_DISTANCE || self.dx10.abs() > MAX_ABS_DISTANCE {
            return Err(Error::Argument(format!("distance outside +-{MAX_ABS_DISTANCE} m: {self:?}")));
        }
        if self.dv12.abs() > MAX_ABS_SPEED || self.dv10.abs() > MAX_ABS_SPEED {
            return Err(Error::Argument(format!("relative speed outside +-{MAX_ABS_SPEED} m/s: {self:?}")));
        }
        Ok(())
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.dx12, self.dv12, self.dx10, self.dv10]
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.to_array().to_vec()
    }

    pub fn from_slice(x: &[f64]) -> Result<Self> {
        match x {
            [a, b, c, d] => Ok(Self { dx12: *a, dv12: *b, dx10: *c, dv10: *d }),
            _ => Err(Error::Argument(format!("three-car state needs 4 components, got {}", x.len()))),
        }
    }

    /// Ego strictly between leader and follower.
    pub fn in_gap(&self) -> bool {
        self.dx12 < self.dx10 && self.dx10 < 0.0
    }

    /// Distance of the ego from the gap midpoint (m).
    pub fn midpoint_offset(&self) -> f64 {
        self.dx10 - 0.5 * self.dx12
    }
}

/// Which distance divides `dx10` in the gap-position term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GapDenominator {
    /// `(1 - 2 dx10/dx12)^2`: zero at the gap midpoint.
    Dx12,
    /// `(1 - 2 dx10/dx10)^2`, which is identically 1.
    Dx10,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostWeights {
    /// `(k1, k2, k3)` while the ego is inside the gap.
    pub in_gap: [f64; 3],
    /// `(k1, k2, k3)` otherwise.
    pub out_of_gap: [f64; 3],
    pub denominator: GapDenominator,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self { in_gap: [1.0, 10.0, 10.0], out_of_gap: [10.0, 10.0, 0.0], denominator: GapDenominator::Dx12 }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<()> {
        if self.in_gap.iter().chain(&self.out_of_gap).any(|k| !(k.is_finite() && *k >= 0.0)) {
            return Err(Error::Config("cost weights must be finite and nonnegative".into()));
        }
        Ok(())
    }

    /// Largest cost any state can incur.
    pub fn max_cost(&self) -> f64 {
        self.in_gap[0].max(self.out_of_gap[0])
    }
}

/// `q(x) = k1 - k1 exp(-k2 (1 - 2 dx10/dx12)^2 - k3 dv12^2)` with the in-gap
/// weights when `dx12 < dx10 < 0` and the out-of-gap weights otherwise.
pub fn state_cost(x: &ThreeCarState, w: &CostWeights) -> Result<f64> {
    let denom = match w.denominator {
        GapDenominator::Dx12 => x.dx12,
        GapDenominator::Dx10 => x.dx10,
    };
    if denom == 0.0 {
        return Err(Error::DegenerateGap);
    }
    let [k1, k2, k3] = if x.in_gap() { w.in_gap } else { w.out_of_gap };
    let r = 1.0 - 2.0 * x.dx10 / denom;
    let q = k1 - k1 * (-k2 * r * r - k3 * x.dv12 * x.dv12).exp();
    if !q.is_finite() {
        return Err(Error::numeric("merge state cost"));
    }
    Ok(q.max(0.0))
}

/// `B = [0, 0, 0, 1]'`: ego acceleration only changes `dv10`.
pub fn input_gain() -> DMatrix<f64> {
    DMatrix::from_column_slice(4, 1, &[0.0, 0.0, 0.0, 1.0])
}

/// Training setup for the merge value function. Merge values span a much
/// wider range than the 1-D benchmark, so the network rate is lower and
/// the actor rate lower still: the actor curvature grows with `|dV/dx|^4`.
pub fn train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        iterations: 120_000,
        batch_size: 64,
        seed,
        rate_z_avg: 0.01,
        rate_net: 0.001,
        rate_actor: 3e-5,
        s_init: 0.1,
        ..TrainConfig::default()
    }
}

/// Learner-side model of the merge: known input gain and state cost, no
/// drift or noise.
pub fn merging_model(dt: f64, weights: CostWeights) -> Result<LmdpModel> {
    weights.validate()?;
    LmdpModel::new(input_gain(), dt, move |x| match ThreeCarState::from_slice(x) {
        Ok(s) => state_cost(&s, &weights).unwrap_or(f64::NAN),
        Err(_) => f64::NAN,
    })
}

/// Removes the recorded control from a recorded transition:
/// `x'_passive = x'_recorded - B u dt`.
pub fn make_passive_sample(
    x: &ThreeCarState,
    x_next_recorded: &ThreeCarState,
    u_recorded: f64,
    dt: f64,
    w: &CostWeights,
) -> Result<TransitionSample> {
    if !u_recorded.is_finite() || !(dt > 0.0) {
        return Err(Error::Argument("recorded control and dt must be finite, dt positive".into()));
    }
    let mut next = *x_next_recorded;
    next.dv10 -= u_recorded * dt;
    TransitionSample::new(x.to_vec(), next.to_vec(), state_cost(x, w)?)
}

/// Re-applies a control to a passive sample, inverting [`make_passive_sample`].
pub fn controlled_next(sample: &TransitionSample, u: f64, dt: f64) -> Result<ThreeCarState> {
    let mut next = ThreeCarState::from_slice(&sample.x_next)?;
    next.dv10 += u * dt;
    Ok(next)
}

/// Longitudinal body of a vehicle: front-bumper position, speed, length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Body {
    pub position: f64,
    pub velocity: f64,
    pub length: f64,
}

impl Body {
    pub fn rear(&self) -> f64 {
        self.position - self.length
    }
}

/// Clearances of the ego within its target gap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapClearance {
    /// Leader rear bumper minus ego front bumper.
    pub front: f64,
    /// Ego rear bumper minus follower front bumper.
    pub rear: f64,
    /// Ego speed minus leader speed.
    pub leader_dv: f64,
}

impl GapClearance {
    pub fn measure(ego: &Body, leader: &Body, follower: &Body) -> Self {
        Self {
            front: leader.rear() - ego.position,
            rear: ego.rear() - follower.position,
            leader_dv: ego.velocity - leader.velocity,
        }
    }
}

/// Merge outcome test applied at lane-change completion: the ego sits inside
/// its gap with at least [`MIN_MERGE_GAP`] to both neighbours and a speed
/// within [`MAX_MERGE_SPEED_DIFF`] of the leader.
pub fn merge_success(c: &GapClearance) -> bool {
    c.front >= MIN_MERGE_GAP && c.rear >= MIN_MERGE_GAP && c.leader_dv.abs() <= MAX_MERGE_SPEED_DIFF
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn w() -> CostWeights {
        CostWeights::default()
    }

    #[test]
    fn midpoint_at_matched_speed_is_free() {
        let x = ThreeCarState::new(-20.0, 0.0, -10.0, 0.3).unwrap();
        assert_eq!(state_cost(&x, &w()).unwrap(), 0.0);
    }

    #[test]
    fn speed_mismatch_cost() {
        let x = ThreeCarState::new(-20.0, 1.0, -10.0, 0.0).unwrap();
        assert!((state_cost(&x, &w()).unwrap() - (1.0 - (-10f64).exp())).abs() < 1e-12);
        assert!((state_cost(&x, &w()).unwrap() - 0.9999546).abs() < 1e-7);
    }

    #[test]
    fn off_centre_cost() {
        let x = ThreeCarState::new(-20.0, 0.0, -18.0, 0.0).unwrap();
        let q = state_cost(&x, &w()).unwrap();
        assert!((q - (1.0 - (-6.4f64).exp())).abs() < 1e-12);
        assert!((q - 0.99834).abs() < 1e-5);
    }

    #[test]
    fn out_of_gap_uses_high_plateau() {
        // ego ahead of the leader
        let x = ThreeCarState::new(-20.0, 0.0, 5.0, 0.0).unwrap();
        let q = state_cost(&x, &w()).unwrap();
        assert!(q > 9.99 && q <= 10.0);
    }

    #[test]
    fn degenerate_gap_rejected() {
        let x = ThreeCarState { dx12: 0.0, dv12: 0.0, dx10: -1.0, dv10: 0.0 };
        assert!(matches!(state_cost(&x, &w()), Err(Error::DegenerateGap)));
    }

    #[test]
    fn printed_denominator_makes_position_term_constant() {
        let wp = CostWeights { denominator: GapDenominator::Dx10, ..w() };
        let a = state_cost(&ThreeCarState::new(-20.0, 0.0, -10.0, 0.0).unwrap(), &wp).unwrap();
        let b = state_cost(&ThreeCarState::new(-20.0, 0.0, -3.0, 0.0).unwrap(), &wp).unwrap();
        assert_eq!(a, b);
        assert!((a - (1.0 - (-10f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn input_gain_moves_only_relative_speed() {
        let b = input_gain();
        let dt = 0.1;
        let x = [-20.0, 0.5, -8.0, 1.0];
        let next: Vec<f64> = (0..4).map(|i| x[i] + b[(i, 0)] * 1.0 * dt).collect();
        assert_eq!(&next[..3], &x[..3]);
        assert!((next[3] - 1.1).abs() < 1e-15);
    }

    #[test]
    fn passive_sample_removes_control() {
        let x = ThreeCarState::new(-20.0, 0.0, -8.0, 1.0).unwrap();
        let rec = ThreeCarState::new(-20.0, 0.0, -7.9, 1.3).unwrap();
        let s = make_passive_sample(&x, &rec, 2.0, 0.1, &w()).unwrap();
        assert!((s.x_next[3] - 1.1).abs() < 1e-12);
        assert_eq!(&s.x_next[..3], &rec.to_vec()[..3]);
        let same = make_passive_sample(&x, &rec, 0.0, 0.1, &w()).unwrap();
        assert_eq!(same.x_next, rec.to_vec());
    }

    #[test]
    fn merge_success_thresholds() {
        let leader = Body { position: 30.0, velocity: 5.0, length: 5.0 };
        let follower = Body { position: 0.0, velocity: 5.0, length: 5.0 };
        let mid = Body { position: 17.5, velocity: 5.0, length: 5.0 };
        let c = GapClearance::measure(&mid, &leader, &follower);
        assert_eq!((c.front, c.rear), (7.5, 12.5));
        assert!(merge_success(&c));
        let tight = Body { position: 6.0, velocity: 5.0, length: 5.0 };
        assert!(!merge_success(&GapClearance::measure(&tight, &leader, &follower)));
        let fast = Body { velocity: 8.5, ..mid };
        assert!(!merge_success(&GapClearance::measure(&fast, &leader, &follower)));
    }

    #[test]
    fn model_uses_merge_cost() {
        let m = merging_model(0.1, w()).unwrap();
        assert_eq!(m.state_dim(), 4);
        assert_eq!(m.state_cost(&[-20.0, 0.0, -10.0, 0.0]).unwrap(), 0.0);
        assert!(m.state_cost(&[0.0, 0.0, -1.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn cost_is_bounded(dx12 in -200.0f64..-0.5, dv12 in -10.0f64..10.0, dx10 in -250.0f64..50.0, dv10 in -10.0f64..10.0) {
            let x = ThreeCarState::new(dx12, dv12, dx10, dv10).unwrap();
            let wt = w();
            let q = state_cost(&x, &wt).unwrap();
            let k1 = if x.in_gap() { wt.in_gap[0] } else { wt.out_of_gap[0] };
            prop_assert!((0.0..=k1).contains(&q));
            if q == 0.0 {
                prop_assert!(x.in_gap());
            }
        }

        #[test]
        fn passive_round_trip(dx12 in -100.0f64..-1.0, dv12 in -5.0f64..5.0, dx10 in -100.0f64..10.0, dv10 in -5.0f64..5.0, u in -4.0f64..3.0) {
            let x = ThreeCarState::new(dx12, dv12, dx10, dv10).unwrap();
            let rec = ThreeCarState::new(dx12 + 0.1, dv12, dx10 + dv10 * 0.1, dv10 + 0.3).unwrap();
            let s = make_passive_sample(&x, &rec, u, 0.1, &w()).unwrap();
            let back = controlled_next(&s, u, 0.1).unwrap();
            prop_assert!((back.dv10 - rec.dv10).abs() <= 1e-12 * (1.0 + rec.dv10.abs()));
            prop_assert_eq!(back.dx10, rec.dx10);
        }

        #[test]
        fn cost_continuous_in_gap(dx12 in -60.0f64..-5.0, frac in 0.05f64..0.95, dv12 in -2.0f64..2.0) {
            let wt = w();
            let dx10 = frac * dx12;
            let a = state_cost(&ThreeCarState::new(dx12, dv12, dx10, 0.0).unwrap(), &wt).unwrap();
            let b = state_cost(&ThreeCarState::new(dx12, dv12, dx10 + 1e-7, 0.0).unwrap(), &wt).unwrap();
            prop_assert!((a - b).abs() < 1e-4);
        }
    }
}
