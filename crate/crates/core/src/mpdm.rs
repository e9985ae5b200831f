//! Multipolicy merge-spot selection.
//!
//! Each candidate gap between consecutive mainline vehicles defines a
//! three-car state; all candidates are scored by one learned value function
//! and the gap with the lowest value is pursued with the learned policy.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::merging::{input_gain, Body, ThreeCarState};
use crate::network::ValueFunction;
use crate::pac::PacState;

/// Acceleration limits applied to the commanded action (m/s^2).
pub const MIN_ACCEL: f64 = -4.0;
pub const MAX_ACCEL: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MainlineVehicle {
    pub id: u32,
    pub body: Body,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub timestamp: f64,
    pub ego: Body,
    /// Ordered front to rear.
    pub mainline: Vec<MainlineVehicle>,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        let finite = |b: &Body| b.position.is_finite() && b.velocity.is_finite() && b.length.is_finite();
        if !self.timestamp.is_finite() || !finite(&self.ego) || !self.mainline.iter().all(|v| finite(&v.body)) {
            return Err(Error::Argument("scene has non-finite entries".into()));
        }
        if self.mainline.windows(2).any(|w| w[0].body.position <= w[1].body.position) {
            return Err(Error::Argument("mainline must be strictly ordered front to rear".into()));
        }
        Ok(())
    }

    pub fn vehicle(&self, id: u32) -> Option<&MainlineVehicle> {
        self.mainline.iter().find(|v| v.id == id)
    }
}

/// One side of a gap: a mainline vehicle or a virtual placeholder beyond the platoon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GapEnd {
    Vehicle(u32),
    /// Open road ahead of the first mainline vehicle.
    VirtualLeader,
    /// Open road behind the last mainline vehicle.
    VirtualFollower,
}

impl GapEnd {
    pub fn label(&self) -> String {
        match self {
            GapEnd::Vehicle(id) => id.to_string(),
            GapEnd::VirtualLeader => "open-ahead".into(),
            GapEnd::VirtualFollower => "open-behind".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpotCandidate {
    /// 1-based, front to rear.
    pub spot: usize,
    pub leader: GapEnd,
    pub follower: GapEnd,
    pub state: ThreeCarState,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpotOptions {
    /// Gap midpoints must lie within this distance of the projected ego position (m).
    pub window: f64,
    pub max_candidates: usize,
    /// The ego position is projected this far ahead at its current speed (s).
    pub projection_time: f64,
    /// Distance of the virtual leader/follower from the platoon ends (m).
    pub virtual_offset: f64,
    pub vehicle_length: f64,
}

impl Default for SpotOptions {
    fn default() -> Self {
        Self { window: 60.0, max_candidates: 3, projection_time: 0.0, virtual_offset: 100.0, vehicle_length: 4.5 }
    }
}

impl SpotOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.window > 0.0)
            || self.max_candidates == 0
            || !(self.virtual_offset > 0.0)
            || self.projection_time < 0.0
        {
            return Err(Error::Config("spot options need positive window, count and offset".into()));
        }
        Ok(())
    }
}

/// Kinematics of a gap end; virtual ends travel at ego speed.
pub fn gap_end_body(scene: &Scene, end: GapEnd, opts: &SpotOptions) -> Option<Body> {
    let length = opts.vehicle_length;
    match end {
        GapEnd::Vehicle(id) => scene.vehicle(id).map(|v| v.body),
        GapEnd::VirtualLeader => scene.mainline.first().map(|v| Body {
            position: v.body.position + opts.virtual_offset,
            velocity: scene.ego.velocity,
            length,
        }),
        GapEnd::VirtualFollower => scene.mainline.last().map(|v| Body {
            position: v.body.position - opts.virtual_offset,
            velocity: scene.ego.velocity,
            length,
        }),
    }
}

/// Three-car state of the gap between `leader` and `follower`, or `None`
/// when either vehicle is no longer in the scene.
pub fn gap_state(scene: &Scene, leader: GapEnd, follower: GapEnd, opts: &SpotOptions) -> Option<ThreeCarState> {
    let l = gap_end_body(scene, leader, opts)?;
    let f = gap_end_body(scene, follower, opts)?;
    Some(ThreeCarState::from_kinematics(
        (l.position, l.velocity),
        (f.position, f.velocity),
        (scene.ego.position, scene.ego.velocity),
    ))
}

/// Candidate gaps near the ego, numbered front to rear.
pub fn enumerate_spots(scene: &Scene, opts: &SpotOptions) -> Result<Vec<SpotCandidate>> {
    scene.validate()?;
    opts.validate()?;
    if scene.mainline.is_empty() {
        return Ok(Vec::new());
    }
    let mut ends = vec![GapEnd::VirtualLeader];
    ends.extend(scene.mainline.iter().map(|v| GapEnd::Vehicle(v.id)));
    ends.push(GapEnd::VirtualFollower);
    let projected = scene.ego.position + scene.ego.velocity * opts.projection_time;
    let mut pairs: Vec<(f64, usize, GapEnd, GapEnd)> = Vec::new();
    for (k, w) in ends.windows(2).enumerate() {
        let (Some(l), Some(f)) = (gap_end_body(scene, w[0], opts), gap_end_body(scene, w[1], opts)) else {
            continue;
        };
        let distance = (0.5 * (l.position + f.position) - projected).abs();
        if distance <= opts.window {
            pairs.push((distance, k, w[0], w[1]));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    pairs.truncate(opts.max_candidates);
    pairs.sort_by_key(|p| p.1);
    pairs
        .into_iter()
        .enumerate()
        .map(|(i, (_, _, leader, follower))| {
            let state = gap_state(scene, leader, follower, opts).expect("gap ends resolved above");
            Ok(SpotCandidate { spot: i + 1, leader, follower, state })
        })
        .collect()
}

/// Scores every candidate with `V` and returns the index of the lowest score
/// together with all scores.
pub fn select_policy<V: ValueFunction + ?Sized>(candidates: &[SpotCandidate], value: &V) -> Result<(usize, Vec<f64>)> {
    if candidates.is_empty() {
        return Err(Error::Selection("no candidate spots".into()));
    }
    let scores = candidates.iter().map(|c| value.value(&c.state.to_vec())).collect::<Result<Vec<_>>>()?;
    let best = select_by_scores(candidates, &scores)?;
    Ok((best, scores))
}

/// Argmin over precomputed scores; ties go to the candidate nearest its gap
/// midpoint, then to the lowest spot number.
pub fn select_by_scores(candidates: &[SpotCandidate], scores: &[f64]) -> Result<usize> {
    if candidates.is_empty() || candidates.len() != scores.len() {
        return Err(Error::Selection("scores and candidates differ in number".into()));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Selection(format!("candidate {} has an undefined score", candidates[i].spot)));
    }
    let key = |i: usize| (scores[i], candidates[i].state.midpoint_offset().abs(), candidates[i].spot);
    let best = (0..candidates.len())
        .min_by(|&a, &b| {
            let (sa, ma, pa) = key(a);
            let (sb, mb, pb) = key(b);
            sa.total_cmp(&sb).then(ma.total_cmp(&mb)).then(pa.cmp(&pb)).then(Ordering::Equal)
        })
        .expect("nonempty");
    Ok(best)
}

/// Learned action `-S B' dV/dx` for a candidate state, clipped to the
/// acceleration limits.
pub fn act(state: &ThreeCarState, learner: &PacState) -> Result<f64> {
    let grad = learner.value_gradient(&state.to_vec())?;
    let u = crate::lmdp::optimal_action(&learner.actor.s_hat, &input_gain(), &grad)?;
    Ok(clip_accel(u[0]))
}

pub fn clip_accel(u: f64) -> f64 {
    u.clamp(MIN_ACCEL, MAX_ACCEL)
}
