//! Synthetic congested traffic and closed-loop merge evaluation.
//!
//! The mainline is a single lane of IDM car-followers behind a lead vehicle
//! that tracks an oscillating target speed, producing stop-and-go waves. The
//! ego drives on a parallel ramp, chooses a gap with a policy, and changes
//! lanes once a gating condition holds inside the merge zone (or is forced
//! at the ramp end). Every episode draws from its own RNG stream so results
//! do not depend on execution order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::merging::{merge_success, state_cost, Body, CostWeights, GapClearance, ThreeCarState};
use crate::mpdm::{
    self, enumerate_spots, gap_end_body, gap_state, GapEnd, MainlineVehicle, Scene, SpotCandidate, SpotOptions,
};
use crate::pac::PacState;
use crate::pipeline::{EventFrame, MergeEvent};

/// Stream offset separating demonstration episodes from evaluation episodes.
const TRAIN_STREAM_BASE: u64 = 1 << 40;
/// Stream offset for per-episode policy randomness (demonstrator choices and noise).
const POLICY_STREAM_BASE: u64 = 1 << 41;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdmParams {
    pub desired_speed: f64,
    pub max_accel: f64,
    pub comfort_decel: f64,
    pub jam_distance: f64,
    pub exponent: f64,
    /// Bounds on the per-driver time headway derived from the initial gap (s).
    pub min_headway: f64,
    pub max_headway: f64,
    /// Hard braking limit (m/s^2, positive).
    pub max_decel: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self {
            desired_speed: 15.0,
            max_accel: 1.5,
            comfort_decel: 2.0,
            jam_distance: 2.0,
            exponent: 4.0,
            min_headway: 0.3,
            max_headway: 3.0,
            max_decel: 9.0,
        }
    }
}

impl IdmParams {
    /// Time headway that makes `gap` the equilibrium clearance at `speed`.
    pub fn equilibrium_headway(&self, gap: f64, speed: f64) -> f64 {
        if speed <= 0.0 {
            return self.max_headway;
        }
        let free = (1.0 - (speed / self.desired_speed).powf(self.exponent)).max(0.0).sqrt();
        ((gap * free - self.jam_distance) / speed).clamp(self.min_headway, self.max_headway)
    }

    pub fn accel(&self, headway: f64, speed: f64, gap: f64, closing_speed: f64) -> f64 {
        let desired_gap = self.jam_distance
            + (speed * headway + speed * closing_speed / (2.0 * (self.max_accel * self.comfort_decel).sqrt())).max(0.0);
        let gap = gap.max(0.1);
        self.max_accel * (1.0 - (speed / self.desired_speed).powf(self.exponent) - (desired_gap / gap).powi(2))
    }
}

/// Lead-vehicle speed target: `mean + amplitude sin(2 pi t / period + phase) + OU`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LeadProfile {
    pub amplitude: f64,
    pub period: f64,
    pub ou_std: f64,
    pub ou_tau: f64,
    /// Proportional gain of the lead driver's speed tracking (1/s).
    pub gain: f64,
}

impl Default for LeadProfile {
    fn default() -> Self {
        Self { amplitude: 2.0, period: 20.0, ou_std: 0.5, ou_tau: 5.0, gain: 0.5 }
    }
}

/// Demonstrator used to generate training data: targets a random candidate
/// gap with a noisy PD law on the gap-midpoint offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoParams {
    pub position_gain: f64,
    pub speed_gain: f64,
    /// Stationary standard deviation of the acceleration noise (m/s^2).
    pub noise: f64,
    /// Correlation time of the noise (s); zero gives white noise.
    pub noise_tau: f64,
}

impl Default for DemoParams {
    fn default() -> Self {
        Self { position_gain: 0.15, speed_gain: 0.5, noise: 0.7, noise_tau: 4.0 }
    }
}

/// Acceleration forced on one mainline vehicle over a time window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedAccel {
    /// Index into the mainline, front to rear.
    pub vehicle: usize,
    pub start: f64,
    pub end: f64,
    pub accel: f64,
}

/// Deterministic initial layout overriding the random draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedLayout {
    /// Front-bumper spacings between consecutive mainline vehicles (m).
    pub spacings: Vec<f64>,
    pub speed: f64,
    pub ego_offset: f64,
    pub ego_speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub seed: u64,
    pub episodes: usize,
    /// Demonstration episodes used to build the training set.
    pub train_episodes: usize,
    pub horizon: f64,
    pub dt: f64,
    pub mainline_cars: usize,
    pub vehicle_length: f64,
    /// Front-bumper spacing distribution (m).
    pub spacing_mean: f64,
    pub spacing_std: f64,
    pub spacing_min: f64,
    pub speed_mean: f64,
    pub speed_std: f64,
    /// Std of the per-step random acceleration of every mainline vehicle (m/s^2).
    pub accel_noise: f64,
    pub idm: IdmParams,
    pub lead: LeadProfile,
    /// Mainline vehicle the ego starts alongside.
    pub ego_start_index: usize,
    pub ego_offset_spread: f64,
    pub ego_speed_std: f64,
    /// Distance from the ego start to the beginning of the merge zone (m).
    pub merge_zone_start: f64,
    /// Distance from the ego start to the ramp end (m).
    pub ramp_length: f64,
    pub lane_change_duration: f64,
    /// Clearance to both gap ends required to start a lane change, now and
    /// extrapolated over the lane-change duration at current speeds (m).
    pub gate_clearance: f64,
    /// Largest ego speed difference to the leader allowed to start a lane change (m/s).
    pub gate_speed: f64,
    /// Spacing between spot re-selections (s).
    pub decision_interval: f64,
    /// The vehicle behind the merging ego reacts to it once the lane change starts.
    pub reactive_follower: bool,
    pub spots: SpotOptions,
    pub demo: DemoParams,
    pub scripted: Vec<ScriptedAccel>,
    pub layout: Option<FixedLayout>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            episodes: 500,
            train_episodes: 640,
            horizon: 80.0,
            dt: crate::merging::DEFAULT_DT,
            mainline_cars: 14,
            vehicle_length: 4.5,
            spacing_mean: 20.0,
            spacing_std: 7.0,
            spacing_min: 7.0,
            speed_mean: 5.0,
            speed_std: 0.5,
            accel_noise: 0.6,
            idm: IdmParams::default(),
            lead: LeadProfile::default(),
            ego_start_index: 3,
            ego_offset_spread: 10.0,
            ego_speed_std: 1.0,
            merge_zone_start: 20.0,
            ramp_length: 250.0,
            lane_change_duration: 1.0,
            gate_clearance: 2.5,
            gate_speed: 2.0,
            decision_interval: 1.0,
            reactive_follower: false,
            spots: SpotOptions::default(),
            demo: DemoParams::default(),
            scripted: Vec::new(),
            layout: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("horizon", self.horizon),
            ("dt", self.dt),
            ("vehicle_length", self.vehicle_length),
            ("spacing_mean", self.spacing_mean),
            ("spacing_min", self.spacing_min),
            ("speed_mean", self.speed_mean),
            ("ramp_length", self.ramp_length),
            ("lane_change_duration", self.lane_change_duration),
            ("decision_interval", self.decision_interval),
            ("idm.desired_speed", self.idm.desired_speed),
            ("idm.max_accel", self.idm.max_accel),
            ("idm.comfort_decel", self.idm.comfort_decel),
            ("idm.max_decel", self.idm.max_decel),
            ("lead.period", self.lead.period),
            ("lead.ou_tau", self.lead.ou_tau),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let nonneg = [
            ("spacing_std", self.spacing_std),
            ("speed_std", self.speed_std),
            ("accel_noise", self.accel_noise),
            ("ego_offset_spread", self.ego_offset_spread),
            ("ego_speed_std", self.ego_speed_std),
            ("gate_clearance", self.gate_clearance),
            ("gate_speed", self.gate_speed),
            ("merge_zone_start", self.merge_zone_start),
            ("lead.amplitude", self.lead.amplitude),
            ("lead.ou_std", self.lead.ou_std),
            ("demo.noise", self.demo.noise),
            ("demo.noise_tau", self.demo.noise_tau),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if self.spacing_min <= self.vehicle_length {
            return Err(Error::Config("spacing_min must exceed the vehicle length".into()));
        }
        if self.mainline_cars == 0 || self.ego_start_index >= self.mainline_cars {
            return Err(Error::Config("ego_start_index must address an existing mainline vehicle".into()));
        }
        if self.merge_zone_start >= self.ramp_length {
            return Err(Error::Config("merge zone must start before the ramp end".into()));
        }
        if let Some(l) = &self.layout {
            if l.spacings.len() + 1 != self.mainline_cars {
                return Err(Error::Config("layout needs one spacing per consecutive vehicle pair".into()));
            }
            if l.spacings.iter().any(|s| *s <= self.vehicle_length) {
                return Err(Error::Config("layout spacings must exceed the vehicle length".into()));
            }
        }
        if self.scripted.iter().any(|s| s.vehicle >= self.mainline_cars || s.end < s.start) {
            return Err(Error::Config("scripted acceleration addresses a missing vehicle or an empty window".into()));
        }
        self.spots.validate()
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    fn decision_steps(&self) -> usize {
        ((self.decision_interval / self.dt).round() as usize).max(1)
    }

    /// Spot-switch stress case: a steady platoon in which the follower of the
    /// ego's initial gap accelerates hard to close it.
    pub fn switch_scenario(&self) -> Self {
        Self {
            episodes: 1,
            mainline_cars: 6,
            accel_noise: 0.0,
            lead: LeadProfile { amplitude: 0.0, ou_std: 0.0, ..self.lead },
            ego_start_index: 2,
            layout: Some(FixedLayout { spacings: vec![22.0; 5], speed: 5.0, ego_offset: 11.0, ego_speed: 5.0 }),
            scripted: vec![ScriptedAccel { vehicle: 2, start: 1.0, end: 12.0, accel: 2.0 }],
            ..self.clone()
        }
    }
}

fn episode_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq)]
struct SimVehicle {
    id: u32,
    body: Body,
    headway: f64,
    accel: f64,
}

/// Mainline state advanced one step at a time.
#[derive(Debug, Clone)]
pub struct TrafficState {
    time: f64,
    vehicles: Vec<SimVehicle>,
    ou: f64,
    phase: f64,
    rng: ChaCha8Rng,
}

impl TrafficState {
    /// Draws the initial platoon and the ego start from `rng`.
    fn init(cfg: &SimConfig, mut rng: ChaCha8Rng) -> Result<(Self, Body)> {
        let n = cfg.mainline_cars;
        let mut spacings = Vec::with_capacity(n.saturating_sub(1));
        let mut speeds = Vec::with_capacity(n);
        match &cfg.layout {
            Some(l) => {
                spacings.extend_from_slice(&l.spacings);
                speeds.resize(n, l.speed);
            }
            None => {
                let spacing =
                    Normal::new(cfg.spacing_mean, cfg.spacing_std).map_err(|e| Error::Config(e.to_string()))?;
                let speed = Normal::new(cfg.speed_mean, cfg.speed_std).map_err(|e| Error::Config(e.to_string()))?;
                for i in 0..n {
                    if i > 0 {
                        spacings.push(spacing.sample(&mut rng).max(cfg.spacing_min));
                    }
                    speeds.push(speed.sample(&mut rng).max(0.5));
                }
            }
        }
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let mut vehicles = Vec::with_capacity(n);
        let mut position = 0.0;
        for i in 0..n {
            if i > 0 {
                position -= spacings[i - 1];
            }
            let headway = if i == 0 {
                cfg.idm.max_headway
            } else {
                cfg.idm.equilibrium_headway(spacings[i - 1] - cfg.vehicle_length, speeds[i])
            };
            vehicles.push(SimVehicle {
                id: i as u32 + 1,
                body: Body { position, velocity: speeds[i], length: cfg.vehicle_length },
                headway,
                accel: 0.0,
            });
        }
        let anchor = vehicles[cfg.ego_start_index].body.position;
        let (offset, ego_speed) = match &cfg.layout {
            Some(l) => (l.ego_offset, l.ego_speed),
            None => {
                let off = if cfg.ego_offset_spread > 0.0 {
                    rng.random_range(-cfg.ego_offset_spread..=cfg.ego_offset_spread)
                } else {
                    0.0
                };
                let dv: f64 = StandardNormal.sample(&mut rng);
                (off, (cfg.speed_mean + cfg.ego_speed_std * dv).max(0.5))
            }
        };
        let ego = Body { position: anchor + offset, velocity: ego_speed, length: cfg.vehicle_length };
        Ok((Self { time: 0.0, vehicles, ou: 0.0, phase, rng }, ego))
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn scene(&self, ego: Body) -> Scene {
        Scene {
            timestamp: self.time,
            ego,
            mainline: self.vehicles.iter().map(|v| MainlineVehicle { id: v.id, body: v.body }).collect(),
        }
    }

    /// Advances one step. `inserted` places the merging ego in front of the
    /// mainline vehicle with the given id (reactive follower mode).
    fn step(&mut self, cfg: &SimConfig, inserted: Option<(u32, Body)>) -> Result<()> {
        let dt = cfg.dt;
        let lp = &cfg.lead;
        let ou_noise: f64 = StandardNormal.sample(&mut self.rng);
        let decay = (-dt / lp.ou_tau).exp();
        self.ou = self.ou * decay + lp.ou_std * (1.0 - decay * decay).sqrt() * ou_noise;
        let target = cfg.speed_mean
            + lp.amplitude * (std::f64::consts::TAU * self.time / lp.period + self.phase).sin()
            + self.ou;
        let n = self.vehicles.len();
        let mut accels = vec![0.0; n];
        #[allow(clippy::needless_range_loop)]
        for i in 0..n {
            let noise: f64 = StandardNormal.sample(&mut self.rng);
            let v = &self.vehicles[i];
            let (mut a, gap) = if i == 0 {
                let a = (lp.gain * (target.max(0.0) - v.body.velocity))
                    .clamp(-cfg.idm.comfort_decel * 1.5, cfg.idm.max_accel);
                (a, None)
            } else {
                let mut lead = self.vehicles[i - 1].body;
                if let Some((id, ego)) = inserted {
                    if id == v.id && ego.position < lead.position && ego.position > v.body.position {
                        lead = ego;
                    }
                }
                let gap = lead.rear() - v.body.position;
                let closing = v.body.velocity - lead.velocity;
                (cfg.idm.accel(v.headway, v.body.velocity, gap, closing), Some((gap, closing)))
            };
            a += cfg.accel_noise * noise;
            if let Some(s) = cfg.scripted.iter().find(|s| s.vehicle == i && self.time >= s.start && self.time < s.end) {
                // an aggressive driver ignores headway until stopping short of
                // the leader would take more than half of the maximum braking
                let urgent = gap.is_some_and(|(gap, closing)| {
                    let room = gap - cfg.idm.jam_distance;
                    room <= 0.0 || (closing > 0.0 && closing * closing / (2.0 * room) > 0.5 * cfg.idm.max_decel)
                });
                if !urgent {
                    a = s.accel;
                }
            }
            accels[i] = a.clamp(-cfg.idm.max_decel, 2.0 * cfg.idm.max_accel);
        }
        for (v, a) in self.vehicles.iter_mut().zip(accels) {
            let a = if v.body.velocity + a * dt < 0.0 { -v.body.velocity / dt } else { a };
            v.body.position += v.body.velocity * dt;
            v.body.velocity += a * dt;
            v.accel = a;
        }
        self.time += dt;
        for w in self.vehicles.windows(2) {
            let gap = w[0].body.rear() - w[1].body.position;
            if !(gap > 0.0) {
                return Err(Error::Config(format!(
                    "mainline vehicles {} and {} collide at t = {:.1} s (gap {gap:.3} m); adjust the traffic parameters",
                    w[0].id, w[1].id, self.time
                )));
            }
        }
        Ok(())
    }
}

/// Recorded mainline trajectories of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Traffic {
    pub dt: f64,
    pub ids: Vec<u32>,
    /// `frames[k][i]` is vehicle `i` at step `k`.
    pub frames: Vec<Vec<Body>>,
    pub accels: Vec<Vec<f64>>,
}

impl Traffic {
    pub fn mean_speed(&self) -> f64 {
        let (sum, n) = self.frames.iter().flatten().fold((0.0, 0usize), |(s, n), b| (s + b.velocity, n + 1));
        sum / n.max(1) as f64
    }

    pub fn min_gap(&self) -> f64 {
        self.frames.iter().flat_map(|f| f.windows(2).map(|w| w[0].rear() - w[1].position)).fold(f64::INFINITY, f64::min)
    }
}

/// Open-loop mainline for evaluation episode `episode`.
pub fn gen_traffic(cfg: &SimConfig, episode: u64) -> Result<Traffic> {
    cfg.validate()?;
    let (mut state, _) = TrafficState::init(cfg, episode_rng(cfg.seed, episode))?;
    let mut frames = vec![state.vehicles.iter().map(|v| v.body).collect::<Vec<_>>()];
    let mut accels = vec![vec![0.0; state.vehicles.len()]];
    for _ in 0..cfg.steps() {
        state.step(cfg, None)?;
        frames.push(state.vehicles.iter().map(|v| v.body).collect());
        accels.push(state.vehicles.iter().map(|v| v.accel).collect());
    }
    Ok(Traffic { dt: cfg.dt, ids: state.vehicles.iter().map(|v| v.id).collect(), frames, accels })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Policy {
    /// Re-selects the lowest-value gap every decision tick.
    Mpdm,
    /// Pursues candidate `k` (1-based) from the initial enumeration throughout.
    FixedSpot(usize),
    /// Demonstrator: random initial candidate, noisy PD control.
    HumanReplay,
}

impl Policy {
    pub fn name(&self) -> String {
        match self {
            Policy::Mpdm => "mpdm".into(),
            Policy::FixedSpot(k) => format!("fixed-spot-{k}"),
            Policy::HumanReplay => "human-replay".into(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mpdm" => Ok(Policy::Mpdm),
            "human-replay" => Ok(Policy::HumanReplay),
            _ => s
                .strip_prefix("fixed-spot-")
                .and_then(|k| k.parse().ok())
                .filter(|k| *k > 0)
                .map(Policy::FixedSpot)
                .ok_or_else(|| Error::Config(format!("unknown policy '{s}'"))),
        }
    }

    /// MPDM plus one fixed-spot baseline per candidate slot.
    pub fn comparison_set(max_candidates: usize) -> Vec<Policy> {
        std::iter::once(Policy::Mpdm).chain((1..=max_candidates).map(Policy::FixedSpot)).collect()
    }
}

/// One control step of an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionRow {
    pub time: f64,
    /// A spot selection happened at this step.
    pub decision: bool,
    pub spot: usize,
    pub leader: GapEnd,
    pub follower: GapEnd,
    pub state: ThreeCarState,
    pub q: f64,
    pub accel: f64,
    pub step_cost: f64,
    /// `(spot, score)` for every candidate scored at this step.
    pub scores: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub success: bool,
    /// Mean of `q dt + KL` over the episode's steps.
    pub avg_cost: f64,
    pub steps: usize,
    /// `(time, spot, leader, follower)` at every change of target gap.
    pub spot_history: Vec<(f64, usize, GapEnd, GapEnd)>,
    pub switches: usize,
    pub min_front_gap: f64,
    pub min_rear_gap: f64,
    pub failure: Option<String>,
    /// Ego and gap kinematics per step, for dataset construction.
    pub frames: Vec<EventFrame>,
}

struct Target {
    spot: usize,
    leader: GapEnd,
    follower: GapEnd,
}

fn kl_step(u: f64, s_hat: f64, dt: f64) -> f64 {
    0.5 * u * u / s_hat * dt
}

/// Runs one episode of `policy`. `learner` is required for the MPDM and
/// fixed-spot policies and supplies `S` for the control cost of all policies.
pub fn rollout_episode(
    policy: Policy,
    cfg: &SimConfig,
    episode: u64,
    learner: Option<&PacState>,
    weights: &CostWeights,
    mut log: Option<&mut Vec<DecisionRow>>,
) -> Result<EpisodeResult> {
    cfg.validate()?;
    if learner.is_none() && policy != Policy::HumanReplay {
        return Err(Error::Config(format!("policy {} needs a trained value function", policy.name())));
    }
    let s_hat = match learner {
        Some(l) => {
            let s = l.actor.s_hat[(0, 0)];
            if !(s > 0.0) {
                return Err(Error::Argument(format!("learned control scale must be positive, got {s}")));
            }
            Some(s)
        }
        None => None,
    };
    let (mut traffic, mut ego) = TrafficState::init(cfg, episode_rng(cfg.seed, episode))?;
    let mut policy_rng = episode_rng(cfg.seed, POLICY_STREAM_BASE + episode);
    let dt = cfg.dt;
    let start = ego.position;
    let zone_start = start + cfg.merge_zone_start;
    let ramp_end = start + cfg.ramp_length;
    let lc_steps = ((cfg.lane_change_duration / dt).round() as usize).max(1);
    let decision_steps = cfg.decision_steps();
    let mut target: Option<Target> = None;
    let mut history = Vec::new();
    let mut lane_change_end: Option<usize> = None;
    let mut forced = false;
    let mut demo_noise = 0.0;
    let mut total_cost = 0.0;
    let mut min_front = f64::INFINITY;
    let mut min_rear = f64::INFINITY;
    let mut frames = Vec::new();
    let fail = |reason: String, steps: usize, total: f64, history, frames, min_front, min_rear| EpisodeResult {
        success: false,
        avg_cost: if steps > 0 { total / steps as f64 } else { 0.0 },
        steps,
        switches: 0,
        spot_history: history,
        min_front_gap: min_front,
        min_rear_gap: min_rear,
        failure: Some(reason),
        frames,
    };
    for k in 0..cfg.steps() {
        let scene = traffic.scene(ego);
        let mut scores = Vec::new();
        let deciding =
            lane_change_end.is_none() && (k % decision_steps == 0) && (target.is_none() || policy == Policy::Mpdm);
        if deciding {
            let candidates = enumerate_spots(&scene, &cfg.spots)?;
            if candidates.is_empty() {
                let h = std::mem::take(&mut history);
                return Ok(fail("no candidate gaps in range".into(), k, total_cost, h, frames, min_front, min_rear));
            }
            let chosen: &SpotCandidate = match policy {
                Policy::Mpdm => {
                    let learner = learner.expect("checked above");
                    let (best, s) = mpdm::select_policy(&candidates, learner)?;
                    scores = candidates.iter().zip(&s).map(|(c, v)| (c.spot, *v)).collect();
                    &candidates[best]
                }
                Policy::FixedSpot(n) => &candidates[n.min(candidates.len()) - 1],
                Policy::HumanReplay => &candidates[policy_rng.random_range(0..candidates.len())],
            };
            let changed = target.as_ref().is_none_or(|t| t.leader != chosen.leader || t.follower != chosen.follower);
            if changed {
                history.push((traffic.time(), chosen.spot, chosen.leader, chosen.follower));
            }
            target = Some(Target { spot: chosen.spot, leader: chosen.leader, follower: chosen.follower });
        }
        let t = target.as_ref().expect("target chosen at the first step");
        let Some(x) = gap_state(&scene, t.leader, t.follower, &cfg.spots) else {
            let h = std::mem::take(&mut history);
            return Ok(fail("target gap left the scene".into(), k, total_cost, h, frames, min_front, min_rear));
        };
        if x.to_array().iter().any(|c| !c.is_finite()) {
            let h = std::mem::take(&mut history);
            return Ok(fail(format!("non-finite state at step {k}"), k, total_cost, h, frames, min_front, min_rear));
        }
        let leader = gap_end_body(&scene, t.leader, &cfg.spots).expect("resolved by gap_state");
        let follower = gap_end_body(&scene, t.follower, &cfg.spots).expect("resolved by gap_state");
        let u = match policy {
            Policy::HumanReplay => {
                let d = cfg.demo;
                let w: f64 = StandardNormal.sample(&mut policy_rng);
                let decay = if d.noise_tau > 0.0 { (-dt / d.noise_tau).exp() } else { 0.0 };
                demo_noise = demo_noise * decay + (1.0 - decay * decay).sqrt() * w;
                mpdm::clip_accel(-d.position_gain * x.midpoint_offset() - d.speed_gain * x.dv10 + d.noise * demo_noise)
            }
            _ => mpdm::act(&x, learner.expect("checked above"))?,
        };
        let q = state_cost(&x, weights)?;
        let step_cost = q * dt + s_hat.map_or(0.0, |s| kl_step(u, s, dt));
        if !step_cost.is_finite() || !u.is_finite() {
            let h = std::mem::take(&mut history);
            return Ok(fail(
                format!("non-finite cost or action at step {k}"),
                k,
                total_cost,
                h,
                frames,
                min_front,
                min_rear,
            ));
        }
        total_cost += step_cost;
        frames.push(EventFrame { leader, follower, ego, ego_accel: u });
        if let Some(log) = log.as_deref_mut() {
            log.push(DecisionRow {
                time: traffic.time(),
                decision: deciding,
                spot: t.spot,
                leader: t.leader,
                follower: t.follower,
                state: x,
                q,
                accel: u,
                step_cost,
                scores,
            });
        }
        let clearance = GapClearance::measure(&ego, &leader, &follower);
        if lane_change_end.is_some() {
            min_front = min_front.min(clearance.front);
            min_rear = min_rear.min(clearance.rear);
        } else if ego.position >= zone_start {
            // clearances must hold now and, at current speeds, at completion
            let horizon = cfg.lane_change_duration;
            let front_then = clearance.front - clearance.leader_dv * horizon;
            let rear_then = clearance.rear + (ego.velocity - follower.velocity) * horizon;
            let gate = clearance.front.min(front_then) >= cfg.gate_clearance
                && clearance.rear.min(rear_then) >= cfg.gate_clearance
                && clearance.leader_dv.abs() <= cfg.gate_speed;
            if gate || ego.position >= ramp_end {
                forced = !gate;
                lane_change_end = Some(k + lc_steps);
                min_front = min_front.min(clearance.front);
                min_rear = min_rear.min(clearance.rear);
            }
        }
        let inserted = match (cfg.reactive_follower, lane_change_end, t.follower) {
            (true, Some(_), GapEnd::Vehicle(id)) => Some((id, ego)),
            _ => None,
        };
        traffic.step(cfg, inserted)?;
        ego.position += ego.velocity * dt;
        ego.velocity = (ego.velocity + u * dt).max(0.0);
        if lane_change_end == Some(k + 1) {
            let scene = traffic.scene(ego);
            let (Some(l), Some(f)) =
                (gap_end_body(&scene, t.leader, &cfg.spots), gap_end_body(&scene, t.follower, &cfg.spots))
            else {
                let h = std::mem::take(&mut history);
                return Ok(fail("target gap left the scene".into(), k + 1, total_cost, h, frames, min_front, min_rear));
            };
            let c = GapClearance::measure(&ego, &l, &f);
            min_front = min_front.min(c.front);
            min_rear = min_rear.min(c.rear);
            let success = merge_success(&c);
            let steps = k + 1;
            let switches = history.len().saturating_sub(1);
            return Ok(EpisodeResult {
                success,
                avg_cost: total_cost / steps as f64,
                steps,
                switches,
                spot_history: history,
                min_front_gap: min_front,
                min_rear_gap: min_rear,
                failure: (!success).then(|| {
                    let how = if forced { "forced lane change at ramp end" } else { "gap check failed at completion" };
                    format!("{how}: front {:.2} m, rear {:.2} m, dv {:.2} m/s", c.front, c.rear, c.leader_dv)
                }),
                frames,
            });
        }
    }
    let steps = cfg.steps();
    let mut r = fail(
        "horizon reached before the merge completed".into(),
        steps,
        total_cost,
        history,
        frames,
        min_front,
        min_rear,
    );
    r.switches = r.spot_history.len().saturating_sub(1);
    Ok(r)
}

/// Demonstration events for training: one per episode on the training
/// stream range, recorded against the gap the demonstrator merged into.
pub fn demonstration_events(cfg: &SimConfig, weights: &CostWeights) -> Result<Vec<MergeEvent>> {
    (0..cfg.train_episodes as u64)
        .map(|i| {
            let r = rollout_episode(Policy::HumanReplay, cfg, TRAIN_STREAM_BASE + i, None, weights, None)?;
            Ok(MergeEvent { id: i, dt: cfg.dt, frames: r.frames })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub policy: String,
    pub episodes: usize,
    pub successes: usize,
    pub rate: f64,
    pub rate_ci_lo: f64,
    pub rate_ci_hi: f64,
    pub mean_cost: f64,
    pub cost_std: f64,
}

/// 95% Wilson score interval for `k` successes out of `n`.
pub fn wilson_interval(k: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_984_540_054_f64;
    let n_f = n as f64;
    let p = k as f64 / n_f;
    let denom = 1.0 + z * z / n_f;
    let centre = (p + z * z / (2.0 * n_f)) / denom;
    let half = z * (p * (1.0 - p) / n_f + z * z / (4.0 * n_f * n_f)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Aggregates episode results into one table row.
pub fn summarize(policy: &Policy, results: &[EpisodeResult]) -> ResultRow {
    let n = results.len();
    let successes = results.iter().filter(|r| r.success).count();
    let (lo, hi) = wilson_interval(successes, n);
    let mean = results.iter().map(|r| r.avg_cost).sum::<f64>() / n.max(1) as f64;
    let var =
        if n > 1 { results.iter().map(|r| (r.avg_cost - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
    ResultRow {
        policy: policy.name(),
        episodes: n,
        successes,
        rate: if n > 0 { successes as f64 / n as f64 } else { 0.0 },
        rate_ci_lo: lo,
        rate_ci_hi: hi,
        mean_cost: mean,
        cost_std: var.sqrt(),
    }
}

/// Runs `cfg.episodes` paired episodes per policy.
pub fn evaluate(
    policies: &[Policy],
    cfg: &SimConfig,
    learner: Option<&PacState>,
    weights: &CostWeights,
) -> Result<Vec<ResultRow>> {
    policies
        .iter()
        .map(|p| {
            let results = (0..cfg.episodes as u64)
                .map(|e| rollout_episode(*p, cfg, e, learner, weights, None))
                .collect::<Result<Vec<_>>>()?;
            Ok(summarize(p, &results))
        })
        .collect()
}
