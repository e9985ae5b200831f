//! Trajectory ingestion, RTS smoothing, merge-event extraction and passive
//! dataset assembly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, RowVector3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::merging::{make_passive_sample, Body, CostWeights, ThreeCarState};
use crate::pac::TransitionSample;

pub const FEET_TO_METERS: f64 = 0.3048;
pub const DEFAULT_FRAME_DT: f64 = 0.1;
/// Events with fewer frames are dropped from the dataset.
pub const MIN_EVENT_FRAMES: usize = 10;
/// Smoothed accelerations beyond this magnitude flag the track (m/s^2).
pub const MAX_PLAUSIBLE_ACCEL: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Units {
    Meters,
    Feet,
}

impl Units {
    pub fn scale(self) -> f64 {
        match self {
            Units::Meters => 1.0,
            Units::Feet => FEET_TO_METERS,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "meters" | "m" => Ok(Units::Meters),
            "feet" | "ft" => Ok(Units::Feet),
            _ => Err(Error::Config(format!("unknown units '{s}' (meters or feet)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawFrame {
    pub frame: i64,
    pub time: f64,
    pub lane: i32,
    pub position: f64,
    pub speed: Option<f64>,
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawTrack {
    pub vehicle_id: u32,
    pub frames: Vec<RawFrame>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    /// Frame indices not strictly increasing in file order.
    NonMonotoneFrames,
    /// Consecutive frame indices differ by more than one.
    FrameGap,
    NonFinite,
    /// Fewer frames than the smoother needs.
    TooShort,
    /// Smoothed acceleration exceeds [`MAX_PLAUSIBLE_ACCEL`].
    ImplausibleAcceleration,
}

impl RejectReason {
    pub fn code(&self) -> &'static str {
        match self {
            RejectReason::NonMonotoneFrames => "non-monotone-frames",
            RejectReason::FrameGap => "frame-gap",
            RejectReason::NonFinite => "non-finite",
            RejectReason::TooShort => "too-short",
            RejectReason::ImplausibleAcceleration => "implausible-acceleration",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub vehicle_id: u32,
    pub reason: RejectReason,
    /// Rows discarded with the record.
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct IngestReport {
    pub tracks: Vec<RawTrack>,
    pub rejections: Vec<Rejection>,
}

impl IngestReport {
    /// Rejected row counts per reason code.
    pub fn rejection_summary(&self) -> BTreeMap<&'static str, (usize, usize)> {
        let mut out = BTreeMap::new();
        for r in &self.rejections {
            let e = out.entry(r.reason.code()).or_insert((0, 0));
            e.0 += 1;
            e.1 += r.rows;
        }
        out
    }
}

/// Accepted spellings of each trajectory column; the second is the NGSIM export name.
const COLUMNS: [(&str, &str); 6] = [
    ("vehicle_id", "Vehicle_ID"),
    ("frame", "Frame_ID"),
    ("lane_id", "Lane_ID"),
    ("local_y", "Local_Y"),
    ("velocity", "v_Vel"),
    ("length", "v_Length"),
];
const VELOCITY_COLUMN: usize = 4;

fn column_index(headers: &csv::StringRecord, names: (&str, &str)) -> Option<usize> {
    headers.iter().position(|h| {
        let h = h.trim();
        h == names.0 || h == names.1
    })
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, idx: usize, name: &str, line: u64) -> Result<T> {
    let raw = rec.get(idx).unwrap_or("").trim();
    raw.parse().map_err(|_| Error::Parse(format!("line {line}, column {name}: cannot parse '{raw}'")))
}

/// Reads trajectory rows from CSV. Lines starting with `#` are comments;
/// unknown columns are ignored by name.
pub fn read_trajectories<R: Read>(reader: R, units: Units, frame_dt: f64) -> Result<IngestReport> {
    if !(frame_dt > 0.0) {
        return Err(Error::Config("frame spacing must be positive".into()));
    }
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut idx = [None; 6];
    for (k, names) in COLUMNS.iter().enumerate() {
        idx[k] = column_index(&headers, *names);
        if idx[k].is_none() && k != VELOCITY_COLUMN {
            return Err(Error::Schema(format!("missing column '{}'", names.0)));
        }
    }
    let scale = units.scale();
    let mut rows: BTreeMap<u32, Vec<RawFrame>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let id: u32 = parse_field(&rec, idx[0].unwrap(), COLUMNS[0].0, line)?;
        let frame: i64 = parse_field(&rec, idx[1].unwrap(), COLUMNS[1].0, line)?;
        let lane: i32 = parse_field(&rec, idx[2].unwrap(), COLUMNS[2].0, line)?;
        let position: f64 = parse_field(&rec, idx[3].unwrap(), COLUMNS[3].0, line)?;
        let speed = match idx[VELOCITY_COLUMN] {
            Some(i) if !rec.get(i).unwrap_or("").trim().is_empty() => {
                Some(parse_field::<f64>(&rec, i, COLUMNS[4].0, line)? * scale)
            }
            _ => None,
        };
        let length: f64 = parse_field(&rec, idx[5].unwrap(), COLUMNS[5].0, line)?;
        rows.entry(id).or_default().push(RawFrame {
            frame,
            time: frame as f64 * frame_dt,
            lane,
            position: position * scale,
            speed,
            length: length * scale,
        });
    }
    let mut report = IngestReport::default();
    for (vehicle_id, frames) in rows {
        let reason = if frames.windows(2).any(|w| w[1].frame <= w[0].frame) {
            Some(RejectReason::NonMonotoneFrames)
        } else if frames.windows(2).any(|w| w[1].frame != w[0].frame + 1) {
            Some(RejectReason::FrameGap)
        } else if frames
            .iter()
            .any(|f| !f.position.is_finite() || !f.length.is_finite() || f.speed.is_some_and(|s| !s.is_finite()))
        {
            Some(RejectReason::NonFinite)
        } else {
            None
        };
        match reason {
            Some(reason) => report.rejections.push(Rejection { vehicle_id, reason, rows: frames.len() }),
            None => report.tracks.push(RawTrack { vehicle_id, frames }),
        }
    }
    Ok(report)
}

pub fn load_trajectories(path: &Path, units: Units, frame_dt: f64) -> Result<IngestReport> {
    read_trajectories(std::fs::File::open(path)?, units, frame_dt)
}

/// Writes tracks in the trajectory CSV layout, converting back to `units`.
pub fn write_trajectories<W: Write>(writer: W, tracks: &[RawTrack], units: Units) -> Result<()> {
    let scale = units.scale();
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(COLUMNS.iter().map(|c| c.0))?;
    for t in tracks {
        for f in &t.frames {
            w.write_record([
                t.vehicle_id.to_string(),
                f.frame.to_string(),
                f.lane.to_string(),
                (f.position / scale).to_string(),
                f.speed.map_or(String::new(), |s| (s / scale).to_string()),
                (f.length / scale).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmootherParams {
    /// Std of the white jerk driving the constant-acceleration model (m/s^3).
    pub jerk_noise: f64,
    /// Position measurement std (m).
    pub measurement_std: f64,
}

impl Default for SmootherParams {
    fn default() -> Self {
        Self { jerk_noise: 2.0, measurement_std: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothedFrame {
    pub frame: i64,
    pub time: f64,
    pub lane: i32,
    pub position: f64,
    pub velocity: f64,
    pub acceleration: f64,
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedTrack {
    pub vehicle_id: u32,
    pub frames: Vec<SmoothedFrame>,
    /// Some smoothed acceleration exceeds [`MAX_PLAUSIBLE_ACCEL`].
    pub flagged: bool,
}

fn check_covariance(p: &Matrix3<f64>, frame: usize) -> Result<()> {
    if p.iter().any(|v| !v.is_finite()) || p.cholesky().is_none() {
        return Err(Error::numeric_at("smoother covariance lost positive definiteness at frame", frame));
    }
    Ok(())
}

/// Forward Kalman filter on `(position, velocity, acceleration)` with white
/// jerk, followed by a backward Rauch-Tung-Striebel pass. Only positions are
/// used as measurements.
pub fn rts_smooth(track: &RawTrack, params: &SmootherParams, dt: f64) -> Result<SmoothedTrack> {
    let n = track.frames.len();
    if n < 3 {
        return Err(Error::Argument(format!(
            "vehicle {} has {n} frames; smoothing needs at least 3",
            track.vehicle_id
        )));
    }
    if !(params.jerk_noise > 0.0 && params.measurement_std > 0.0 && dt > 0.0) {
        return Err(Error::Config("smoother noise levels and dt must be positive".into()));
    }
    let f = Matrix3::new(1.0, dt, 0.5 * dt * dt, 0.0, 1.0, dt, 0.0, 0.0, 1.0);
    let (d2, d3, d4, d5) = (dt * dt, dt.powi(3), dt.powi(4), dt.powi(5));
    let q = Matrix3::new(d5 / 20.0, d4 / 8.0, d3 / 6.0, d4 / 8.0, d3 / 3.0, d2 / 2.0, d3 / 6.0, d2 / 2.0, dt)
        * params.jerk_noise.powi(2);
    let h = RowVector3::new(1.0, 0.0, 0.0);
    let r = params.measurement_std.powi(2);
    let z: Vec<f64> = track.frames.iter().map(|f| f.position).collect();

    let v0 = (z[1] - z[0]) / dt;
    let mut x = Vector3::new(z[0], v0, 0.0);
    let mut p = Matrix3::from_diagonal(&Vector3::new(r, 2.0 * r / d2 + 1.0, 10.0));
    let mut filtered = Vec::with_capacity(n);
    let mut predicted = Vec::with_capacity(n);
    for (k, zk) in z.iter().enumerate() {
        if k > 0 {
            x = f * x;
            p = f * p * f.transpose() + q;
        }
        predicted.push((x, p));
        let s = (h * p * h.transpose())[(0, 0)] + r;
        let gain = p * h.transpose() / s;
        x += gain * (zk - (h * x)[(0, 0)]);
        // Joseph form keeps the covariance symmetric
        let ikh = Matrix3::identity() - gain * h;
        p = ikh * p * ikh.transpose() + gain * gain.transpose() * r;
        check_covariance(&p, k)?;
        filtered.push((x, p));
    }
    let mut smoothed = filtered.clone();
    for k in (0..n - 1).rev() {
        let (xf, pf) = filtered[k];
        let (xp, pp) = predicted[k + 1];
        let pp_inv = pp
            .try_inverse()
            .ok_or_else(|| Error::numeric_at("smoother prediction covariance singular at frame", k + 1))?;
        let c = pf * f.transpose() * pp_inv;
        let (xs_next, ps_next) = smoothed[k + 1];
        let xs = xf + c * (xs_next - xp);
        let ps = pf + c * (ps_next - pp) * c.transpose();
        let ps = 0.5 * (ps + ps.transpose());
        check_covariance(&ps, k)?;
        smoothed[k] = (xs, ps);
    }
    let frames: Vec<SmoothedFrame> = track
        .frames
        .iter()
        .zip(&smoothed)
        .map(|(raw, (xs, _))| SmoothedFrame {
            frame: raw.frame,
            time: raw.time,
            lane: raw.lane,
            position: xs[0],
            velocity: xs[1],
            acceleration: xs[2],
            length: raw.length,
        })
        .collect();
    let flagged = frames.iter().any(|f| f.acceleration.abs() > MAX_PLAUSIBLE_ACCEL);
    Ok(SmoothedTrack { vehicle_id: track.vehicle_id, frames, flagged })
}

/// Smooths every accepted track, draining `report.tracks`. Tracks too short
/// to smooth or flagged for implausible acceleration join the rejections.
pub fn smooth_tracks(report: &mut IngestReport, params: &SmootherParams, dt: f64) -> Result<Vec<SmoothedTrack>> {
    let mut out = Vec::with_capacity(report.tracks.len());
    for track in std::mem::take(&mut report.tracks) {
        let rows = track.frames.len();
        let reject = |reason| Rejection { vehicle_id: track.vehicle_id, reason, rows };
        if rows < 3 {
            report.rejections.push(reject(RejectReason::TooShort));
            continue;
        }
        let smoothed = rts_smooth(&track, params, dt)?;
        if smoothed.flagged {
            report.rejections.push(reject(RejectReason::ImplausibleAcceleration));
        } else {
            out.push(smoothed);
        }
    }
    Ok(out)
}

/// Kinematics of the ego and its realized gap at one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventFrame {
    pub leader: Body,
    pub follower: Body,
    pub ego: Body,
    /// Ego acceleration applied over the following step (m/s^2).
    pub ego_accel: f64,
}

impl EventFrame {
    pub fn state(&self) -> ThreeCarState {
        ThreeCarState::from_kinematics(
            (self.leader.position, self.leader.velocity),
            (self.follower.position, self.follower.velocity),
            (self.ego.position, self.ego.velocity),
        )
    }
}

/// One merge: consecutive frames of the ego approaching the gap it finally entered.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeEvent {
    pub id: u64,
    pub dt: f64,
    pub frames: Vec<EventFrame>,
}

/// Lane-change heuristics for recorded data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractionRules {
    /// Lane id of the on-ramp / acceleration lane.
    pub ramp_lane: i32,
    /// Lane id the ego merges into.
    pub target_lane: i32,
    /// Frames before the lane change kept in the event.
    pub lookback_frames: usize,
}

impl Default for ExtractionRules {
    fn default() -> Self {
        Self { ramp_lane: 7, target_lane: 6, lookback_frames: 100 }
    }
}

fn body(f: &SmoothedFrame) -> Body {
    Body { position: f.position, velocity: f.velocity, length: f.length }
}

/// Finds ramp-to-mainline lane changes. The realized gap is bounded by the
/// nearest target-lane vehicles ahead of and behind the ego at the first
/// frame in the target lane; the event runs back from there while both stay
/// tracked.
pub fn extract_events(tracks: &[SmoothedTrack], rules: &ExtractionRules, dt: f64) -> Vec<MergeEvent> {
    let by_frame: Vec<BTreeMap<i64, &SmoothedFrame>> =
        tracks.iter().map(|t| t.frames.iter().map(|f| (f.frame, f)).collect()).collect();
    let mut events = Vec::new();
    for (ti, t) in tracks.iter().enumerate() {
        let Some(m) = t.frames.windows(2).position(|w| w[0].lane == rules.ramp_lane && w[1].lane == rules.target_lane)
        else {
            continue;
        };
        let merge = &t.frames[m + 1];
        let mut ahead: Option<(f64, usize)> = None;
        let mut behind: Option<(f64, usize)> = None;
        for (oi, frames) in by_frame.iter().enumerate() {
            if oi == ti {
                continue;
            }
            let Some(o) = frames.get(&merge.frame) else { continue };
            if o.lane != rules.target_lane {
                continue;
            }
            let d = o.position - merge.position;
            if d > 0.0 && ahead.is_none_or(|(a, _)| d < a) {
                ahead = Some((d, oi));
            } else if d < 0.0 && behind.is_none_or(|(b, _)| d > b) {
                behind = Some((d, oi));
            }
        }
        let (Some((_, li)), Some((_, fi))) = (ahead, behind) else { continue };
        let first = (m + 1).saturating_sub(rules.lookback_frames);
        let mut frames = Vec::new();
        for ego in t.frames[first..=m + 1].iter().rev() {
            match (by_frame[li].get(&ego.frame), by_frame[fi].get(&ego.frame)) {
                (Some(l), Some(f)) => frames.push(EventFrame {
                    leader: body(l),
                    follower: body(f),
                    ego: body(ego),
                    ego_accel: ego.acceleration,
                }),
                _ => break,
            }
        }
        frames.reverse();
        events.push(MergeEvent { id: t.vehicle_id as u64, dt, frames });
    }
    events
}

/// Passive transitions with the event each came from.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<TransitionSample>,
    pub event_ids: Vec<u64>,
    pub events_used: usize,
    pub events_dropped: usize,
}

/// One passive sample per consecutive frame pair of every event with at
/// least [`MIN_EVENT_FRAMES`] frames.
pub fn build_dataset(events: &[MergeEvent], weights: &CostWeights) -> Result<Dataset> {
    let mut out = Dataset::default();
    for e in events {
        if e.frames.len() < MIN_EVENT_FRAMES {
            out.events_dropped += 1;
            continue;
        }
        for w in e.frames.windows(2) {
            let s = make_passive_sample(&w[0].state(), &w[1].state(), w[0].ego_accel, e.dt, weights)?;
            out.samples.push(s);
            out.event_ids.push(e.id);
        }
        out.events_used += 1;
    }
    Ok(out)
}

type RolePicker = fn(&EventFrame) -> Body;

/// Renders merge events as trajectory tracks, the inverse of
/// [`extract_events`]: three vehicles per event with disjoint ids and frame
/// ranges, the ego in the ramp lane until the event's last frame. Positions
/// get Gaussian measurement noise of std `position_noise`; speeds are exact.
pub fn events_to_tracks(
    events: &[MergeEvent],
    rules: &ExtractionRules,
    position_noise: f64,
    seed: u64,
) -> Result<Vec<RawTrack>> {
    if !(position_noise >= 0.0 && position_noise.is_finite()) {
        return Err(Error::Argument("position noise must be a nonnegative number".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tracks = Vec::with_capacity(3 * events.len());
    let mut first_frame = 0i64;
    for (i, e) in events.iter().enumerate() {
        if e.frames.len() < 2 {
            continue;
        }
        let last = e.frames.len() - 1;
        let roles: [(RolePicker, bool); 3] = [(|f| f.ego, true), (|f| f.leader, false), (|f| f.follower, false)];
        for (r, (pick, is_ego)) in roles.iter().enumerate() {
            let frames = e
                .frames
                .iter()
                .enumerate()
                .map(|(k, f)| {
                    let b = pick(f);
                    let frame = first_frame + k as i64;
                    let w: f64 = StandardNormal.sample(&mut rng);
                    let lane = if *is_ego && k < last { rules.ramp_lane } else { rules.target_lane };
                    RawFrame {
                        frame,
                        time: frame as f64 * e.dt,
                        lane,
                        position: b.position + position_noise * w,
                        speed: Some(b.velocity),
                        length: b.length,
                    }
                })
                .collect();
            tracks.push(RawTrack { vehicle_id: (3 * i + r + 1) as u32, frames });
        }
        // a spacer keeps events from sharing frames
        first_frame += e.frames.len() as i64 + 10;
    }
    Ok(tracks)
}

pub const DATASET_COLUMNS: [&str; 10] =
    ["event", "dx12", "dv12", "dx10", "dv10", "next_dx12", "next_dv12", "next_dx10", "next_dv10", "q"];

/// Writes a dataset as CSV. Readers skip `#` lines, so an artifact header may precede it.
pub fn write_dataset<W: Write>(writer: W, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(DATASET_COLUMNS)?;
    for (s, id) in data.samples.iter().zip(&data.event_ids) {
        let mut rec = vec![id.to_string()];
        rec.extend(s.x.iter().chain(&s.x_next).map(|v| v.to_string()));
        rec.push(s.q.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
    let headers = rdr.headers()?.clone();
    for (i, name) in DATASET_COLUMNS.iter().enumerate() {
        if headers.get(i) != Some(*name) {
            return Err(Error::Schema(format!("dataset column {i} must be '{name}'")));
        }
    }
    let mut data = Dataset::default();
    let mut last = None;
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let id: u64 = parse_field(&rec, 0, "event", line)?;
        let vals =
            (1..10).map(|i| parse_field::<f64>(&rec, i, DATASET_COLUMNS[i], line)).collect::<Result<Vec<_>>>()?;
        data.samples.push(TransitionSample::new(vals[..4].to_vec(), vals[4..8].to_vec(), vals[8])?);
        data.event_ids.push(id);
        if last != Some(id) {
            data.events_used += 1;
            last = Some(id);
        }
    }
    Ok(data)
}
