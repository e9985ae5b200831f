//! Artifact header line and CSV writers for run outputs.
//!
//! Every artifact starts with `# pacmpdm <version> seed=<seed> config=<hash>`.
//! Floats are written in Rust's shortest round-trip decimal form, so equal
//! runs give byte-identical files and reading a value back is lossless.

use std::io::Write;

use crate::error::{Error, Result};
use crate::pac::MetricRow;
use crate::sim::{DecisionRow, EpisodeResult, ResultRow};

pub const TOOL_NAME: &str = "pacmpdm";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub version: String,
    pub seed: u64,
    /// First 16 hex digits of the config digest.
    pub config_hash: String,
}

impl Header {
    pub fn new(seed: u64, config_hash: impl Into<String>) -> Self {
        Self { version: VERSION.into(), seed, config_hash: config_hash.into() }
    }

    pub fn line(&self) -> String {
        format!("# {TOOL_NAME} {} seed={} config={}", self.version, self.seed, self.config_hash)
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "{}", self.line())?;
        Ok(())
    }

    pub fn parse(line: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("not an artifact header: '{line}'"));
        let mut parts = line.trim_end().split(' ');
        if parts.next() != Some("#") || parts.next() != Some(TOOL_NAME) {
            return Err(bad());
        }
        let version = parts.next().ok_or_else(bad)?.to_string();
        let seed = parts.next().and_then(|p| p.strip_prefix("seed=")).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let config_hash = parts.next().and_then(|p| p.strip_prefix("config=")).ok_or_else(bad)?.to_string();
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(Self { version, seed, config_hash })
    }
}

/// Shortest round-trip decimal form; `inf`, `-inf` and `NaN` for non-finite values.
pub fn fmt_f64(v: f64) -> String {
    v.to_string()
}

/// CSV writer with `\n` record terminators.
pub fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w)
}

/// Training metrics: one row per reporting window.
pub fn write_metrics<W: Write>(mut w: W, header: &Header, rows: &[MetricRow]) -> Result<()> {
    header.write(&mut w)?;
    let entries = rows.first().map_or(1, |r| r.s_hat.len());
    let m = (entries as f64).sqrt().round() as usize;
    let mut out = csv_writer(w);
    let mut cols = vec!["iteration".to_string(), "mean_e2".into(), "mean_d2".into(), "z_avg".into()];
    // column-major storage: entry k sits at row k % m, column k / m
    cols.extend((0..entries).map(|k| format!("s_{}_{}", k % m.max(1), k / m.max(1))));
    out.write_record(&cols)?;
    for r in rows {
        if r.s_hat.len() != entries {
            return Err(Error::Argument("metric rows disagree on the size of S".into()));
        }
        let mut rec = vec![r.iteration.to_string(), fmt_f64(r.mean_e2), fmt_f64(r.mean_d2), fmt_f64(r.z_avg)];
        rec.extend(r.s_hat.iter().map(|v| fmt_f64(*v)));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub const RESULT_COLUMNS: [&str; 8] =
    ["policy", "episodes", "successes", "rate", "rate_ci_lo", "rate_ci_hi", "mean_cost", "cost_std"];

pub fn write_results<W: Write>(mut w: W, header: &Header, rows: &[ResultRow]) -> Result<()> {
    header.write(&mut w)?;
    let mut out = csv_writer(w);
    out.write_record(RESULT_COLUMNS)?;
    for r in rows {
        out.write_record([
            r.policy.clone(),
            r.episodes.to_string(),
            r.successes.to_string(),
            fmt_f64(r.rate),
            fmt_f64(r.rate_ci_lo),
            fmt_f64(r.rate_ci_hi),
            fmt_f64(r.mean_cost),
            fmt_f64(r.cost_std),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Bar-chart values for the two comparison panels: success rate with its
/// Wilson interval, and mean cost with a normal 95% interval on the mean.
pub fn write_plot_data<W: Write>(mut w: W, header: &Header, rows: &[ResultRow]) -> Result<()> {
    header.write(&mut w)?;
    let mut out = csv_writer(w);
    out.write_record(["panel", "policy", "value", "lo", "hi"])?;
    for r in rows {
        out.write_record([
            "success_rate",
            &r.policy,
            &fmt_f64(r.rate),
            &fmt_f64(r.rate_ci_lo),
            &fmt_f64(r.rate_ci_hi),
        ])?;
    }
    for r in rows {
        let half = if r.episodes > 0 { 1.959_963_984_540_054 * r.cost_std / (r.episodes as f64).sqrt() } else { 0.0 };
        out.write_record([
            "average_cost",
            &r.policy,
            &fmt_f64(r.mean_cost),
            &fmt_f64(r.mean_cost - half),
            &fmt_f64(r.mean_cost + half),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub const DECISION_COLUMNS: [&str; 15] = [
    "episode",
    "time",
    "decision",
    "spot",
    "leader",
    "follower",
    "dx12",
    "dv12",
    "dx10",
    "dv10",
    "q",
    "accel",
    "step_cost",
    "scores",
    "policy",
];

/// One decision log covering several episodes of one policy.
pub fn write_decision_log<W: Write>(
    mut w: W,
    header: &Header,
    policy: &str,
    episodes: &[(u64, Vec<DecisionRow>)],
) -> Result<()> {
    header.write(&mut w)?;
    let mut out = csv_writer(w);
    out.write_record(DECISION_COLUMNS)?;
    for (episode, rows) in episodes {
        for r in rows {
            let scores =
                r.scores.iter().map(|(spot, v)| format!("{spot}:{}", fmt_f64(*v))).collect::<Vec<_>>().join(";");
            let x = r.state;
            out.write_record([
                episode.to_string(),
                fmt_f64(r.time),
                u8::from(r.decision).to_string(),
                r.spot.to_string(),
                r.leader.label(),
                r.follower.label(),
                fmt_f64(x.dx12),
                fmt_f64(x.dv12),
                fmt_f64(x.dx10),
                fmt_f64(x.dv10),
                fmt_f64(r.q),
                fmt_f64(r.accel),
                fmt_f64(r.step_cost),
                scores,
                policy.to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

pub const EPISODE_COLUMNS: [&str; 10] = [
    "episode",
    "policy",
    "success",
    "avg_cost",
    "steps",
    "switches",
    "min_front_gap",
    "min_rear_gap",
    "spots",
    "failure",
];

/// Per-episode outcomes. `spots` lists every target change as
/// `time@spot(leader/follower)` joined by `;`.
pub fn write_episode_summary<W: Write>(
    mut w: W,
    header: &Header,
    policy: &str,
    episodes: &[(u64, EpisodeResult)],
) -> Result<()> {
    header.write(&mut w)?;
    let mut out = csv_writer(w);
    out.write_record(EPISODE_COLUMNS)?;
    for (episode, r) in episodes {
        let spots = r
            .spot_history
            .iter()
            .map(|(t, spot, l, f)| format!("{}@{spot}({}/{})", fmt_f64(*t), l.label(), f.label()))
            .collect::<Vec<_>>()
            .join(";");
        out.write_record([
            episode.to_string(),
            policy.to_string(),
            u8::from(r.success).to_string(),
            fmt_f64(r.avg_cost),
            r.steps.to_string(),
            r.switches.to_string(),
            fmt_f64(r.min_front_gap),
            fmt_f64(r.min_rear_gap),
            spots,
            r.failure.clone().unwrap_or_default(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
