//! Versioned plain-text checkpoint of a trained learner.
//!
//! One `key values...` record per line after the artifact header, in a fixed
//! order; floats use the shortest round-trip decimal form so a write/read
//! cycle reproduces the learner bit for bit. The field order is listed in
//! FORMATS.md.

use std::io::{BufRead, Write};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::network::{OutputActivation, ZNetwork};
use crate::output::{fmt_f64, Header};
use crate::pac::{Actor, ActorGradient, Critic, CriticWeighting, PacEvents, PacState, QScaling, RateSchedule};

pub const MAGIC: &str = "pacmpdm-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to act and score with a trained learner.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: ZNetwork,
    pub z_avg: f64,
    pub z_avg_raw: f64,
    pub s_hat: DMatrix<f64>,
    pub input_gain: DMatrix<f64>,
    pub dt: f64,
    pub q_scaling: QScaling,
    pub iterations: u64,
}

impl Checkpoint {
    pub fn from_state(state: &PacState) -> Self {
        Self {
            net: state.critic.net.clone(),
            z_avg: state.critic.z_avg,
            z_avg_raw: state.critic.z_avg_raw,
            s_hat: state.actor.s_hat.clone(),
            input_gain: state.actor.input_gain.clone(),
            dt: state.critic.dt,
            q_scaling: state.critic.q_scaling,
            iterations: state.iter,
        }
    }

    /// A learner state for inference; update rates are zero and the critic
    /// runs unweighted, so further updates leave it unchanged.
    pub fn into_state(self) -> PacState {
        PacState {
            critic: Critic {
                net: self.net,
                z_avg: self.z_avg,
                z_avg_raw: self.z_avg_raw,
                dt: self.dt,
                q_scaling: self.q_scaling,
                weighting: CriticWeighting::Plain,
                anchor: None,
                relative_floor: f64::NEG_INFINITY,
                rate_avg: RateSchedule::constant(0.0),
                rate_net: RateSchedule::constant(0.0),
            },
            actor: Actor {
                s_hat: self.s_hat,
                input_gain: self.input_gain,
                dt: self.dt,
                q_scaling: self.q_scaling,
                gradient: ActorGradient::Full,
                rate: RateSchedule::constant(0.0),
            },
            iter: self.iterations,
            events: PacEvents::default(),
        }
    }

    pub fn write<W: Write>(&self, mut w: W, header: &Header) -> Result<()> {
        let join = |v: &mut dyn Iterator<Item = f64>| v.map(fmt_f64).collect::<Vec<_>>().join(" ");
        let sizes = self.net.layer_sizes().iter().map(|s| s.to_string()).collect::<Vec<_>>().join(" ");
        let (n, m) = self.input_gain.shape();
        header.write(&mut w)?;
        writeln!(w, "{MAGIC} {FORMAT_VERSION}")?;
        writeln!(w, "layers {sizes}")?;
        writeln!(w, "hidden_activation tanh")?;
        writeln!(w, "output_activation {}", self.net.output_activation().name())?;
        writeln!(w, "input_mean {}", join(&mut self.net.input_mean().iter().copied()))?;
        writeln!(w, "input_scale {}", join(&mut self.net.input_scale().iter().copied()))?;
        writeln!(w, "params {} {}", self.net.num_params(), join(&mut self.net.params().iter().copied()))?;
        writeln!(w, "z_avg {}", fmt_f64(self.z_avg))?;
        writeln!(w, "z_avg_raw {}", fmt_f64(self.z_avg_raw))?;
        writeln!(w, "dt {}", fmt_f64(self.dt))?;
        writeln!(w, "q_scaling {}", q_scaling_name(self.q_scaling))?;
        writeln!(w, "input_gain {n} {m} {}", join(&mut row_major(&self.input_gain).into_iter()))?;
        writeln!(w, "s_hat {m} {}", join(&mut row_major(&self.s_hat).into_iter()))?;
        writeln!(w, "iterations {}", self.iterations)?;
        writeln!(w, "end")?;
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = Lines::new(r);
        let magic = lines.record("magic")?;
        if magic.key != MAGIC {
            return Err(lines.error(format!("expected '{MAGIC}', found '{}'", magic.key)));
        }
        let version: u32 = magic.single(&lines)?;
        if version != FORMAT_VERSION {
            return Err(lines.error(format!("unsupported checkpoint version {version}")));
        }
        let sizes: Vec<usize> = lines.expect("layers")?.all(&lines)?;
        let hidden = lines.expect("hidden_activation")?;
        if hidden.values != ["tanh"] {
            return Err(lines.error("hidden activation must be tanh".into()));
        }
        let output = lines.expect("output_activation")?;
        let output = OutputActivation::parse(output.values.first().map_or("", String::as_str))?;
        let mean: Vec<f64> = lines.expect("input_mean")?.all(&lines)?;
        let scale: Vec<f64> = lines.expect("input_scale")?.all(&lines)?;
        let params_rec = lines.expect("params")?;
        let (count, params): (usize, Vec<f64>) = params_rec.counted(&lines)?;
        if params.len() != count {
            return Err(lines.error(format!("params declares {count} values, found {}", params.len())));
        }
        let net = ZNetwork::from_parts(sizes, output, params, mean, scale)?;
        let z_avg: f64 = lines.expect("z_avg")?.single(&lines)?;
        let z_avg_raw: f64 = lines.expect("z_avg_raw")?.single(&lines)?;
        let dt: f64 = lines.expect("dt")?.single(&lines)?;
        let q_scaling = parse_q_scaling(&lines.expect("q_scaling")?.single::<String, _>(&lines)?)
            .ok_or_else(|| lines.error("q_scaling must be 'time-step' or 'literal'".into()))?;
        let gain_rec = lines.expect("input_gain")?;
        let dims: Vec<f64> = gain_rec.all(&lines)?;
        if dims.len() < 2 {
            return Err(lines.error("input_gain needs its row and column counts".into()));
        }
        let (n, m) = (dims[0] as usize, dims[1] as usize);
        if dims.len() != 2 + n * m || n != net.input_dim() || m == 0 {
            return Err(
                lines.error(format!("input_gain must be {}x<m> with m > 0 and hold n*m values", net.input_dim()))
            );
        }
        let input_gain = DMatrix::from_row_slice(n, m, &dims[2..]);
        let s_rec = lines.expect("s_hat")?;
        let s_vals: Vec<f64> = s_rec.all(&lines)?;
        if s_vals.first().map(|v| *v as usize) != Some(m) || s_vals.len() != 1 + m * m {
            return Err(lines.error(format!("s_hat must be {m}x{m}")));
        }
        let s_hat = DMatrix::from_row_slice(m, m, &s_vals[1..]);
        let iterations: u64 = lines.expect("iterations")?.single(&lines)?;
        lines.expect("end")?;
        let all_finite =
            [z_avg, z_avg_raw, dt].iter().chain(s_hat.iter()).chain(input_gain.iter()).all(|v| v.is_finite());
        if !all_finite || !(dt > 0.0) || !(z_avg > 0.0 && z_avg <= 1.0) {
            return Err(Error::Parse("checkpoint holds out-of-range scalars".into()));
        }
        Ok(Self { net, z_avg, z_avg_raw, s_hat, input_gain, dt, q_scaling, iterations })
    }

    pub fn save(&self, path: &std::path::Path, header: &Header) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write(&mut w, header)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    (0..r).flat_map(|i| (0..c).map(move |j| m[(i, j)])).collect()
}

fn q_scaling_name(q: QScaling) -> &'static str {
    match q {
        QScaling::TimeStep => "time-step",
        QScaling::Literal => "literal",
    }
}

fn parse_q_scaling(s: &str) -> Option<QScaling> {
    match s {
        "time-step" => Some(QScaling::TimeStep),
        "literal" => Some(QScaling::Literal),
        _ => None,
    }
}

struct Record {
    key: String,
    values: Vec<String>,
}

impl Record {
    fn all<T: std::str::FromStr, R>(&self, lines: &Lines<R>) -> Result<Vec<T>> {
        self.values
            .iter()
            .map(|v| v.parse().map_err(|_| lines.error(format!("{}: cannot parse '{v}'", self.key))))
            .collect()
    }

    fn single<T: std::str::FromStr, R>(&self, lines: &Lines<R>) -> Result<T> {
        let mut v = self.all(lines)?;
        if v.len() != 1 {
            return Err(lines.error(format!("{} takes exactly one value", self.key)));
        }
        Ok(v.remove(0))
    }

    fn counted<R>(&self, lines: &Lines<R>) -> Result<(usize, Vec<f64>)> {
        let count: usize = self
            .values
            .first()
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| lines.error(format!("{} needs a leading count", self.key)))?;
        let rest = Record { key: self.key.clone(), values: self.values[1..].to_vec() };
        Ok((count, rest.all(lines)?))
    }
}

struct Lines<R> {
    inner: std::io::Lines<R>,
    number: usize,
}

impl<R> Lines<R> {
    fn error(&self, msg: String) -> Error {
        Error::Parse(format!("checkpoint line {}: {msg}", self.number))
    }
}

impl<R: BufRead> Lines<R> {
    fn new(r: R) -> Self {
        Self { inner: r.lines(), number: 0 }
    }

    /// Next non-comment, non-blank line split on whitespace.
    fn record(&mut self, what: &str) -> Result<Record> {
        for line in self.inner.by_ref() {
            self.number += 1;
            let line = line?;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let mut parts = t.split_whitespace().map(str::to_string);
            let key = parts.next().unwrap_or_default();
            return Ok(Record { key, values: parts.collect() });
        }
        Err(Error::Parse(format!("checkpoint ended before '{what}'")))
    }

    fn expect(&mut self, key: &str) -> Result<Record> {
        let rec = self.record(key)?;
        if rec.key != key {
            return Err(self.error(format!("expected '{key}', found '{}'", rec.key)));
        }
        Ok(rec)
    }
}
