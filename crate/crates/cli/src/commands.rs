use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use pacmpdm::benchmark::anchored_rmse;
use pacmpdm::checkpoint::Checkpoint;
use pacmpdm::config::RunConfig;
use pacmpdm::gradcheck;
use pacmpdm::merging::merging_model;
use pacmpdm::oracle::{control_scale_from_noise, oracle_policy_and_cost, simulate_average_cost, EpisodeSettings};
use pacmpdm::output::{self, fmt_f64, Header};
use pacmpdm::pac::train as train_learner;
use pacmpdm::pipeline::{
    build_dataset, events_to_tracks, extract_events, load_trajectories, read_dataset, smooth_tracks, write_dataset,
    write_trajectories, Dataset, Units,
};
use pacmpdm::sim::{demonstration_events, evaluate as evaluate_policies, rollout_episode, Policy};
use pacmpdm::{Error, PacState, Result};

pub struct Context {
    pub cfg: RunConfig,
    pub header: Header,
    pub out: PathBuf,
}

impl Context {
    pub fn new(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<Self> {
        let cfg = match config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let seed = seed.unwrap_or(cfg.seed);
        let cfg = cfg.with_seed(seed);
        cfg.validate()?;
        std::fs::create_dir_all(out)?;
        let header = Header::new(cfg.seed, cfg.hash()?);
        Ok(Self { cfg, header, out: out.to_path_buf() })
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>> {
        Ok(BufWriter::new(File::create(self.out.join(name))?))
    }

    /// Writes `name` through `body`, which receives the open file.
    fn write<F>(&self, name: &str, body: F) -> Result<()>
    where
        F: FnOnce(&mut BufWriter<File>) -> Result<()>,
    {
        let mut w = self.create(name)?;
        body(&mut w)?;
        w.flush()?;
        println!("wrote {}", self.out.join(name).display());
        Ok(())
    }

    fn write_dataset(&self, name: &str, data: &Dataset) -> Result<()> {
        self.write(name, |w| {
            self.header.write(w)?;
            write_dataset(w, data)
        })
    }
}

/// `quantity,value` rows after the header.
fn write_pairs<W: Write>(w: &mut W, header: &Header, rows: &[(String, String)]) -> Result<()> {
    header.write(w)?;
    let mut out = output::csv_writer(w);
    out.write_record(["quantity", "value"])?;
    for (k, v) in rows {
        out.write_record([k, v])?;
    }
    out.flush()?;
    Ok(())
}

fn load_learner(path: &Path) -> Result<PacState> {
    Ok(Checkpoint::load(path)?.into_state())
}

pub fn train(ctx: &Context, dataset: Option<&Path>) -> Result<()> {
    let cfg = &ctx.cfg;
    let data = match dataset {
        Some(p) => read_dataset(File::open(p)?)?,
        None => {
            let data = build_dataset(&demonstration_events(&cfg.sim, &cfg.weights)?, &cfg.weights)?;
            ctx.write_dataset("dataset.csv", &data)?;
            data
        }
    };
    println!("training on {} samples from {} events", data.samples.len(), data.events_used);
    let model = merging_model(cfg.sim.dt, cfg.weights)?;
    let outcome = train_learner(&data.samples, &model, &cfg.train)?;
    let state = &outcome.state;
    println!("z_avg {} S {:?}", state.critic.z_avg, state.actor.s_hat.as_slice());
    ctx.write("checkpoint.txt", |w| Checkpoint::from_state(state).write(w, &ctx.header))?;
    ctx.write("metrics.csv", |w| output::write_metrics(w, &ctx.header, &outcome.metrics))
}

pub fn oracle(ctx: &Context) -> Result<()> {
    let o = &ctx.cfg.oracle;
    let bench = &o.benchmark;
    let grid = bench.grid()?;
    let model = bench.model()?;
    let sol = bench.solve()?;
    ctx.write("oracle.csv", |w| {
        ctx.header.write(w)?;
        sol.write_csv(&grid, w)
    })?;
    let samples = bench.passive_samples(o.samples, ctx.cfg.seed)?;
    let outcome = train_learner(&samples, &model, &o.train)?;
    let state = &outcome.state;
    let rmse = anchored_rmse(state, &sol, &grid, o.central_fraction)?;
    let settings = EpisodeSettings { episodes: o.episodes, horizon: o.steps, burn_in: 0, seed: ctx.cfg.seed };
    let start = sol.least_value_point(&grid);
    let oracle_cost = oracle_policy_and_cost(&sol, &model, &grid, settings)?;
    let learned_cost = simulate_average_cost(&model, &grid, &start, |x| state.action(x), settings)?;
    let passive_cost = simulate_average_cost(&model, &grid, &start, |_| Ok(vec![0.0]), settings)?;
    let z_err = (state.critic.z_avg - sol.z_avg).abs() / sol.z_avg;
    let rows: Vec<(String, String)> = [
        ("z_avg_oracle", sol.z_avg),
        ("z_avg_learned", state.critic.z_avg),
        ("z_avg_relative_error", z_err),
        ("value_rmse", rmse),
        ("oracle_residual", sol.residual),
        ("control_scale_learned", state.actor.s_hat[(0, 0)]),
        ("control_scale_noise", control_scale_from_noise(&model)?[(0, 0)]),
        ("cost_per_step_oracle", oracle_cost.cost_per_step),
        ("cost_per_step_learned", learned_cost.cost_per_step),
        ("cost_per_step_passive", passive_cost.cost_per_step),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), fmt_f64(v)))
    .collect();
    println!("Z_avg oracle {} learned {} (rel err {z_err:.2e}); RMSE(V) {rmse:.4}", sol.z_avg, state.critic.z_avg);
    ctx.write("oracle_report.csv", |w| write_pairs(w, &ctx.header, &rows))?;
    ctx.write("oracle_metrics.csv", |w| output::write_metrics(w, &ctx.header, &outcome.metrics))
}

pub fn simulate(ctx: &Context, checkpoint: Option<&Path>, switch: bool, policy: &str, episodes: usize) -> Result<()> {
    let policy = Policy::parse(policy)?;
    let learner = checkpoint.map(load_learner).transpose()?;
    let (sim, count) = if switch { (ctx.cfg.sim.switch_scenario(), 1) } else { (ctx.cfg.sim.clone(), episodes) };
    let mut logs = Vec::with_capacity(count);
    let mut results = Vec::with_capacity(count);
    for e in 0..count as u64 {
        let mut log = Vec::new();
        let r = rollout_episode(policy, &sim, e, learner.as_ref(), &ctx.cfg.weights, Some(&mut log))?;
        println!("episode {e}: success {} switches {} steps {}", r.success, r.switches, r.steps);
        logs.push((e, log));
        results.push((e, r));
    }
    let name = policy.name();
    ctx.write("decisions.csv", |w| output::write_decision_log(w, &ctx.header, &name, &logs))?;
    ctx.write("episodes.csv", |w| output::write_episode_summary(w, &ctx.header, &name, &results))
}

pub fn evaluate(ctx: &Context, checkpoint: &Path, episodes: Option<usize>) -> Result<()> {
    let learner = load_learner(checkpoint)?;
    let mut sim = ctx.cfg.sim.clone();
    if let Some(n) = episodes {
        sim.episodes = n;
    }
    let policies = Policy::comparison_set(sim.spots.max_candidates);
    let rows = evaluate_policies(&policies, &sim, Some(&learner), &ctx.cfg.weights)?;
    for r in &rows {
        println!(
            "{:14} success {:.3} [{:.3}, {:.3}] cost {:.4}",
            r.policy, r.rate, r.rate_ci_lo, r.rate_ci_hi, r.mean_cost
        );
    }
    ctx.write("results.csv", |w| output::write_results(w, &ctx.header, &rows))?;
    ctx.write("plot_data.csv", |w| output::write_plot_data(w, &ctx.header, &rows))
}

pub fn ingest(ctx: &Context, input: &Path, units: Option<&str>) -> Result<()> {
    let ic = &ctx.cfg.ingest;
    let units = units.map(Units::parse).transpose()?.unwrap_or(ic.units);
    let mut report = load_trajectories(input, units, ic.frame_dt)?;
    let rows_read: usize = report.tracks.iter().map(|t| t.frames.len()).sum::<usize>()
        + report.rejections.iter().map(|r| r.rows).sum::<usize>();
    let smoothed = smooth_tracks(&mut report, &ic.smoother, ic.frame_dt)?;
    let events = extract_events(&smoothed, &ic.extraction, ic.frame_dt);
    let data = build_dataset(&events, &ctx.cfg.weights)?;
    let mut rows = vec![
        ("rows_read".to_string(), rows_read.to_string()),
        ("tracks_smoothed".into(), smoothed.len().to_string()),
        ("rows_smoothed".into(), smoothed.iter().map(|t| t.frames.len()).sum::<usize>().to_string()),
    ];
    for (code, (tracks, n)) in report.rejection_summary() {
        rows.push((format!("rejected_tracks:{code}"), tracks.to_string()));
        rows.push((format!("rejected_rows:{code}"), n.to_string()));
    }
    rows.extend([
        ("events_found".into(), events.len().to_string()),
        ("events_used".into(), data.events_used.to_string()),
        ("events_dropped_short".into(), data.events_dropped.to_string()),
        ("samples".into(), data.samples.len().to_string()),
    ]);
    for (k, v) in &rows {
        println!("{k}: {v}");
    }
    ctx.write("ingest_report.csv", |w| write_pairs(w, &ctx.header, &rows))?;
    ctx.write("rejections.csv", |w| {
        ctx.header.write(w)?;
        let mut out = output::csv_writer(w);
        out.write_record(["vehicle_id", "reason", "rows"])?;
        for r in &report.rejections {
            out.write_record([r.vehicle_id.to_string(), r.reason.code().to_string(), r.rows.to_string()])?;
        }
        out.flush()?;
        Ok(())
    })?;
    ctx.write_dataset("dataset.csv", &data)
}

pub fn corpus(ctx: &Context, episodes: Option<usize>, noise: f64) -> Result<()> {
    let mut sim = ctx.cfg.sim.clone();
    if let Some(n) = episodes {
        sim.train_episodes = n;
    }
    let events = demonstration_events(&sim, &ctx.cfg.weights)?;
    let tracks = events_to_tracks(&events, &ctx.cfg.ingest.extraction, noise, ctx.cfg.seed)?;
    println!("{} events rendered as {} tracks", events.len(), tracks.len());
    ctx.write("tracks.csv", |w| {
        ctx.header.write(w)?;
        write_trajectories(w, &tracks, ctx.cfg.ingest.units)
    })
}

pub fn print_config(ctx: &Context) -> Result<()> {
    println!("{}", ctx.cfg.to_json()?);
    Ok(())
}

pub fn gradcheck(ctx: &Context, probes: usize) -> Result<()> {
    if probes == 0 {
        return Err(Error::Argument("probes must be positive".into()));
    }
    let reports = gradcheck::run_all(probes, ctx.cfg.seed)?;
    ctx.write("gradcheck.csv", |w| {
        ctx.header.write(w)?;
        let mut out = output::csv_writer(w);
        out.write_record(["suite", "probes", "max_rel_err", "tolerance", "passed"])?;
        for r in &reports {
            out.write_record([
                r.name.to_string(),
                r.probes.to_string(),
                fmt_f64(r.max_rel_err),
                fmt_f64(r.tolerance),
                u8::from(r.passed()).to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    })?;
    for r in &reports {
        println!(
            "{:22} probes {:4} max rel err {:.3e} {}",
            r.name,
            r.probes,
            r.max_rel_err,
            if r.passed() { "ok" } else { "FAILED" }
        );
    }
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::numeric(format!("gradient check ({})", failed.join(", "))))
    }
}
