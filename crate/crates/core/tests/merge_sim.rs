//! Traffic preset, reproducibility and learned-policy scale on the merge simulator.

use std::sync::OnceLock;

use pacmpdm::merging::{self, merging_model, Body, CostWeights};
use pacmpdm::mpdm::{enumerate_spots, select_policy, MainlineVehicle, Scene, MAX_ACCEL, MIN_ACCEL};
use pacmpdm::pac::train;
use pacmpdm::pipeline::build_dataset;
use pacmpdm::sim::{demonstration_events, evaluate, gen_traffic, rollout_episode, Policy, SimConfig};
use pacmpdm::{PacState, ValueFunction};

fn learner() -> &'static PacState {
    static CELL: OnceLock<PacState> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = SimConfig::default();
        let w = CostWeights::default();
        let data = build_dataset(&demonstration_events(&cfg, &w).unwrap(), &w).unwrap();
        train(&data.samples, &merging_model(cfg.dt, w).unwrap(), &merging::train_config(0)).unwrap().state
    })
}

#[test]
fn preset_traffic_is_congested_and_collision_free() {
    let cfg = SimConfig::default();
    let (mut speed, mut gap) = (0.0, f64::INFINITY);
    for e in 0..100 {
        let t = gen_traffic(&cfg, e).unwrap();
        speed += t.mean_speed() / 100.0;
        gap = gap.min(t.min_gap());
    }
    println!("mean speed {speed:.3} m/s, smallest bumper gap {gap:.3} m");
    assert!((2.0..=8.0).contains(&speed));
    assert!(gap > 0.0);
}

#[test]
fn fixed_spot_success_is_reproducible() {
    let cfg = SimConfig::default();
    let w = CostWeights::default();
    let a = evaluate(&[Policy::FixedSpot(2)], &cfg, Some(learner()), &w).unwrap();
    let b = evaluate(&[Policy::FixedSpot(2)], &cfg, Some(learner()), &w).unwrap();
    println!("always spot 2: {}/{}", a[0].successes, a[0].episodes);
    assert_eq!(a, b);
    assert_eq!(a[0].rate.to_bits(), b[0].rate.to_bits());
    assert_eq!(a[0].mean_cost.to_bits(), b[0].mean_cost.to_bits());
}

#[test]
fn learned_commands_rarely_hit_the_limits() {
    let cfg = SimConfig { episodes: 200, ..SimConfig::default() };
    let w = CostWeights::default();
    let (mut steps, mut clipped) = (0usize, 0usize);
    for e in 0..cfg.episodes as u64 {
        let mut log = Vec::new();
        rollout_episode(Policy::Mpdm, &cfg, e, Some(learner()), &w, Some(&mut log)).unwrap();
        for row in &log {
            let raw = learner().action(&row.state.to_vec()).unwrap()[0];
            steps += 1;
            clipped += usize::from(!(MIN_ACCEL..=MAX_ACCEL).contains(&raw));
        }
    }
    let frac = clipped as f64 / steps as f64;
    println!("clipped {clipped}/{steps} ({:.2}%)", 100.0 * frac);
    assert!(frac < 0.05);
}

struct Shifted<'a>(&'a PacState, f64);

impl ValueFunction for Shifted<'_> {
    fn value(&self, x: &[f64]) -> pacmpdm::Result<f64> {
        Ok(self.0.value(x)? + self.1)
    }

    fn value_gradient(&self, x: &[f64]) -> pacmpdm::Result<Vec<f64>> {
        self.0.value_gradient(x)
    }
}

/// Scenes cut from generated traffic pick the same spot under `V` and `V + 7`.
#[test]
fn selection_ignores_value_offset() {
    let cfg = SimConfig::default();
    let l = learner();
    let mut decisions = 0;
    for e in 0..20 {
        let traffic = gen_traffic(&cfg, e).unwrap();
        for k in (0..traffic.frames.len()).step_by(50) {
            let frame = &traffic.frames[k];
            let mainline =
                traffic.ids.iter().zip(frame).map(|(id, body)| MainlineVehicle { id: *id, body: *body }).collect();
            let centre = frame[frame.len() / 2];
            let ego =
                Body { position: centre.position - 3.0, velocity: centre.velocity + 0.5, length: cfg.vehicle_length };
            let scene = Scene { timestamp: k as f64 * cfg.dt, ego, mainline };
            let candidates = enumerate_spots(&scene, &cfg.spots).unwrap();
            if candidates.len() < 2 {
                continue;
            }
            let (a, scores) = select_policy(&candidates, l).unwrap();
            let (b, shifted) = select_policy(&candidates, &Shifted(l, 7.0)).unwrap();
            assert_eq!(a, b);
            for (s, t) in scores.iter().zip(&shifted) {
                assert!((t - s - 7.0).abs() < 1e-9);
            }
            decisions += 1;
        }
    }
    assert!(decisions >= 100, "{decisions}");
}
