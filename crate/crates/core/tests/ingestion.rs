//! Trajectory ingestion, smoothing and dataset assembly against known ground truth.

use pacmpdm::merging::CostWeights;
use pacmpdm::pipeline::{
    build_dataset, events_to_tracks, extract_events, read_trajectories, rts_smooth, write_trajectories, Dataset,
    ExtractionRules, RawFrame, RawTrack, SmootherParams, Units,
};
use pacmpdm::sim::{demonstration_events, SimConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const DT: f64 = 0.1;

/// Smoothly varying speed: `v(t) = 8 + 2 sin(0.3 t)`.
fn truth(t: f64) -> (f64, f64) {
    (10.0 + 8.0 * t - (2.0 / 0.3) * ((0.3 * t).cos() - 1.0), 8.0 + 2.0 * (0.3 * t).sin())
}

fn noisy_track(frames: usize, noise: f64, seed: u64) -> RawTrack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, noise).unwrap();
    RawTrack {
        vehicle_id: 3,
        frames: (0..frames)
            .map(|k| {
                let t = k as f64 * DT;
                RawFrame {
                    frame: k as i64,
                    time: t,
                    lane: 6,
                    position: truth(t).0 + n.sample(&mut rng),
                    speed: None,
                    length: 4.5,
                }
            })
            .collect(),
    }
}

fn rms(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x * x, n + 1));
    (s / n as f64).sqrt()
}

#[test]
fn smoothing_cuts_position_error_threefold() {
    let raw = noisy_track(600, 0.3, 1);
    let smooth = rts_smooth(&raw, &SmootherParams::default(), DT).unwrap();
    let raw_err = rms(raw.frames.iter().map(|f| f.position - truth(f.time).0));
    let smooth_err = rms(smooth.frames.iter().map(|f| f.position - truth(f.time).0));
    println!("position rmse raw {raw_err:.4} smoothed {smooth_err:.4}");
    assert!(raw_err >= 3.0 * smooth_err);
    assert!(!smooth.flagged);
}

#[test]
fn differentiated_positions_reproduce_velocities() {
    let smooth = rts_smooth(&noisy_track(600, 0.3, 2), &SmootherParams::default(), DT).unwrap();
    let f = &smooth.frames;
    let err = rms((1..f.len() - 1).map(|k| (f[k + 1].position - f[k - 1].position) / (2.0 * DT) - f[k].velocity));
    println!("velocity consistency rms {err:.4}");
    assert!(err <= 0.05);
}

#[test]
fn trajectory_files_round_trip() {
    let mut track = noisy_track(200, 0.3, 3);
    for (k, f) in track.frames.iter_mut().enumerate() {
        f.speed = Some(truth(k as f64 * DT).1);
    }
    for units in [Units::Meters, Units::Feet] {
        let mut buf = Vec::new();
        write_trajectories(&mut buf, std::slice::from_ref(&track), units).unwrap();
        let back = read_trajectories(buf.as_slice(), units, DT).unwrap();
        assert!(back.rejections.is_empty());
        let got = &back.tracks[0];
        assert_eq!(got.vehicle_id, track.vehicle_id);
        for (a, b) in got.frames.iter().zip(&track.frames) {
            assert_eq!((a.frame, a.lane), (b.frame, b.lane));
            assert!((a.position - b.position).abs() <= 1e-9);
            assert!((a.speed.unwrap() - b.speed.unwrap()).abs() <= 1e-9);
            assert!((a.length - b.length).abs() <= 1e-9);
            assert!((a.time - b.time).abs() <= 1e-9);
        }
    }
}

fn moments(d: &Dataset) -> Vec<(f64, f64)> {
    let n = d.samples.len() as f64;
    (0..4)
        .map(|i| {
            let mean = d.samples.iter().map(|s| s.x[i]).sum::<f64>() / n;
            let var = d.samples.iter().map(|s| (s.x[i] - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt())
        })
        .collect()
}

/// Simulated merges rendered as noisy tracks and ingested again give the
/// same state distribution as the simulator's own kinematics.
#[test]
fn ingested_corpus_matches_simulator_moments() {
    let cfg = SimConfig { train_episodes: 150, ..SimConfig::default() };
    let w = CostWeights::default();
    let events = demonstration_events(&cfg, &w).unwrap();
    // only merges that end with the ego between its gap ends look like lane changes in recorded data
    let merged: Vec<_> = events
        .iter()
        .filter(|e| {
            e.frames.last().is_some_and(|f| f.follower.position < f.ego.position && f.ego.position < f.leader.position)
        })
        .cloned()
        .collect();
    let direct = build_dataset(&merged, &w).unwrap();
    let rules = ExtractionRules { lookback_frames: 100_000, ..ExtractionRules::default() };
    let tracks = events_to_tracks(&events, &rules, 0.3, 9).unwrap();
    let smoothed: Vec<_> = tracks.iter().map(|t| rts_smooth(t, &SmootherParams::default(), cfg.dt).unwrap()).collect();
    let ingested = build_dataset(&extract_events(&smoothed, &rules, cfg.dt), &w).unwrap();
    assert_eq!(ingested.events_used, direct.events_used);
    for (i, ((m_in, s_in), (m_sim, s_sim))) in moments(&ingested).into_iter().zip(moments(&direct)).enumerate() {
        println!("component {i}: ingested {m_in:.3} +- {s_in:.3}, simulator {m_sim:.3} +- {s_sim:.3}");
        assert!((m_in - m_sim).abs() <= 0.1 * s_sim, "component {i} mean");
        assert!((s_in - s_sim).abs() <= 0.1 * s_sim, "component {i} std");
    }
}

fn csv_rows() -> impl Strategy<Value = Vec<(u32, i64, f64)>> {
    prop::collection::vec((1u32..5, 0i64..30, -50.0..50.0f64), 0..60)
}

proptest! {
    /// Every data row either lands in a track or is counted in a rejection.
    #[test]
    fn no_row_is_silently_dropped(rows in csv_rows()) {
        let mut text = String::from("vehicle_id,frame,lane_id,local_y,velocity,length\n");
        for (id, frame, y) in &rows {
            text += &format!("{id},{frame},6,{y},,4.5\n");
        }
        let report = read_trajectories(text.as_bytes(), Units::Meters, DT).unwrap();
        let kept: usize = report.tracks.iter().map(|t| t.frames.len()).sum();
        let rejected: usize = report.rejections.iter().map(|r| r.rows).sum();
        prop_assert_eq!(kept + rejected, rows.len());
    }
}
