//! Trajectory ingestion and per-phase observation building.
//!
//! Input is a CSV of timestamped position/speed samples, one row per sample:
//! `vehicle_id,phase_id,t_s,x_m,speed_mps`. Positions are meters upstream of
//! the stop line (negative once crossed). From each trajectory we detect
//! queue join/leave episodes and derive the observation set consumed by the
//! demand estimator: spatial queue positions, expected arrival times, and
//! queue-leave points for the discharge-wave fit.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profile::expected_cycle_arrival_time;

pub const CSV_HEADER: [&str; 5] = ["vehicle_id", "phase_id", "t_s", "x_m", "speed_mps"];

/// One position/speed sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    /// Seconds since analysis-period start.
    pub t: f64,
    /// Meters upstream of the stop line; negative after crossing.
    pub x: f64,
    /// m/s, nonnegative.
    pub speed: f64,
}

/// All samples of one vehicle on one approach, time-sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub vehicle_id: String,
    pub phase_id: u8,
    pub points: Vec<TrajectoryPoint>,
}

/// A maximal stopped interval of one vehicle upstream of the stop line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueueEvent {
    pub join_t: f64,
    pub join_x: f64,
    pub leave_t: f64,
    pub leave_x: f64,
    /// 0-based index of this stop among the vehicle's stops.
    pub episode_index: usize,
}

/// One queued CV's contribution to the demand estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueuedObservation {
    /// Raw queuing position: vehicles ahead, from `floor(join_x / d0)`.
    pub n_q: u32,
    /// Corrected position after overflow subtraction.
    pub n_i: u32,
    /// Expected cycle arrival time under the initial plan, in `[0, C)`.
    pub t_ec: f64,
    pub queued_more_than_once: bool,
    pub phase_id: u8,
}

/// Parse results plus ingestion diagnostics.
#[derive(Debug, Default)]
pub struct ParseOutcome {
    pub trajectories: Vec<Trajectory>,
    pub malformed_rows: usize,
    pub dropped_vehicles: usize,
    pub warnings: Vec<String>,
}

impl ParseOutcome {
    fn warn(&mut self, msg: String) {
        log::warn!("{msg}");
        if self.warnings.len() < 50 {
            self.warnings.push(msg);
        }
    }
}

/// Reads the trajectory CSV, grouping rows into time-sorted trajectories per
/// `(vehicle_id, phase_id)`. Malformed rows are counted and skipped; vehicles
/// with repeated timestamps or fewer than two samples are dropped with a
/// warning. A missing or wrong header is fatal.
pub fn parse_trajectories<R: Read>(reader: R) -> Result<ParseOutcome> {
    let mut csv_reader = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    {
        let headers = csv_reader.headers()?;
        let got: Vec<&str> = headers.iter().map(str::trim).collect();
        if got != CSV_HEADER {
            return Err(Error::Config(format!(
                "trajectory CSV header mismatch: expected {:?}, got {:?}",
                CSV_HEADER.join(","),
                got.join(",")
            )));
        }
    }
    let mut outcome = ParseOutcome::default();
    let mut groups: BTreeMap<(String, u8), Vec<TrajectoryPoint>> = BTreeMap::new();
    for (line, record) in csv_reader.records().enumerate() {
        let record = record?;
        let parsed = (|| -> Option<(String, u8, TrajectoryPoint)> {
            if record.len() != 5 {
                return None;
            }
            let vid = record.get(0)?.trim();
            if vid.is_empty() {
                return None;
            }
            let phase: u8 = record.get(1)?.trim().parse().ok()?;
            if !(1..=8).contains(&phase) {
                return None;
            }
            let t: f64 = record.get(2)?.trim().parse().ok()?;
            let x: f64 = record.get(3)?.trim().parse().ok()?;
            let speed: f64 = record.get(4)?.trim().parse().ok()?;
            if !t.is_finite() || !x.is_finite() || !speed.is_finite() || speed < 0.0 {
                return None;
            }
            Some((vid.to_string(), phase, TrajectoryPoint { t, x, speed }))
        })();
        match parsed {
            Some((vid, phase, point)) => {
                groups.entry((vid, phase)).or_default().push(point);
            }
            None => {
                outcome.malformed_rows += 1;
                if outcome.malformed_rows <= 10 {
                    outcome.warn(format!("malformed row {} skipped", line + 2));
                }
            }
        }
    }
    for ((vid, phase), mut points) in groups {
        points.sort_by(|a, b| a.t.partial_cmp(&b.t).unwrap());
        if points.windows(2).any(|w| w[1].t <= w[0].t) {
            outcome.dropped_vehicles += 1;
            outcome.warn(format!("vehicle {vid} phase {phase}: repeated timestamps, dropped"));
            continue;
        }
        if points.len() < 2 {
            outcome.dropped_vehicles += 1;
            outcome.warn(format!("vehicle {vid} phase {phase}: fewer than 2 samples, dropped"));
            continue;
        }
        outcome.trajectories.push(Trajectory { vehicle_id: vid, phase_id: phase, points });
    }
    Ok(outcome)
}

/// Writes trajectories in the ingestion CSV schema.
pub fn write_trajectories<W: Write>(mut writer: W, trajectories: &[Trajectory]) -> Result<()> {
    writeln!(writer, "{}", CSV_HEADER.join(","))?;
    for traj in trajectories {
        for p in &traj.points {
            writeln!(writer, "{},{},{},{},{}", traj.vehicle_id, traj.phase_id, p.t, p.x, p.speed)?;
        }
    }
    Ok(())
}

/// Queue membership rule.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StopRule {
    /// Speeds below this count as stopped, m/s.
    pub stop_speed: f64,
    /// A stop must persist at least this long, s.
    pub min_stop_duration: f64,
}

impl Default for StopRule {
    fn default() -> Self {
        StopRule { stop_speed: 2.0, min_stop_duration: 2.0 }
    }
}

/// Finds maximal intervals where the vehicle is stopped upstream of the stop
/// line. Post-stop-line samples (x < 0) never extend a stop.
pub fn detect_queue_events(traj: &Trajectory, rule: StopRule) -> Vec<QueueEvent> {
    let mut events = Vec::new();
    let mut run_start: Option<usize> = None;
    let close_run = |start: Option<usize>, end: usize, events: &mut Vec<QueueEvent>| {
        if let Some(s) = start {
            let join = &traj.points[s];
            let leave = &traj.points[end];
            if leave.t - join.t >= rule.min_stop_duration {
                events.push(QueueEvent {
                    join_t: join.t,
                    join_x: join.x,
                    leave_t: leave.t,
                    leave_x: leave.x,
                    episode_index: events.len(),
                });
            }
        }
    };
    for (i, p) in traj.points.iter().enumerate() {
        let stopped = p.speed < rule.stop_speed && p.x >= 0.0;
        match (stopped, run_start) {
            (true, None) => run_start = Some(i),
            (false, Some(_)) => {
                close_run(run_start, i - 1, &mut events);
                run_start = None;
            }
            _ => {}
        }
    }
    close_run(run_start, traj.points.len() - 1, &mut events);
    events
}

/// Stop-line crossing time, linearly interpolated between the last upstream
/// and first downstream sample. `None` if the vehicle never crosses.
pub fn crossing_time(traj: &Trajectory) -> Option<f64> {
    let first_down = traj.points.iter().position(|p| p.x <= 0.0)?;
    if first_down == 0 {
        return Some(traj.points[0].t);
    }
    let a = &traj.points[first_down - 1];
    let b = &traj.points[first_down];
    if a.x == b.x {
        return Some(b.t);
    }
    Some(a.t + (b.t - a.t) * a.x / (a.x - b.x))
}

/// Everything the estimator needs from one phase's CV trajectories.
#[derive(Debug, Clone, Default)]
pub struct PhaseObservations {
    pub phase_id: u8,
    /// CVs observed on the phase (with a determinable expected arrival).
    pub n_cv: usize,
    /// Expected arrival times of all CVs, absolute seconds.
    pub expected_arrivals: Vec<f64>,
    /// One observation per queued CV, from its earliest queue episode.
    pub queued: Vec<QueuedObservation>,
    /// Queue-leave points `(absolute time, position m)` of all episodes.
    pub leave_points: Vec<(f64, f64)>,
    /// All point speeds (free-flow calibration).
    pub speeds: Vec<f64>,
    /// Stop-line crossing speeds of queued CVs (queue departure calibration).
    pub queued_crossing_speeds: Vec<f64>,
}

/// Analysis-period window in absolute seconds.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AnalysisWindow {
    pub start: f64,
    pub end: f64,
}

impl AnalysisWindow {
    pub fn contains(&self, t: f64) -> bool {
        t >= self.start && t < self.end
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }
}

/// Builds the per-phase observation sets under the initial plan.
///
/// For queued CVs the expected arrival projects the earliest queue join to
/// the stop line at free-flow speed; non-queued CVs use their crossing time.
/// Queue positions come from space: `n_q = floor(join_x / d0)`.
pub fn build_observations(
    trajectories: &[Trajectory],
    v_per_phase: &[f64; 8],
    c: f64,
    dphi: f64,
    d0: f64,
    rule: StopRule,
    window: AnalysisWindow,
) -> Result<Vec<PhaseObservations>> {
    if d0 <= 0.0 {
        return Err(Error::Config("jam spacing d0 must be positive".into()));
    }
    let mut phases: Vec<PhaseObservations> = (1..=8)
        .map(|k| PhaseObservations { phase_id: k, ..Default::default() })
        .collect();
    for traj in trajectories {
        let slot = &mut phases[(traj.phase_id - 1) as usize];
        let v = v_per_phase[(traj.phase_id - 1) as usize];
        if v <= 0.0 {
            return Err(Error::Config(format!(
                "free-flow speed for phase {} must be positive",
                traj.phase_id
            )));
        }
        let events = detect_queue_events(traj, rule);
        let t_e = match events.first() {
            Some(first) => first.join_t + first.join_x / v,
            None => match crossing_time(traj) {
                Some(t) => t,
                None => continue, // never queued, never crossed: no arrival evidence
            },
        };
        if !window.contains(t_e) {
            continue;
        }
        slot.n_cv += 1;
        slot.expected_arrivals.push(t_e);
        slot.speeds.extend(traj.points.iter().map(|p| p.speed));
        if let Some(first) = events.first() {
            let t_ec = expected_cycle_arrival_time(t_e, c, dphi)?;
            slot.queued.push(QueuedObservation {
                n_q: (first.join_x / d0).floor().max(0.0) as u32,
                n_i: 0,
                t_ec,
                queued_more_than_once: events.len() > 1,
                phase_id: traj.phase_id,
            });
            for ev in &events {
                if window.contains(ev.leave_t) {
                    slot.leave_points.push((ev.leave_t, ev.leave_x));
                }
            }
            if let Some(p) = traj.points.iter().find(|p| p.x <= 0.0) {
                slot.queued_crossing_speeds.push(p.speed);
            }
        }
    }
    Ok(phases)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn traj(phase: u8, samples: &[(f64, f64, f64)]) -> Trajectory {
        Trajectory {
            vehicle_id: "v1".into(),
            phase_id: phase,
            points: samples.iter().map(|&(t, x, speed)| TrajectoryPoint { t, x, speed }).collect(),
        }
    }

    #[test]
    fn parse_three_rows_one_vehicle() {
        let csv = "vehicle_id,phase_id,t_s,x_m,speed_mps\na,1,0,100,14\na,1,1,86,14\na,1,2,72,14\n";
        let out = parse_trajectories(csv.as_bytes()).unwrap();
        assert_eq!(out.trajectories.len(), 1);
        assert_eq!(out.trajectories[0].points.len(), 3);
        assert_eq!(out.malformed_rows, 0);
    }

    #[test]
    fn parse_empty_file_with_header() {
        let csv = "vehicle_id,phase_id,t_s,x_m,speed_mps\n";
        let out = parse_trajectories(csv.as_bytes()).unwrap();
        assert!(out.trajectories.is_empty());
        assert!(out.warnings.is_empty());
    }

    #[test]
    fn parse_missing_header_is_fatal() {
        let csv = "a,1,0,100,14\n";
        assert!(parse_trajectories(csv.as_bytes()).is_err());
    }

    #[test]
    fn parse_drops_vehicle_with_repeated_timestamps() {
        let csv = "vehicle_id,phase_id,t_s,x_m,speed_mps\na,1,0,100,14\na,1,0,86,14\nb,1,0,50,10\nb,1,1,40,10\n";
        let out = parse_trajectories(csv.as_bytes()).unwrap();
        assert_eq!(out.trajectories.len(), 1);
        assert_eq!(out.dropped_vehicles, 1);
        assert_eq!(out.warnings.len(), 1);
    }

    #[test]
    fn parse_counts_malformed_rows() {
        let csv = "vehicle_id,phase_id,t_s,x_m,speed_mps\na,9,0,100,14\na,1,zzz,100,14\na,1,0,100,-3\nb,2,0,10,5\nb,2,1,5,5\n";
        let out = parse_trajectories(csv.as_bytes()).unwrap();
        assert_eq!(out.malformed_rows, 3);
        assert_eq!(out.trajectories.len(), 1);
    }

    #[test]
    fn no_stop_no_events() {
        let t = traj(
            1,
            &[(0.0, 60.0, 12.0), (1.0, 48.0, 12.0), (2.0, 36.0, 12.0), (3.0, 24.0, 12.0)],
        );
        assert!(detect_queue_events(&t, StopRule::default()).is_empty());
    }

    #[test]
    fn single_stop_spans_slow_samples() {
        let t = traj(
            1,
            &[(0.0, 60.0, 12.0), (1.0, 30.0, 0.5), (2.0, 30.0, 0.4), (3.0, 30.0, 0.5), (4.0, 20.0, 11.0)],
        );
        let events = detect_queue_events(&t, StopRule::default());
        assert_eq!(events.len(), 1);
        assert_relative_eq!(events[0].join_t, 1.0);
        assert_relative_eq!(events[0].leave_t, 3.0);
        assert_eq!(events[0].episode_index, 0);
    }

    #[test]
    fn two_stops_two_episodes() {
        let t = traj(
            1,
            &[
                (0.0, 80.0, 12.0),
                (1.0, 50.0, 0.5),
                (2.0, 50.0, 0.5),
                (3.0, 50.0, 0.5),
                (4.0, 40.0, 8.0),
                (5.0, 30.0, 0.5),
                (6.0, 30.0, 0.5),
                (7.0, 30.0, 0.5),
                (8.0, 10.0, 10.0),
            ],
        );
        let events = detect_queue_events(&t, StopRule::default());
        assert_eq!(events.len(), 2);
        assert_eq!(events[0].episode_index, 0);
        assert_eq!(events[1].episode_index, 1);
    }

    #[test]
    fn short_stop_filtered_by_duration() {
        let t = traj(1, &[(0.0, 60.0, 12.0), (1.0, 30.0, 0.5), (2.0, 20.0, 12.0)]);
        assert!(detect_queue_events(&t, StopRule::default()).is_empty());
    }

    #[test]
    fn post_stop_line_samples_never_queue() {
        let t = traj(1, &[(0.0, 5.0, 12.0), (1.0, -2.0, 0.5), (2.0, -2.0, 0.5), (3.0, -2.0, 0.5)]);
        assert!(detect_queue_events(&t, StopRule::default()).is_empty());
    }

    fn window() -> AnalysisWindow {
        AnalysisWindow { start: 0.0, end: 1e9 }
    }

    #[test]
    fn observation_from_queued_vehicle() {
        // joins the queue at x = 28 m at t = 100 s, v = 14 -> t_e = 102
        let t = traj(
            2,
            &[
                (98.0, 56.0, 14.0),
                (100.0, 28.0, 0.5),
                (101.0, 28.0, 0.5),
                (102.0, 28.0, 0.5),
                (103.0, 28.0, 0.5),
                (104.0, 14.0, 7.0),
                (106.0, -1.0, 7.0),
            ],
        );
        let phases = build_observations(
            &[t],
            &[14.0; 8],
            80.0,
            0.0,
            7.0,
            StopRule::default(),
            window(),
        )
        .unwrap();
        let phase = &phases[1];
        assert_eq!(phase.n_cv, 1);
        assert_eq!(phase.queued.len(), 1);
        let obs = &phase.queued[0];
        assert_eq!(obs.n_q, 4); // floor(28/7)
        assert_relative_eq!(obs.t_ec, 22.0, epsilon = 1e-9);
        assert!(!obs.queued_more_than_once);
        assert_eq!(phase.queued_crossing_speeds.len(), 1);
    }

    #[test]
    fn queue_position_zero_at_stop_line() {
        let t = traj(
            1,
            &[(0.0, 10.0, 12.0), (1.0, 0.0, 0.5), (2.0, 0.0, 0.5), (3.0, 0.0, 0.5), (4.0, -5.0, 7.0)],
        );
        let phases = build_observations(
            &[t],
            &[14.0; 8],
            80.0,
            0.0,
            7.0,
            StopRule::default(),
            window(),
        )
        .unwrap();
        assert_eq!(phases[0].queued[0].n_q, 0);
    }

    #[test]
    fn floor_division_position() {
        let t = traj(
            1,
            &[(0.0, 40.0, 12.0), (1.0, 21.0, 0.5), (2.0, 21.0, 0.5), (3.0, 21.0, 0.5), (4.0, -1.0, 7.0)],
        );
        let phases = build_observations(
            &[t],
            &[14.0; 8],
            80.0,
            0.0,
            7.0,
            StopRule::default(),
            window(),
        )
        .unwrap();
        assert_eq!(phases[0].queued[0].n_q, 3);
    }

    #[test]
    fn rejects_nonpositive_speed_calibration() {
        let t = traj(1, &[(0.0, 10.0, 12.0), (1.0, 5.0, 12.0)]);
        let mut v = [14.0; 8];
        v[0] = 0.0;
        assert!(build_observations(&[t], &v, 80.0, 0.0, 7.0, StopRule::default(), window())
            .is_err());
    }

    #[test]
    fn roundtrip_reproduces_observations() {
        let trajs = vec![
            traj(
                3,
                &[
                    (10.0, 56.0, 14.0),
                    (12.0, 28.0, 0.5),
                    (13.0, 28.0, 0.4),
                    (15.0, 28.0, 0.5),
                    (16.0, 0.0, 6.0),
                    (18.0, -10.0, 9.0),
                ],
            ),
            traj(5, &[(0.0, 70.0, 14.0), (2.0, 42.0, 14.0), (5.0, -1.0, 13.0)]),
        ];
        let build = |ts: &[Trajectory]| {
            build_observations(ts, &[14.0; 8], 90.0, 5.0, 7.0, StopRule::default(), window())
                .unwrap()
        };
        let before = build(&trajs);
        let mut buf = Vec::new();
        write_trajectories(&mut buf, &trajs).unwrap();
        let reparsed = parse_trajectories(&buf[..]).unwrap();
        assert_eq!(reparsed.malformed_rows, 0);
        let after = build(&reparsed.trajectories);
        for (a, b) in before.iter().zip(after.iter()) {
            assert_eq!(a.queued, b.queued);
            assert_eq!(a.expected_arrivals, b.expected_arrivals);
        }
    }

    proptest! {
        #[test]
        fn cycle_arrival_time_always_in_range(
            t_e in -1000.0..5000.0f64,
            c in 20.0..200.0f64,
            frac in 0.0..0.999f64,
        ) {
            let dphi = frac * c;
            let t_ec = expected_cycle_arrival_time(t_e, c, dphi).unwrap();
            prop_assert!((0.0..c).contains(&t_ec));
        }

        #[test]
        fn queue_position_invariant_under_time_shift(shift in -500.0..500.0f64) {
            let base = traj(
                1,
                &[(0.0, 40.0, 12.0), (1.0, 21.0, 0.5), (2.0, 21.0, 0.5), (3.0, 21.0, 0.5), (4.0, -1.0, 7.0)],
            );
            let shifted = Trajectory {
                vehicle_id: base.vehicle_id.clone(),
                phase_id: 1,
                points: base
                    .points
                    .iter()
                    .map(|p| TrajectoryPoint { t: p.t + shift, ..*p })
                    .collect(),
            };
            let w = AnalysisWindow { start: -1e9, end: 1e9 };
            let a = build_observations(&[base], &[14.0; 8], 80.0, 0.0, 7.0, StopRule::default(), w).unwrap();
            let b = build_observations(&[shifted], &[14.0; 8], 80.0, 0.0, 7.0, StopRule::default(), w).unwrap();
            prop_assert_eq!(a[0].queued[0].n_q, b[0].queued[0].n_q);
        }
    }
}
