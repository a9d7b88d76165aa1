//! Per-phase demand estimation from queued-CV observations.
//!
//! The average arrival rate of each phase is first estimated by a weighted
//! maximum likelihood over queued CVs, where the weight of an observation is
//! the cumulative arrival profile at its cycle arrival time. Phase estimates
//! are then redistributed using observed CV counts, which conserves the total
//! volume while pulling individual phases toward the count proportions.
//! Saturated phases are handled by subtracting the overflow-queue position
//! before the likelihood step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::QueuedObservation;
use crate::profile::ArrivalProfile;
use crate::scalar::{fl, Scalar};

/// Overflow-queue state of one phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverflowState {
    /// Maximum overflow queue position (0 when unsaturated).
    pub n_oq: u32,
    pub saturated: bool,
}

/// A queue position is an overflow position when more than half of the queued
/// CVs seen there queued more than once; the state keeps the maximum such
/// position.
pub fn detect_overflow(observations: &[QueuedObservation]) -> OverflowState {
    use std::collections::HashMap;
    let mut per_pos: HashMap<u32, (u32, u32)> = HashMap::new();
    for obs in observations {
        let e = per_pos.entry(obs.n_q).or_insert((0, 0));
        e.0 += 1;
        if obs.queued_more_than_once {
            e.1 += 1;
        }
    }
    let n_oq = per_pos
        .iter()
        .filter(|(_, &(total, multi))| 2 * multi > total)
        .map(|(&p, _)| p)
        .max()
        .unwrap_or(0);
    OverflowState { n_oq, saturated: n_oq > 0 }
}

/// Sets the corrected position `n_i` on each observation: identity when
/// unsaturated, `max(n_q - n_oq, 0)` when saturated.
pub fn correct_positions(observations: &mut [QueuedObservation], state: OverflowState) {
    for obs in observations.iter_mut() {
        obs.n_i = if state.saturated { obs.n_q.saturating_sub(state.n_oq) } else { obs.n_q };
    }
}

/// Weighted MLE of the per-lane arrival rate.
///
/// `lambda0 = sum(n_i * W_i) / sum(W_i^2)` with `W_i` the cumulative profile
/// at the observation's cycle arrival time.
pub fn wmle_rate<F: Scalar>(
    observations: &[(u32, F)],
    profile: &ArrivalProfile<F>,
    phase: u8,
) -> Result<F> {
    if observations.is_empty() {
        return Err(Error::NoQueuedCv(phase));
    }
    let mut num = F::zero();
    let mut den = F::zero();
    for &(n, t_ec) in observations {
        let w = profile.cumulative(t_ec)?;
        num = num + F::from_u32(n).unwrap() * w;
        den = den + w * w;
    }
    if den <= F::zero() {
        return Err(Error::DegenerateWeights(phase));
    }
    Ok(num / den)
}

/// One phase's demand figures before and after redistribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseDemand<F> {
    pub phase: u8,
    /// Per-lane rate from the WMLE step; `None` when the phase had no queued CVs.
    pub lambda0_raw: Option<F>,
    /// Per-lane rate after redistribution.
    pub lambda0: F,
    /// Observed CVs of the phase.
    pub n_cv: usize,
    /// Queued CVs of the phase.
    pub n_queued: usize,
    /// Lane count.
    pub lanes: u32,
}

/// Redistributes raw per-phase estimates using observed CV counts.
///
/// For phases with a WMLE estimate the redistributed rate blends the
/// estimate share and the CV-count share (weight `mix`, normally 0.5) of the
/// total volume; phases without queued CVs get the pure count share. The
/// total `sum(z * lambda0)` over WMLE phases is conserved exactly.
pub fn redistribute<F: Scalar>(phases: &mut [PhaseDemand<F>], mix: F) -> Result<()> {
    let with_est: Vec<usize> =
        (0..phases.len()).filter(|&i| phases[i].lambda0_raw.is_some()).collect();
    if with_est.is_empty() {
        return Err(Error::EstimationImpossible);
    }
    let total: F = with_est
        .iter()
        .map(|&i| F::from_u32(phases[i].lanes).unwrap() * phases[i].lambda0_raw.unwrap())
        .sum();
    let count_total: F =
        with_est.iter().map(|&i| F::from_usize(phases[i].n_cv).unwrap()).sum();
    if total <= F::zero() {
        // nothing to spread; keep zeros
        for p in phases.iter_mut() {
            p.lambda0 = F::zero();
        }
        return Ok(());
    }
    if count_total <= F::zero() {
        return Err(Error::Domain("no CVs observed on phases with queued CVs".into()));
    }
    for p in phases.iter_mut() {
        let z = F::from_u32(p.lanes).unwrap();
        let count_share = F::from_usize(p.n_cv).unwrap() / count_total;
        match p.lambda0_raw {
            Some(raw) => {
                let est_share = z * raw / total;
                p.lambda0 = (mix * est_share + (F::one() - mix) * count_share) * total / z;
            }
            None => {
                p.lambda0 = count_share * total / z;
            }
        }
    }
    Ok(())
}

/// Straight-line fit `y = slope * x + intercept`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit<F> {
    pub slope: F,
    pub intercept: F,
    pub iterations: usize,
}

fn weighted_line_fit<F: Scalar>(xs: &[F], ys: &[F], ws: &[F]) -> Option<LineFit<F>> {
    let mut sw = F::zero();
    let mut sx = F::zero();
    let mut sy = F::zero();
    let mut sxx = F::zero();
    let mut sxy = F::zero();
    for ((&x, &y), &w) in xs.iter().zip(ys).zip(ws) {
        sw = sw + w;
        sx = sx + w * x;
        sy = sy + w * y;
        sxx = sxx + w * x * x;
        sxy = sxy + w * x * y;
    }
    let det = sw * sxx - sx * sx;
    if det.abs() <= F::epsilon() * sw * sxx.max(F::one()) {
        return None;
    }
    let slope = (sw * sxy - sx * sy) / det;
    let intercept = (sy - slope * sx) / sw;
    Some(LineFit { slope, intercept, iterations: 0 })
}

fn median<F: Scalar>(values: &mut [F]) -> F {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / fl(2.0)
    }
}

/// Robust line fit under the Huber loss, solved by iteratively reweighted
/// least squares. `tuning` scales the MAD-based residual scale into the Huber
/// threshold; 1.345 is the standard choice. Identical to ordinary least
/// squares when all residuals fall within the threshold.
pub fn huber_line_fit<F: Scalar>(xs: &[F], ys: &[F], tuning: F) -> Result<LineFit<F>> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "line fit needs at least 2 points, got {}",
            xs.len().min(ys.len())
        )));
    }
    let ones = vec![F::one(); xs.len()];
    let mut fit = weighted_line_fit(xs, ys, &ones)
        .ok_or_else(|| Error::InsufficientData("degenerate abscissae for line fit".into()))?;
    let tol = fl::<F>(1e-8);
    let mad_to_sigma = fl::<F>(1.4826);
    for iter in 1..=100 {
        let mut resid: Vec<F> =
            xs.iter().zip(ys).map(|(&x, &y)| y - (fit.slope * x + fit.intercept)).collect();
        let mut abs: Vec<F> = resid.iter().map(|r| r.abs()).collect();
        let scale = median(&mut abs) * mad_to_sigma;
        if scale <= F::epsilon() {
            // residuals essentially zero: the OLS fit is exact
            fit.iterations = iter;
            return Ok(fit);
        }
        let delta = tuning * scale;
        let ws: Vec<F> = resid
            .iter_mut()
            .map(|r| {
                let a = r.abs();
                if a <= delta {
                    F::one()
                } else {
                    delta / a
                }
            })
            .collect();
        let next = weighted_line_fit(xs, ys, &ws)
            .ok_or_else(|| Error::InsufficientData("degenerate weighted fit".into()))?;
        let denom = fit.slope.abs().max(F::one());
        let moved = ((next.slope - fit.slope).abs() / denom)
            .max((next.intercept - fit.intercept).abs() / fit.intercept.abs().max(F::one()));
        fit = LineFit { iterations: iter, ..next };
        if moved < tol {
            break;
        }
    }
    Ok(fit)
}

/// Calibrated discharge-side parameters of one phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DischargeFit<F> {
    /// Queue discharging wave speed, m/s.
    pub w_m: F,
    /// Intercept of the initial-plan departure line; diagnostic only.
    pub xi0: F,
    /// Free-flow speed, m/s.
    pub v: F,
    /// Queue departure speed at the stop line, m/s.
    pub v_l: F,
    /// Saturated headway, s.
    pub h_s: F,
    /// Jam spacing, m.
    pub d0: F,
}

impl<F: Scalar> DischargeFit<F> {
    /// Assembles the fit and derives the saturated headway
    /// `h_s = d0 (1/w_m + 1/v_l)`.
    pub fn new(w_m: F, xi0: F, v: F, v_l: F, d0: F) -> Result<Self> {
        if w_m <= F::zero() {
            return Err(Error::DegenerateDischarge(w_m.to_f64().unwrap_or(f64::NAN)));
        }
        if v_l <= F::zero() || v_l > v {
            return Err(Error::Domain(format!("queue departure speed {v_l} outside (0, v]")));
        }
        let h_s = d0 * (F::one() / w_m + F::one() / v_l);
        Ok(DischargeFit { w_m, xi0, v, v_l, h_s, d0 })
    }
}

/// Fits the queue discharging wave from queue-leave points `(t, position)`
/// folded into cycle time under the initial plan.
pub fn fit_discharge_wave<F: Scalar>(points: &[(F, F)], tuning: F) -> Result<LineFit<F>> {
    if points.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "discharge wave fit needs at least 2 queue-leave points, got {}",
            points.len()
        )));
    }
    let xs: Vec<F> = points.iter().map(|p| p.0).collect();
    let ys: Vec<F> = points.iter().map(|p| p.1).collect();
    let fit = huber_line_fit(&xs, &ys, tuning)?;
    if fit.slope <= F::zero() {
        return Err(Error::DegenerateDischarge(fit.slope.to_f64().unwrap_or(f64::NAN)));
    }
    Ok(fit)
}

/// Interpolated p-th percentile (0..=1) of a sample.
pub fn percentile<F: Scalar>(values: &mut [F], p: F) -> Option<F> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n == 1 {
        return Some(values[0]);
    }
    let rank = p * F::from_usize(n - 1).unwrap();
    let lo = rank.floor().to_usize().unwrap().min(n - 1);
    let hi = (lo + 1).min(n - 1);
    let frac = rank - rank.floor();
    Some(values[lo] + (values[hi] - values[lo]) * frac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn obs(n_q: u32, multi: bool) -> QueuedObservation {
        QueuedObservation { n_q, n_i: 0, t_ec: 10.0, queued_more_than_once: multi, phase_id: 1 }
    }

    #[test]
    fn overflow_none_when_no_double_queues() {
        let observations: Vec<_> = (0..6).map(|i| obs(i, false)).collect();
        let state = detect_overflow(&observations);
        assert_eq!(state.n_oq, 0);
        assert!(!state.saturated);
    }

    #[test]
    fn overflow_majority_rule_at_position() {
        let mut observations = vec![obs(4, true), obs(4, true), obs(4, true), obs(4, false)];
        observations.push(obs(2, false));
        let state = detect_overflow(&observations);
        assert_eq!(state.n_oq, 4);
        assert!(state.saturated);
    }

    #[test]
    fn overflow_takes_maximum_position() {
        let observations = vec![obs(3, true), obs(3, true), obs(5, true), obs(5, true), obs(4, false)];
        assert_eq!(detect_overflow(&observations).n_oq, 5);
    }

    #[test]
    fn position_correction_branches() {
        let mut observations = vec![obs(5, false), obs(2, false)];
        correct_positions(&mut observations, OverflowState { n_oq: 0, saturated: false });
        assert_eq!(observations[0].n_i, 5);
        correct_positions(&mut observations, OverflowState { n_oq: 3, saturated: true });
        assert_eq!(observations[0].n_i, 2);
        // clamped at zero rather than going negative
        assert_eq!(observations[1].n_i, 0);
    }

    #[test]
    fn wmle_single_observation_uniform_profile() {
        let profile = ArrivalProfile::uniform(80.0);
        let rate = wmle_rate(&[(2, 20.0)], &profile, 1).unwrap();
        assert_relative_eq!(rate, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn wmle_two_observations_uniform_profile() {
        let profile = ArrivalProfile::uniform(80.0);
        let rate = wmle_rate(&[(1, 10.0), (3, 30.0)], &profile, 1).unwrap();
        assert_relative_eq!(rate, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn wmle_zero_positions_zero_rate() {
        let profile = ArrivalProfile::uniform(80.0);
        let rate = wmle_rate(&[(0, 10.0), (0, 50.0)], &profile, 1).unwrap();
        assert_relative_eq!(rate, 0.0);
    }

    #[test]
    fn wmle_requires_observations() {
        let profile = ArrivalProfile::<f64>::uniform(80.0);
        assert!(matches!(wmle_rate(&[], &profile, 3), Err(Error::NoQueuedCv(3))));
    }

    #[test]
    fn wmle_all_zero_weights_is_degenerate() {
        let profile = ArrivalProfile::uniform(80.0);
        assert!(matches!(
            wmle_rate(&[(2, 0.0)], &profile, 1),
            Err(Error::DegenerateWeights(1))
        ));
    }

    fn demand(phase: u8, raw: Option<f64>, n_cv: usize, lanes: u32) -> PhaseDemand<f64> {
        PhaseDemand { phase, lambda0_raw: raw, lambda0: 0.0, n_cv, n_queued: n_cv, lanes }
    }

    #[test]
    fn redistribution_identity_on_symmetric_input() {
        let mut phases = vec![demand(1, Some(0.1), 30, 2), demand(2, Some(0.1), 30, 2)];
        redistribute(&mut phases, 0.5).unwrap();
        assert_relative_eq!(phases[0].lambda0, 0.1, epsilon = 1e-12);
        assert_relative_eq!(phases[1].lambda0, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn redistribution_hand_example() {
        let mut phases = vec![demand(1, Some(0.10), 40, 1), demand(2, Some(0.20), 20, 1)];
        redistribute(&mut phases, 0.5).unwrap();
        assert_relative_eq!(phases[0].lambda0, 0.15, epsilon = 1e-12);
        assert_relative_eq!(phases[1].lambda0, 0.15, epsilon = 1e-12);
    }

    #[test]
    fn redistribution_conserves_total() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..200 {
            let mut phases: Vec<_> = (0..8)
                .map(|k| {
                    let has = rng.gen_bool(0.8);
                    demand(
                        k + 1,
                        has.then(|| rng.gen_range(0.01..0.3)),
                        rng.gen_range(1..200),
                        rng.gen_range(1..4),
                    )
                })
                .collect();
            if phases.iter().all(|p| p.lambda0_raw.is_none()) {
                phases[0].lambda0_raw = Some(0.1);
            }
            let before: f64 = phases
                .iter()
                .filter_map(|p| p.lambda0_raw.map(|r| r * p.lanes as f64))
                .sum();
            redistribute(&mut phases, 0.5).unwrap();
            let after: f64 = phases
                .iter()
                .filter(|p| p.lambda0_raw.is_some())
                .map(|p| p.lambda0 * p.lanes as f64)
                .sum();
            assert_relative_eq!(before, after, epsilon = 1e-9);
        }
    }

    #[test]
    fn redistribution_fails_without_any_estimate() {
        let mut phases = vec![demand(1, None, 10, 1)];
        assert!(matches!(redistribute(&mut phases, 0.5), Err(Error::EstimationImpossible)));
    }

    #[test]
    fn huber_exact_line() {
        let xs: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 3.5 * x + 2.0).collect();
        let fit = huber_line_fit(&xs, &ys, 1.345).unwrap();
        assert_relative_eq!(fit.slope, 3.5, epsilon = 1e-6);
        assert_relative_eq!(fit.intercept, 2.0, epsilon = 1e-6);
    }

    #[test]
    fn huber_matches_ols_for_small_residuals() {
        let mut rng = StdRng::seed_from_u64(11);
        let xs: Vec<f64> = (0..50).map(|i| i as f64 * 0.7).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0 + rng.gen_range(-0.01..0.01)).collect();
        let ones = vec![1.0; xs.len()];
        let ols = weighted_line_fit(&xs, &ys, &ones).unwrap();
        let huber = huber_line_fit(&xs, &ys, 1e6).unwrap();
        assert_relative_eq!(huber.slope, ols.slope, epsilon = 1e-9);
        assert_relative_eq!(huber.intercept, ols.intercept, epsilon = 1e-9);
    }

    #[test]
    fn huber_resists_outlier_better_than_ols() {
        let xs: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let mut ys: Vec<f64> = xs.iter().map(|x| 3.5 * x).collect();
        ys[7] += 50.0;
        let ones = vec![1.0; xs.len()];
        let ols = weighted_line_fit(&xs, &ys, &ones).unwrap();
        let fit = fit_discharge_wave(
            &xs.iter().copied().zip(ys.iter().copied()).collect::<Vec<_>>(),
            1.345,
        )
        .unwrap();
        let huber_err = (fit.slope - 3.5_f64).abs();
        let ols_err = (ols.slope - 3.5_f64).abs();
        assert!(huber_err / 3.5 <= 0.05);
        assert!(huber_err < ols_err);
    }

    #[test]
    fn discharge_fit_needs_two_points() {
        assert!(matches!(
            fit_discharge_wave::<f64>(&[(1.0, 2.0)], 1.345),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn headway_identity() {
        let fit = DischargeFit::new(3.5, 0.0, 14.0, 7.0, 7.0).unwrap();
        assert_relative_eq!(fit.h_s, 3.0, epsilon = 1e-12);
    }

    #[test]
    fn percentile_constant_sample() {
        let mut speeds = vec![14.0; 40];
        assert_relative_eq!(percentile(&mut speeds, 0.95).unwrap(), 14.0);
    }
}
