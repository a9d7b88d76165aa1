//! Bi-level search over signal timing plans.
//!
//! The lower level is a synchronous global-best PSO over the five-parameter
//! split space for a fixed cycle length and reference shift; fitness is the
//! scalarized hierarchical objective from the CFD model. The upper level
//! enumerates candidate cycle lengths (and optionally reference shifts) with
//! a coarse pass followed by 1 s refinement around the incumbent, refitting
//! the arrival profiles once per candidate. Candidates evaluate independently
//! with sub-seeds derived from their coordinates, so the search is
//! deterministic regardless of thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cfd::{
    arrival_curve, build_wave_profile, phase_performance, A3Variant, ArrivalCurve, LostTime,
    PhaseTiming, WaveProfile,
};
use crate::config::{PsoConfig, RunConfig};
use crate::error::{Error, Result};
use crate::estimate::DischargeFit;
use crate::profile::{
    build_histogram, expected_cycle_arrival_time, fit_piecewise_constant, kde_smooth,
    silverman_bandwidth, ArrivalProfile, FitParams,
};
use crate::ring::{decode_and_repair, min_feasible_cycle, DualRingPlan, SplitVector};
use crate::scalar::{fl, Scalar};

/// Everything needed to evaluate one phase under a candidate plan.
#[derive(Debug, Clone)]
pub struct PhaseModel<F> {
    pub wave: WaveProfile<F>,
    pub curve: ArrivalCurve<F>,
    pub fit: DischargeFit<F>,
    pub lanes: u32,
}

/// Objective components of one plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue<F> {
    /// Lane-weighted exceeded queue dissipation time, s.
    pub f_green: F,
    /// Average delay, s/veh.
    pub f_delay: F,
    pub f_hybrid: F,
}

/// Evaluates the hierarchical objective of a plan against the phase models.
pub fn plan_objective<F: Scalar>(
    plan: &DualRingPlan<F>,
    models: &[PhaseModel<F>],
    delta: F,
    g_min: F,
    lost: LostTime<F>,
    variant: A3Variant,
) -> Result<ObjectiveValue<F>> {
    let mut f_green = F::zero();
    let mut delay = F::zero();
    let mut volume = F::zero();
    for (k, model) in models.iter().enumerate() {
        let (g_s, g_e) = plan.greens[k];
        let timing =
            PhaseTiming::new(g_s, g_e, plan.yellow, plan.all_red, g_min, model.lanes, lost)?;
        let perf =
            phase_performance(&model.wave, &model.curve, &timing, &model.fit, variant)?;
        let z = F::from_u32(model.lanes).unwrap();
        f_green = f_green + z * perf.g_exceed;
        delay = delay + z * perf.d_total;
        volume = volume + z * perf.v_total;
    }
    let f_delay = if volume > F::zero() { delay / volume } else { F::zero() };
    Ok(ObjectiveValue { f_green, f_delay, f_hybrid: f_delay + delta * f_green })
}

/// Lower-level PSO over green splits for a fixed `(C, dphi)` candidate.
///
/// Velocity is clamped to `[-0.5, 0.5]` per dimension and positions to
/// `[0, 1]`; the swarm stops after `patience` iterations without improvement.
/// Deterministic for a given seed.
pub fn pso_green_splits<F: Scalar>(
    models: &[PhaseModel<F>],
    c: F,
    dphi: F,
    yellow: F,
    all_red: F,
    g_min: F,
    delta: F,
    lost: LostTime<F>,
    variant: A3Variant,
    pso: &PsoConfig,
    seed: u64,
) -> Result<(DualRingPlan<F>, ObjectiveValue<F>)> {
    const DIMS: usize = 5;
    // fail fast if the cycle cannot host a plan at all
    decode_and_repair(&SplitVector([fl::<F>(0.5); DIMS]), c, dphi, yellow, all_red, g_min)?;

    let evaluate = |x: &[F; DIMS]| -> F {
        match decode_and_repair(&SplitVector(*x), c, dphi, yellow, all_red, g_min) {
            Ok(plan) => match plan_objective(&plan, models, delta, g_min, lost, variant) {
                Ok(value) => value.f_hybrid,
                Err(_) => F::infinity(),
            },
            Err(_) => F::infinity(),
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = pso.swarm.max(2);
    let mut positions: Vec<[F; DIMS]> = (0..n)
        .map(|_| std::array::from_fn(|_| fl(rng.gen::<f64>())))
        .collect();
    let mut velocities: Vec<[F; DIMS]> = vec![[F::zero(); DIMS]; n];
    let mut personal_best = positions.clone();
    let mut personal_value: Vec<F> = positions.iter().map(|x| evaluate(x)).collect();
    let (mut best_idx, _) = personal_value
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap();
    let mut global_best = personal_best[best_idx];
    let mut global_value = personal_value[best_idx];

    let inertia = fl::<F>(pso.inertia);
    let c1 = fl::<F>(pso.c1);
    let c2 = fl::<F>(pso.c2);
    let v_clamp = fl::<F>(0.5);
    let mut stale = 0usize;
    for _ in 0..pso.max_iter {
        for i in 0..n {
            for d in 0..DIMS {
                let r1: F = fl(rng.gen::<f64>());
                let r2: F = fl(rng.gen::<f64>());
                let v = inertia * velocities[i][d]
                    + c1 * r1 * (personal_best[i][d] - positions[i][d])
                    + c2 * r2 * (global_best[d] - positions[i][d]);
                velocities[i][d] = v.max(-v_clamp).min(v_clamp);
                positions[i][d] =
                    (positions[i][d] + velocities[i][d]).max(F::zero()).min(F::one());
            }
        }
        let mut improved = false;
        for i in 0..n {
            let value = evaluate(&positions[i]);
            if value < personal_value[i] {
                personal_value[i] = value;
                personal_best[i] = positions[i];
            }
        }
        for (i, &value) in personal_value.iter().enumerate() {
            if value < global_value - fl::<F>(1e-12) * global_value.abs().max(F::one()) {
                global_value = value;
                best_idx = i;
                global_best = personal_best[i];
                improved = true;
            }
        }
        let _ = best_idx;
        stale = if improved { 0 } else { stale + 1 };
        if stale > pso.patience {
            break;
        }
    }

    let plan = decode_and_repair(&SplitVector(global_best), c, dphi, yellow, all_red, g_min)?;
    let value = plan_objective(&plan, models, delta, g_min, lost, variant)?;
    Ok((plan, value))
}

/// Demand estimate of one phase, as the upper level consumes it.
#[derive(Debug, Clone)]
pub struct PhaseSnapshot {
    pub phase: u8,
    /// Per-lane average arrival rate, veh/s.
    pub lambda0: f64,
    pub lanes: u32,
    pub fit: DischargeFit<f64>,
    /// Expected arrival times of all CVs of the phase, absolute seconds.
    pub expected_arrivals: Vec<f64>,
}

/// One evaluated upper-level candidate; `f` is `None` when infeasible.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    #[serde(rename = "C")]
    pub c: f64,
    pub dphi: f64,
    pub f: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct OptimizeOutcome {
    pub plan: DualRingPlan<f64>,
    pub objective: ObjectiveValue<f64>,
    pub trace: Vec<TracePoint>,
}

#[derive(Debug, Clone, Copy)]
pub struct OptimizeOptions {
    /// Also search the reference shift.
    pub ref_point: bool,
    pub seed: u64,
}

/// Refits one phase's arrival profile for a candidate `(C, dphi)`: fold the
/// expected arrivals, bin them, smooth at low penetration (or, without a
/// penetration hint, when the sample is sparser than one arrival per bin),
/// then run the greedy piecewise-constant fit. Phases without arrivals fall
/// back to the uniform profile.
pub fn fit_phase_profile(
    expected_arrivals: &[f64],
    cfg: &RunConfig,
    c: f64,
    dphi: f64,
) -> Result<ArrivalProfile<f64>> {
    if expected_arrivals.is_empty() {
        return Ok(ArrivalProfile::uniform(c));
    }
    let t_ec: Vec<f64> = expected_arrivals
        .iter()
        .map(|&t| expected_cycle_arrival_time(t, c, dphi))
        .collect::<Result<_>>()?;
    let mut hist = build_histogram(&t_ec, c, cfg.profile.bin)?;
    let n_bins = (c / cfg.profile.bin).round() as usize;
    let sparse = match cfg.penetration {
        Some(p) => p <= cfg.profile.kde_threshold,
        None => t_ec.len() < n_bins,
    };
    if sparse {
        hist = kde_smooth(&hist, silverman_bandwidth(&t_ec, c))?;
    }
    let params = FitParams {
        max_segments: cfg.profile.max_segments,
        min_segment_len: cfg.profile.min_segment_len,
        sse_gain_threshold: 0.01,
    };
    fit_piecewise_constant(&hist, &params)
}

/// Builds the per-phase CFD models for one candidate.
pub fn build_phase_models(
    phases: &[PhaseSnapshot],
    cfg: &RunConfig,
    c: f64,
    dphi: f64,
) -> Result<Vec<PhaseModel<f64>>> {
    phases
        .iter()
        .map(|snap| {
            let profile = fit_phase_profile(&snap.expected_arrivals, cfg, c, dphi)?;
            let wave = build_wave_profile(&profile, snap.lambda0, cfg.d0, snap.fit.v)?;
            let curve = arrival_curve(&wave);
            Ok(PhaseModel { wave, curve, fit: snap.fit, lanes: snap.lanes })
        })
        .collect()
}

fn sub_seed(seed: u64, c: f64, dphi: f64) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for part in [(c * 10.0).round() as u64, (dphi * 10.0).round() as u64 ^ 0xabcd_ef12] {
        h ^= part;
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
    }
    h
}

struct CandidateResult {
    trace: TracePoint,
    best: Option<(DualRingPlan<f64>, ObjectiveValue<f64>)>,
}

fn eval_candidate(
    phases: &[PhaseSnapshot],
    cfg: &RunConfig,
    c: f64,
    dphi: f64,
    seed: u64,
) -> CandidateResult {
    let attempt = || -> Result<(DualRingPlan<f64>, ObjectiveValue<f64>)> {
        let models = build_phase_models(phases, cfg, c, dphi)?;
        pso_green_splits(
            &models,
            c,
            dphi,
            cfg.y,
            cfg.r_a,
            cfg.g_min,
            cfg.delta,
            cfg.lost_time,
            cfg.a3_variant,
            &cfg.pso,
            sub_seed(seed, c, dphi),
        )
    };
    match attempt() {
        Ok((plan, value)) => CandidateResult {
            trace: TracePoint { c, dphi, f: Some(value.f_hybrid) },
            best: Some((plan, value)),
        },
        Err(e) => {
            log::debug!("candidate C={c} dphi={dphi} infeasible: {e}");
            CandidateResult { trace: TracePoint { c, dphi, f: None }, best: None }
        }
    }
}

/// Sweeps the reference shift for a fixed cycle length: 5 s grid over
/// `[0, C)` plus 1 s refinement around the best, cyclically.
fn eval_cycle(
    phases: &[PhaseSnapshot],
    cfg: &RunConfig,
    c: f64,
    opts: &OptimizeOptions,
) -> Vec<CandidateResult> {
    if !opts.ref_point {
        return vec![eval_candidate(phases, cfg, c, 0.0, opts.seed)];
    }
    let mut dphis: Vec<f64> = Vec::new();
    let mut grid = 0.0;
    while grid < c {
        dphis.push(grid);
        grid += 5.0;
    }
    let mut results: Vec<CandidateResult> = dphis
        .par_iter()
        .map(|&dphi| eval_candidate(phases, cfg, c, dphi, opts.seed))
        .collect();
    if let Some(best) = best_of(&results) {
        let center = best.0.dphi;
        let refine: Vec<f64> = (-4..=4)
            .map(|off| (center + off as f64).rem_euclid(c))
            .filter(|d| !results.iter().any(|r| (r.trace.dphi - d).abs() < 0.5))
            .collect();
        let extra: Vec<CandidateResult> = refine
            .par_iter()
            .map(|&dphi| eval_candidate(phases, cfg, c, dphi, opts.seed))
            .collect();
        results.extend(extra);
    }
    results
}

fn best_of(results: &[CandidateResult]) -> Option<(&DualRingPlan<f64>, &ObjectiveValue<f64>)> {
    results
        .iter()
        .filter_map(|r| r.best.as_ref().map(|(p, v)| (p, v)))
        .min_by(|a, b| {
            (a.1.f_hybrid, a.0.c, a.0.dphi)
                .partial_cmp(&(b.1.f_hybrid, b.0.c, b.0.dphi))
                .unwrap()
        })
}

/// Upper-level enumeration: coarse 5 s pass over the cycle range, then 1 s
/// refinement around the incumbent, with the full evaluation trace.
pub fn optimize(
    phases: &[PhaseSnapshot],
    cfg: &RunConfig,
    opts: &OptimizeOptions,
) -> Result<OptimizeOutcome> {
    let min_c = min_feasible_cycle(cfg.y, cfg.r_a, cfg.g_min);
    if cfg.c_max < min_c {
        return Err(Error::NoFeasibleCycle {
            c_min: cfg.c_min,
            c_max: cfg.c_max,
            detail: format!(
                "minimum feasible cycle is {min_c} (4(y + r_a) + 4 g_min) but c_max = {}",
                cfg.c_max
            ),
        });
    }
    let mut coarse: Vec<f64> = Vec::new();
    let mut c = cfg.c_min;
    while c <= cfg.c_max + 1e-9 {
        coarse.push(c);
        c += 5.0;
    }
    if coarse.last().map_or(true, |&last| (last - cfg.c_max).abs() > 1e-9) {
        coarse.push(cfg.c_max);
    }

    let mut all: Vec<CandidateResult> = Vec::new();
    for &c in &coarse {
        all.extend(eval_cycle(phases, cfg, c, opts));
    }
    let incumbent_c = best_of(&all).map(|(p, _)| p.c);
    if let Some(center) = incumbent_c {
        let done: Vec<f64> = all.iter().map(|r| r.trace.c).collect();
        let refine: Vec<f64> = (-4..=4)
            .map(|off| center + off as f64)
            .filter(|&c| c >= cfg.c_min - 1e-9 && c <= cfg.c_max + 1e-9)
            .filter(|&c| !done.iter().any(|&d| (d - c).abs() < 1e-9))
            .collect();
        for c in refine {
            all.extend(eval_cycle(phases, cfg, c, opts));
        }
    }

    let trace: Vec<TracePoint> = all.iter().map(|r| r.trace).collect();
    match best_of(&all) {
        Some((plan, value)) => {
            Ok(OptimizeOutcome { plan: *plan, objective: *value, trace })
        }
        None => Err(Error::NoFeasibleCycle {
            c_min: cfg.c_min,
            c_max: cfg.c_max,
            detail: "every candidate was infeasible (cycle structure or jam capacity)".into(),
        }),
    }
}
