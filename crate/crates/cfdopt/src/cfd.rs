//! Cumulative flow diagram model of one phase.
//!
//! The arrival side maps the piecewise-constant arrival profile through the
//! shockwave time transform into a piecewise-linear cumulative arrival curve
//! measured as back-of-queue position in meters. The departure side is a
//! straight line at the fitted discharge wave speed, re-anchored by the
//! dissipation time of the queue accumulated after the effective green end.
//! Intersecting the two curves yields queue and delay measures as closed-form
//! functions of the timing parameters, which the optimizer evaluates millions
//! of times; everything here is allocation-free after construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::DischargeFit;
use crate::profile::ArrivalProfile;
use crate::scalar::{fl, Scalar};

/// Arrival profile mapped into transformed (wave) time.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveProfile<F> {
    profile: ArrivalProfile<F>,
    /// Transformed breakpoints, `tau_t[0] = 0`.
    tau_t: Vec<F>,
    /// Arrival wave speed per segment, m/s.
    speeds: Vec<F>,
    pub lambda0: F,
    pub d0: F,
    pub v: F,
}

/// Builds the wave-speed mapping of a profile for demand `lambda0`.
///
/// Requires the per-segment arrival flow `d0 * lambda0 * alpha_m` to stay
/// below the free-flow speed; at that point the wave speed diverges.
pub fn build_wave_profile<F: Scalar>(
    profile: &ArrivalProfile<F>,
    lambda0: F,
    d0: F,
    v: F,
) -> Result<WaveProfile<F>> {
    if v <= F::zero() || d0 <= F::zero() || lambda0 < F::zero() {
        return Err(Error::Domain("wave mapping needs v > 0, d0 > 0, lambda0 >= 0".into()));
    }
    let mut tau_t = Vec::with_capacity(profile.segments() + 1);
    let mut speeds = Vec::with_capacity(profile.segments());
    tau_t.push(F::zero());
    let mut cum = F::zero();
    for (m, w) in profile.breakpoints().windows(2).enumerate() {
        let alpha = profile.values()[m];
        let flow = d0 * lambda0 * alpha;
        if flow >= v {
            return Err(Error::ArrivalExceedsJamCapacity {
                segment: m,
                flow: flow.to_f64().unwrap_or(f64::NAN),
                v: v.to_f64().unwrap_or(f64::NAN),
            });
        }
        speeds.push(v * flow / (v - flow));
        cum = cum + alpha * (w[1] - w[0]);
        tau_t.push(w[1] - d0 * lambda0 * cum / v);
    }
    Ok(WaveProfile { profile: profile.clone(), tau_t, speeds, lambda0, d0, v })
}

impl<F: Scalar> WaveProfile<F> {
    pub fn profile(&self) -> &ArrivalProfile<F> {
        &self.profile
    }

    pub fn transformed_breakpoints(&self) -> &[F] {
        &self.tau_t
    }

    pub fn wave_speeds(&self) -> &[F] {
        &self.speeds
    }

    /// End of the transformed cycle.
    pub fn end_time(&self) -> F {
        *self.tau_t.last().unwrap()
    }
}

/// Piecewise-linear cumulative arrival curve over transformed time.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrivalCurve<F> {
    t: Vec<F>,
    s: Vec<F>,
    speeds: Vec<F>,
}

/// Integrates the wave profile into the cumulative arrival curve.
pub fn arrival_curve<F: Scalar>(wave: &WaveProfile<F>) -> ArrivalCurve<F> {
    let mut s = Vec::with_capacity(wave.tau_t.len());
    s.push(F::zero());
    for (m, w) in wave.tau_t.windows(2).enumerate() {
        let prev = *s.last().unwrap();
        s.push(prev + wave.speeds[m] * (w[1] - w[0]));
    }
    ArrivalCurve { t: wave.tau_t.clone(), s, speeds: wave.speeds.clone() }
}

impl<F: Scalar> ArrivalCurve<F> {
    pub fn end_time(&self) -> F {
        *self.t.last().unwrap()
    }

    /// Total arrival mass `d0 * lambda0 * C` in meters.
    pub fn end_mass(&self) -> F {
        *self.s.last().unwrap()
    }

    pub fn knots(&self) -> (&[F], &[F]) {
        (&self.t, &self.s)
    }

    /// Back-of-queue position at transformed time `t`.
    pub fn value(&self, t: F) -> Result<F> {
        let end = self.end_time();
        if t < F::zero() || t > end {
            return Err(Error::Domain(format!(
                "arrival curve query t = {t} outside [0, {end}]"
            )));
        }
        let m = match self.t[1..self.t.len() - 1].iter().position(|&b| t < b) {
            Some(m) => m,
            None => self.speeds.len() - 1,
        };
        Ok(self.s[m] + self.speeds[m] * (t - self.t[m]))
    }
}

/// Lost-time decomposition mapping displayed green to effective green.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LostTime<F> {
    /// Start-up lost time, s.
    pub startup: F,
    /// Unused portion of the yellow, s.
    pub unused_yellow: F,
}

impl<F: Scalar> Default for LostTime<F> {
    fn default() -> Self {
        LostTime { startup: fl(3.0), unused_yellow: fl(1.0) }
    }
}

/// Green window of one phase in common-origin cycle time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseTiming<F> {
    /// Displayed green start/end.
    pub g_s: F,
    pub g_e: F,
    /// Effective green start/end.
    pub t_egs: F,
    pub t_ege: F,
    pub yellow: F,
    pub all_red: F,
    pub g_min: F,
    /// Lane count of the phase.
    pub lanes: u32,
}

impl<F: Scalar> PhaseTiming<F> {
    pub fn new(
        g_s: F,
        g_e: F,
        yellow: F,
        all_red: F,
        g_min: F,
        lanes: u32,
        lost: LostTime<F>,
    ) -> Result<Self> {
        if g_s < F::zero() || g_e <= g_s {
            return Err(Error::Domain(format!("invalid green window [{g_s}, {g_e}]")));
        }
        if g_e - g_s < g_min - fl(1e-9) {
            return Err(Error::Domain(format!(
                "green {} below minimum {g_min}",
                g_e - g_s
            )));
        }
        let t_egs = g_s + lost.startup;
        let t_ege = g_e + yellow - lost.unused_yellow;
        if t_ege <= t_egs {
            return Err(Error::Domain("effective green is empty".into()));
        }
        Ok(PhaseTiming { g_s, g_e, t_egs, t_ege, yellow, all_red, g_min, lanes })
    }
}

/// Which total-delay geometry to use for the residual-queue area.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum A3Variant {
    /// Area under the arrival curve up to the intersection point.
    #[default]
    Printed,
    /// Additionally subtracts the departure-side triangle, leaving the area
    /// between the curves.
    Corrected,
}

/// Performance measures of one phase under one plan. Queue quantities are
/// back-of-queue meters; `d_total` is vehicle-seconds per lane per cycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhasePerformance<F> {
    pub q_a: F,
    pub t_a: F,
    pub q_b: F,
    pub t_boq: F,
    pub a1: F,
    pub a2: F,
    pub a3: F,
    /// Vehicles per lane per cycle.
    pub v_total: F,
    pub q_total: F,
    /// Vehicle-seconds per lane per cycle.
    pub d_total: F,
    pub q_over: F,
    pub g_exceed: F,
    /// No in-cycle intersection of the curves existed.
    pub oversaturated: bool,
}

/// Exceeded queue dissipation time against the displayed green end.
pub fn exceeded_green<F: Scalar>(q_total: F, h_s: F, d0: F, t_egs: F, g_e: F) -> F {
    let excess = q_total * h_s / d0 + t_egs - g_e;
    if excess <= F::zero() {
        F::zero()
    } else {
        excess
    }
}

/// Evaluates all performance measures of one phase.
pub fn phase_performance<F: Scalar>(
    wave: &WaveProfile<F>,
    curve: &ArrivalCurve<F>,
    timing: &PhaseTiming<F>,
    fit: &DischargeFit<F>,
    variant: A3Variant,
) -> Result<PhasePerformance<F>> {
    let profile = &wave.profile;
    let c = profile.cycle();
    if timing.t_egs < F::zero() || timing.t_egs >= c {
        return Err(Error::Domain(format!(
            "effective green start {} outside [0, {c})",
            timing.t_egs
        )));
    }
    if fit.w_m <= F::zero() {
        return Err(Error::DegenerateDischarge(fit.w_m.to_f64().unwrap_or(f64::NAN)));
    }
    let t_ege = timing.t_ege.min(c);
    let d0 = wave.d0;
    let lambda0 = wave.lambda0;
    let w_m = fit.w_m;
    let tau = profile.breakpoints();
    let tau_t = &wave.tau_t;
    let (_, knot_s) = curve.knots();
    let n_seg = wave.speeds.len();

    // queue accumulated between the effective green end and the cycle end
    let (q_a, a1) = if t_ege >= c {
        (F::zero(), F::zero())
    } else {
        let q_a = d0 * lambda0 * (c - profile.cumulative(t_ege)?);
        let s_idx = profile.segment_index(t_ege);
        let mut sum = F::zero();
        for j in s_idx..n_seg {
            sum = sum
                + (tau[j + 1] - tau[j])
                    * (knot_s[j + 1] + knot_s[j] - fl::<F>(2.0) * knot_s[s_idx]);
        }
        let correction = (fl::<F>(2.0) * c - tau[s_idx] - t_ege)
            * (d0 * lambda0 * profile.values()[s_idx] * (t_ege - tau[s_idx]));
        let a1 = (fl::<F>(0.5) * (sum - correction)).max(F::zero());
        (q_a, a1)
    };
    let t_a = q_a * (F::one() / w_m + F::one() / fit.v_l);
    let a2 = fl::<F>(0.5)
        * q_a
        * (fl::<F>(2.0) * timing.t_egs + t_a + q_a / fit.v_l - q_a / fit.v);

    // first in-cycle intersection of the departure line with the arrival curve
    let anchor = timing.t_egs + t_a;
    let tol = (F::one() + c) * F::epsilon().sqrt() * fl(1e-3);
    let mut found: Option<(usize, F, F)> = None;
    if anchor <= curve.end_time() {
        for q in 0..n_seg {
            let w_q = wave.speeds[q];
            if w_m <= w_q {
                continue;
            }
            let t_cand =
                (w_m * anchor - w_q * tau_t[q] + knot_s[q]) / (w_m - w_q);
            if t_cand >= tau_t[q] - tol && t_cand <= tau_t[q + 1] + tol {
                let q_b = (w_q * anchor - w_q * tau_t[q] + knot_s[q])
                    / (F::one() - w_q / w_m);
                found = Some((q, t_cand, q_b.max(F::zero())));
                break;
            }
        }
    }
    let (q_idx, t_boq, q_b, oversaturated) = match found {
        Some((q, t, q_b)) => (q, t, q_b, false),
        None => {
            // queue does not clear within the transformed cycle
            let t_end = curve.end_time();
            let s_d_end = (w_m * (t_end - anchor)).max(F::zero());
            let q_b = (curve.end_mass() - s_d_end).max(F::zero());
            (n_seg - 1, t_end, q_b, true)
        }
    };

    let mut a3 = F::zero();
    for j in 0..q_idx {
        a3 = a3 + (tau_t[j + 1] - tau_t[j]) * (knot_s[j + 1] + knot_s[j]);
    }
    a3 = fl::<F>(0.5) * (a3 + (t_boq - tau_t[q_idx]) * (knot_s[q_idx] + q_b));
    if variant == A3Variant::Corrected {
        let run = (t_boq - anchor).max(F::zero());
        let height = (w_m * run).min(q_b.max(F::zero()));
        a3 = (a3 - fl::<F>(0.5) * run * height).max(F::zero());
    }

    let v_total = lambda0 * c;
    let q_total = q_a + q_b;
    let d_total = (a1 + a2 + a3) / d0;
    let green_eff = t_ege - timing.t_egs;
    let dissipation = q_total * fit.h_s / d0;
    let q_over = if dissipation <= green_eff {
        F::zero()
    } else {
        q_total - green_eff * d0 / fit.h_s
    };
    let g_exceed = exceeded_green(q_total, fit.h_s, d0, timing.t_egs, timing.g_e);

    Ok(PhasePerformance {
        q_a,
        t_a,
        q_b,
        t_boq,
        a1,
        a2,
        a3,
        v_total,
        q_total,
        d_total,
        q_over,
        g_exceed,
        oversaturated,
    })
}

/// Samples `t_s,S_a_m,S_d_m` rows at the given step for CFD plotting. The
/// departure line is clamped to the physically meaningful band.
pub fn write_curve_csv<F: Scalar, W: std::io::Write>(
    curve: &ArrivalCurve<F>,
    timing: &PhaseTiming<F>,
    fit: &DischargeFit<F>,
    t_a: F,
    step: F,
    mut writer: W,
) -> Result<()> {
    writeln!(writer, "t_s,S_a_m,S_d_m")?;
    let end = curve.end_time();
    let mut t = F::zero();
    while t <= end {
        let s_a = curve.value(t)?;
        let raw = fit.w_m * (t - timing.t_egs - t_a);
        let s_d = raw.max(F::zero()).min(s_a);
        writeln!(writer, "{t},{s_a},{s_d}")?;
        t = t + step;
    }
    Ok(())
}
