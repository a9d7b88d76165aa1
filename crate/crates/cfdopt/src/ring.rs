//! NEMA dual-ring plan structure.
//!
//! Eight phases in two rings of four, with a barrier after the second phase
//! of each ring. Greens are encoded by five free parameters (barrier-1
//! duration plus one split per ring per barrier); everything else follows
//! from the ring-sum, barrier and sequencing constraints, so any decoded
//! plan is feasible by construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{fl, Scalar};

/// A complete signal timing plan in common-origin cycle time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualRingPlan<F> {
    /// Cycle length, s.
    pub c: F,
    /// Reference shift: start time of the first cycle of the analysis period.
    pub dphi: F,
    /// Displayed green `(start, end)` per phase 1..8.
    pub greens: [(F, F); 8],
    pub yellow: F,
    pub all_red: F,
}

#[derive(Serialize, Deserialize)]
struct PhaseGreen<F> {
    k: u8,
    g_s: F,
    g_e: F,
}

#[derive(Serialize, Deserialize)]
struct PlanRepr<F> {
    #[serde(rename = "C")]
    c: F,
    dphi: F,
    y: F,
    r_a: F,
    phases: Vec<PhaseGreen<F>>,
}

impl<F: Scalar + Serialize> Serialize for DualRingPlan<F> {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let repr = PlanRepr {
            c: self.c,
            dphi: self.dphi,
            y: self.yellow,
            r_a: self.all_red,
            phases: self
                .greens
                .iter()
                .enumerate()
                .map(|(i, &(g_s, g_e))| PhaseGreen { k: i as u8 + 1, g_s, g_e })
                .collect(),
        };
        repr.serialize(serializer)
    }
}

impl<'de, F: Scalar + Deserialize<'de>> Deserialize<'de> for DualRingPlan<F> {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = PlanRepr::<F>::deserialize(deserializer)?;
        if repr.phases.len() != 8 {
            return Err(serde::de::Error::custom("plan must list exactly 8 phases"));
        }
        let mut greens = [(F::zero(), F::zero()); 8];
        for p in &repr.phases {
            if !(1..=8).contains(&p.k) {
                return Err(serde::de::Error::custom("phase index outside 1..8"));
            }
            greens[(p.k - 1) as usize] = (p.g_s, p.g_e);
        }
        Ok(DualRingPlan { c: repr.c, dphi: repr.dphi, greens, yellow: repr.y, all_red: repr.r_a })
    }
}

impl<F: Scalar> DualRingPlan<F> {
    /// Green duration of phase `k` (1-based).
    pub fn green_duration(&self, k: usize) -> F {
        let (s, e) = self.greens[k - 1];
        e - s
    }

    /// Builds a plan from per-phase green durations via the ring sequencing,
    /// validating the dual-ring structure.
    pub fn from_durations(
        c: F,
        dphi: F,
        durations: &[F; 8],
        yellow: F,
        all_red: F,
        g_min: F,
    ) -> Result<Self> {
        let mut greens = [(F::zero(), F::zero()); 8];
        for ring in 0..2 {
            let mut start = F::zero();
            for i in 0..4 {
                let k = ring * 4 + i;
                greens[k] = (start, start + durations[k]);
                start = greens[k].1 + yellow + all_red;
            }
        }
        let plan = DualRingPlan { c, dphi, greens, yellow, all_red };
        plan.validate(g_min)?;
        Ok(plan)
    }

    /// Checks the dual-ring structural constraints: ring sums, barrier
    /// alignment, sequencing, minimum greens, and the reference shift range.
    pub fn validate(&self, g_min: F) -> Result<()> {
        let tol = fl::<F>(1e-6) * self.c.max(F::one());
        let lost = fl::<F>(4.0) * (self.yellow + self.all_red);
        let ring_green = self.c - lost;
        for ring in 0..2 {
            let sum: F = (0..4).map(|i| self.green_duration(ring * 4 + i + 1)).sum();
            if (sum - ring_green).abs() > tol {
                return Err(Error::Domain(format!(
                    "ring {} green sum {sum} != C - 4(y + r_a) = {ring_green}",
                    ring + 1
                )));
            }
        }
        let b1_ring1 = self.green_duration(1) + self.green_duration(2);
        let b1_ring2 = self.green_duration(5) + self.green_duration(6);
        if (b1_ring1 - b1_ring2).abs() > tol {
            return Err(Error::Domain(format!(
                "barrier mismatch: {b1_ring1} vs {b1_ring2}"
            )));
        }
        for &k in &[1usize, 2, 3, 5, 6, 7] {
            let expect = self.greens[k - 1].1 + self.yellow + self.all_red;
            if (self.greens[k].0 - expect).abs() > tol {
                return Err(Error::Domain(format!(
                    "sequencing violated between phases {k} and {}",
                    k + 1
                )));
            }
        }
        if self.greens[0].0.abs() > tol || self.greens[4].0.abs() > tol {
            return Err(Error::Domain("phases 1 and 5 must start at the cycle origin".into()));
        }
        for k in 1..=8 {
            if self.green_duration(k) < g_min - tol {
                return Err(Error::Domain(format!(
                    "phase {k} green {} below minimum {g_min}",
                    self.green_duration(k)
                )));
            }
        }
        if self.dphi < F::zero() || self.dphi >= self.c {
            return Err(Error::Domain(format!(
                "reference shift {} outside [0, {})",
                self.dphi, self.c
            )));
        }
        Ok(())
    }
}

/// Smallest cycle length that admits a feasible dual-ring plan.
pub fn min_feasible_cycle<F: Scalar>(yellow: F, all_red: F, g_min: F) -> F {
    fl::<F>(4.0) * (yellow + all_red) + fl::<F>(4.0) * g_min
}

/// Five free split parameters, each a fraction in `[0, 1]`: barrier-1
/// duration, then the first-phase share of each ring half.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitVector<F>(pub [F; 5]);

/// Decodes a split vector into a feasible plan. Fractions are clamped into
/// `[0, 1]` and mapped into the feasible ranges, so repair is total for any
/// input once the cycle itself is feasible.
pub fn decode_and_repair<F: Scalar>(
    vec: &SplitVector<F>,
    c: F,
    dphi: F,
    yellow: F,
    all_red: F,
    g_min: F,
) -> Result<DualRingPlan<F>> {
    let ring_green = c - fl::<F>(4.0) * (yellow + all_red);
    let required = fl::<F>(4.0) * g_min;
    if ring_green < required - fl::<F>(1e-9) {
        return Err(Error::CycleInfeasible {
            c: c.to_f64().unwrap_or(f64::NAN),
            ring_green: ring_green.to_f64().unwrap_or(f64::NAN),
            required: required.to_f64().unwrap_or(f64::NAN),
        });
    }
    let two = fl::<F>(2.0);
    let lerp = |lo: F, hi: F, u: F| lo + (hi - lo) * u.max(F::zero()).min(F::one());
    let b1 = lerp(two * g_min, ring_green - two * g_min, vec.0[0]);
    let b2 = ring_green - b1;
    let g1 = lerp(g_min, b1 - g_min, vec.0[1]);
    let g5 = lerp(g_min, b1 - g_min, vec.0[2]);
    let g3 = lerp(g_min, b2 - g_min, vec.0[3]);
    let g7 = lerp(g_min, b2 - g_min, vec.0[4]);
    let durations = [g1, b1 - g1, g3, b2 - g3, g5, b1 - g5, g7, b2 - g7];
    DualRingPlan::from_durations(c, dphi, &durations, yellow, all_red, g_min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn midpoint_vector_decodes_to_equal_greens() {
        let v = SplitVector([0.5; 5]);
        let plan = decode_and_repair(&v, 80.0, 0.0, 3.0, 2.0, 5.0).unwrap();
        for k in 1..=8 {
            assert_relative_eq!(plan.green_duration(k), 15.0, epsilon = 1e-9);
        }
        assert_relative_eq!(plan.green_duration(1) + plan.green_duration(2), 30.0);
    }

    #[test]
    fn boundary_cycle_forces_minimum_greens() {
        let v = SplitVector([0.3, 0.9, 0.1, 0.7, 0.2]);
        let plan = decode_and_repair(&v, 40.0, 0.0, 3.0, 2.0, 5.0).unwrap();
        for k in 1..=8 {
            assert_relative_eq!(plan.green_duration(k), 5.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn infeasible_cycle_is_rejected() {
        let v = SplitVector([0.5; 5]);
        assert!(matches!(
            decode_and_repair(&v, 39.0, 0.0, 3.0, 2.0, 5.0),
            Err(Error::CycleInfeasible { .. })
        ));
    }

    #[test]
    fn min_cycle_value() {
        assert_relative_eq!(min_feasible_cycle(3.0, 2.0, 5.0), 40.0);
    }

    #[test]
    fn plan_json_roundtrip() {
        let v = SplitVector([0.4, 0.6, 0.3, 0.8, 0.2]);
        let plan = decode_and_repair(&v, 90.0, 10.0, 3.0, 2.0, 5.0).unwrap();
        let json = serde_json::to_string(&plan).unwrap();
        let back: DualRingPlan<f64> = serde_json::from_str(&json).unwrap();
        assert_eq!(plan, back);
    }

    proptest! {
        #[test]
        fn repair_is_total_and_feasible(
            u0 in -0.5..1.5f64,
            u1 in -0.5..1.5f64,
            u2 in -0.5..1.5f64,
            u3 in -0.5..1.5f64,
            u4 in -0.5..1.5f64,
            c in 40.0..160.0f64,
        ) {
            let v = SplitVector([u0, u1, u2, u3, u4]);
            let plan = decode_and_repair(&v, c, 0.0, 3.0, 2.0, 5.0).unwrap();
            prop_assert!(plan.validate(5.0).is_ok());
        }
    }
}
