//! Run configuration: one JSON document holding every tunable.
//!
//! Unknown keys are rejected so typos fail loudly. All defaults are the
//! values used throughout the evaluation: 7 m jam spacing, 5 s minimum green,
//! 3 s yellow, 2 s all-red, cycle bounds [40, 160] s, and the standard
//! constriction PSO coefficients.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cfd::{A3Variant, LostTime};
use crate::error::{Error, Result};
use crate::io::{AnalysisWindow, StopRule};
use crate::ring::{min_feasible_cycle, DualRingPlan};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileConfig {
    pub max_segments: usize,
    pub min_segment_len: f64,
    pub bin: f64,
    /// Apply KDE smoothing when the penetration estimate is at or below this.
    pub kde_threshold: f64,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        ProfileConfig { max_segments: 9, min_segment_len: 10.0, bin: 1.0, kde_threshold: 0.10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PsoConfig {
    pub swarm: usize,
    pub patience: usize,
    pub max_iter: usize,
    pub inertia: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for PsoConfig {
    fn default() -> Self {
        PsoConfig {
            swarm: 120,
            patience: 50,
            max_iter: 500,
            inertia: 0.729,
            c1: 1.49445,
            c2: 1.49445,
        }
    }
}

/// Initial signal plan as per-phase green durations; starts follow from the
/// ring sequencing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialPlan {
    pub c: f64,
    #[serde(default)]
    pub dphi: f64,
    pub greens: [f64; 8],
}

impl Default for InitialPlan {
    fn default() -> Self {
        InitialPlan { c: 100.0, dphi: 0.0, greens: [20.0; 8] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Jam spacing, m.
    pub d0: f64,
    /// Minimum green, s.
    pub g_min: f64,
    /// Yellow, s.
    pub y: f64,
    /// All-red, s.
    pub r_a: f64,
    pub c_min: f64,
    pub c_max: f64,
    /// Scalarization weight of the exceeded-dissipation objective.
    pub delta: f64,
    /// Lane count per phase 1..8.
    pub lanes: [u32; 8],
    pub analysis_start: f64,
    pub analysis_end: f64,
    pub initial_plan: InitialPlan,
    pub profile: ProfileConfig,
    pub pso: PsoConfig,
    pub a3_variant: A3Variant,
    pub lost_time: LostTime<f64>,
    /// Queue membership: speeds below this, m/s.
    pub stop_speed: f64,
    /// Queue membership: sustained at least this long, s.
    pub min_stop_duration: f64,
    /// Estimate-share weight in the redistribution blend.
    pub redistribution_weight: f64,
    /// CV penetration rate, when known; drives the KDE decision.
    pub penetration: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            d0: 7.0,
            g_min: 5.0,
            y: 3.0,
            r_a: 2.0,
            c_min: 40.0,
            c_max: 160.0,
            delta: 1e4,
            lanes: [1; 8],
            analysis_start: 900.0,
            analysis_end: 8100.0,
            initial_plan: InitialPlan::default(),
            profile: ProfileConfig::default(),
            pso: PsoConfig::default(),
            a3_variant: A3Variant::default(),
            lost_time: LostTime::default(),
            stop_speed: 2.0,
            min_stop_duration: 2.0,
            redistribution_weight: 0.5,
            penetration: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d0 <= 0.0 {
            return Err(Error::Config("d0 must be positive".into()));
        }
        if self.g_min < 0.0 || self.y < 0.0 || self.r_a < 0.0 {
            return Err(Error::Config("g_min, y, r_a must be nonnegative".into()));
        }
        let min_c = min_feasible_cycle(self.y, self.r_a, self.g_min);
        if self.c_min < min_c {
            return Err(Error::Config(format!(
                "c_min = {} below the minimum feasible cycle {min_c}",
                self.c_min
            )));
        }
        if self.c_max < self.c_min {
            return Err(Error::Config("c_max must be at least c_min".into()));
        }
        if self.analysis_end <= self.analysis_start {
            return Err(Error::Config("analysis window must have positive length".into()));
        }
        if self.lanes.iter().any(|&z| z == 0) {
            return Err(Error::Config("every phase needs at least one lane".into()));
        }
        if let Some(p) = self.penetration {
            if !(0.0..=1.0).contains(&p) || p == 0.0 {
                return Err(Error::Config("penetration must be in (0, 1]".into()));
            }
        }
        if self.profile.bin <= 0.0 || self.profile.min_segment_len < self.profile.bin {
            return Err(Error::Config("profile bin/min_segment_len invalid".into()));
        }
        if self.pso.swarm < 2 || self.pso.patience < 1 {
            return Err(Error::Config("PSO needs swarm >= 2 and patience >= 1".into()));
        }
        self.initial_dual_ring()?;
        Ok(())
    }

    /// The configured initial plan as a validated dual-ring plan.
    pub fn initial_dual_ring(&self) -> Result<DualRingPlan<f64>> {
        DualRingPlan::from_durations(
            self.initial_plan.c,
            self.initial_plan.dphi,
            &self.initial_plan.greens,
            self.y,
            self.r_a,
            self.g_min,
        )
        .map_err(|e| Error::Config(format!("initial plan invalid: {e}")))
    }

    pub fn window(&self) -> AnalysisWindow {
        AnalysisWindow { start: self.analysis_start, end: self.analysis_end }
    }

    pub fn stop_rule(&self) -> StopRule {
        StopRule { stop_speed: self.stop_speed, min_stop_duration: self.min_stop_duration }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        let json = r#"{"d0": 7.0, "bogus_key": 1}"#;
        assert!(serde_json::from_str::<RunConfig>(json).is_err());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let json = r#"{"c_min": 50.0, "lanes": [1,2,1,2,1,2,1,2]}"#;
        let cfg: RunConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.c_min, 50.0);
        assert_eq!(cfg.d0, 7.0);
        assert_eq!(cfg.lanes[1], 2);
        cfg.validate().unwrap();
    }

    #[test]
    fn invalid_c_min_rejected() {
        let cfg = RunConfig { c_min: 30.0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn initial_plan_must_fit_structure() {
        let cfg = RunConfig {
            initial_plan: InitialPlan { c: 100.0, dphi: 0.0, greens: [10.0; 8] },
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
