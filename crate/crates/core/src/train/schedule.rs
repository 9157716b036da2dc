use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    High,
    Low,
    Stopped,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::High => "high",
            Phase::Low => "low",
            Phase::Stopped => "stopped",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub lr_high: f64,
    pub lr_low: f64,
    /// Consecutive non-improving evaluations before dropping a phase.
    pub patience: usize,
    /// Minimum decrease of the best validation loss that counts as progress.
    pub threshold: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            lr_high: 3e-4,
            lr_low: 3e-5,
            patience: 3,
            threshold: 1e-6,
        }
    }
}

/// Plateau learning-rate schedule: high → low → stopped, never back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub config: ScheduleConfig,
    pub best: f64,
    pub stale: usize,
    pub phase: Phase,
}

impl ScheduleState {
    pub fn new(config: ScheduleConfig) -> Self {
        ScheduleState {
            config,
            best: f64::INFINITY,
            stale: 0,
            phase: Phase::High,
        }
    }

    pub fn lr(&self) -> f64 {
        match self.phase {
            Phase::High => self.config.lr_high,
            Phase::Low | Phase::Stopped => self.config.lr_low,
        }
    }

    /// Record a validation loss. Returns whether it improved on the best so
    /// far. A non-finite loss is an error and leaves the state untouched.
    pub fn update(&mut self, val_loss: f64) -> Result<bool> {
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss(val_loss));
        }
        if self.phase == Phase::Stopped {
            return Ok(false);
        }
        if self.best - val_loss > self.config.threshold {
            self.best = val_loss;
            self.stale = 0;
            return Ok(true);
        }
        self.stale += 1;
        if self.stale >= self.config.patience {
            self.phase = match self.phase {
                Phase::High => Phase::Low,
                _ => Phase::Stopped,
            };
            self.stale = 0;
        }
        Ok(false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn improving_losses_stay_high() {
        let mut s = ScheduleState::new(ScheduleConfig::default());
        for v in [0.5, 0.4, 0.3] {
            assert!(s.update(v).unwrap());
        }
        assert_eq!(s.phase, Phase::High);
        assert_eq!(s.lr(), 3e-4);
    }

    #[test]
    fn plateau_drops_then_stops() {
        let mut s = ScheduleState::new(ScheduleConfig::default());
        s.update(0.3).unwrap();
        s.update(0.3).unwrap();
        s.update(0.3).unwrap();
        assert_eq!(s.phase, Phase::High);
        s.update(0.3).unwrap();
        assert_eq!(s.phase, Phase::Low);
        assert_eq!(s.lr(), 3e-5);
        for _ in 0..2 {
            s.update(0.3).unwrap();
            assert_eq!(s.phase, Phase::Low);
        }
        s.update(0.3).unwrap();
        assert_eq!(s.phase, Phase::Stopped);
    }

    #[test]
    fn nan_is_rejected_without_mutation() {
        let mut s = ScheduleState::new(ScheduleConfig::default());
        s.update(0.2).unwrap();
        let before = s.clone();
        assert!(s.update(f64::NAN).is_err());
        assert_eq!(s, before);
    }

    #[test]
    fn tiny_improvements_count_as_stale() {
        let mut s = ScheduleState::new(ScheduleConfig::default());
        s.update(0.3).unwrap();
        assert!(!s.update(0.3 - 1e-7).unwrap());
        assert_eq!(s.stale, 1);
    }
}
