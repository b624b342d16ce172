//! Decay schedules `g(t)` driving the distillation weight and the
//! hard/soft target mix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayKind {
    /// `g(t) = kᵗ`, `0 < k < 1`.
    Exponential,
    /// `g(t) = k·t + b`, `k < 0`, floored just above zero.
    Linear,
    /// `g(t) = k / (k + e^{t/k})`, `k > 0`.
    Sigmoid,
    /// `g(t) = 1`.
    Fixed,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeUnit {
    #[default]
    Epoch,
    Step,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecaySchedule {
    pub kind: DecayKind,
    #[serde(default = "one")]
    pub factor: f64,
    /// Linear schedules only.
    #[serde(default = "one")]
    pub intercept: f64,
    #[serde(default)]
    pub time_unit: TimeUnit,
}

fn one() -> f64 {
    1.0
}

/// Smallest value a linear schedule decays to.
pub const LINEAR_FLOOR: f64 = f64::MIN_POSITIVE;

impl DecaySchedule {
    pub fn exponential(factor: f64) -> Self {
        Self {
            kind: DecayKind::Exponential,
            factor,
            intercept: 1.0,
            time_unit: TimeUnit::Epoch,
        }
    }

    pub fn linear(slope: f64, intercept: f64) -> Self {
        Self {
            kind: DecayKind::Linear,
            factor: slope,
            intercept,
            time_unit: TimeUnit::Epoch,
        }
    }

    pub fn sigmoid(factor: f64) -> Self {
        Self {
            kind: DecayKind::Sigmoid,
            factor,
            intercept: 1.0,
            time_unit: TimeUnit::Epoch,
        }
    }

    pub fn fixed() -> Self {
        Self {
            kind: DecayKind::Fixed,
            factor: 1.0,
            intercept: 1.0,
            time_unit: TimeUnit::Epoch,
        }
    }

    pub fn with_time_unit(mut self, unit: TimeUnit) -> Self {
        self.time_unit = unit;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.factor;
        let ok = match self.kind {
            DecayKind::Exponential => k > 0.0 && k < 1.0,
            DecayKind::Linear => k < 0.0 && self.intercept > 0.0 && self.intercept <= 1.0,
            DecayKind::Sigmoid => k > 0.0 && k.is_finite(),
            DecayKind::Fixed => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Parameter(format!(
                "invalid {:?} schedule (factor {}, intercept {})",
                self.kind, k, self.intercept
            )))
        }
    }

    /// `g(t)`.
    pub fn value(&self, t: u64) -> Result<f64> {
        self.validate()?;
        let k = self.factor;
        let tf = t as f64;
        Ok(match self.kind {
            DecayKind::Exponential => k.powf(tf),
            DecayKind::Linear => (k * tf + self.intercept).max(LINEAR_FLOOR),
            DecayKind::Sigmoid => k / (k + (tf / k).exp()),
            DecayKind::Fixed => 1.0,
        })
    }

    /// The time index this schedule reads at a given epoch / global step.
    pub fn time(&self, epoch: usize, step: usize) -> u64 {
        match self.time_unit {
            TimeUnit::Epoch => epoch as u64,
            TimeUnit::Step => step as u64,
        }
    }
}

/// `g(t)` for a schedule.
pub fn decay_value(schedule: &DecaySchedule, t: u64) -> Result<f64> {
    schedule.value(t)
}

/// Initial weights and the schedules that decay them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSet {
    pub w0: f64,
    pub alpha0: f64,
    pub beta0: f64,
    pub w: DecaySchedule,
    pub alpha: DecaySchedule,
    pub beta: DecaySchedule,
}

impl Default for ScheduleSet {
    fn default() -> Self {
        Self {
            w0: 0.1,
            alpha0: 0.8,
            beta0: 0.8,
            w: DecaySchedule::exponential(0.95),
            alpha: DecaySchedule::sigmoid(800.0),
            beta: DecaySchedule::sigmoid(800.0),
        }
    }
}

/// Values of the three weights at one point of training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub w: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl ScheduleSet {
    pub fn validate(&self) -> Result<()> {
        self.w.validate()?;
        self.alpha.validate()?;
        self.beta.validate()?;
        if self.w0 < 0.0 || !self.w0.is_finite() {
            return Err(Error::Parameter(format!("w0 must be ≥ 0, got {}", self.w0)));
        }
        for (name, v) in [("alpha0", self.alpha0), ("beta0", self.beta0)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Parameter(format!("{name} must be ≥ 0, got {v}")));
            }
        }
        Ok(())
    }

    /// `w = w0·g(t)`, `α = clamp(α0·g(t))`, `β = clamp(β0·g(t))`.
    pub fn state(&self, epoch: usize, step: usize) -> Result<ScheduleState> {
        let w = self.w0 * self.w.value(self.w.time(epoch, step))?;
        let alpha = (self.alpha0 * self.alpha.value(self.alpha.time(epoch, step))?).clamp(0.0, 1.0);
        let beta = (self.beta0 * self.beta.value(self.beta.time(epoch, step))?).clamp(0.0, 1.0);
        Ok(ScheduleState { w, alpha, beta })
    }
}
