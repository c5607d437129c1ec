//! One-cycle cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub lr_start: f64,
    pub lr_max: f64,
    pub lr_end: f64,
    pub peak_fraction: f64,
    pub total_steps: usize,
}

impl ScheduleConfig {
    /// `1e-5 ↗ 1e-4 ↘ 1e-6`, peak at half of training.
    pub fn standard(total_steps: usize) -> Self {
        Self {
            lr_start: 1e-5,
            lr_max: 1e-4,
            lr_end: 1e-6,
            peak_fraction: 0.5,
            total_steps,
        }
    }

    /// `1e-7 ↗ 1e-6 ↘ 1e-9`, used for the standalone weight classifier.
    pub fn property_net(total_steps: usize) -> Self {
        Self {
            lr_start: 1e-7,
            lr_max: 1e-6,
            lr_end: 1e-9,
            peak_fraction: 0.5,
            total_steps,
        }
    }

    /// Same shape with every rate multiplied by `factor`.
    pub fn scaled(self, factor: f64) -> Self {
        Self {
            lr_start: self.lr_start * factor,
            lr_max: self.lr_max * factor,
            lr_end: self.lr_end * factor,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr_start, self.lr_max, self.lr_end].iter().all(|v| v.is_finite() && *v > 0.0);
        if !positive {
            return Err(Error::config("learning rates must be positive and finite"));
        }
        if self.lr_start > self.lr_max || self.lr_end > self.lr_max {
            return Err(Error::config("lr_max must bound lr_start and lr_end"));
        }
        if !(0.0..=1.0).contains(&self.peak_fraction) {
            return Err(Error::config("peak_fraction must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Step at which `lr_max` is reached.
    pub fn peak_step(&self) -> f64 {
        self.peak_fraction * self.total_steps as f64
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self::standard(1000)
    }
}

fn cosine_blend(from: f64, to: f64, t: f64) -> f64 {
    let w = 0.5 * (1.0 - (std::f64::consts::PI * t).cos());
    from * (1.0 - w) + to * w
}

/// Learning rate at `step`; steps beyond `total_steps` hold `lr_end`.
pub fn lr_at(step: usize, sched: &ScheduleConfig) -> f64 {
    let total = sched.total_steps as f64;
    let s = (step as f64).min(total);
    let peak = sched.peak_step();
    if s <= peak {
        if peak == 0.0 {
            return sched.lr_max;
        }
        cosine_blend(sched.lr_start, sched.lr_max, s / peak)
    } else {
        cosine_blend(sched.lr_max, sched.lr_end, (s - peak) / (total - peak))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn standard_endpoints() {
        let s = ScheduleConfig::standard(1000);
        assert_eq!(lr_at(0, &s), 1e-5);
        assert_eq!(lr_at(500, &s), 1e-4);
        assert_eq!(lr_at(1000, &s), 1e-6);
        assert_eq!(lr_at(5000, &s), 1e-6);
    }

    #[test]
    fn property_net_endpoints() {
        let s = ScheduleConfig::property_net(40);
        assert_eq!(lr_at(0, &s), 1e-7);
        assert_eq!(lr_at(20, &s), 1e-6);
        assert_eq!(lr_at(40, &s), 1e-9);
    }

    #[test]
    fn validation() {
        assert!(ScheduleConfig::standard(10).validate().is_ok());
        let bad = ScheduleConfig {
            lr_start: 1.0,
            ..ScheduleConfig::standard(10)
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn continuous_at_peak() {
        let s = ScheduleConfig::standard(1001);
        let a = lr_at(500, &s);
        let b = lr_at(501, &s);
        assert!((a - b).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn one_cycle_shape(total in 4usize..3000, frac in 0.1f64..0.9) {
            let s = ScheduleConfig { peak_fraction: frac, ..ScheduleConfig::standard(total) };
            let peak = s.peak_step();
            let mut prev = lr_at(0, &s);
            for step in 1..=total {
                let lr = lr_at(step, &s);
                if (step as f64) <= peak {
                    prop_assert!(lr >= prev);
                } else if (step as f64 - 1.0) >= peak {
                    prop_assert!(lr <= prev);
                }
                prop_assert!(lr <= s.lr_max && lr >= s.lr_end.min(s.lr_start));
                prev = lr;
            }
        }
    }
}
