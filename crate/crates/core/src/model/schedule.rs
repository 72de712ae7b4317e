//! Learning-rate schedules.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum LrSchedule {
    /// Linear ramp from 0 to `max_lr` over `warmup_steps`, then cosine
    /// decay to 0 at `total_steps`.
    WarmupCosine {
        max_lr: f64,
        warmup_steps: usize,
        total_steps: usize,
    },
    Constant { lr: f64 },
    /// lr0 * epsilon^step, used for per-iteration decay in annealing.
    AnnealingGeometric { lr0: f64, epsilon: f64 },
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LrSchedule::WarmupCosine {
                max_lr,
                warmup_steps,
                total_steps,
            } => {
                if !(max_lr > 0.0) || !max_lr.is_finite() {
                    return Err(Error::Config("max_lr must be positive and finite".into()));
                }
                if warmup_steps > total_steps {
                    return Err(Error::Config(
                        "warmup_steps must not exceed total_steps".into(),
                    ));
                }
                Ok(())
            }
            LrSchedule::Constant { lr } => {
                if lr < 0.0 || !lr.is_finite() {
                    return Err(Error::Config("constant lr must be non-negative".into()));
                }
                Ok(())
            }
            LrSchedule::AnnealingGeometric { lr0, epsilon } => {
                if !(lr0 > 0.0) || !(epsilon > 0.0 && epsilon < 1.0) {
                    return Err(Error::Config(
                        "geometric decay needs lr0 > 0 and epsilon in (0,1)".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        match *self {
            LrSchedule::WarmupCosine {
                max_lr,
                warmup_steps,
                total_steps,
            } => {
                if step > total_steps {
                    return Err(Error::StepRange {
                        step,
                        total: total_steps,
                    });
                }
                if step < warmup_steps {
                    Ok(max_lr * step as f64 / warmup_steps as f64)
                } else if total_steps == warmup_steps {
                    Ok(max_lr)
                } else {
                    let progress =
                        (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
                    Ok(max_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
                }
            }
            LrSchedule::Constant { lr } => Ok(lr),
            LrSchedule::AnnealingGeometric { lr0, epsilon } => {
                Ok(lr0 * epsilon.powi(step as i32))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_schedule() -> LrSchedule {
        LrSchedule::WarmupCosine {
            max_lr: 0.033,
            warmup_steps: 100,
            total_steps: 2000,
        }
    }

    #[test]
    fn warmup_end_hits_max_lr() {
        assert_eq!(reference_schedule().lr_at(100).unwrap(), 0.033);
    }

    #[test]
    fn ramp_starts_at_zero() {
        assert_eq!(reference_schedule().lr_at(0).unwrap(), 0.0);
    }

    #[test]
    fn cosine_midpoint_is_half_max() {
        // midpoint of the cosine phase
        let lr = reference_schedule().lr_at((100 + 2000) / 2).unwrap();
        assert!((lr - 0.033 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn ends_at_zero_and_errors_past_total() {
        let s = reference_schedule();
        assert!(s.lr_at(2000).unwrap().abs() < 1e-15);
        assert!(matches!(s.lr_at(2001), Err(Error::StepRange { .. })));
    }

    #[test]
    fn warmup_monotone_then_non_increasing() {
        let s = reference_schedule();
        let mut prev = -1.0;
        for step in 0..=100 {
            let lr = s.lr_at(step).unwrap();
            assert!(lr >= prev);
            prev = lr;
        }
        for step in 100..=2000 {
            let lr = s.lr_at(step).unwrap();
            assert!(lr <= prev + 1e-15);
            assert!(lr >= 0.0);
            prev = lr;
        }
    }

    #[test]
    fn geometric_decay() {
        let s = LrSchedule::AnnealingGeometric {
            lr0: 1.5e-6,
            epsilon: 0.75,
        };
        assert!((s.lr_at(1).unwrap() - 1.125e-6).abs() < 1e-18);
    }
}
