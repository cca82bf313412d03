use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One piece of a schedule, active until `until` (a fraction of the run).
/// The value moves linearly from `from` to `to` across the piece.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Piece {
    pub until: f64,
    pub from: f64,
    pub to: f64,
}

impl Piece {
    pub fn constant(until: f64, value: f64) -> Self {
        Piece {
            until,
            from: value,
            to: value,
        }
    }
}

/// Piecewise schedule over training progress, queried once per step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Schedule {
    pub pieces: Vec<Piece>,
}

impl Schedule {
    pub fn constant(value: f64) -> Self {
        Schedule {
            pieces: vec![Piece::constant(1.0, value)],
        }
    }

    /// 1e-3, then 1e-4 from 60% of the run, then 5e-5 from 85%.
    pub fn default_lr() -> Self {
        Schedule {
            pieces: vec![
                Piece::constant(0.6, 1e-3),
                Piece::constant(0.85, 1e-4),
                Piece::constant(1.0, 5e-5),
            ],
        }
    }

    /// Linear ramp from 0 to `max` over the first half, then constant.
    pub fn ramp_then_hold(max: f64) -> Self {
        Schedule {
            pieces: vec![
                Piece {
                    until: 0.5,
                    from: 0.0,
                    to: max,
                },
                Piece::constant(1.0, max),
            ],
        }
    }

    pub fn validate(&self, what: &str, allow_zero: bool) -> Result<()> {
        if self.pieces.is_empty() {
            return Err(Error::config(format!("{what} schedule is empty")));
        }
        let mut prev = 0.0;
        for p in &self.pieces {
            if !(p.until > prev && p.until <= 1.0) {
                return Err(Error::config(format!(
                    "{what} schedule boundaries must increase within (0, 1]"
                )));
            }
            prev = p.until;
            for v in [p.from, p.to] {
                let ok = v.is_finite() && if allow_zero { v >= 0.0 } else { v > 0.0 };
                if !ok {
                    return Err(Error::config(format!("{what} schedule value {v} out of range")));
                }
            }
        }
        if prev != 1.0 {
            return Err(Error::config(format!("{what} schedule must end at 1.0")));
        }
        Ok(())
    }

    /// Value at `step` of a `total`-step run.
    pub fn at(&self, step: usize, total: usize) -> f64 {
        let frac = step as f64 / total.max(1) as f64;
        let mut start = 0.0;
        for p in &self.pieces {
            if frac < p.until {
                let w = (frac - start) / (p.until - start);
                return p.from + (p.to - p.from) * w;
            }
            start = p.until;
        }
        self.pieces.last().map_or(0.0, |p| p.to)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_lr_steps() {
        let s = Schedule::default_lr();
        assert_eq!(s.at(0, 100), 1e-3);
        assert_eq!(s.at(59, 100), 1e-3);
        assert_eq!(s.at(60, 100), 1e-4);
        assert_eq!(s.at(85, 100), 5e-5);
        assert_eq!(s.at(99, 100), 5e-5);
        s.validate("lr", false).unwrap();
    }

    #[test]
    fn gamma_ramp() {
        let s = Schedule::ramp_then_hold(1.5);
        assert_eq!(s.at(0, 100), 0.0);
        assert!((s.at(25, 100) - 0.75).abs() < 1e-12);
        assert_eq!(s.at(50, 100), 1.5);
        assert_eq!(s.at(99, 100), 1.5);
        s.validate("gamma", true).unwrap();
        assert!(s.validate("gamma", false).is_err());
    }
}
