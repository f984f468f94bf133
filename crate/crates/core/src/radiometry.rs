//! Irradiance delivered by an LED onto a spot.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RadiometryError {
    #[error("{field} must be positive and finite, got {value}")]
    NotPositive { field: &'static str, value: f64 },
    #[error("eta must lie in (0, 1], got {0}")]
    Efficiency(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadiometryInput {
    /// Electrical LED power, W.
    pub p_led: f64,
    /// Fraction of it emitted as infrared.
    pub eta: f64,
    /// Spot radius, m.
    pub r: f64,
}

impl RadiometryInput {
    pub fn validate(&self) -> Result<(), RadiometryError> {
        for (field, value) in [("p_led", self.p_led), ("r", self.r)] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(RadiometryError::NotPositive { field, value });
            }
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(RadiometryError::Efficiency(self.eta));
        }
        Ok(())
    }
}

/// `eta * p_led / (pi r^2)` in W/m².
pub fn radiated_power(input: &RadiometryInput) -> Result<f64, RadiometryError> {
    input.validate()?;
    Ok(input.eta * input.p_led / (std::f64::consts::PI * input.r * input.r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn unit_case_is_exactly_one() {
        let v = radiated_power(&RadiometryInput { p_led: std::f64::consts::PI, eta: 1.0, r: 1.0 }).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn five_watt_led() {
        let v = radiated_power(&RadiometryInput { p_led: 5.0, eta: 0.33, r: 0.0158 }).unwrap();
        assert!((v - 2103.9).abs() < 0.1, "{v}");
        assert!((v / 2100.0 - 1.0).abs() <= 0.05);
    }

    #[test]
    fn rejects_bad_inputs() {
        let ok = RadiometryInput { p_led: 1.0, eta: 0.5, r: 0.01 };
        assert!(radiated_power(&RadiometryInput { r: 0.0, ..ok }).is_err());
        assert!(radiated_power(&RadiometryInput { r: -1.0, ..ok }).is_err());
        assert!(radiated_power(&RadiometryInput { p_led: 0.0, ..ok }).is_err());
        assert_eq!(radiated_power(&RadiometryInput { eta: 1.5, ..ok }), Err(RadiometryError::Efficiency(1.5)));
    }

    proptest! {
        #[test]
        fn doubling_r_quarters_output(p in 0.01..100.0f64, eta in 0.01..1.0f64, r in 1e-4..1.0f64) {
            let a = radiated_power(&RadiometryInput { p_led: p, eta, r }).unwrap();
            let b = radiated_power(&RadiometryInput { p_led: p, eta, r: 2.0 * r }).unwrap();
            prop_assert!((a / b - 4.0).abs() < 1e-12);
        }
    }
}
