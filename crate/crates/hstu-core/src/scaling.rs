//! Curve fitting for cost and quality trends.
//!
//! Two shapes cover everything measured here: straight lines (cost versus
//! sequence length at a fixed window) and power laws (quality improvement
//! versus compute budget). Power laws are fitted by ordinary least squares
//! in log-log space, so every sample must be strictly positive.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    /// Coefficient of determination; 1.0 is an exact fit.
    pub r2: f64,
}

impl LinearFit {
    pub fn predict(&self, x: f64) -> f64 {
        self.slope * x + self.intercept
    }
}

/// Ordinary least squares on at least two points with non-degenerate x.
pub fn fit_linear(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.len() != ys.len() {
        return Err(Error::Dimension(format!("{} xs vs {} ys", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::Domain("need at least two points".into()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("fit input holds a non-finite value".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|&x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Domain("x values are all identical".into()));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(&x, &y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let syy: f64 = ys.iter().map(|&y| (y - my) * (y - my)).sum();
    let r2 = if syy == 0.0 {
        1.0
    } else {
        let ss_res: f64 = xs
            .iter()
            .zip(ys)
            .map(|(&x, &y)| {
                let e = y - (slope * x + intercept);
                e * e
            })
            .sum();
        1.0 - ss_res / syy
    };
    Ok(LinearFit { slope, intercept, r2 })
}

/// `y = coefficient · x^exponent`, fitted in log-log space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerFit {
    pub exponent: f64,
    pub coefficient: f64,
    pub r2: f64,
}

impl PowerFit {
    pub fn predict(&self, x: f64) -> f64 {
        self.coefficient * x.powf(self.exponent)
    }
}

pub fn fit_power(xs: &[f64], ys: &[f64]) -> Result<PowerFit> {
    if xs.iter().chain(ys).any(|&v| v <= 0.0) {
        return Err(Error::Domain("power-law fits need strictly positive samples".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|&v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|&v| v.ln()).collect();
    let lin = fit_linear(&lx, &ly)?;
    Ok(PowerFit { exponent: lin.slope, coefficient: lin.intercept.exp(), r2: lin.r2 })
}

/// Corrects a fitted improvement exponent for an irreducible floor: if the
/// metric can never drop below `floor`, the exponent observed at level
/// `value` understates the true one by the factor `1 - floor/value`.
pub fn corrected_exponent(fitted: f64, floor: f64, value: f64) -> Result<f64> {
    if !(floor >= 0.0 && value > floor) {
        return Err(Error::Domain(format!(
            "need 0 <= floor < value, got floor {floor}, value {value}"
        )));
    }
    Ok(fitted / (1.0 - floor / value))
}

/// How much harder the slower method must work: matching the faster
/// method's gains requires raising the slower one's budget to this power.
pub fn compute_advantage(fast_exponent: f64, slow_exponent: f64) -> Result<f64> {
    if fast_exponent <= 0.0 || slow_exponent <= 0.0 {
        return Err(Error::Domain("improvement exponents must be positive".into()));
    }
    Ok(fast_exponent / slow_exponent)
}

/// Log-scale quality gap between two fitted trends at one budget; positive
/// means `a` predicts a larger value than `b`. Antisymmetric in (a, b).
pub fn efficiency_ratio(a: &PowerFit, b: &PowerFit, budget: f64) -> Result<f64> {
    if budget <= 0.0 || a.coefficient <= 0.0 || b.coefficient <= 0.0 {
        return Err(Error::Domain("budget and coefficients must be positive".into()));
    }
    Ok(a.predict(budget).ln() - b.predict(budget).ln())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_fit_recovers_exact_lines() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x + 2.0).collect();
        let f = fit_linear(&xs, &ys).unwrap();
        assert!((f.slope - 3.0).abs() < 1e-12);
        assert!((f.intercept - 2.0).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn linear_fit_flags_noise_in_r2() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys = [0.0, 1.4, 1.6, 3.0];
        let f = fit_linear(&xs, &ys).unwrap();
        assert!(f.r2 < 1.0 && f.r2 > 0.8);
    }

    #[test]
    fn linear_fit_input_validation() {
        assert!(fit_linear(&[1.0], &[1.0]).is_err());
        assert!(fit_linear(&[1.0, 2.0], &[1.0]).is_err());
        assert!(fit_linear(&[2.0, 2.0], &[1.0, 3.0]).is_err());
        assert!(fit_linear(&[1.0, f64::NAN], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn power_fit_recovers_exact_power_laws() {
        let xs = [1.0, 10.0, 100.0, 1000.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 5.0 * x.powf(-0.7)).collect();
        let f = fit_power(&xs, &ys).unwrap();
        assert!((f.exponent + 0.7).abs() < 1e-12);
        assert!((f.coefficient - 5.0).abs() < 1e-10);
        assert!((f.predict(50.0) - 5.0 * 50.0f64.powf(-0.7)).abs() < 1e-10);
    }

    #[test]
    fn power_fit_rejects_non_positive_samples() {
        assert!(fit_power(&[1.0, 0.0], &[1.0, 1.0]).is_err());
        assert!(fit_power(&[1.0, 2.0], &[1.0, -1.0]).is_err());
    }

    #[test]
    fn floor_correction_inflates_the_exponent() {
        let c = corrected_exponent(0.3, 0.1, 0.2).unwrap();
        assert!((c - 0.6).abs() < 1e-12);
        // No floor, no change.
        assert_eq!(corrected_exponent(0.3, 0.0, 0.2).unwrap(), 0.3);
        assert!(corrected_exponent(0.3, 0.2, 0.1).is_err());
        assert!(corrected_exponent(0.3, -0.1, 0.2).is_err());
    }

    #[test]
    fn advantage_is_the_exponent_ratio() {
        assert!((compute_advantage(0.78, 0.39).unwrap() - 2.0).abs() < 1e-12);
        assert!(compute_advantage(0.0, 0.4).is_err());
        assert!(compute_advantage(0.5, -0.4).is_err());
    }

    #[test]
    fn efficiency_gap_is_antisymmetric() {
        let a = PowerFit { exponent: -0.5, coefficient: 2.0, r2: 1.0 };
        let b = PowerFit { exponent: -0.8, coefficient: 3.0, r2: 1.0 };
        for &c in &[1.0, 10.0, 1e6] {
            let ab = efficiency_ratio(&a, &b, c).unwrap();
            let ba = efficiency_ratio(&b, &a, c).unwrap();
            assert!((ab + ba).abs() < 1e-12);
        }
        assert!(efficiency_ratio(&a, &b, 0.0).is_err());
    }
}
