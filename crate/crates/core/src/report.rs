use std::fmt;

/// One named numerical check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Check {
    pub fn new(name: impl Into<String>, value: f64, tolerance: f64, pass: bool) -> Self {
        Check {
            name: name.into(),
            value,
            tolerance,
            pass,
        }
    }

    /// Passes iff `|value| <= tolerance`.
    pub fn abs_le(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        let pass = value.abs() <= tolerance;
        Self::new(name, value, tolerance, pass)
    }

    /// Passes iff `|value - target| <= tolerance`.
    pub fn near(name: impl Into<String>, value: f64, target: f64, tolerance: f64) -> Self {
        let pass = (value - target).abs() <= tolerance;
        Self::new(name, value, tolerance, pass)
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<48} {:>+.6e}  tol {:.1e}  {}",
            self.name,
            self.value,
            self.tolerance,
            if self.pass { "PASS" } else { "FAIL" }
        )
    }
}

pub fn all_pass(checks: &[Check]) -> bool {
    checks.iter().all(|c| c.pass)
}
