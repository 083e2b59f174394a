/// Numerical thresholds shared by the verifiers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    /// Relative tolerance for derivative comparisons.
    pub deriv_rel: f64,
    /// Absolute floor for derivative comparisons.
    pub deriv_abs: f64,
    /// Minimum log-log slope of the QMD remainder.
    pub slope_min: f64,
    /// Largest acceptable QMD remainder at the smallest grid point.
    pub res_max: f64,
    /// Slack on the Hellinger gap bound.
    pub gap_slack: f64,
    /// Absolute tolerance for quantities that vanish in closed form.
    pub neyman: f64,
    /// Tolerance on identities built from two finite differences.
    pub identity: f64,
    /// Tolerance on first-order coordinate conditions.
    pub coord: f64,
    /// Tolerance on `|E_P[m]|` for correct specification.
    pub spec: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            deriv_rel: 1e-6,
            deriv_abs: 1e-9,
            slope_min: 1.9,
            res_max: 1e-10,
            gap_slack: 0.05,
            neyman: 1e-8,
            identity: 1e-6,
            coord: 1e-6,
            spec: 1e-10,
        }
    }
}

impl Tolerances {
    /// Derivative comparison under `deriv_rel` / `deriv_abs`.
    pub fn derivative_close(&self, numeric: f64, predicted: f64) -> bool {
        crate::numdiff::close(numeric, predicted, self.deriv_rel, self.deriv_abs)
    }

    /// Sets a field by name; used by the command line `--tol key=value`.
    pub fn set(&mut self, key: &str, value: f64) -> Result<(), String> {
        if !(value.is_finite() && value > 0.0) {
            return Err(format!("tolerance '{key}' must be positive, got {value}"));
        }
        let slot = match key {
            "deriv_rel" | "deriv" => &mut self.deriv_rel,
            "deriv_abs" => &mut self.deriv_abs,
            "slope_min" => &mut self.slope_min,
            "res_max" => &mut self.res_max,
            "gap_slack" => &mut self.gap_slack,
            "neyman" => &mut self.neyman,
            "identity" | "id" => &mut self.identity,
            "coord" => &mut self.coord,
            "spec" => &mut self.spec,
            _ => return Err(format!("unknown tolerance '{key}'")),
        };
        *slot = value;
        Ok(())
    }
}
