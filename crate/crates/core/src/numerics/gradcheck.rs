//! Central-difference gradient verification.

/// Settings for [`finite_diff_check`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub epsilon: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Lower bound of the relative-error denominator, so coordinates whose
    /// true gradient is ~0 are judged by absolute error instead.
    pub floor: f64,
    /// Check only these coordinates; `None` checks all of them.
    pub coordinates: Option<Vec<usize>>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            coordinates: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Coordinate where the maximum was attained.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub passed: bool,
}

/// Compares `analytic` against `(f(p + ε eᵢ) − f(p − ε eᵢ)) / 2ε` per coordinate.
pub fn finite_diff_check<F>(
    loss: F,
    params: &[f64],
    analytic: &[f64],
    cfg: &GradCheck,
) -> GradCheckReport
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(
        params.len(),
        analytic.len(),
        "one analytic value per parameter"
    );
    let all: Vec<usize>;
    let coords: &[usize] = match &cfg.coordinates {
        Some(c) => c,
        None => {
            all = (0..params.len()).collect();
            &all
        }
    };
    let mut p = params.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: coords.len(),
        passed: true,
    };
    for &i in coords {
        let orig = p[i];
        p[i] = orig + cfg.epsilon;
        let plus = loss(&p);
        p[i] = orig - cfg.epsilon;
        let minus = loss(&p);
        p[i] = orig;
        let numeric = (plus - minus) / (2.0 * cfg.epsilon);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(cfg.floor);
        let rel = (a - numeric).abs() / denom;
        if !rel.is_finite() || rel > report.max_relative_error {
            report.max_relative_error = if rel.is_finite() { rel } else { f64::INFINITY };
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    report.passed = report.max_relative_error <= cfg.tolerance;
    report
}
