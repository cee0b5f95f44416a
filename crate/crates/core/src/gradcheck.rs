//! Central finite-difference gradient checking.

use serde::Serialize;

/// Default central-difference step for 64-bit checks.
pub const DEFAULT_STEP: f64 = 1e-6;
/// Maximum relative error accepted by the checks in this crate.
pub const TOLERANCE: f64 = 1e-4;
/// Magnitude below which gradient entries are compared absolutely.
pub const MAGNITUDE_FLOOR: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, MAGNITUDE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR);
    (analytic - numeric).abs() / denom
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradEntry {
    pub input: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub n_checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<GradEntry>,
    pub non_finite: usize,
    pub tolerance: f64,
}

impl Default for GradcheckReport {
    fn default() -> Self {
        Self {
            n_checked: 0,
            max_rel_error: 0.0,
            worst: None,
            non_finite: 0,
            tolerance: TOLERANCE,
        }
    }
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.non_finite == 0 && self.max_rel_error < self.tolerance
    }

    pub fn record(&mut self, input: &str, index: usize, analytic: f64, numeric: f64) {
        self.n_checked += 1;
        if !analytic.is_finite() || !numeric.is_finite() {
            self.non_finite += 1;
        }
        let rel = relative_error(analytic, numeric);
        if self.worst.is_none() || rel > self.max_rel_error {
            self.max_rel_error = rel;
            self.worst = Some(GradEntry {
                input: input.to_string(),
                index,
                analytic,
                numeric,
                rel_error: rel,
            });
        }
    }

    pub fn merge(&mut self, other: GradcheckReport) {
        self.n_checked += other.n_checked;
        self.non_finite += other.non_finite;
        if other.worst.is_some()
            && (self.worst.is_none() || other.max_rel_error > self.max_rel_error)
        {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

/// Compares `analytic` against central differences of `f` around `x`,
/// perturbing the entries listed in `indices` (all entries when `None`).
pub fn check_against<F>(
    report: &mut GradcheckReport,
    input: &str,
    x: &[f64],
    analytic: &[f64],
    indices: Option<&[usize]>,
    step: f64,
    mut f: F,
) where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(
        x.len(),
        analytic.len(),
        "gradient length mismatch for {input}"
    );
    let mut probe = x.to_vec();
    let all: Vec<usize>;
    let idx = match indices {
        Some(i) => i,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    for &i in idx {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = f(&probe);
        probe[i] = orig - step;
        let down = f(&probe);
        probe[i] = orig;
        report.record(input, i, analytic[i], (up - down) / (2.0 * step));
    }
}
