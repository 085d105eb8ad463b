use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradCheckError {
    #[error("step size must be positive, got {0}")]
    BadStep(f64),
    #[error("loss is non-finite when perturbing coordinate {0}")]
    NonFinite(usize),
    #[error("analytic gradient has {got} entries for {expected} parameters")]
    GradLength { expected: usize, got: usize },
    #[error("coordinate {0} out of range")]
    Coordinate(usize),
    #[error("loss evaluation failed: {0}")]
    Loss(String),
}

/// Largest `|analytic - central difference| / (|analytic| + 1e-12)` over the
/// requested coordinates (all of them when `coords` is `None`).
///
/// `loss` returns the scalar value and the analytic gradient at a point.
pub fn finite_diff_check<F>(
    mut loss: F,
    params: &[f64],
    h: f64,
    coords: Option<&[usize]>,
) -> Result<f64, GradCheckError>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>), String>,
{
    if !(h > 0.0) {
        return Err(GradCheckError::BadStep(h));
    }
    let (_, analytic) = loss(params).map_err(GradCheckError::Loss)?;
    if analytic.len() != params.len() {
        return Err(GradCheckError::GradLength {
            expected: params.len(),
            got: analytic.len(),
        });
    }
    let all: Vec<usize> = (0..params.len()).collect();
    let coords = coords.unwrap_or(&all);
    let mut x = params.to_vec();
    let mut worst = 0.0f64;
    for &i in coords {
        if i >= x.len() {
            return Err(GradCheckError::Coordinate(i));
        }
        let orig = x[i];
        x[i] = orig + h;
        let (plus, _) = loss(&x).map_err(GradCheckError::Loss)?;
        x[i] = orig - h;
        let (minus, _) = loss(&x).map_err(GradCheckError::Loss)?;
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(GradCheckError::NonFinite(i));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + 1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}
